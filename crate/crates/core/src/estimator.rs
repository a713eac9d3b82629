//! Tracking filters built on the CKF: the true-model reference, the physics
//! model, the parameter-regularized APBM and the state-space constrained APBM.
//!
//! APBM filters estimate the joint vector `[theta (51), x (4)]`; the
//! parameters follow a random walk.

use nalgebra::{DMatrix, DVector, Matrix4, Vector2, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::apbm::{Apbm, ApbmParams, PARAM_LEN, STATE_DIM};
use crate::ckf::{cubature_points, measurement_update, measurement_update_block, time_update};
use crate::constraint::{constrain_cubature_set, gate_on_mean, rho_ss, split_joint, ConstraintSpec};
use crate::error::{Error, Result};
use crate::gaussian::{symmetrize_and_repair, GaussianBelief};
use crate::truth::{cv_process_noise, RssBearing, TruthConfig, TruthTrajectory};

pub const JOINT_DIM: usize = PARAM_LEN + STATE_DIM;

/// Offsets of the parameter and state blocks inside the joint vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointLayout;

impl JointLayout {
    pub const THETA: std::ops::Range<usize> = 0..PARAM_LEN;
    pub const STATE: std::ops::Range<usize> = PARAM_LEN..JOINT_DIM;

    pub fn join(theta: &ApbmParams, x: &Vector4<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(JOINT_DIM);
        theta.write_to(&mut v.as_mut_slice()[Self::THETA]);
        v.rows_mut(PARAM_LEN, STATE_DIM).copy_from(x);
        v
    }

    pub fn state(v: &DVector<f64>) -> Vector4<f64> {
        Vector4::from_column_slice(&v.as_slice()[Self::STATE])
    }

    pub fn theta(v: &DVector<f64>) -> Result<ApbmParams> {
        ApbmParams::from_slice(&v.as_slice()[Self::THETA])
    }

    pub fn state_cov(p: &DMatrix<f64>) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| p[(PARAM_LEN + i, PARAM_LEN + j)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// CKF on the true turn dynamics.
    Tm,
    /// CKF on the constant-velocity physics model.
    Pbm,
    /// APBM with a per-step pseudo-measurement pulling `theta` to `theta_bar`.
    ApbmParamReg,
    /// APBM with the state-space ball constraint.
    ApbmSsa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub variant: Variant,
    /// Name written to output files.
    pub label: String,
    pub x0_hat: Vector4<f64>,
    pub p0_x: Matrix4<f64>,
    pub p0_theta_scale: f64,
    pub q_theta_var: f64,
    pub param_reg_strength: f64,
    pub constraint: ConstraintSpec,
    pub q_pbm: Matrix4<f64>,
    pub theta_init_std: f64,
    pub theta_seed: u64,
    /// TM only: feed the true turn rate instead of estimating it.
    pub tm_knows_omega: bool,
    pub omega0_hat: f64,
    pub p0_omega: f64,
}

impl FilterConfig {
    pub fn new(variant: Variant, label: impl Into<String>, truth: &TruthConfig) -> Self {
        Self {
            variant,
            label: label.into(),
            x0_hat: truth.x0_vector(),
            p0_x: Matrix4::from_diagonal(&Vector4::new(1.0, 0.1, 1.0, 0.1)),
            p0_theta_scale: 1e-2,
            q_theta_var: 1e-6,
            param_reg_strength: 1e2,
            constraint: ConstraintSpec::unconstrained(),
            q_pbm: cv_process_noise(truth.ts, truth.q_var),
            theta_init_std: 1e-2,
            theta_seed: truth.seed,
            tm_knows_omega: false,
            omega0_hat: truth.omega0,
            p0_omega: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("p0_theta_scale", self.p0_theta_scale),
            ("q_theta_var", self.q_theta_var),
            ("param_reg_strength", self.param_reg_strength),
            ("theta_init_std", self.theta_init_std),
            ("p0_omega", self.p0_omega),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("filter.{key}"), "must be a finite nonnegative number"));
            }
        }
        if self.variant == Variant::ApbmParamReg && self.param_reg_strength <= 0.0 {
            return Err(Error::config("filter.param_reg_strength", "must be positive"));
        }
        if self.variant == Variant::ApbmSsa {
            self.constraint.validate()?;
        }
        Ok(())
    }

    pub fn initial_theta(&self) -> ApbmParams {
        let mut rng = ChaCha20Rng::seed_from_u64(self.theta_seed);
        ApbmParams::initial(&mut rng, self.theta_init_std)
    }

    fn initial_belief(&self) -> Result<GaussianBelief> {
        let x0 = DVector::from_column_slice(self.x0_hat.as_slice());
        let p0 = DMatrix::from_column_slice(4, 4, self.p0_x.as_slice());
        match self.variant {
            Variant::Pbm => GaussianBelief::new(x0, p0),
            Variant::Tm if self.tm_knows_omega => GaussianBelief::new(x0, p0),
            Variant::Tm => {
                let mut mean = DVector::zeros(5);
                mean.rows_mut(0, 4).copy_from(&x0);
                mean[4] = self.omega0_hat;
                let mut cov = DMatrix::zeros(5, 5);
                cov.view_mut((0, 0), (4, 4)).copy_from(&p0);
                cov[(4, 4)] = self.p0_omega;
                GaussianBelief::new(mean, cov)
            }
            Variant::ApbmParamReg | Variant::ApbmSsa => {
                let mean = JointLayout::join(&self.initial_theta(), &self.x0_hat);
                let mut cov = DMatrix::identity(JOINT_DIM, JOINT_DIM) * self.p0_theta_scale;
                cov.view_mut((PARAM_LEN, PARAM_LEN), (4, 4)).copy_from(&p0);
                GaussianBelief::new(mean, cov)
            }
        }
    }
}

/// Per-step output of a filter.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub x_hat: Vector4<f64>,
    pub p_xx: Matrix4<f64>,
    pub theta_hat: Option<[f64; PARAM_LEN]>,
    pub gate_fired: bool,
    /// 1 when no projection happened.
    pub kappa_min: f64,
    /// Metric at the posterior means that entered the step.
    pub rho_at_mean: Option<f64>,
    /// Largest metric over the constrained cubature points.
    pub max_rho_constrained: Option<f64>,
    /// Metric between the predicted state mean and the physics prediction of
    /// the previous posterior mean.
    pub predicted_deviation: Option<f64>,
    pub x_pred: Option<Vector4<f64>>,
}

#[derive(Debug, Clone)]
pub struct Filter {
    cfg: FilterConfig,
    truth: TruthConfig,
    model: Apbm,
    sensor: RssBearing,
    belief: GaussianBelief,
    q: DMatrix<f64>,
    started: bool,
}

fn to_dmatrix4(m: &Matrix4<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(4, 4, m.as_slice())
}

impl Filter {
    pub fn new(cfg: FilterConfig, truth: &TruthConfig) -> Result<Self> {
        cfg.validate()?;
        truth.validate()?;
        let belief = cfg.initial_belief()?;
        let q_cv = cv_process_noise(truth.ts, truth.q_var);
        let q = match cfg.variant {
            Variant::Pbm => to_dmatrix4(&cfg.q_pbm),
            Variant::Tm if cfg.tm_knows_omega => to_dmatrix4(&q_cv),
            Variant::Tm => {
                let mut q = DMatrix::zeros(5, 5);
                q.view_mut((0, 0), (4, 4)).copy_from(&to_dmatrix4(&q_cv));
                q[(4, 4)] = truth.omega_var;
                q
            }
            Variant::ApbmParamReg | Variant::ApbmSsa => {
                let mut q = DMatrix::identity(JOINT_DIM, JOINT_DIM) * cfg.q_theta_var;
                q.view_mut((PARAM_LEN, PARAM_LEN), (4, 4))
                    .copy_from(&to_dmatrix4(&cfg.q_pbm));
                q
            }
        };
        Ok(Self {
            model: Apbm::constant_velocity(truth.ts),
            sensor: truth.measurement_model(),
            truth: truth.clone(),
            cfg,
            belief,
            q,
            started: false,
        })
    }

    pub fn belief(&self) -> &GaussianBelief {
        &self.belief
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    /// Processes one measurement. The first call only applies the
    /// measurement update to the prior; later calls predict, then update.
    ///
    /// `omega_prev` is the true turn rate of the previous step, used only by
    /// the TM filter configured with `tm_knows_omega`.
    pub fn step(&mut self, y: &Vector2<f64>, omega_prev: Option<f64>) -> Result<StepRecord> {
        let y = DVector::from_column_slice(y.as_slice());
        let mut record = StepRecord {
            x_hat: Vector4::zeros(),
            p_xx: Matrix4::zeros(),
            theta_hat: None,
            gate_fired: false,
            kappa_min: 1.0,
            rho_at_mean: None,
            max_rho_constrained: None,
            predicted_deviation: None,
            x_pred: None,
        };
        let predicted = if self.started {
            self.predict(omega_prev, &mut record)?
        } else {
            self.started = true;
            self.belief.clone()
        };

        let posterior = match self.cfg.variant {
            Variant::Pbm => measurement_update(&predicted, &y, &self.sensor)?,
            Variant::Tm => measurement_update_block(&predicted, &y, &self.sensor, 0, STATE_DIM)?,
            Variant::ApbmParamReg | Variant::ApbmSsa => {
                let post = measurement_update_block(&predicted, &y, &self.sensor, PARAM_LEN, STATE_DIM)?;
                if self.cfg.variant == Variant::ApbmParamReg {
                    regularize_toward_theta_bar(&post, self.cfg.param_reg_strength)?
                } else {
                    post
                }
            }
        };
        self.belief = posterior;
        self.fill_estimate(&mut record)?;
        Ok(record)
    }

    fn fill_estimate(&self, record: &mut StepRecord) -> Result<()> {
        match self.cfg.variant {
            Variant::Pbm | Variant::Tm => {
                record.x_hat = Vector4::from_column_slice(&self.belief.mean.as_slice()[..4]);
                record.p_xx = Matrix4::from_fn(|i, j| self.belief.cov[(i, j)]);
            }
            Variant::ApbmParamReg | Variant::ApbmSsa => {
                record.x_hat = JointLayout::state(&self.belief.mean);
                record.p_xx = JointLayout::state_cov(&self.belief.cov);
                let mut theta = [0.0; PARAM_LEN];
                theta.copy_from_slice(&self.belief.mean.as_slice()[JointLayout::THETA]);
                record.theta_hat = Some(theta);
            }
        }
        Ok(())
    }

    fn predict(&self, omega_prev: Option<f64>, record: &mut StepRecord) -> Result<GaussianBelief> {
        match self.cfg.variant {
            Variant::Pbm => {
                let set = cubature_points(&self.belief)?;
                let f = self.model.f;
                time_update(
                    &set,
                    |p| {
                        let x = f * Vector4::from_column_slice(p.as_slice());
                        DVector::from_column_slice(x.as_slice())
                    },
                    &self.q,
                )
            }
            Variant::Tm if self.cfg.tm_knows_omega => {
                let omega = omega_prev.ok_or_else(|| {
                    Error::Invariant("known-rate TM filter needs the true turn rate".into())
                })?;
                let a = self.truth.transition_matrix(omega);
                let set = cubature_points(&self.belief)?;
                time_update(
                    &set,
                    |p| {
                        let x = a * Vector4::from_column_slice(p.as_slice());
                        DVector::from_column_slice(x.as_slice())
                    },
                    &self.q,
                )
            }
            Variant::Tm => {
                let set = cubature_points(&self.belief)?;
                let truth = &self.truth;
                time_update(
                    &set,
                    |p| {
                        let x = truth.transition_matrix(p[4]) * Vector4::from_column_slice(&p.as_slice()[..4]);
                        let mut out = DVector::zeros(5);
                        out.rows_mut(0, 4).copy_from(&x);
                        out[4] = p[4];
                        out
                    },
                    &self.q,
                )
            }
            Variant::ApbmParamReg | Variant::ApbmSsa => self.predict_joint(record),
        }
    }

    fn predict_joint(&self, record: &mut StepRecord) -> Result<GaussianBelief> {
        let spec = &self.cfg.constraint;
        let constrained = self.cfg.variant == Variant::ApbmSsa && spec.is_active();
        let x_hat = JointLayout::state(&self.belief.mean);
        let theta_hat = JointLayout::theta(&self.belief.mean)?;

        let mut set = cubature_points(&self.belief)?;
        if constrained {
            record.rho_at_mean = Some(rho_ss(
                &self.model.transition(&x_hat, &theta_hat),
                &self.model.pbm(&x_hat),
                spec,
            )?);
            if gate_on_mean(&self.model, &x_hat, &theta_hat, spec)? {
                let out = constrain_cubature_set(&self.model, &set, spec)?;
                if out.max_rho > spec.satisfied_bound() {
                    return Err(Error::Invariant(format!(
                        "constrained cubature point has metric {} above bound {}",
                        out.max_rho,
                        spec.satisfied_bound()
                    )));
                }
                record.gate_fired = true;
                record.kappa_min = out.kappa_min;
                record.max_rho_constrained = Some(out.max_rho);
                set = out.set;
            }
        }

        let model = self.model;
        let pred = time_update(&set, |p| joint_transition(&model, p), &self.q)?;
        let x_pred = JointLayout::state(&pred.mean);
        record.x_pred = Some(x_pred);
        if constrained {
            record.predicted_deviation = Some(rho_ss(&x_pred, &self.model.pbm(&x_hat), spec)?);
        }
        Ok(pred)
    }
}

/// Joint point `[theta, x]` to `[theta, f(x; theta)]`. Parameters carry over
/// unchanged; their random-walk noise lives in the process covariance.
pub fn joint_transition(model: &Apbm, p: &DVector<f64>) -> DVector<f64> {
    let (theta, x) = split_joint(p.as_slice()).expect("joint layout");
    let mut out = p.clone();
    out.rows_mut(PARAM_LEN, STATE_DIM)
        .copy_from(&model.transition(&x, &theta));
    out
}

/// Pseudo-measurement `theta_bar = theta + v`, `v ~ N(0, I / strength)`.
pub fn regularize_toward_theta_bar(belief: &GaussianBelief, strength: f64) -> Result<GaussianBelief> {
    let n = belief.dim();
    let p = &belief.cov;
    let p_theta = p.view((0, 0), (PARAM_LEN, PARAM_LEN)).into_owned();
    let s = symmetrize_and_repair(&(p_theta + DMatrix::identity(PARAM_LEN, PARAM_LEN) / strength))?;
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical_with("regularization innovation is not invertible", &s))?;
    let p_cross = p.view((0, 0), (n, PARAM_LEN)).into_owned();
    let gain = chol.solve(&p_cross.transpose()).transpose();
    let bar = DVector::from_column_slice(&ApbmParams::theta_bar().flatten());
    let innovation = bar - belief.mean.rows(0, PARAM_LEN);
    let mean = &belief.mean + &gain * innovation;
    let cov = symmetrize_and_repair(&(p - &gain * &s * gain.transpose()))?;
    GaussianBelief::new(mean, cov)
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub label: String,
    pub variant: Variant,
    pub records: Vec<StepRecord>,
}

impl FilterOutput {
    pub fn estimates(&self) -> Vec<Vector4<f64>> {
        self.records.iter().map(|r| r.x_hat).collect()
    }

    pub fn covariances(&self) -> Vec<Matrix4<f64>> {
        self.records.iter().map(|r| r.p_xx).collect()
    }

    pub fn gate_fired_any(&self) -> bool {
        self.records.iter().any(|r| r.gate_fired)
    }
}

/// Runs the configured filter over every row of `traj`.
pub fn run_filter(cfg: &FilterConfig, truth: &TruthConfig, traj: &TruthTrajectory) -> Result<FilterOutput> {
    let mut filter = Filter::new(cfg.clone(), truth)?;
    let mut records = Vec::with_capacity(traj.len());
    for k in 0..traj.len() {
        let omega_prev = k.checked_sub(1).map(|j| traj.omegas[j]);
        let rec = filter
            .step(&traj.measurements[k], omega_prev)
            .map_err(|e| Error::Step {
                step: k,
                source: Box::new(e),
            })?;
        records.push(rec);
    }
    Ok(FilterOutput {
        label: cfg.label.clone(),
        variant: cfg.variant,
        records,
    })
}
