//! State-space augmentation control.
//!
//! The APBM prediction is kept inside a weighted ball of radius `epsilon`
//! around the physics prediction. Violations are repaired by pulling the
//! parameter vector toward `theta_bar` along the segment
//! `theta(kappa) = kappa * theta + (1 - kappa) * theta_bar`, choosing the
//! largest `kappa` that lands on the ball boundary. When applied to a
//! cubature set, every point gets its own `kappa`, and the smallest one is
//! applied to all points so the propagated set stays inside the ball.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::apbm::{Apbm, ApbmParams, PARAM_LEN, STATE_DIM};
use crate::ckf::CubatureSet;
use crate::error::{Error, Result};

/// Smallest accepted ball radius; `epsilon = 0` would force `kappa = 0`.
pub const MIN_EPSILON: f64 = 1e-12;
/// Bracket width at which bisection on `kappa` stops.
pub const KAPPA_TOL: f64 = 1e-10;
/// Grid used to locate the largest root of the boundary equation.
pub const KAPPA_GRID: usize = 33;
const SSR_MIN_DENOM: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    /// Absolute: `||f_apbm - f_pbm||_Sigma`.
    Ssa,
    /// Relative: `||f_apbm - f_pbm||_Sigma / ||f_pbm||_Sigma`.
    Ssr,
    None,
}

/// Named component selections over `(x, vx, y, vy)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Full,
    Velocity,
}

impl Selection {
    pub fn indices(self) -> Vec<usize> {
        match self {
            Selection::Full => vec![0, 1, 2, 3],
            Selection::Velocity => vec![1, 3],
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Selection::Full => "full",
            Selection::Velocity => "vel",
        }
    }
}

/// Metric, threshold and weighting of the state-space constraint.
///
/// `||d||_Sigma` is the quadratic form `d^T Sigma d`; `metric_root` switches
/// to its square root.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub kind: MetricKind,
    pub epsilon: f64,
    pub selection: Vec<usize>,
    pub sigma: DMatrix<f64>,
    pub reg_lambda: f64,
    pub metric_root: bool,
}

impl ConstraintSpec {
    pub fn new(
        kind: MetricKind,
        epsilon: f64,
        selection: Vec<usize>,
        sigma: DMatrix<f64>,
        reg_lambda: f64,
        metric_root: bool,
    ) -> Result<Self> {
        let spec = Self {
            kind,
            epsilon,
            selection,
            sigma,
            reg_lambda,
            metric_root,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with kind `None`: the metric is never enforced.
    pub fn unconstrained() -> Self {
        Self {
            kind: MetricKind::None,
            epsilon: f64::INFINITY,
            selection: Selection::Full.indices(),
            sigma: DMatrix::identity(4, 4),
            reg_lambda: 0.0,
            metric_root: false,
        }
    }

    /// Builds `Sigma = (D Q D^T + lambda I)^-1`. With `reg_lambda = None` the
    /// regularization is zero for a nonsingular block and
    /// `1e-8 * trace / s` otherwise.
    pub fn from_process_noise(
        kind: MetricKind,
        epsilon: f64,
        selection: Vec<usize>,
        q_pbm: &Matrix4<f64>,
        reg_lambda: Option<f64>,
        metric_root: bool,
    ) -> Result<Self> {
        check_selection(&selection)?;
        let lambda = match reg_lambda {
            Some(l) => l,
            None => {
                let l = default_reg_lambda(q_pbm, &selection);
                if l > 0.0 {
                    log::debug!(
                        "weight block over components {selection:?} is singular; regularizing with lambda = {l:e}"
                    );
                }
                l
            }
        };
        let sigma = build_sigma(q_pbm, &selection, lambda)?;
        Self::new(kind, epsilon, selection, sigma, lambda, metric_root)
    }

    pub fn validate(&self) -> Result<()> {
        check_selection(&self.selection)?;
        let s = self.selection.len();
        if self.sigma.nrows() != s || self.sigma.ncols() != s {
            return Err(Error::Dimension {
                context: "ConstraintSpec",
                expected: format!("{s}x{s} weight matrix"),
                actual: format!("{}x{}", self.sigma.nrows(), self.sigma.ncols()),
            });
        }
        if !(self.reg_lambda >= 0.0) {
            return Err(Error::config("reg_lambda", "must be nonnegative"));
        }
        if self.kind == MetricKind::None {
            return Ok(());
        }
        if !(self.epsilon >= MIN_EPSILON) {
            return Err(Error::config(
                "epsilon",
                format!("must be at least {MIN_EPSILON:e}, got {}", self.epsilon),
            ));
        }
        let scale = self.sigma.amax().max(f64::MIN_POSITIVE);
        if (&self.sigma - self.sigma.transpose()).amax() > 1e-12 * scale {
            return Err(Error::config("sigma", "must be symmetric"));
        }
        let min_eig = self.sigma.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-12 * scale {
            return Err(Error::config("sigma", "must be positive semidefinite"));
        }
        Ok(())
    }

    /// `|g(kappa*)|` tolerance of the boundary solve.
    pub fn root_tolerance(&self) -> f64 {
        1e-8 * self.epsilon.max(1.0)
    }

    /// Acceptance bound for a constrained point: `epsilon (1 + 1e-6) + 1e-9`.
    pub fn satisfied_bound(&self) -> f64 {
        self.epsilon * (1.0 + 1e-6) + 1e-9
    }

    pub fn is_active(&self) -> bool {
        self.kind != MetricKind::None
    }

    fn weighted(&self, d: &Vector4<f64>) -> f64 {
        let sel = DVector::from_iterator(self.selection.len(), self.selection.iter().map(|&i| d[i]));
        sel.dot(&(&self.sigma * &sel))
    }
}

fn check_selection(selection: &[usize]) -> Result<()> {
    if selection.is_empty() {
        return Err(Error::config("selection", "must not be empty"));
    }
    for (i, &a) in selection.iter().enumerate() {
        if a >= STATE_DIM {
            return Err(Error::config("selection", format!("index {a} out of range")));
        }
        if selection[..i].contains(&a) {
            return Err(Error::config("selection", format!("index {a} repeated")));
        }
    }
    Ok(())
}

fn select_block(q: &Matrix4<f64>, selection: &[usize]) -> DMatrix<f64> {
    let s = selection.len();
    DMatrix::from_fn(s, s, |i, j| q[(selection[i], selection[j])])
}

fn is_singular(block: &DMatrix<f64>) -> bool {
    let eig = block.clone().symmetric_eigen().eigenvalues;
    let max = eig.amax();
    max == 0.0 || eig.min() <= 1e-12 * max
}

/// Regularization used when none is configured.
pub fn default_reg_lambda(q_pbm: &Matrix4<f64>, selection: &[usize]) -> f64 {
    let block = select_block(q_pbm, selection);
    if is_singular(&block) {
        1e-8 * block.trace() / selection.len() as f64
    } else {
        0.0
    }
}

/// `(D Q D^T + reg_lambda I)^-1` over the selected components.
pub fn build_sigma(q_pbm: &Matrix4<f64>, selection: &[usize], reg_lambda: f64) -> Result<DMatrix<f64>> {
    check_selection(selection)?;
    let s = selection.len();
    let block = select_block(q_pbm, selection) + DMatrix::identity(s, s) * reg_lambda;
    if is_singular(&block) {
        return Err(Error::Numerical {
            message: format!(
                "weight block over components {selection:?} is singular; use a larger reg_lambda"
            ),
            matrix: Some(Box::new(block)),
        });
    }
    let chol = block
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical_with("weight block is not positive definite", &block))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Deviation metric between an APBM prediction and the physics prediction.
pub fn rho_ss(f_apbm: &Vector4<f64>, f_pbm: &Vector4<f64>, spec: &ConstraintSpec) -> Result<f64> {
    let quad = spec.weighted(&(f_apbm - f_pbm));
    let value = match spec.kind {
        MetricKind::Ssa => quad,
        MetricKind::Ssr => {
            let denom = spec.weighted(f_pbm);
            if denom < SSR_MIN_DENOM {
                return Err(Error::numerical(format!(
                    "relative metric has a degenerate denominator {denom:e}"
                )));
            }
            quad / denom
        }
        MetricKind::None => {
            return Err(Error::Invariant(
                "deviation metric requested for an unconstrained spec".into(),
            ))
        }
    };
    Ok(if spec.metric_root { value.sqrt() } else { value })
}

/// `kappa * theta + (1 - kappa) * theta_bar`.
pub fn theta_kappa(theta: &ApbmParams, kappa: f64) -> Result<ApbmParams> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::Domain {
            what: "kappa",
            domain: "[0, 1]",
            value: kappa,
        });
    }
    Ok(theta.lerp(&ApbmParams::theta_bar(), kappa))
}

fn boundary_gap(
    model: &Apbm,
    x: &Vector4<f64>,
    pbm: &Vector4<f64>,
    theta: &ApbmParams,
    kappa: f64,
    spec: &ConstraintSpec,
) -> Result<f64> {
    let t = theta_kappa(theta, kappa)?;
    Ok(rho_ss(&model.transition(x, &t), pbm, spec)? - spec.epsilon)
}

/// Largest `kappa` in `(0, 1]` whose interpolated parameter keeps the APBM
/// prediction at `x` inside the ball.
pub fn solve_kappa(model: &Apbm, x: &Vector4<f64>, theta: &ApbmParams, spec: &ConstraintSpec) -> Result<f64> {
    solve_kappa_below(model, x, theta, spec, 1.0)
}

/// As [`solve_kappa`], searching `(0, upper]`.
///
/// The returned value is the feasible end of the final bracket, so the
/// constraint holds at it even when the gap function is steep.
pub fn solve_kappa_below(
    model: &Apbm,
    x: &Vector4<f64>,
    theta: &ApbmParams,
    spec: &ConstraintSpec,
    upper: f64,
) -> Result<f64> {
    if !spec.is_active() {
        return Ok(upper);
    }
    let pbm = model.pbm(x);
    let g = |k: f64| boundary_gap(model, x, &pbm, theta, k, spec);
    if g(upper)? <= 0.0 {
        return Ok(upper);
    }

    // Scan downward for the first grid point inside the ball; the root we
    // want is the largest one, so the bracket nearest `upper` is kept.
    let steps = (KAPPA_GRID - 1) as f64;
    let mut hi = upper;
    let mut lo = None;
    for j in 1..KAPPA_GRID {
        let k = upper * (1.0 - j as f64 / steps);
        if g(k)? <= 0.0 {
            lo = Some(k);
            break;
        }
        hi = k;
    }
    let mut lo = lo.ok_or_else(|| {
        Error::Invariant(format!(
            "no sign change of the boundary equation on (0, {upper}]"
        ))
    })?;

    let tol = spec.root_tolerance();
    let mut g_lo = g(lo)?;
    let mut iterations = 0;
    while iterations < 2_000 && (hi - lo > KAPPA_TOL || lo == 0.0 || g_lo.abs() > tol) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g_mid = g(mid)?;
        if g_mid <= 0.0 {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    if lo == 0.0 {
        return Err(Error::Invariant(
            "boundary root underflows to kappa = 0".into(),
        ));
    }
    Ok(lo)
}

/// True when the constraint is violated at the current means.
pub fn gate_on_mean(
    model: &Apbm,
    x_hat: &Vector4<f64>,
    theta_hat: &ApbmParams,
    spec: &ConstraintSpec,
) -> Result<bool> {
    if !spec.is_active() {
        return Ok(false);
    }
    Ok(rho_ss(&model.transition(x_hat, theta_hat), &model.pbm(x_hat), spec)? > spec.epsilon)
}

/// Splits a joint point `[theta, x]` into its blocks.
pub fn split_joint(point: &[f64]) -> Result<(ApbmParams, Vector4<f64>)> {
    if point.len() != PARAM_LEN + STATE_DIM {
        return Err(Error::Dimension {
            context: "split_joint",
            expected: (PARAM_LEN + STATE_DIM).to_string(),
            actual: point.len().to_string(),
        });
    }
    let theta = ApbmParams::from_slice(&point[..PARAM_LEN])?;
    let x = Vector4::from_column_slice(&point[PARAM_LEN..]);
    Ok((theta, x))
}

#[derive(Debug, Clone)]
pub struct ConstrainedSet {
    pub set: CubatureSet,
    pub kappa_min: f64,
    /// Per-point optimum before taking the minimum.
    pub kappas: Vec<f64>,
    /// Largest metric value over the constrained points.
    pub max_rho: f64,
}

/// Projects the parameter block of every joint cubature point with the
/// common `kappa_min`. State blocks are left untouched.
pub fn constrain_cubature_set(
    model: &Apbm,
    joint: &CubatureSet,
    spec: &ConstraintSpec,
) -> Result<ConstrainedSet> {
    let blocks = (0..joint.len())
        .map(|i| split_joint(joint.points.column(i).as_slice()))
        .collect::<Result<Vec<_>>>()?;
    if !spec.is_active() {
        return Ok(ConstrainedSet {
            set: joint.clone(),
            kappa_min: 1.0,
            kappas: vec![1.0; joint.len()],
            max_rho: 0.0,
        });
    }

    let kappas = blocks
        .iter()
        .map(|(theta, x)| solve_kappa(model, x, theta, spec))
        .collect::<Result<Vec<_>>>()?;
    let mut kappa_min = kappas.iter().copied().fold(1.0, f64::min);

    // A point whose own optimum exceeds kappa_min can still leave the ball at
    // kappa_min when its gap is not monotone; shrink until every point fits.
    let mut projected: Vec<ApbmParams>;
    let mut max_rho;
    'outer: loop {
        projected = Vec::with_capacity(blocks.len());
        max_rho = 0.0_f64;
        for (theta, x) in &blocks {
            let t = if kappa_min < 1.0 {
                theta_kappa(theta, kappa_min)?
            } else {
                *theta
            };
            let rho = rho_ss(&model.transition(x, &t), &model.pbm(x), spec)?;
            if rho > spec.epsilon {
                let k = solve_kappa_below(model, x, theta, spec, kappa_min)?;
                if k >= kappa_min {
                    return Err(Error::Invariant(
                        "projection failed to reduce kappa for a violating point".into(),
                    ));
                }
                kappa_min = k;
                continue 'outer;
            }
            max_rho = max_rho.max(rho);
            projected.push(t);
        }
        break;
    }

    let mut set = joint.clone();
    if kappa_min < 1.0 {
        for (i, t) in projected.iter().enumerate() {
            let mut col = set.points.column_mut(i);
            t.write_to(&mut col.as_mut_slice()[..PARAM_LEN]);
        }
    }
    Ok(ConstrainedSet {
        set,
        kappa_min,
        kappas,
        max_rho,
    })
}
