//! Ground-truth generation: time-varying turn dynamics and RSS/bearing sensing.
//!
//! Random draws come from ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded with
//! [`TruthConfig::seed`]; normals use the ziggurat sampler of `rand_distr`.
//! Per step the draw order is: two acceleration normals, one turn-rate
//! normal, two measurement normals. The initial row draws only the
//! measurement normals.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{wrap_angle, MeasurementModel};

/// Below this turn rate the `1/omega` entries switch to their Taylor expansions.
const SMALL_OMEGA: f64 = 1e-8;

/// How entry (1,2) of the turn matrix `G` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtEntry12 {
    /// `sin(omega Ts) / Ts`
    AsPrinted,
    /// `sin(omega Ts) / omega`
    Standard,
}

/// Which transition matrix drives the true state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthDynamics {
    /// `F + G(omega)`: constant velocity plus the additive turn term.
    Additive,
    /// The classical coordinated-turn matrix (speed preserving rotation).
    CoordinatedTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    /// Sampling period [s].
    pub ts: f64,
    /// Acceleration noise variance [(m/s^2)^2].
    pub q_var: f64,
    /// Turn-rate random-walk variance [rad^2].
    pub omega_var: f64,
    /// Initial state `(x, vx, y, vy)`.
    pub x0: [f64; 4],
    pub omega0: f64,
    /// Number of rows in the trajectory.
    pub steps: usize,
    pub sensor_pos: [f64; 2],
    /// Reference power `10 log10(Psi0)` [dBm].
    pub psi0_dbm: f64,
    /// Path-loss exponent.
    pub alpha: f64,
    /// Measurement covariance, row-major 2x2.
    pub r: [f64; 4],
    pub seed: u64,
    pub ct_entry12: CtEntry12,
    pub dynamics: TruthDynamics,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            ts: 1.0,
            q_var: 0.01,
            omega_var: 1e-5,
            x0: [50.0, 0.0, 50.0, 0.0],
            omega0: 0.05 * PI,
            steps: 1000,
            sensor_pos: [0.0, 0.0],
            psi0_dbm: 30.0,
            alpha: 2.2,
            r: [0.1, 0.0, 0.0, 0.1],
            seed: 0,
            ct_entry12: CtEntry12::AsPrinted,
            dynamics: TruthDynamics::CoordinatedTurn,
        }
    }
}

impl TruthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(Error::config("truth.Ts", "must be positive"));
        }
        if !(self.q_var >= 0.0) {
            return Err(Error::config("truth.q_var", "must be nonnegative"));
        }
        if !(self.omega_var >= 0.0) {
            return Err(Error::config("truth.omega_var", "must be nonnegative"));
        }
        if self.steps < 1 {
            return Err(Error::config("truth.T", "must be at least 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("truth.alpha", "must be positive"));
        }
        let r = self.r_matrix();
        if (r - r.transpose()).amax() > 0.0 || r.cholesky().is_none() {
            return Err(Error::config("truth.R", "must be symmetric positive definite"));
        }
        if self
            .x0
            .iter()
            .chain(&self.sensor_pos)
            .chain([&self.omega0, &self.psi0_dbm])
            .any(|v| !v.is_finite())
        {
            return Err(Error::config("truth", "non-finite initial value"));
        }
        Ok(())
    }

    pub fn r_matrix(&self) -> Matrix2<f64> {
        Matrix2::from_row_slice(&self.r)
    }

    pub fn x0_vector(&self) -> Vector4<f64> {
        Vector4::from_column_slice(&self.x0)
    }

    pub fn measurement_model(&self) -> RssBearing {
        RssBearing::new(
            Vector2::from_column_slice(&self.sensor_pos),
            self.psi0_dbm,
            self.alpha,
            self.r_matrix(),
        )
    }

    /// The matrix applied to `x_{k-1}` given the turn rate `omega_{k-1}`.
    pub fn transition_matrix(&self, omega: f64) -> Matrix4<f64> {
        match self.dynamics {
            TruthDynamics::Additive => ct_matrix(omega, self.ts, self.ct_entry12),
            TruthDynamics::CoordinatedTurn => coordinated_turn_matrix(omega, self.ts),
        }
    }
}

/// Constant-velocity matrix `F`.
pub fn cv_matrix(ts: f64) -> Matrix4<f64> {
    Matrix4::new(
        1.0, ts, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, ts, //
        0.0, 0.0, 0.0, 1.0,
    )
}

/// Acceleration-noise gain `M`.
pub fn noise_gain(ts: f64) -> Matrix4x2<f64> {
    Matrix4x2::new(
        ts * ts / 2.0, 0.0, //
        ts, 0.0, //
        0.0, ts * ts / 2.0, //
        0.0, ts,
    )
}

/// `M (q_var I) M^T`, the covariance of the acceleration noise in state space.
pub fn cv_process_noise(ts: f64, q_var: f64) -> Matrix4<f64> {
    let m = noise_gain(ts);
    m * m.transpose() * q_var
}

/// `sin(omega ts) / omega` with its small-rate expansion.
fn sin_over_omega(omega: f64, ts: f64) -> f64 {
    if omega.abs() < SMALL_OMEGA {
        ts - omega * omega * ts.powi(3) / 6.0
    } else {
        (omega * ts).sin() / omega
    }
}

/// `(1 - cos(omega ts)) / omega` with its small-rate expansion.
fn one_minus_cos_over_omega(omega: f64, ts: f64) -> f64 {
    if omega.abs() < SMALL_OMEGA {
        omega * ts * ts / 2.0 - omega.powi(3) * ts.powi(4) / 24.0
    } else {
        // Half-angle form avoids cancellation in `1 - cos`.
        let h = (0.5 * omega * ts).sin();
        2.0 * h * h / omega
    }
}

/// `F + G(omega)` for the additive constant-velocity/turn generator.
pub fn ct_matrix(omega: f64, ts: f64, entry12: CtEntry12) -> Matrix4<f64> {
    let (s, c) = (omega * ts).sin_cos();
    let so = sin_over_omega(omega, ts);
    let co = one_minus_cos_over_omega(omega, ts);
    let g12 = match entry12 {
        CtEntry12::AsPrinted => s / ts,
        CtEntry12::Standard => so,
    };
    let g = Matrix4::new(
        0.0, g12, 0.0, -co, //
        0.0, c, 0.0, -s, //
        0.0, co, 0.0, so, //
        0.0, s, 0.0, c,
    );
    cv_matrix(ts) + g
}

/// Classical coordinated-turn transition.
pub fn coordinated_turn_matrix(omega: f64, ts: f64) -> Matrix4<f64> {
    let (s, c) = (omega * ts).sin_cos();
    let so = sin_over_omega(omega, ts);
    let co = one_minus_cos_over_omega(omega, ts);
    Matrix4::new(
        1.0, so, 0.0, -co, //
        0.0, c, 0.0, -s, //
        0.0, co, 1.0, so, //
        0.0, s, 0.0, c,
    )
}

/// Noise-free RSS [dBm] and bearing [rad] of `target` seen from `sensor`.
pub fn measure_rss_bearing(
    sensor: &Vector2<f64>,
    target: &Vector2<f64>,
    psi0_dbm: f64,
    alpha: f64,
) -> Result<Vector2<f64>> {
    let d = target - sensor;
    let dist = d.norm();
    if dist == 0.0 {
        return Err(Error::SingularGeometry(
            "target coincides with the sensor".into(),
        ));
    }
    let rss = psi0_dbm - 10.0 * alpha * dist.log10();
    let bearing = wrap_angle(d.y.atan2(d.x))?;
    Ok(Vector2::new(rss, bearing))
}

/// RSS/bearing sensor observing positions `(x, y)` at indices 0 and 2.
#[derive(Debug, Clone)]
pub struct RssBearing {
    pub sensor: Vector2<f64>,
    pub psi0_dbm: f64,
    pub alpha: f64,
    r: DMatrix<f64>,
}

impl RssBearing {
    pub fn new(sensor: Vector2<f64>, psi0_dbm: f64, alpha: f64, r: Matrix2<f64>) -> Self {
        Self {
            sensor,
            psi0_dbm,
            alpha,
            r: DMatrix::from_iterator(2, 2, r.iter().copied()),
        }
    }
}

const RSS_BEARING_MASK: [bool; 2] = [false, true];

impl MeasurementModel for RssBearing {
    fn dim_meas(&self) -> usize {
        2
    }

    fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != 4 {
            return Err(Error::Dimension {
                context: "RssBearing::measure",
                expected: "4".into(),
                actual: x.len().to_string(),
            });
        }
        let y = measure_rss_bearing(
            &self.sensor,
            &Vector2::new(x[0], x[2]),
            self.psi0_dbm,
            self.alpha,
        )?;
        Ok(DVector::from_column_slice(y.as_slice()))
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.r
    }

    fn angular_mask(&self) -> &[bool] {
        &RSS_BEARING_MASK
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrajectory {
    pub states: Vec<Vector4<f64>>,
    pub omegas: Vec<f64>,
    pub measurements: Vec<Vector2<f64>>,
}

impl TruthTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Writes `k,x,vx,y,vy,omega,y_rss,y_bearing` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k,x,vx,y,vy,omega,y_rss,y_bearing")?;
        for (k, ((x, om), y)) in self
            .states
            .iter()
            .zip(&self.omegas)
            .zip(&self.measurements)
            .enumerate()
        {
            writeln!(
                out,
                "{k},{},{},{},{},{},{},{}",
                fmt17(x[0]),
                fmt17(x[1]),
                fmt17(x[2]),
                fmt17(x[3]),
                fmt17(*om),
                fmt17(y[0]),
                fmt17(y[1])
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Decimal with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn simulate_truth(cfg: &TruthConfig) -> Result<TruthTrajectory> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let m = noise_gain(cfg.ts);
    let q_sd = cfg.q_var.sqrt();
    let w_sd = cfg.omega_var.sqrt();
    let r_chol = cfg
        .r_matrix()
        .cholesky()
        .ok_or_else(|| Error::config("truth.R", "not positive definite"))?
        .l();
    let sensor = Vector2::from_column_slice(&cfg.sensor_pos);

    let mut states = Vec::with_capacity(cfg.steps);
    let mut omegas = Vec::with_capacity(cfg.steps);
    let mut measurements = Vec::with_capacity(cfg.steps);

    let mut x = cfg.x0_vector();
    let mut omega = cfg.omega0;
    for k in 0..cfg.steps {
        if k > 0 {
            let q = Vector2::new(normal(&mut rng), normal(&mut rng)) * q_sd;
            let v = normal(&mut rng) * w_sd;
            x = cfg.transition_matrix(omega) * x + m * q;
            omega += v;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Step {
                step: k,
                source: Box::new(Error::numerical("true state overflowed")),
            });
        }
        let clean = measure_rss_bearing(&sensor, &Vector2::new(x[0], x[2]), cfg.psi0_dbm, cfg.alpha)
            .map_err(|e| Error::Step {
                step: k,
                source: Box::new(e),
            })?;
        let noise = r_chol * Vector2::new(normal(&mut rng), normal(&mut rng));
        let mut y = clean + noise;
        y[1] = wrap_angle(y[1])?;
        states.push(x);
        omegas.push(omega);
        measurements.push(y);
    }
    Ok(TruthTrajectory {
        states,
        omegas,
        measurements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ct_matrix_at_zero_rate() {
        let a = ct_matrix(0.0, 1.0, CtEntry12::AsPrinted);
        let expected = Matrix4::new(
            1.0, 1.0, 0.0, 0.0, //
            0.0, 2.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 2.0, //
            0.0, 0.0, 0.0, 2.0,
        );
        assert_relative_eq!(a, expected, epsilon = 1e-15);
    }

    #[test]
    fn ct_matrix_at_half_turn() {
        let a = ct_matrix(PI, 1.0, CtEntry12::AsPrinted);
        let g = a - cv_matrix(1.0);
        assert_relative_eq!(g[(0, 1)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(g[(1, 1)], -1.0, epsilon = 1e-15);
        assert_relative_eq!(g[(1, 3)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(g[(2, 1)], 2.0 / PI, epsilon = 1e-15);
        assert_relative_eq!(g[(2, 3)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(g[(3, 1)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(g[(3, 3)], -1.0, epsilon = 1e-15);
        assert_relative_eq!(g[(0, 3)], -2.0 / PI, epsilon = 1e-15);
    }

    #[test]
    fn ct_matrix_matches_high_precision_values() {
        // Evaluated with 50-digit arithmetic at omega = 0.05 pi, Ts = 1.
        let s = 0.156434465040230877622_f64;
        let c = 0.987688340595137724826_f64;
        let co = 0.0783784580779061317712_f64;
        let so = 0.995892735243561373738_f64;
        let expected = Matrix4::new(
            1.0, 1.0 + s, 0.0, -co, //
            0.0, 1.0 + c, 0.0, -s, //
            0.0, co, 1.0, 1.0 + so, //
            0.0, s, 0.0, 1.0 + c,
        );
        let a = ct_matrix(0.05 * PI, 1.0, CtEntry12::AsPrinted);
        assert_relative_eq!(a, expected, epsilon = 1e-15);
        let std = ct_matrix(0.05 * PI, 1.0, CtEntry12::Standard);
        assert_relative_eq!(std[(0, 1)], 1.0 + so, epsilon = 1e-15);
    }

    #[test]
    fn small_rate_limits_are_continuous() {
        for entry in [CtEntry12::AsPrinted, CtEntry12::Standard] {
            let below = ct_matrix(SMALL_OMEGA * (1.0 - 1e-6), 1.0, entry);
            let above = ct_matrix(SMALL_OMEGA * (1.0 + 1e-6), 1.0, entry);
            assert_relative_eq!(below, above, epsilon = 1e-12);
        }
        let below = coordinated_turn_matrix(-SMALL_OMEGA * (1.0 - 1e-6), 2.0);
        let above = coordinated_turn_matrix(-SMALL_OMEGA * (1.0 + 1e-6), 2.0);
        assert_relative_eq!(below, above, epsilon = 1e-12);
    }

    #[test]
    fn rss_and_bearing_examples() {
        let s = Vector2::zeros();
        let y = measure_rss_bearing(&s, &Vector2::new(1.0, 0.0), 30.0, 2.2).unwrap();
        assert_eq!(y[0], 30.0);
        let y = measure_rss_bearing(&s, &Vector2::new(0.0, 10.0), 30.0, 2.2).unwrap();
        assert_relative_eq!(y[0], 8.0, epsilon = 1e-12);
        let y = measure_rss_bearing(&s, &Vector2::new(1.0, 1.0), 30.0, 2.2).unwrap();
        assert_relative_eq!(y[1], PI / 4.0, epsilon = 1e-15);
        assert!(matches!(
            measure_rss_bearing(&s, &s, 30.0, 2.2),
            Err(Error::SingularGeometry(_))
        ));
    }

    #[test]
    fn rss_decreases_with_distance() {
        let s = Vector2::zeros();
        let mut last = f64::INFINITY;
        for i in 1..200 {
            let d = 0.01 * (i as f64).powf(1.7);
            let y = measure_rss_bearing(&s, &Vector2::new(d, 0.3 * d), 30.0, 0.5).unwrap();
            assert!(y[0] < last);
            last = y[0];
        }
    }

    #[test]
    fn static_target_is_fixed_point_without_noise() {
        for dynamics in [TruthDynamics::Additive, TruthDynamics::CoordinatedTurn] {
            let cfg = TruthConfig {
                q_var: 0.0,
                omega_var: 0.0,
                steps: 50,
                dynamics,
                ..TruthConfig::default()
            };
            let traj = simulate_truth(&cfg).unwrap();
            for x in &traj.states {
                assert_eq!(*x, Vector4::new(50.0, 0.0, 50.0, 0.0));
            }
        }
    }

    #[test]
    fn noiseless_recursion_matches_matrix_power() {
        let cfg = TruthConfig {
            q_var: 0.0,
            omega_var: 0.0,
            steps: 40,
            x0: [10.0, 0.3, -4.0, 0.7],
            omega0: 0.02,
            dynamics: TruthDynamics::Additive,
            ..TruthConfig::default()
        };
        let traj = simulate_truth(&cfg).unwrap();
        // Oracle: repeated multiplication by an independently assembled matrix.
        let (s, c) = (0.02f64).sin_cos();
        let a = Matrix4::new(
            1.0, 1.0 + s, 0.0, -(1.0 - c) / 0.02, //
            0.0, 1.0 + c, 0.0, -s, //
            0.0, (1.0 - c) / 0.02, 1.0, 1.0 + s / 0.02, //
            0.0, s, 0.0, 1.0 + c,
        );
        let mut x = cfg.x0_vector();
        for (k, state) in traj.states.iter().enumerate() {
            if k > 0 {
                x = a * x;
            }
            let scale = x.amax().max(1.0);
            assert!((state - x).amax() <= 1e-12 * scale, "step {k}");
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let cfg = TruthConfig {
            steps: 100,
            seed: 7,
            ..TruthConfig::default()
        };
        let a = simulate_truth(&cfg).unwrap();
        let b = simulate_truth(&cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate_truth(&TruthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn validation_rejects_bad_alpha() {
        let cfg = TruthConfig {
            alpha: -1.0,
            ..TruthConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "truth.alpha"));
    }
}
