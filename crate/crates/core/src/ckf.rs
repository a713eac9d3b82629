//! Third-degree spherical-radial cubature Kalman filter.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{symmetrize_and_repair, wrap_angle, GaussianBelief, MeasurementModel};

/// `2n` equally weighted cubature points, stored as the columns of `points`.
///
/// Column `i < n` is `mean + sqrt(n) L[:, i]`, column `n + i` is
/// `mean - sqrt(n) L[:, i]`, with `L` the lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CubatureSet {
    pub points: DMatrix<f64>,
    pub weight: f64,
}

impl CubatureSet {
    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        self.points.column(i).into_owned()
    }

    /// Weighted mean and scatter of the points.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        weighted_moments(&self.points, self.weight)
    }
}

fn weighted_moments(points: &DMatrix<f64>, weight: f64) -> (DVector<f64>, DMatrix<f64>) {
    let mean = points.column_sum() * weight;
    let mut dev = points.clone();
    for mut col in dev.column_iter_mut() {
        col -= &mean;
    }
    let cov = &dev * dev.transpose() * weight;
    (mean, cov)
}

pub fn cubature_points(belief: &GaussianBelief) -> Result<CubatureSet> {
    let n = belief.dim();
    if n == 0 {
        return Err(Error::Dimension {
            context: "cubature_points",
            expected: "nonempty state".into(),
            actual: "0".into(),
        });
    }
    if belief.mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("belief mean has non-finite entries"));
    }
    let cov = symmetrize_and_repair(&belief.cov)?;
    let l = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical_with("Cholesky failed on repaired covariance", &cov))?
        .l();
    let scale = (n as f64).sqrt();
    let mut points = DMatrix::zeros(n, 2 * n);
    for i in 0..n {
        let offset = l.column(i) * scale;
        points.set_column(i, &(&belief.mean + &offset));
        points.set_column(n + i, &(&belief.mean - &offset));
    }
    Ok(CubatureSet {
        points,
        weight: 1.0 / (2 * n) as f64,
    })
}

/// Propagates every point through `f` and moment-matches, adding `q`.
pub fn time_update<F>(set: &CubatureSet, f: F, q: &DMatrix<f64>) -> Result<GaussianBelief>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let first = f(&set.point(0));
    let out_dim = first.len();
    if q.nrows() != out_dim || q.ncols() != out_dim {
        return Err(Error::Dimension {
            context: "time_update",
            expected: format!("{0}x{0} process noise", out_dim),
            actual: format!("{}x{}", q.nrows(), q.ncols()),
        });
    }
    let mut propagated = DMatrix::zeros(out_dim, set.len());
    for i in 0..set.len() {
        let y = if i == 0 { first.clone() } else { f(&set.point(i)) };
        if y.len() != out_dim {
            return Err(Error::Dimension {
                context: "time_update",
                expected: out_dim.to_string(),
                actual: y.len().to_string(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "transition produced non-finite output at cubature point {i}"
            )));
        }
        propagated.set_column(i, &y);
    }
    let (mean, scatter) = weighted_moments(&propagated, set.weight);
    let cov = symmetrize_and_repair(&(scatter + q))?;
    GaussianBelief::new(mean, cov)
}

/// Weighted mean of measurement row `j`; angular rows are averaged on the circle
/// around the first point.
fn measurement_mean(z: &DMatrix<f64>, angular: &[bool], weight: f64) -> Result<DVector<f64>> {
    let mut mean = z.column_sum() * weight;
    for (j, &is_angle) in angular.iter().enumerate() {
        if !is_angle {
            continue;
        }
        let reference = z[(j, 0)];
        let mut acc = 0.0;
        for i in 0..z.ncols() {
            acc += wrap_angle(z[(j, i)] - reference)?;
        }
        mean[j] = wrap_angle(reference + acc * weight)?;
    }
    Ok(mean)
}

/// Predicted measurement statistics of a cubature set.
struct Innovation {
    z_mean: DVector<f64>,
    /// Wrapped deviations `z_i - z_mean`, one column per point.
    dz: DMatrix<f64>,
    /// `P_yy` including measurement noise.
    p_yy: DMatrix<f64>,
}

fn innovation<M: MeasurementModel>(set: &CubatureSet, y: &DVector<f64>, h: &M) -> Result<Innovation> {
    let m = h.dim_meas();
    if y.len() != m {
        return Err(Error::Dimension {
            context: "measurement_update",
            expected: m.to_string(),
            actual: y.len().to_string(),
        });
    }
    let angular = h.angular_mask();
    let mut z = DMatrix::zeros(m, set.len());
    for i in 0..set.len() {
        let zi = h.measure(&set.point(i))?;
        if zi.len() != m {
            return Err(Error::Dimension {
                context: "measurement_update",
                expected: m.to_string(),
                actual: zi.len().to_string(),
            });
        }
        z.set_column(i, &zi);
    }
    let z_mean = measurement_mean(&z, angular, set.weight)?;
    let mut dz = z;
    for mut col in dz.column_iter_mut() {
        col -= &z_mean;
        for (j, &is_angle) in angular.iter().enumerate() {
            if is_angle {
                col[j] = wrap_angle(col[j])?;
            }
        }
    }
    let p_yy = symmetrize_and_repair(&(&dz * dz.transpose() * set.weight + h.noise_cov()))?;
    Ok(Innovation { z_mean, dz, p_yy })
}

/// Kalman correction of `pred` given the state/measurement cross-covariance.
fn correct<M: MeasurementModel>(
    pred: &GaussianBelief,
    y: &DVector<f64>,
    h: &M,
    inn: &Innovation,
    p_xy: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    let chol = inn
        .p_yy
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical_with("innovation covariance is not invertible", &inn.p_yy))?;
    // K = P_xy P_yy^-1, solved as P_yy K^T = P_xy^T.
    let gain = chol.solve(&p_xy.transpose()).transpose();

    let mut residual = y - &inn.z_mean;
    for (j, &is_angle) in h.angular_mask().iter().enumerate() {
        if is_angle {
            residual[j] = wrap_angle(residual[j])?;
        }
    }
    let mean = &pred.mean + &gain * residual;
    let cov = symmetrize_and_repair(&(&pred.cov - &gain * &inn.p_yy * gain.transpose()))?;
    GaussianBelief::new(mean, cov)
}

/// Standard CKF measurement update on points regenerated from `pred`.
pub fn measurement_update<M: MeasurementModel>(
    pred: &GaussianBelief,
    y: &DVector<f64>,
    h: &M,
) -> Result<GaussianBelief> {
    let set = cubature_points(pred)?;
    let inn = innovation(&set, y, h)?;
    let mut dx = set.points.clone();
    for mut col in dx.column_iter_mut() {
        col -= &pred.mean;
    }
    let p_xy = &dx * inn.dz.transpose() * set.weight;
    correct(pred, y, h, &inn, &p_xy)
}

/// CKF measurement update for a measurement that depends only on the block
/// `offset..offset + len` of the state.
///
/// The cubature rule runs on that block's marginal. The cross-covariance of
/// the remaining components follows from the Gaussian regression
/// `P_sb P_bb^-1 P_by`, so the result does not depend on how many components
/// lie outside the block. It equals [`measurement_update`] when `h` is
/// linear.
pub fn measurement_update_block<M: MeasurementModel>(
    pred: &GaussianBelief,
    y: &DVector<f64>,
    h: &M,
    offset: usize,
    len: usize,
) -> Result<GaussianBelief> {
    let n = pred.dim();
    if len == 0 || offset + len > n {
        return Err(Error::Dimension {
            context: "measurement_update_block",
            expected: format!("block within {n} components"),
            actual: format!("{offset}..{}", offset + len),
        });
    }
    let marginal = pred.marginal(offset, len);
    let set = cubature_points(&marginal)?;
    let inn = innovation(&set, y, h)?;
    let mut db = set.points.clone();
    for mut col in db.column_iter_mut() {
        col -= &marginal.mean;
    }
    let p_by = &db * inn.dz.transpose() * set.weight;

    let p_bb = symmetrize_and_repair(&marginal.cov)?;
    let chol = p_bb
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical_with("block covariance is not invertible", &p_bb))?;
    let regression = chol.solve(&p_by);
    let mut p_xy = pred.cov.columns(offset, len) * regression;
    p_xy.rows_mut(offset, len).copy_from(&p_by);
    correct(pred, y, h, &inn, &p_xy)
}
