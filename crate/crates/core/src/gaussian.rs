//! Gaussian beliefs and the state-space model abstractions shared by every filter.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative eigenvalue floor applied by [`symmetrize_and_repair`].
pub const EIGEN_FLOOR_REL: f64 = 1e-12;

/// Mean and covariance of a Gaussian filter distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension {
                context: "GaussianBelief::new",
                expected: format!("{0}x{0} covariance", mean.len()),
                actual: format!("{}x{}", cov.nrows(), cov.ncols()),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Copy of the sub-belief over `start..start + len`.
    pub fn marginal(&self, start: usize, len: usize) -> GaussianBelief {
        GaussianBelief {
            mean: self.mean.rows(start, len).into_owned(),
            cov: self.cov.view((start, start), (len, len)).into_owned(),
        }
    }
}

/// Symmetrizes `cov` and raises every eigenvalue below
/// `1e-12 * max(1, max diag)` to that floor, so the result always admits a
/// Cholesky factorization.
pub fn symmetrize_and_repair(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(Error::Dimension {
            context: "symmetrize_and_repair",
            expected: "square matrix".into(),
            actual: format!("{}x{}", cov.nrows(), cov.ncols()),
        });
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical_with(
            "covariance has non-finite entries",
            cov,
        ));
    }
    let n = cov.nrows();
    let sym = (cov + cov.transpose()) * 0.5;
    let max_diag = sym.diagonal().iter().fold(1.0_f64, |m, &d| m.max(d));
    let floor = EIGEN_FLOOR_REL * max_diag;

    // All eigenvalues already above the floor: nothing to raise.
    let mut shifted = sym.clone();
    for i in 0..n {
        shifted[(i, i)] -= floor;
    }
    if shifted.cholesky().is_some() {
        return Ok(sym);
    }

    let eig = sym.symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let lambda = lambda.max(floor);
        scaled.column_mut(j).scale_mut(lambda);
    }
    let rebuilt = scaled * eig.eigenvectors.transpose();
    Ok((&rebuilt + rebuilt.transpose()) * 0.5)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::InvalidValue {
            what: "angle",
            value: a,
        });
    }
    if a > -PI && a <= PI {
        return Ok(a);
    }
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    // Odd multiples of pi land a few ulps above -pi after reduction.
    if r <= -PI + 8.0 * f64::EPSILON * a.abs().max(1.0) {
        r = PI;
    }
    Ok(r)
}

/// Deterministic state transition `x' = f(x, u; theta)` with additive noise `Q`.
pub trait TransitionModel {
    fn dim_state(&self) -> usize;
    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &[f64]) -> DVector<f64>;
    fn process_noise_cov(&self) -> &DMatrix<f64>;
}

/// Measurement `y = h(x) + r`, `r ~ N(0, R)`.
pub trait MeasurementModel {
    fn dim_meas(&self) -> usize;
    fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn noise_cov(&self) -> &DMatrix<f64>;
    /// One flag per measurement component; `true` marks angle-valued outputs.
    fn angular_mask(&self) -> &[bool];
}

/// `y = H x + r`.
#[derive(Debug, Clone)]
pub struct LinearMeasurement {
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    mask: Vec<bool>,
}

impl LinearMeasurement {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
            return Err(Error::Dimension {
                context: "LinearMeasurement::new",
                expected: format!("{0}x{0} noise covariance", h.nrows()),
                actual: format!("{}x{}", r.nrows(), r.ncols()),
            });
        }
        let mask = vec![false; h.nrows()];
        Ok(Self { h, r, mask })
    }
}

impl MeasurementModel for LinearMeasurement {
    fn dim_meas(&self) -> usize {
        self.h.nrows()
    }

    fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.h.ncols() {
            return Err(Error::Dimension {
                context: "LinearMeasurement::measure",
                expected: self.h.ncols().to_string(),
                actual: x.len().to_string(),
            });
        }
        Ok(&self.h * x)
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.r
    }

    fn angular_mask(&self) -> &[bool] {
        &self.mask
    }
}

/// Applies an inner measurement model to the block `offset..offset + len` of
/// a larger (augmented) state vector.
#[derive(Debug, Clone, Copy)]
pub struct Embedded<'a, M> {
    pub inner: &'a M,
    pub offset: usize,
    pub len: usize,
}

impl<M: MeasurementModel> MeasurementModel for Embedded<'_, M> {
    fn dim_meas(&self) -> usize {
        self.inner.dim_meas()
    }

    fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() < self.offset + self.len {
            return Err(Error::Dimension {
                context: "Embedded::measure",
                expected: format!("at least {}", self.offset + self.len),
                actual: x.len().to_string(),
            });
        }
        self.inner.measure(&x.rows(self.offset, self.len).into_owned())
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        self.inner.noise_cov()
    }

    fn angular_mask(&self) -> &[bool] {
        self.inner.angular_mask()
    }
}
