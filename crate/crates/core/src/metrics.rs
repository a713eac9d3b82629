//! Monte-Carlo accuracy and consistency metrics.

use nalgebra::{DMatrix, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::symmetrize_and_repair;

pub const POSITION: [usize; 2] = [0, 2];
pub const VELOCITY: [usize; 2] = [1, 3];

/// Truths, estimates and covariances indexed `[run][k]`.
#[derive(Debug, Clone, Default)]
pub struct McEnsemble {
    pub truths: Vec<Vec<Vector4<f64>>>,
    pub estimates: Vec<Vec<Vector4<f64>>>,
    pub covariances: Vec<Vec<Matrix4<f64>>>,
}

impl McEnsemble {
    pub fn new(
        truths: Vec<Vec<Vector4<f64>>>,
        estimates: Vec<Vec<Vector4<f64>>>,
        covariances: Vec<Vec<Matrix4<f64>>>,
    ) -> Result<Self> {
        let ens = Self {
            truths,
            estimates,
            covariances,
        };
        ens.validate()?;
        Ok(ens)
    }

    pub fn runs(&self) -> usize {
        self.truths.len()
    }

    pub fn steps(&self) -> usize {
        self.truths.first().map_or(0, Vec::len)
    }

    pub fn push_run(
        &mut self,
        truth: Vec<Vector4<f64>>,
        estimate: Vec<Vector4<f64>>,
        covariance: Vec<Matrix4<f64>>,
    ) {
        self.truths.push(truth);
        self.estimates.push(estimate);
        self.covariances.push(covariance);
    }

    pub fn validate(&self) -> Result<()> {
        let runs = self.truths.len();
        if self.estimates.len() != runs || self.covariances.len() != runs {
            return Err(Error::Dimension {
                context: "McEnsemble",
                expected: format!("{runs} runs"),
                actual: format!("{} estimates, {} covariances", self.estimates.len(), self.covariances.len()),
            });
        }
        let steps = self.steps();
        for r in 0..runs {
            let lens = (self.truths[r].len(), self.estimates[r].len(), self.covariances[r].len());
            if lens != (steps, steps, steps) {
                return Err(Error::Dimension {
                    context: "McEnsemble",
                    expected: format!("{steps} steps in run {r}"),
                    actual: format!("{lens:?}"),
                });
            }
        }
        Ok(())
    }

    fn require_runs(&self) -> Result<()> {
        self.validate()?;
        if self.runs() == 0 {
            return Err(Error::Domain {
                what: "ensemble size",
                domain: "at least one run",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// Root mean square error over runs at every step, averaged over the
/// selected components.
pub fn rmse_k(ens: &McEnsemble, selection: &[usize]) -> Result<Vec<f64>> {
    ens.require_runs()?;
    if selection.is_empty() {
        return Err(Error::config("component_sel", "must not be empty"));
    }
    let denom = (selection.len() * ens.runs()) as f64;
    Ok((0..ens.steps())
        .map(|k| {
            let sum: f64 = (0..ens.runs())
                .map(|r| {
                    let e = ens.truths[r][k] - ens.estimates[r][k];
                    selection.iter().map(|&i| e[i] * e[i]).sum::<f64>()
                })
                .sum();
            (sum / denom).sqrt()
        })
        .collect())
}

/// Average normalized estimation error squared over runs at every step.
pub fn anees_k(ens: &McEnsemble) -> Result<Vec<f64>> {
    ens.require_runs()?;
    let mut out = Vec::with_capacity(ens.steps());
    for k in 0..ens.steps() {
        let mut sum = 0.0;
        for r in 0..ens.runs() {
            let p = DMatrix::from_column_slice(4, 4, ens.covariances[r][k].as_slice());
            let p = symmetrize_and_repair(&p)?;
            let chol = p.clone().cholesky().ok_or_else(|| Error::Numerical {
                message: format!("covariance of run {r} at step {k} is singular"),
                matrix: Some(Box::new(p.clone())),
            })?;
            let e = ens.truths[r][k] - ens.estimates[r][k];
            let e = nalgebra::DVector::from_column_slice(e.as_slice());
            sum += e.dot(&chol.solve(&e));
        }
        out.push(sum / ens.runs() as f64);
    }
    Ok(out)
}

/// Empirical CDF of the Euclidean norm of the selected error components,
/// pooled over every run and step, evaluated at `grid`.
pub fn error_cdf(ens: &McEnsemble, selection: &[usize], grid: &[f64]) -> Vec<f64> {
    let mut errors = pooled_errors(ens, selection);
    errors.sort_by(f64::total_cmp);
    let n = errors.len().max(1) as f64;
    grid.iter()
        .map(|&a| errors.partition_point(|&e| e <= a) as f64 / n)
        .collect()
}

/// Error norms over every `(run, step)`; length `runs * steps`.
pub fn pooled_errors(ens: &McEnsemble, selection: &[usize]) -> Vec<f64> {
    let mut errors = Vec::with_capacity(ens.runs() * ens.steps());
    for (truth, est) in ens.truths.iter().zip(&ens.estimates) {
        for (t, e) in truth.iter().zip(est) {
            let d = t - e;
            errors.push(selection.iter().map(|&i| d[i] * d[i]).sum::<f64>().sqrt());
        }
    }
    errors
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile by linear interpolation between order statistics at
/// position `(n - 1) p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn boxplot_summary(series: &[f64]) -> Result<BoxSummary> {
    if series.is_empty() {
        return Err(Error::Domain {
            what: "series length",
            domain: "at least one value",
            value: 0.0,
        });
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(BoxSummary {
        min: sorted[0],
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

pub fn median(series: &[f64]) -> Result<f64> {
    Ok(boxplot_summary(series)?.median)
}
