//! Median tables and qualitative ordering checks across variants.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::parse_ssa_label;
use super::run::ExperimentResult;
use crate::constraint::Selection;
use crate::error::{Error, Result};
use crate::metrics::median;

/// Relative slack for adjacent comparisons along the epsilon grid.
pub const ADJACENT_SLACK: f64 = 0.03;
/// Allowed relative distance of velocity-constrained position RMSE from the
/// unconstrained APBM.
pub const POSITION_BAND: f64 = 0.10;

/// Per-step metric series of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub rmse_pos: Vec<f64>,
    pub rmse_vel: Vec<f64>,
    pub anees: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Flag {
    Pass,
    Fail,
    Tie,
    NotEvaluable,
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flag::Pass => "PASS",
            Flag::Fail => "FAIL",
            Flag::Tie => "TIE",
            Flag::NotEvaluable => "N/A",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub name: &'static str,
    pub flag: Flag,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianRow {
    pub label: String,
    pub rmse_pos: f64,
    pub rmse_vel: f64,
    pub anees: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<MedianRow>,
    pub checks: Vec<OrderingCheck>,
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&MedianRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn check(&self, name: &str) -> Option<&OrderingCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Deserialize)]
struct MetricsRow {
    #[allow(dead_code)]
    k: usize,
    variant: String,
    rmse_pos: f64,
    rmse_vel: f64,
    anees: f64,
}

/// Reads a `metrics.csv`, or the one inside a result directory.
pub fn read_metrics(path: &Path) -> Result<Vec<Series>> {
    let file: PathBuf = if path.is_dir() {
        path.join("metrics.csv")
    } else {
        path.to_path_buf()
    };
    let mut out: Vec<Series> = Vec::new();
    for row in csv::Reader::from_path(&file)?.deserialize() {
        let row: MetricsRow = row?;
        let idx = match out.iter().position(|s| s.label == row.variant) {
            Some(i) => i,
            None => {
                out.push(Series {
                    label: row.variant.clone(),
                    rmse_pos: Vec::new(),
                    rmse_vel: Vec::new(),
                    anees: Vec::new(),
                });
                out.len() - 1
            }
        };
        let s = &mut out[idx];
        s.rmse_pos.push(row.rmse_pos);
        s.rmse_vel.push(row.rmse_vel);
        s.anees.push(row.anees);
    }
    Ok(out)
}

pub fn series_from_result(res: &ExperimentResult) -> Vec<Series> {
    res.metrics
        .iter()
        .map(|m| Series {
            label: m.label.clone(),
            rmse_pos: m.rmse_pos.clone(),
            rmse_vel: m.rmse_vel.clone(),
            anees: m.anees.clone(),
        })
        .collect()
}

/// Compares the metrics found under each path. A label seen twice keeps its
/// first occurrence.
pub fn compare_paths(paths: &[PathBuf]) -> Result<Comparison> {
    let mut all: Vec<Series> = Vec::new();
    for p in paths {
        for s in read_metrics(p)? {
            if all.iter().any(|a| a.label == s.label) {
                log::warn!("variant {} appears more than once; keeping the first", s.label);
            } else {
                all.push(s);
            }
        }
    }
    compare(&all)
}

fn is_tie(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

fn strictly_less(name: &'static str, a: Option<&MedianRow>, b: Option<&MedianRow>, pick: fn(&MedianRow) -> f64) -> OrderingCheck {
    match (a, b) {
        (Some(a), Some(b)) => {
            let (x, y) = (pick(a), pick(b));
            let flag = if is_tie(x, y) {
                Flag::Tie
            } else if x < y {
                Flag::Pass
            } else {
                Flag::Fail
            };
            OrderingCheck {
                name,
                flag,
                detail: format!("{} {x:.4} vs {} {y:.4}", a.label, b.label),
            }
        }
        _ => not_evaluable(name, "required variant missing"),
    }
}

fn not_evaluable(name: &'static str, why: &str) -> OrderingCheck {
    OrderingCheck {
        name,
        flag: Flag::NotEvaluable,
        detail: why.into(),
    }
}

/// Checks an ordering along `values` (sorted by ascending epsilon), allowing
/// each adjacent step to move against it by a relative `slack`.
fn monotone(name: &'static str, values: &[(f64, f64)], increasing: bool, slack: f64) -> OrderingCheck {
    if values.len() < 2 {
        return not_evaluable(name, "fewer than two epsilon values");
    }
    let detail = values
        .iter()
        .map(|(e, v)| format!("e={e}: {v:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    let ok = |a: f64, b: f64| {
        if increasing {
            b >= a * (1.0 - slack)
        } else {
            b <= a * (1.0 + slack)
        }
    };
    let flag = if values.windows(2).all(|w| is_tie(w[0].1, w[1].1)) {
        Flag::Tie
    } else if values.windows(2).all(|w| ok(w[0].1, w[1].1)) {
        Flag::Pass
    } else {
        Flag::Fail
    };
    OrderingCheck { name, flag, detail }
}

fn sweep(rows: &[MedianRow], selection: Selection, pick: fn(&MedianRow) -> f64) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| match parse_ssa_label(&r.label) {
            Some((s, e)) if s == selection => Some((e, pick(r))),
            _ => None,
        })
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

pub const CHECK_POS_APBM_PBM: &str = "position: APBM < PBM";
pub const CHECK_VEL_PBM_APBM: &str = "velocity: PBM < APBM";
pub const CHECK_FULL_POS: &str = "full-state: position nonincreasing in eps";
pub const CHECK_FULL_VEL: &str = "full-state: velocity nondecreasing in eps";
pub const CHECK_VELSEL_POS: &str = "velocity-only: position within 10% of APBM_UNC";
pub const CHECK_VELSEL_VEL: &str = "velocity-only: velocity decreases as eps decreases";

/// Median table plus the qualitative orderings expected of the tracking
/// experiment.
pub fn compare(series: &[Series]) -> Result<Comparison> {
    if series.len() < 2 {
        return Err(Error::config("variants", "comparison needs at least two variants"));
    }
    let rows = series
        .iter()
        .map(|s| {
            Ok(MedianRow {
                label: s.label.clone(),
                rmse_pos: median(&s.rmse_pos)?,
                rmse_vel: median(&s.rmse_vel)?,
                anees: median(&s.anees)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let find = |l: &str| rows.iter().find(|r| r.label == l);
    let pos = |r: &MedianRow| r.rmse_pos;
    let vel = |r: &MedianRow| r.rmse_vel;

    let mut checks = vec![
        strictly_less(CHECK_POS_APBM_PBM, find("APBM"), find("PBM"), pos),
        strictly_less(CHECK_VEL_PBM_APBM, find("PBM"), find("APBM"), vel),
        monotone(CHECK_FULL_POS, &sweep(&rows, Selection::Full, pos), false, ADJACENT_SLACK),
        monotone(CHECK_FULL_VEL, &sweep(&rows, Selection::Full, vel), true, ADJACENT_SLACK),
    ];

    let vel_pos = sweep(&rows, Selection::Velocity, pos);
    checks.push(match (find("APBM_UNC"), vel_pos.is_empty()) {
        (Some(unc), false) => {
            let dev: Vec<f64> = vel_pos.iter().map(|(_, p)| (p - unc.rmse_pos) / unc.rmse_pos).collect();
            let flag = if dev.iter().all(|&d| d == 0.0) {
                Flag::Tie
            } else if dev.iter().all(|d| d.abs() <= POSITION_BAND) {
                Flag::Pass
            } else {
                Flag::Fail
            };
            OrderingCheck {
                name: CHECK_VELSEL_POS,
                flag,
                detail: vel_pos
                    .iter()
                    .zip(&dev)
                    .map(|((e, p), d)| format!("e={e}: {p:.4} ({:+.1}%)", 100.0 * d))
                    .collect::<Vec<_>>()
                    .join(", "),
            }
        }
        _ => not_evaluable(CHECK_VELSEL_POS, "needs APBM_UNC and velocity-constrained variants"),
    });
    checks.push(monotone(
        CHECK_VELSEL_VEL,
        &sweep(&rows, Selection::Velocity, vel),
        true,
        ADJACENT_SLACK,
    ));
    Ok(Comparison { rows, checks })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(7).max(7);
        let reference = &self.rows[0];
        writeln!(
            f,
            "{:width$}  {:>10}  {:>10}  {:>10}  {:>10}  {:>10}",
            "variant", "rmse_pos", "rmse_vel", "anees", "d_pos", "d_vel"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:width$}  {:>10.4}  {:>10.4}  {:>10.3}  {:>+10.4}  {:>+10.4}",
                r.label,
                r.rmse_pos,
                r.rmse_vel,
                r.anees,
                r.rmse_pos - reference.rmse_pos,
                r.rmse_vel - reference.rmse_vel
            )?;
        }
        writeln!(f, "(medians over steps; differences relative to {})", reference.label)?;
        writeln!(f)?;
        for c in &self.checks {
            writeln!(f, "[{}] {}: {}", c.flag, c.name, c.detail)?;
        }
        Ok(())
    }
}
