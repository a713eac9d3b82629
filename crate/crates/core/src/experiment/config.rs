//! Experiment description and its `key = value` text format.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::constraint::{ConstraintSpec, MetricKind, Selection, MIN_EPSILON};
use crate::error::{Error, Result};
use crate::estimator::{FilterConfig, Variant};
use crate::truth::{cv_process_noise, CtEntry12, TruthConfig, TruthDynamics};

/// Monte-Carlo size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 25 runs of 300 steps.
    Desk,
    /// 100 runs of 1000 steps.
    Paper,
}

impl Profile {
    pub fn n_mc(self) -> usize {
        match self {
            Profile::Desk => 25,
            Profile::Paper => 100,
        }
    }

    pub fn steps(self) -> usize {
        match self {
            Profile::Desk => 300,
            Profile::Paper => 1000,
        }
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(format!("unknown profile `{s}` (expected desk or paper)")),
        }
    }
}

/// Filter families that can be listed in `experiment.variants`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantKind {
    #[serde(rename = "TM")]
    Tm,
    #[serde(rename = "PBM")]
    Pbm,
    /// Parameter-regularized APBM.
    #[serde(rename = "APBM")]
    Apbm,
    /// APBM without any augmentation control.
    #[serde(rename = "APBM_UNC")]
    ApbmUnc,
    /// One filter per (selection, epsilon) pair.
    #[serde(rename = "APBM_SSA")]
    ApbmSsa,
}

impl FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "TM" => Ok(VariantKind::Tm),
            "PBM" => Ok(VariantKind::Pbm),
            "APBM" => Ok(VariantKind::Apbm),
            "APBM_UNC" => Ok(VariantKind::ApbmUnc),
            "APBM_SSA" => Ok(VariantKind::ApbmSsa),
            _ => Err(format!("unknown variant `{s}`")),
        }
    }
}

fn parse_selection(s: &str) -> std::result::Result<Selection, String> {
    match s {
        "full" => Ok(Selection::Full),
        "velocity" | "vel" => Ok(Selection::Velocity),
        _ => Err(format!("unknown selection `{s}` (expected full or velocity)")),
    }
}

fn parse_metric(s: &str) -> std::result::Result<MetricKind, String> {
    match s {
        "ssa" => Ok(MetricKind::Ssa),
        "ssr" => Ok(MetricKind::Ssr),
        _ => Err(format!("unknown metric `{s}` (expected ssa or ssr)")),
    }
}

/// Filter knobs shared by every variant of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSettings {
    /// Initial estimate; the true initial state when absent.
    pub x0_hat: Option<[f64; 4]>,
    pub p0_x_diag: [f64; 4],
    pub p0_theta_scale: f64,
    pub q_theta_var: f64,
    pub param_reg_strength: f64,
    pub theta_init_std: f64,
    pub tm_knows_omega: bool,
    pub p0_omega: f64,
    /// Weight regularization; the automatic rule when absent.
    pub reg_lambda: Option<f64>,
    pub metric_root: bool,
    pub metric: MetricKind,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            x0_hat: None,
            p0_x_diag: [1.0, 0.1, 1.0, 0.1],
            p0_theta_scale: 1e-2,
            q_theta_var: 1e-6,
            param_reg_strength: 1e2,
            theta_init_std: 1e-2,
            tm_knows_omega: false,
            p0_omega: 1e-4,
            reg_lambda: None,
            metric_root: false,
            metric: MetricKind::Ssa,
        }
    }
}

/// One filter of the experiment, before it is bound to a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterSpec {
    pub label: String,
    pub kind: VariantKind,
    pub selection: Option<Selection>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub truth: TruthConfig,
    pub profile: Profile,
    pub n_mc: usize,
    /// Run `r` (1-based) uses seed `base_seed + r`.
    pub base_seed: u64,
    pub variants: Vec<VariantKind>,
    pub epsilons: Vec<f64>,
    pub selections: Vec<Selection>,
    pub filter: FilterSettings,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    /// Keys set explicitly, so a later profile change does not clobber them.
    #[serde(skip)]
    explicit: BTreeSet<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let profile = Profile::Paper;
        Self {
            truth: TruthConfig {
                steps: profile.steps(),
                ..TruthConfig::default()
            },
            profile,
            n_mc: profile.n_mc(),
            base_seed: 0,
            variants: vec![VariantKind::Tm, VariantKind::Pbm, VariantKind::Apbm, VariantKind::ApbmSsa],
            epsilons: vec![0.03, 0.1, 1.0],
            selections: vec![Selection::Full],
            filter: FilterSettings::default(),
            out_dir: PathBuf::from("results"),
            workers: 1,
            explicit: BTreeSet::new(),
        }
    }
}

impl ExperimentConfig {
    /// Switches profile; explicitly configured run counts and horizons win.
    pub fn apply_profile(&mut self, profile: Profile) {
        self.profile = profile;
        if !self.explicit.contains("experiment.n_mc") {
            self.n_mc = profile.n_mc();
        }
        if !self.explicit.contains("truth.T") {
            self.truth.steps = profile.steps();
        }
    }

    pub fn set_n_mc(&mut self, n: usize) {
        self.n_mc = n;
        self.explicit.insert("experiment.n_mc".into());
    }

    pub fn set_steps(&mut self, steps: usize) {
        self.truth.steps = steps;
        self.explicit.insert("truth.T".into());
    }

    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        if self.n_mc < 1 {
            return Err(Error::config("experiment.n_mc", "must be at least 1"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("experiment.variants", "at least one filter is required"));
        }
        if self.variants.contains(&VariantKind::ApbmSsa) {
            if self.epsilons.is_empty() {
                return Err(Error::config("experiment.epsilons", "APBM_SSA needs at least one value"));
            }
            if self.selections.is_empty() {
                return Err(Error::config("experiment.selections", "APBM_SSA needs at least one value"));
            }
        }
        if let Some(e) = self.epsilons.iter().find(|&&e| !(e >= MIN_EPSILON && e.is_finite())) {
            return Err(Error::config(
                "experiment.epsilons",
                format!("values must be finite and at least {MIN_EPSILON:e}, got {e}"),
            ));
        }
        let f = &self.filter;
        if f.p0_x_diag.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config("filter.P0_x", "entries must be positive"));
        }
        if f.x0_hat.is_some_and(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::config("filter.x0_hat", "entries must be finite"));
        }
        if f.metric == MetricKind::None {
            return Err(Error::config("experiment.metric", "must be ssa or ssr"));
        }
        if f.reg_lambda.is_some_and(|l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::config("filter.reg_lambda", "must be finite and nonnegative"));
        }
        let specs = self.filter_specs();
        let mut seen = BTreeSet::new();
        for s in &specs {
            if !seen.insert(&s.label) {
                return Err(Error::config("experiment.variants", format!("duplicate filter `{}`", s.label)));
            }
        }
        // Checks the remaining per-filter knobs.
        self.filter_configs().map(|_| ())
    }

    /// Every filter in output order.
    pub fn filter_specs(&self) -> Vec<FilterSpec> {
        let mut out = Vec::new();
        for &kind in &self.variants {
            let simple = |label: &str| FilterSpec {
                label: label.into(),
                kind,
                selection: None,
                epsilon: None,
            };
            match kind {
                VariantKind::Tm => out.push(simple("TM")),
                VariantKind::Pbm => out.push(simple("PBM")),
                VariantKind::Apbm => out.push(simple("APBM")),
                VariantKind::ApbmUnc => out.push(simple("APBM_UNC")),
                VariantKind::ApbmSsa => {
                    let prefix = match self.filter.metric {
                        MetricKind::Ssr => "APBM_SSR",
                        _ => "APBM_SSA",
                    };
                    for &sel in &self.selections {
                        for &eps in &self.epsilons {
                            out.push(FilterSpec {
                                label: ssa_label(prefix, sel, eps),
                                kind,
                                selection: Some(sel),
                                epsilon: Some(eps),
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn q_pbm(&self) -> Matrix4<f64> {
        cv_process_noise(self.truth.ts, self.truth.q_var)
    }

    /// Filter configurations for every spec; bind a run with
    /// [`bind_to_run`].
    pub fn filter_configs(&self) -> Result<Vec<FilterConfig>> {
        let q_pbm = self.q_pbm();
        let f = &self.filter;
        self.filter_specs()
            .into_iter()
            .map(|spec| {
                let variant = match spec.kind {
                    VariantKind::Tm => Variant::Tm,
                    VariantKind::Pbm => Variant::Pbm,
                    VariantKind::Apbm => Variant::ApbmParamReg,
                    VariantKind::ApbmUnc | VariantKind::ApbmSsa => Variant::ApbmSsa,
                };
                let mut cfg = FilterConfig::new(variant, spec.label, &self.truth);
                if let Some(x) = f.x0_hat {
                    cfg.x0_hat = Vector4::from(x);
                }
                cfg.p0_x = Matrix4::from_diagonal(&Vector4::from(f.p0_x_diag));
                cfg.p0_theta_scale = f.p0_theta_scale;
                cfg.q_theta_var = f.q_theta_var;
                cfg.param_reg_strength = f.param_reg_strength;
                cfg.theta_init_std = f.theta_init_std;
                cfg.tm_knows_omega = f.tm_knows_omega;
                cfg.p0_omega = f.p0_omega;
                cfg.q_pbm = q_pbm;
                if let (Some(sel), Some(eps)) = (spec.selection, spec.epsilon) {
                    cfg.constraint =
                        ConstraintSpec::from_process_noise(f.metric, eps, sel.indices(), &q_pbm, f.reg_lambda, f.metric_root)?;
                }
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.base_seed.wrapping_add(run as u64)
    }

    /// Truth configuration of run `run` (1-based).
    pub fn truth_for_run(&self, run: usize) -> TruthConfig {
        TruthConfig {
            seed: self.run_seed(run),
            ..self.truth.clone()
        }
    }
}

/// Seeds the filter's parameter initialization with the run seed so that all
/// APBM variants of one run start from the same network.
pub fn bind_to_run(cfg: &FilterConfig, truth: &TruthConfig) -> FilterConfig {
    FilterConfig {
        theta_seed: truth.seed,
        ..cfg.clone()
    }
}

pub fn ssa_label(prefix: &str, selection: Selection, epsilon: f64) -> String {
    format!("{prefix}_{}_e={epsilon}", selection.short_name())
}

/// Inverse of [`ssa_label`]: selection and epsilon of a constrained label.
pub fn parse_ssa_label(label: &str) -> Option<(Selection, f64)> {
    let rest = label
        .strip_prefix("APBM_SSA_")
        .or_else(|| label.strip_prefix("APBM_SSR_"))?;
    let (sel, eps) = rest.split_once("_e=")?;
    Some((parse_selection(sel).ok()?, eps.parse().ok()?))
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse `{v}` as the value of `{key}`"),
    })
}

fn parse_with<T>(line: usize, v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> Result<T> {
    f(v).map_err(|message| Error::Parse { line, message })
}

fn split_list(v: &str) -> Vec<&str> {
    let v = v.trim().trim_start_matches('[').trim_end_matches(']');
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    split_list(v).into_iter().map(|s| parse_value(line, key, s)).collect()
}

fn parse_array<const N: usize>(line: usize, key: &str, v: &str) -> Result<[f64; N]> {
    let items: Vec<f64> = parse_list(line, key, v)?;
    items.try_into().map_err(|items: Vec<f64>| Error::Parse {
        line,
        message: format!("`{key}` needs {N} values, got {}", items.len()),
    })
}

/// Parses the experiment description.
///
/// One `key = value` per line, `#` starts a comment, lists are comma
/// separated. Omitted keys keep their defaults and unknown keys are rejected.
/// An explicit `experiment.profile` applies to run count and horizon unless
/// those keys are also given.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = BTreeSet::new();
    let mut profile = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate key `{key}`"),
            });
        }
        let t = &mut cfg.truth;
        let f = &mut cfg.filter;
        match key {
            "truth.Ts" => t.ts = parse_value(line, key, value)?,
            "truth.q_var" => t.q_var = parse_value(line, key, value)?,
            "truth.omega_var" => t.omega_var = parse_value(line, key, value)?,
            "truth.x0" => t.x0 = parse_array(line, key, value)?,
            "truth.omega0" => t.omega0 = parse_value(line, key, value)?,
            "truth.T" => t.steps = parse_value(line, key, value)?,
            "truth.sensor_pos" => t.sensor_pos = parse_array(line, key, value)?,
            "truth.psi0_dbm" => t.psi0_dbm = parse_value(line, key, value)?,
            "truth.alpha" => t.alpha = parse_value(line, key, value)?,
            "truth.R" => {
                let r: Vec<f64> = parse_list(line, key, value)?;
                t.r = match r[..] {
                    [a, b] => [a, 0.0, 0.0, b],
                    [a, b, c, d] => [a, b, c, d],
                    _ => {
                        return Err(Error::Parse {
                            line,
                            message: "`truth.R` needs 2 diagonal or 4 row-major values".into(),
                        })
                    }
                };
            }
            "truth.ct_entry12" => {
                t.ct_entry12 = parse_with(line, value, |s| match s {
                    "as_printed" => Ok(CtEntry12::AsPrinted),
                    "standard" => Ok(CtEntry12::Standard),
                    _ => Err(format!("unknown ct_entry12 `{s}` (expected as_printed or standard)")),
                })?
            }
            "truth.dynamics" => {
                t.dynamics = parse_with(line, value, |s| match s {
                    "coordinated_turn" => Ok(TruthDynamics::CoordinatedTurn),
                    "additive" => Ok(TruthDynamics::Additive),
                    _ => Err(format!("unknown dynamics `{s}` (expected coordinated_turn or additive)")),
                })?
            }
            "experiment.n_mc" => cfg.n_mc = parse_value(line, key, value)?,
            "experiment.base_seed" => cfg.base_seed = parse_value(line, key, value)?,
            "experiment.profile" => profile = Some(parse_with(line, value, Profile::from_str)?),
            "experiment.variants" => {
                cfg.variants = split_list(value)
                    .into_iter()
                    .map(|s| parse_with(line, s, VariantKind::from_str))
                    .collect::<Result<_>>()?
            }
            "experiment.epsilons" => cfg.epsilons = parse_list(line, key, value)?,
            "experiment.selections" => {
                cfg.selections = split_list(value)
                    .into_iter()
                    .map(|s| parse_with(line, s, parse_selection))
                    .collect::<Result<_>>()?
            }
            "experiment.metric" => f.metric = parse_with(line, value, parse_metric)?,
            "experiment.out_dir" => cfg.out_dir = PathBuf::from(value),
            "experiment.workers" => cfg.workers = parse_value(line, key, value)?,
            "filter.x0_hat" => f.x0_hat = Some(parse_array(line, key, value)?),
            "filter.P0_x" => f.p0_x_diag = parse_array(line, key, value)?,
            "filter.P0_theta_scale" => f.p0_theta_scale = parse_value(line, key, value)?,
            "filter.q_theta_var" => f.q_theta_var = parse_value(line, key, value)?,
            "filter.param_reg_strength" => f.param_reg_strength = parse_value(line, key, value)?,
            "filter.theta_init_std" => f.theta_init_std = parse_value(line, key, value)?,
            "filter.tm_knows_omega" => f.tm_knows_omega = parse_value(line, key, value)?,
            "filter.p0_omega" => f.p0_omega = parse_value(line, key, value)?,
            "filter.reg_lambda" => f.reg_lambda = Some(parse_value(line, key, value)?),
            "filter.metric_root" => f.metric_root = parse_value(line, key, value)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
    }
    cfg.explicit = seen;
    if let Some(p) = profile {
        cfg.apply_profile(p);
    }
    cfg.validate()?;
    Ok(cfg)
}
