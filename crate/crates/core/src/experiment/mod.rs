//! Monte-Carlo harness: configuration, execution, persistence and
//! comparison of tracking filters.

mod compare;
mod config;
mod run;

pub use compare::*;
pub use config::*;
pub use run::*;

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// Text summary of a result directory: run bookkeeping from the manifest
/// followed by the comparison table.
pub fn report(dir: &Path) -> Result<String> {
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let mut out = String::new();
    let cfg = &manifest["config"];
    let _ = writeln!(
        out,
        "{}: {} runs x {} steps, base seed {}, version {}",
        dir.display(),
        cfg["n_mc"],
        cfg["truth"]["steps"],
        cfg["base_seed"],
        manifest["version"].as_str().unwrap_or("?")
    );
    let failures = manifest["failures"].as_array().map_or(0, Vec::len);
    let _ = writeln!(out, "failed filter runs: {failures}");
    for f in manifest["failures"].as_array().into_iter().flatten().take(10) {
        let _ = writeln!(out, "  run {} {}: {}", f["run"], f["label"].as_str().unwrap_or("?"), f["error"].as_str().unwrap_or("?"));
    }
    let series = read_metrics(&dir.join("metrics.csv"))?;
    if series.len() >= 2 {
        let _ = write!(out, "\n{}", compare(&series)?);
    }
    Ok(out)
}
