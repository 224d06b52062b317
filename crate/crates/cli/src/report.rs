//! Machine-readable run reports and the human summary printed to stdout.

use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

use framecal_core::{BlochParams, CalibrationVerdict, Decision, Estimate, Spectrum};

/// Everything needed to understand and reproduce one run: the resolved
/// configuration (including the seed where one applies), the
/// reconstruction, its spectrum, and the verdict.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub estimate: Estimate,
    pub spectrum: Spectrum,
    pub verdict: CalibrationVerdict,
    pub transcript_digest: Option<String>,
    pub timing_ms: u64,
}

impl RunReport {
    pub fn write_json(&self, path: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json.as_bytes())
            .with_context(|| format!("writing report to {}", path.display()))?;
        Ok(())
    }

    /// Exit status shared by every command: 0 when no incompatibility was
    /// established, 2 when the frames are incompatible (errors exit 1
    /// before a report exists).
    pub fn exit_code(&self) -> i32 {
        match self.verdict.decision {
            Decision::Incompatible => 2,
            Decision::Compatible | Decision::Inconclusive => 0,
        }
    }
}

fn fmt_vec(v: &[f64; 3]) -> String {
    format!("[{:+.4}, {:+.4}, {:+.4}]", v[0], v[1], v[2])
}

pub fn print_params(label: &str, p: &BlochParams) {
    println!("{label}:");
    println!("  a = {}", fmt_vec(p.a()));
    println!("  b = {}", fmt_vec(p.b()));
    for row in p.c() {
        println!("  c | {}", fmt_vec(row));
    }
}

pub fn print_spectrum(spectrum: &Spectrum) {
    let e = spectrum.eigenvalues;
    println!(
        "spectrum: [{:+.6}, {:+.6}, {:+.6}, {:+.6}]",
        e[0], e[1], e[2], e[3]
    );
}

pub fn print_verdict(verdict: &CalibrationVerdict) {
    if verdict.min_eigenvalue_std > 0.0 {
        println!(
            "min eigenvalue: {:+.6} ± {:.6}  (z = {:+.2})",
            verdict.min_eigenvalue, verdict.min_eigenvalue_std, verdict.z_score
        );
    } else {
        println!("min eigenvalue: {:+.6}", verdict.min_eigenvalue);
    }
    println!("verdict: {}", verdict.decision);
}
