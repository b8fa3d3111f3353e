//! Session output files: report JSON, transcript JSONL and trajectory CSV.

use std::fs;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use cloak_core::instance::ProblemInstance;
use cloak_core::protocol::{SessionResult, StepDiag};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Serialize)]
struct SessionReport<'a> {
    n: usize,
    m: usize,
    p: usize,
    horizon: usize,
    steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    scenario: Option<u8>,
    transport: &'a str,
    cost: f64,
    final_state: Vec<f64>,
    solver: &'a [StepDiag],
}

/// Writes `report.json`, `transcript.jsonl` and `trajectory.csv` into `dir`.
pub fn write_outputs(
    dir: &Path,
    result: &SessionResult,
    instance: &ProblemInstance,
    scenario: Option<u8>,
    transport: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (n, m, p) = instance.dims();
    let report = SessionReport {
        n,
        m,
        p,
        horizon: instance.objective.horizon(),
        steps: result.us.len(),
        scenario,
        transport,
        cost: result.cost,
        final_state: result
            .xs
            .last()
            .map(|x| x.iter().take(n).copied().collect())
            .unwrap_or_default(),
        solver: &result.solver_diags,
    };
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    fs::write(dir.join("transcript.jsonl"), result.transcript.to_jsonl()?)?;
    fs::write(dir.join("trajectory.csv"), trajectory_csv(result, n, m, p))?;
    Ok(())
}

fn trajectory_csv(result: &SessionResult, n: usize, m: usize, p: usize) -> String {
    let mut out = String::new();
    out.push_str("k");
    for i in 0..n {
        out.push_str(&format!(",x{i}"));
    }
    for j in 0..m {
        out.push_str(&format!(",u{j}"));
    }
    for j in 0..p {
        out.push_str(&format!(",y{j}"));
    }
    out.push('\n');
    for k in 0..result.us.len() {
        out.push_str(&k.to_string());
        for i in 0..n {
            out.push_str(&format!(",{:.12e}", result.xs[k][i]));
        }
        for j in 0..m {
            out.push_str(&format!(",{:.12e}", result.us[k][j]));
        }
        for j in 0..p {
            out.push_str(&format!(",{:.12e}", result.ys[k][j]));
        }
        out.push('\n');
    }
    out
}
