//! Rebuilds merged result tables from the config snapshots and per-run
//! artifacts on disk, without re-running anything.

use crate::runner::{EVAL_JSON_FILE, FINAL_MODEL_FILE};
use crate::CliError;
use catk_core::metrics::EvalReport;
use catk_core::scenario::fnv1a64;
use std::path::Path;

/// Scans `dir` for run directories (any subdirectory holding an evaluation
/// report) and merges one CSV row per run, sorted by run name.
pub fn rebuild_table(dir: &Path) -> Result<String, CliError> {
    let mut rows: Vec<(String, String, String)> = Vec::new();
    let entries =
        std::fs::read_dir(dir).map_err(|e| CliError::Config(format!("read {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Runtime(e.to_string()))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let eval_path = path.join(EVAL_JSON_FILE);
        if !eval_path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&eval_path)
            .map_err(|e| CliError::Runtime(format!("read {}: {e}", eval_path.display())))?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("bad report {}: {e}", eval_path.display())))?;
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        // Base-model provenance: a fine-tune run's manifest records the
        // init checkpoint; hash whatever this run started from.
        let hash = match crate::runner::RunManifest::load(&path) {
            Ok(m) => {
                let src = m
                    .init_model
                    .unwrap_or_else(|| path.join(FINAL_MODEL_FILE));
                std::fs::read(&src)
                    .map(|b| format!("{:016x}", fnv1a64(&b)))
                    .unwrap_or_else(|_| "missing".into())
            }
            Err(_) => "unknown".into(),
        };
        rows.push((name, hash, report.csv_row()));
    }
    if rows.is_empty() {
        return Err(CliError::Config(format!(
            "no run directories with {} under {}",
            EVAL_JSON_FILE,
            dir.display()
        )));
    }
    rows.sort();
    let mut out = String::from("# catk-metrics v1\n");
    out.push_str(&format!("run,base_or_self_hash,{}\n", EvalReport::csv_columns()));
    for (name, hash, row) in rows {
        out.push_str(&format!("{name},{hash},{row}\n"));
    }
    Ok(out)
}
