//! Experiment orchestration: strategy ablations from a shared pre-trained
//! base, K sweeps for fine-tuning, and K_infer sweeps for inference sampling.

use crate::config::ExperimentSpec;
use crate::runner::{
    evaluate_on, prepare_inputs, run_eval, run_training, RunManifest, FINAL_MODEL_FILE,
};
use crate::CliError;
use catk_core::metrics::EvalReport;
use catk_core::policy::PolicyModel;
use catk_core::rollout::SamplerConfig;
use catk_core::scenario::{fnv1a64, Scenario};
use catk_core::training::Strategy;
use catk_core::vocabulary::TokenVocabulary;
use std::path::{Path, PathBuf};

pub const ABLATION_CSV: &str = "ablation.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Runtime(format!("hash {}: {e}", path.display())))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

fn snapshot_spec(spec_text: &str, out_dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("create out dir: {e}")))?;
    std::fs::write(out_dir.join("config.toml"), spec_text)
        .map_err(|e| CliError::Runtime(format!("snapshot spec: {e}")))
}

fn base_manifest(spec: &ExperimentSpec, scen_path: &Path, vocab_path: &Path) -> RunManifest {
    RunManifest {
        scenarios: scen_path.to_path_buf(),
        vocab: vocab_path.to_path_buf(),
        model_kind: spec.model.kind.clone(),
        hidden: spec.model.hidden,
        modes: spec.model.modes,
        sigma: spec.model.sigma,
        init_model: None,
        holdout_count: spec.scenario.holdout_count,
        holdout_frac: Some(spec.scenario.holdout_frac),
        train: spec.pretrain.to_train_config(
            Strategy::Bc,
            SamplerConfig::default(),
            spec.seed,
        ),
    }
}

/// Trains the shared BC base, fine-tunes one variant per configured strategy
/// from that checkpoint and seed, evaluates everything on the held-out split
/// with identical rollout seeds, and merges one CSV. A failing row is marked
/// and the remaining rows still run.
pub fn run_ablation(spec: &ExperimentSpec, spec_text: &str, out_dir: &Path) -> Result<PathBuf, CliError> {
    snapshot_spec(spec_text, out_dir)?;
    let (scen_path, vocab_path, _, _) = prepare_inputs(spec, out_dir)?;

    let base_dir = out_dir.join("bc_pretrain");
    let manifest = base_manifest(spec, &scen_path, &vocab_path);
    run_training(&base_dir, &manifest, None, None)?;
    let base_hash = hash_file(&base_dir.join(FINAL_MODEL_FILE))?;
    let base_report = run_eval(&base_dir, &spec.eval)?;

    let mut rows: Vec<(String, String, Result<EvalReport, String>)> = vec![(
        "bc_pretrain".to_string(),
        base_hash.clone(),
        Ok(base_report),
    )];

    for variant in &spec.finetune {
        let label = format!("ft_{}", variant.label());
        let dir = out_dir.join(&label);
        let mut m = base_manifest(spec, &scen_path, &vocab_path);
        m.init_model = Some(base_dir.join(FINAL_MODEL_FILE));
        m.train = variant
            .stage
            .to_train_config(variant.strategy, variant.sampler(), spec.seed);
        let result = run_training(&dir, &m, None, None)
            .and_then(|_| run_eval(&dir, &spec.eval))
            .map_err(|e| e.to_string());
        rows.push((label, base_hash.clone(), result));
    }

    let csv_path = out_dir.join(ABLATION_CSV);
    let mut out = String::from("# catk-metrics v1\n");
    out.push_str(&format!("run,status,base_ckpt_hash,{}\n", EvalReport::csv_columns()));
    for (label, hash, result) in &rows {
        match result {
            Ok(report) => {
                out.push_str(&format!("{label},ok,{hash},{}\n", report.csv_row()));
            }
            Err(msg) => {
                let cleaned = msg.replace([',', '\n'], ";");
                out.push_str(&format!("{label},failed:{cleaned},{hash},,,,,,,,,,\n"));
            }
        }
    }
    std::fs::write(&csv_path, out).map_err(|e| CliError::Runtime(format!("write csv: {e}")))?;
    Ok(csv_path)
}

/// Fine-tunes the first configured variant once per K value from the shared
/// base and merges a CSV keyed by K.
pub fn run_k_sweep(
    spec: &ExperimentSpec,
    spec_text: &str,
    out_dir: &Path,
    values: &[usize],
) -> Result<PathBuf, CliError> {
    if spec.finetune.is_empty() {
        return Err(CliError::Config(
            "K sweep needs at least one [[finetune]] variant in the spec".into(),
        ));
    }
    snapshot_spec(spec_text, out_dir)?;
    let (scen_path, vocab_path, _, _) = prepare_inputs(spec, out_dir)?;
    let base_dir = out_dir.join("bc_pretrain");
    let manifest = base_manifest(spec, &scen_path, &vocab_path);
    run_training(&base_dir, &manifest, None, None)?;
    let base_hash = hash_file(&base_dir.join(FINAL_MODEL_FILE))?;

    let mut rows = Vec::new();
    for &k in values {
        let dir = out_dir.join(format!("K_{k}"));
        let mut variant = spec.finetune[0].clone();
        variant.k = k;
        let mut m = base_manifest(spec, &scen_path, &vocab_path);
        m.init_model = Some(base_dir.join(FINAL_MODEL_FILE));
        m.train = variant
            .stage
            .to_train_config(variant.strategy, variant.sampler(), spec.seed);
        let result = run_training(&dir, &m, None, None)
            .and_then(|_| run_eval(&dir, &spec.eval))
            .map_err(|e| e.to_string());
        rows.push((k, result));
    }

    let csv_path = out_dir.join(SWEEP_CSV);
    let mut out = String::from("# catk-metrics v1\n");
    out.push_str(&format!("K,status,base_ckpt_hash,{}\n", EvalReport::csv_columns()));
    for (k, result) in &rows {
        match result {
            Ok(report) => out.push_str(&format!("{k},ok,{base_hash},{}\n", report.csv_row())),
            Err(msg) => {
                let cleaned = msg.replace([',', '\n'], ";");
                out.push_str(&format!("{k},failed:{cleaned},{base_hash},,,,,,,,,,\n"));
            }
        }
    }
    std::fs::write(&csv_path, out).map_err(|e| CliError::Runtime(format!("write csv: {e}")))?;
    Ok(csv_path)
}

/// Evaluates one model across a K_infer grid: R sampled rollouts per scenario
/// per grid point, aggregate metrics per K_infer.
pub fn k_infer_sweep(
    model: &PolicyModel,
    holdout: &[Scenario],
    vocab: &TokenVocabulary,
    grid: &[usize],
    eval: &crate::config::EvalSpec,
) -> Result<String, CliError> {
    for &k in grid {
        if k < 1 || k > vocab.len() {
            return Err(CliError::Config(format!(
                "k_infer {k} outside 1..={}",
                vocab.len()
            )));
        }
    }
    let mut out = String::from("# catk-metrics v1\n");
    out.push_str(&format!("k_infer,{}\n", EvalReport::csv_columns()));
    for &k in grid {
        let mut cfg = eval.clone();
        cfg.k_infer = k;
        let report = evaluate_on(model, holdout, vocab, &cfg);
        out.push_str(&format!("{k},{}\n", report.csv_row()));
    }
    Ok(out)
}

/// Trains the base (and first fine-tune variant when configured), then runs
/// the K_infer sweep on the resulting model.
pub fn run_k_infer_sweep(
    spec: &ExperimentSpec,
    spec_text: &str,
    out_dir: &Path,
    values: &[usize],
) -> Result<PathBuf, CliError> {
    snapshot_spec(spec_text, out_dir)?;
    let (scen_path, vocab_path, _, holdout) = prepare_inputs(spec, out_dir)?;
    let base_dir = out_dir.join("bc_pretrain");
    let manifest = base_manifest(spec, &scen_path, &vocab_path);
    let mut outcome = run_training(&base_dir, &manifest, None, None)?;
    if let Some(variant) = spec.finetune.first() {
        let dir = out_dir.join(format!("ft_{}", variant.label()));
        let mut m = base_manifest(spec, &scen_path, &vocab_path);
        m.init_model = Some(base_dir.join(FINAL_MODEL_FILE));
        m.train = variant
            .stage
            .to_train_config(variant.strategy, variant.sampler(), spec.seed);
        outcome = run_training(&dir, &m, None, None)?;
    }
    let vocab = TokenVocabulary::load(&vocab_path)
        .map_err(|e| CliError::Config(format!("load vocabulary: {e}")))?;
    let csv = k_infer_sweep(&outcome.model, &holdout, &vocab, values, &spec.eval)?;
    let csv_path = out_dir.join(SWEEP_CSV);
    std::fs::write(&csv_path, csv).map_err(|e| CliError::Runtime(format!("write csv: {e}")))?;
    Ok(csv_path)
}
