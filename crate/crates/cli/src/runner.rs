//! Run-directory pipeline: every artifact a stage produces lands under its
//! run directory — a config snapshot, the per-epoch metrics CSV, interval
//! checkpoints, the final model, and evaluation reports.

use crate::config::{EvalSpec, ExperimentSpec};
use crate::CliError;
use catk_core::metrics::{evaluate_categorical, evaluate_gmm, EvalConfig, EvalReport};
use catk_core::policy::{
    load_checkpoint, save_checkpoint, Checkpoint, PolicyKind, PolicyModel, TrainState,
};
use catk_core::scenario::{
    generate_fork_world, load_scenarios, save_scenarios, split_holdout, split_holdout_frac,
    Scenario, HISTORY_STEPS,
};
use catk_core::training::{
    finetune_closed_loop_until, finetune_gmm_until, pretrain_bc_until, EpochTrace, TrainConfig,
    TrainOutcome,
};
use catk_core::vocabulary::{build_vocabulary, TokenVocabulary};
use catk_core::world::AgentState;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_MODEL_FILE: &str = "model_final.bin";
pub const RUN_MANIFEST_FILE: &str = "run.toml";
pub const EVAL_JSON_FILE: &str = "eval_report.json";
pub const EVAL_CSV_FILE: &str = "eval_report.csv";

/// Inputs and knobs of one training run, snapshotted verbatim into the run
/// directory so `eval` and `report` can rebuild everything from disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenarios: PathBuf,
    pub vocab: PathBuf,
    pub model_kind: String,
    pub hidden: usize,
    #[serde(default)]
    pub modes: usize,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub init_model: Option<PathBuf>,
    #[serde(default)]
    pub holdout_count: Option<usize>,
    #[serde(default)]
    pub holdout_frac: Option<f64>,
    pub train: TrainConfig,
}

impl RunManifest {
    pub fn save(&self, run_dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("serialize manifest: {e}")))?;
        std::fs::write(run_dir.join(RUN_MANIFEST_FILE), text)
            .map_err(|e| CliError::Runtime(format!("write manifest: {e}")))?;
        Ok(())
    }

    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join(RUN_MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("bad manifest: {e}")))
    }
}

pub fn write_metrics_csv(run_dir: &Path, trace: &[EpochTrace]) -> Result<(), CliError> {
    let mut out = String::from("# catk-metrics v1\nepoch,loss,ade_rollout_gt\n");
    for row in trace {
        out.push_str(&format!("{},{},{}\n", row.epoch, row.loss, row.ade_rollout_gt));
    }
    std::fs::write(run_dir.join(METRICS_FILE), out)
        .map_err(|e| CliError::Runtime(format!("write metrics: {e}")))
}

/// Splits scenarios into (train, holdout) per the manifest fields.
pub fn split_scenarios(
    scenarios: Vec<Scenario>,
    holdout_count: Option<usize>,
    holdout_frac: Option<f64>,
) -> (Vec<Scenario>, Vec<Scenario>) {
    match holdout_count {
        Some(n) => split_holdout(scenarios, n),
        None => split_holdout_frac(scenarios, holdout_frac.unwrap_or(0.1)),
    }
}

pub fn gt_trajectories(scenarios: &[Scenario]) -> Vec<Vec<AgentState>> {
    scenarios
        .iter()
        .flat_map(|s| (0..s.n_agents()).map(|i| s.agents[i].states()))
        .collect()
}

pub fn new_model_for(manifest: &RunManifest, vocab: &TokenVocabulary, seed: u64) -> PolicyModel {
    let f = catk_core::policy::feature_dim(HISTORY_STEPS);
    match manifest.model_kind.as_str() {
        "gmm" => PolicyModel::new_gmm(f, manifest.hidden, manifest.modes, manifest.sigma, seed),
        _ => PolicyModel::new_categorical(f, manifest.hidden, vocab.len(), seed),
    }
}

/// Trains per the manifest (pretrain when `init_model` is none, fine-tune
/// otherwise), writing interval checkpoints every `checkpoint_interval`
/// epochs, the final model, and the metrics CSV.
pub fn run_training(
    run_dir: &Path,
    manifest: &RunManifest,
    checkpoint_interval: Option<usize>,
    resume: Option<&Path>,
) -> Result<TrainOutcome, CliError> {
    std::fs::create_dir_all(run_dir)
        .map_err(|e| CliError::Runtime(format!("create run dir: {e}")))?;
    let scenarios = load_scenarios(&manifest.scenarios)
        .map_err(|e| CliError::Config(format!("load scenarios: {e}")))?;
    let (train, _) = split_scenarios(scenarios, manifest.holdout_count, manifest.holdout_frac);
    let vocab = TokenVocabulary::load(&manifest.vocab)
        .map_err(|e| CliError::Config(format!("load vocabulary: {e}")))?;

    let (mut model, mut state): (PolicyModel, Option<TrainState>) = match (&manifest.init_model, resume)
    {
        (_, Some(ckpt_path)) => {
            let ckpt = load_checkpoint(ckpt_path)
                .map_err(|e| CliError::Config(format!("load resume checkpoint: {e}")))?;
            (ckpt.model, ckpt.train_state)
        }
        (Some(init), None) => {
            let ckpt = load_checkpoint(init)
                .map_err(|e| CliError::Config(format!("load init model: {e}")))?;
            (ckpt.model, None)
        }
        (None, None) => (new_model_for(manifest, &vocab, manifest.train.seed), None),
    };

    manifest.save(run_dir)?;
    let ckpt_dir = run_dir.join("checkpoints");
    let interval = checkpoint_interval.unwrap_or(0);
    if interval > 0 {
        std::fs::create_dir_all(&ckpt_dir)
            .map_err(|e| CliError::Runtime(format!("create checkpoints dir: {e}")))?;
    }

    let is_pretrain = manifest.init_model.is_none();
    let is_gmm = manifest.model_kind == "gmm";
    let cfg = &manifest.train;
    let mut full_trace: Vec<EpochTrace> = Vec::new();
    let mut epoch_done = state.as_ref().map_or(0, |s| s.next_epoch as usize);
    loop {
        let stop = if interval > 0 {
            Some((epoch_done + interval).min(cfg.epochs))
        } else {
            None
        };
        let outcome = run_stage(is_pretrain, is_gmm, &model, &train, &vocab, cfg, state.as_ref(), stop)
            .map_err(|e| CliError::Runtime(format!("training failed: {e}")))?;
        model = outcome.model;
        state = Some(outcome.state);
        full_trace.extend_from_slice(&outcome.trace);
        epoch_done = state.as_ref().unwrap().next_epoch as usize;
        if interval > 0 && epoch_done < cfg.epochs {
            save_checkpoint(
                &ckpt_dir.join(format!("epoch_{epoch_done:04}.bin")),
                &Checkpoint {
                    model: model.clone(),
                    train_state: state.clone(),
                },
            )
            .map_err(|e| CliError::Runtime(format!("write checkpoint: {e}")))?;
        }
        if epoch_done >= cfg.epochs {
            break;
        }
    }

    save_checkpoint(
        &run_dir.join(FINAL_MODEL_FILE),
        &Checkpoint {
            model: model.clone(),
            train_state: state.clone(),
        },
    )
    .map_err(|e| CliError::Runtime(format!("write final model: {e}")))?;
    write_metrics_csv(run_dir, &full_trace)?;
    Ok(TrainOutcome {
        model,
        state: state.unwrap(),
        trace: full_trace,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    is_pretrain: bool,
    is_gmm: bool,
    model: &PolicyModel,
    train: &[Scenario],
    vocab: &TokenVocabulary,
    cfg: &TrainConfig,
    state: Option<&TrainState>,
    stop: Option<usize>,
) -> Result<TrainOutcome, catk_core::training::TrainError> {
    if is_pretrain {
        pretrain_bc_until(model, train, vocab, cfg, state, stop)
    } else if is_gmm {
        finetune_gmm_until(model, train, vocab.replanning_period(), cfg, state, stop)
    } else {
        finetune_closed_loop_until(model, train, vocab, cfg, state, stop)
    }
}

/// Evaluates a model on the held-out split and writes the report files.
pub fn run_eval(run_dir: &Path, eval: &EvalSpec) -> Result<EvalReport, CliError> {
    let manifest = RunManifest::load(run_dir)?;
    let scenarios = load_scenarios(&manifest.scenarios)
        .map_err(|e| CliError::Config(format!("load scenarios: {e}")))?;
    let (_, holdout) = split_scenarios(scenarios, manifest.holdout_count, manifest.holdout_frac);
    let vocab = TokenVocabulary::load(&manifest.vocab)
        .map_err(|e| CliError::Config(format!("load vocabulary: {e}")))?;
    let ckpt = load_checkpoint(&run_dir.join(FINAL_MODEL_FILE))
        .map_err(|e| CliError::Config(format!("load model: {e}")))?;
    let report = evaluate_on(&ckpt.model, &holdout, &vocab, eval);
    write_eval_report(run_dir, &report)?;
    Ok(report)
}

pub fn evaluate_on(
    model: &PolicyModel,
    holdout: &[Scenario],
    vocab: &TokenVocabulary,
    eval: &EvalSpec,
) -> EvalReport {
    let cfg = EvalConfig {
        n_rollouts: eval.rollouts,
        k_infer: eval.k_infer,
        tau: eval.tau,
        seed: eval.seed,
        w_yaw: eval.w_yaw,
    };
    match model.kind {
        PolicyKind::Gmm { .. } => evaluate_gmm(model, holdout, vocab.replanning_period(), &cfg),
        PolicyKind::Categorical { .. } => evaluate_categorical(model, holdout, vocab, &cfg),
    }
}

pub fn write_eval_report(run_dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    std::fs::write(run_dir.join(EVAL_CSV_FILE), report.to_csv())
        .map_err(|e| CliError::Runtime(format!("write eval csv: {e}")))?;
    std::fs::write(run_dir.join(EVAL_JSON_FILE), report.to_pretty_json())
        .map_err(|e| CliError::Runtime(format!("write eval json: {e}")))?;
    Ok(())
}

/// Materializes the spec's scenario set and vocabulary under `out_dir`
/// (generating or copying), returning their paths plus the splits.
pub fn prepare_inputs(
    spec: &ExperimentSpec,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf, Vec<Scenario>, Vec<Scenario>), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("create out dir: {e}")))?;
    let scen_path = out_dir.join("scenarios.jsonl");
    let scenarios = match &spec.scenario.file {
        Some(f) => {
            let s = load_scenarios(f)
                .map_err(|e| CliError::Config(format!("load scenarios: {e}")))?;
            save_scenarios(&scen_path, &s)
                .map_err(|e| CliError::Runtime(format!("copy scenarios: {e}")))?;
            s
        }
        None => {
            let s = generate_fork_world(
                spec.scenario.n_scenarios,
                spec.scenario.n_agents,
                spec.scenario.branch_probs,
                spec.scenario.noise_std,
                spec.seed,
            )
            .map_err(|e| CliError::Config(format!("generate scenarios: {e}")))?;
            save_scenarios(&scen_path, &s)
                .map_err(|e| CliError::Runtime(format!("write scenarios: {e}")))?;
            s
        }
    };
    let (train, holdout) = split_scenarios(
        scenarios,
        spec.scenario.holdout_count,
        Some(spec.scenario.holdout_frac),
    );

    let vocab_path = out_dir.join("vocab.txt");
    let vocab = match &spec.vocab.file {
        Some(f) => TokenVocabulary::load(f)
            .map_err(|e| CliError::Config(format!("load vocabulary: {e}")))?,
        None => build_vocabulary(
            &gt_trajectories(&train),
            spec.vocab.size,
            spec.vocab.period,
            spec.seed,
        )
        .map_err(|e| CliError::Config(format!("build vocabulary: {e}")))?,
    };
    vocab
        .save(&vocab_path)
        .map_err(|e| CliError::Runtime(format!("write vocabulary: {e}")))?;
    Ok((scen_path, vocab_path, train, holdout))
}
