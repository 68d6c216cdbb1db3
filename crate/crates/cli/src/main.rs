//! `catk` command line: scenario generation, vocabulary construction,
//! training, rollout dumps, evaluation, sweeps, and report rebuilding.
//! Exit codes: 0 success, 1 config/usage error, 2 runtime error.

use catk_cli::config::{EvalSpec, ExperimentSpec};
use catk_cli::runner::{
    evaluate_on, run_eval, run_training, split_scenarios, write_eval_report, RunManifest,
};
use catk_cli::{report, sweep, CliError};
use catk_core::policy::load_checkpoint;
use catk_core::rollout::{
    dump_records, noisy_tokenize_trajeglish, perturb_smart, rollout_catk, rollout_deterministic,
    rollout_gmm_catk, rollout_gmm_deterministic, rollout_sample, SampleRule, SamplerConfig,
};
use catk_core::scenario::{generate_fork_world, load_scenarios, save_scenarios};
use catk_core::training::{Strategy, TrainConfig};
use catk_core::vocabulary::{build_vocabulary, TokenVocabulary};
use catk_core::world::DEFAULT_W_YAW;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "catk", version, about = "Closed-loop fine-tuning lab for tokenized driving policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate fork-world scenarios to a JSON-lines file.
    GenScenarios(GenScenariosArgs),
    /// Build an action-token vocabulary from scenario trajectories.
    BuildVocab(BuildVocabArgs),
    /// Pre-train a policy open-loop; writes a run directory.
    Pretrain(TrainArgs),
    /// Fine-tune a pre-trained policy closed-loop; writes a run directory.
    Finetune(TrainArgs),
    /// Roll out a model on scenarios and dump the records as JSON-lines.
    Rollout(RolloutArgs),
    /// Evaluate a run directory (or explicit model) on the held-out split.
    Eval(EvalArgs),
    /// Run an experiment spec: strategy ablation, or a K / k_infer sweep.
    Sweep(SweepArgs),
    /// Rebuild a merged results table from run directories on disk.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenScenariosArgs {
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    agents: usize,
    /// Three comma-separated branch probabilities (left,straight,right).
    #[arg(long, default_value = "0.3333333333333333,0.3333333333333333,0.3333333333333334")]
    branch_probs: String,
    #[arg(long, default_value_t = 0.15)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.5)]
    period: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Initial checkpoint (required for finetune).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Resume from a mid-run checkpoint with optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "categorical")]
    kind: String,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 16)]
    modes: usize,
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    #[arg(long, default_value = "bc")]
    strategy: String,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_scenarios: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    lr_floor: f64,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 2.0)]
    distance_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_W_YAW)]
    w_yaw: f64,
    #[arg(long)]
    min_speed_filter: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    holdout_count: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    holdout_frac: f64,
    /// Save a checkpoint with optimizer state every N epochs.
    #[arg(long)]
    checkpoint_interval: Option<usize>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "catk")]
    strategy: String,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_W_YAW)]
    w_yaw: f64,
    /// Roll out at most this many scenarios.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding run.toml and model_final.bin.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    scenarios: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    rollouts: usize,
    #[arg(long, default_value_t = 16)]
    k_infer: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_W_YAW)]
    w_yaw: f64,
    #[arg(long)]
    holdout_count: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    holdout_frac: f64,
    /// Where to write the report files (defaults to the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment spec TOML.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sweep parameter: "K" (fine-tuning selection width) or "k_infer".
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated values for --param.
    #[arg(long)]
    values: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing run directories.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with exit 0; usage errors
            // go to stderr with exit 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn parse_probs(text: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("bad branch probabilities {text:?}: {e}")))?;
    if parts.len() != 3 {
        return Err(CliError::Config(
            "branch probabilities need exactly 3 values".into(),
        ));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn parse_values(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| CliError::Config(format!("bad sweep value {p:?}: {e}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenScenarios(a) => {
            let probs = parse_probs(&a.branch_probs)?;
            let scenarios = generate_fork_world(a.n, a.agents, probs, a.noise_std, a.seed)
                .map_err(|e| CliError::Config(e.to_string()))?;
            save_scenarios(&a.out, &scenarios)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("wrote {} scenarios to {}", scenarios.len(), a.out.display());
            Ok(())
        }
        Command::BuildVocab(a) => {
            let scenarios =
                load_scenarios(&a.scenarios).map_err(|e| CliError::Config(e.to_string()))?;
            let trajs = catk_cli::runner::gt_trajectories(&scenarios);
            let vocab = build_vocabulary(&trajs, a.size, a.period, a.seed)
                .map_err(|e| CliError::Config(e.to_string()))?;
            vocab
                .save(&a.out)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("wrote {}-token vocabulary to {}", vocab.len(), a.out.display());
            Ok(())
        }
        Command::Pretrain(a) => train_command(a, true),
        Command::Finetune(a) => train_command(a, false),
        Command::Rollout(a) => rollout_command(a),
        Command::Eval(a) => eval_command(a),
        Command::Sweep(a) => sweep_command(a),
        Command::Report(a) => {
            let table = report::rebuild_table(&a.dir)?;
            match a.out {
                Some(path) => std::fs::write(&path, &table)
                    .map_err(|e| CliError::Runtime(format!("write report: {e}")))?,
                None => print!("{table}"),
            }
            Ok(())
        }
    }
}

fn train_command(a: TrainArgs, pretrain: bool) -> Result<(), CliError> {
    if !pretrain && a.model.is_none() && a.resume.is_none() {
        return Err(CliError::Config(
            "finetune needs --model (base checkpoint) or --resume".into(),
        ));
    }
    let strategy: Strategy = if pretrain {
        Strategy::Bc
    } else {
        a.strategy
            .parse()
            .map_err(CliError::Config)?
    };
    let manifest = RunManifest {
        scenarios: a.scenarios.clone(),
        vocab: a.vocab.clone(),
        model_kind: a.kind.clone(),
        hidden: a.hidden,
        modes: a.modes,
        sigma: a.sigma,
        init_model: if pretrain { None } else { a.model.clone() },
        holdout_count: a.holdout_count,
        holdout_frac: Some(a.holdout_frac),
        train: TrainConfig {
            epochs: a.epochs,
            batch_scenarios: a.batch_scenarios,
            learning_rate: a.lr,
            lr_floor_frac: a.lr_floor,
            strategy,
            sampler: SamplerConfig {
                k: a.k,
                k_infer: a.k,
                tau: a.tau,
                distance_threshold: a.distance_threshold,
            },
            seed: a.seed,
            w_yaw: a.w_yaw,
            min_speed_filter: a.min_speed_filter,
        },
    };
    let outcome = run_training(&a.out, &manifest, a.checkpoint_interval, a.resume.as_deref())?;
    let last = outcome.trace.last();
    println!(
        "trained {} epochs; final loss {}",
        outcome.trace.len(),
        last.map_or(f64::NAN, |t| t.loss)
    );
    Ok(())
}

fn rollout_command(a: RolloutArgs) -> Result<(), CliError> {
    let scenarios = load_scenarios(&a.scenarios).map_err(|e| CliError::Config(e.to_string()))?;
    let vocab = TokenVocabulary::load(&a.vocab).map_err(|e| CliError::Config(e.to_string()))?;
    let ckpt = load_checkpoint(&a.model).map_err(|e| CliError::Config(e.to_string()))?;
    let model = ckpt.model;
    let limit = a.limit.unwrap_or(scenarios.len()).min(scenarios.len());
    let is_gmm = matches!(model.kind, catk_core::policy::PolicyKind::Gmm { .. });
    let mut records = Vec::with_capacity(limit);
    for (i, scenario) in scenarios.iter().take(limit).enumerate() {
        let seed = a.seed.wrapping_add(i as u64);
        let record = if is_gmm {
            match a.strategy.as_str() {
                "catk" => rollout_gmm_catk(&model, scenario, vocab.replanning_period(), a.k, a.w_yaw),
                "deterministic" => {
                    rollout_gmm_deterministic(&model, scenario, vocab.replanning_period())
                }
                other => {
                    return Err(CliError::Config(format!(
                        "strategy {other:?} not available for GMM rollout"
                    )))
                }
            }
        } else {
            match a.strategy.as_str() {
                "catk" => rollout_catk(&model, scenario, &vocab, a.k, a.w_yaw),
                "deterministic" => rollout_deterministic(&model, scenario, &vocab, a.w_yaw),
                "topk_sample" => {
                    rollout_sample(&model, scenario, &vocab, a.k, a.tau, seed, a.w_yaw)
                }
                "trajeglish" => noisy_tokenize_trajeglish(
                    scenario,
                    &vocab,
                    a.k,
                    a.tau,
                    SampleRule::NegDist,
                    seed,
                    a.w_yaw,
                ),
                "smart" => perturb_smart(
                    scenario,
                    &vocab,
                    a.k,
                    SampleRule::Uniform,
                    a.tau,
                    seed,
                    a.w_yaw,
                ),
                other => return Err(CliError::Config(format!("unknown strategy {other:?}"))),
            }
        };
        records.push(record);
    }
    dump_records(&a.out, &records).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("dumped {} rollout records to {}", records.len(), a.out.display());
    Ok(())
}

fn eval_command(a: EvalArgs) -> Result<(), CliError> {
    let eval = EvalSpec {
        rollouts: a.rollouts,
        k_infer: a.k_infer,
        tau: a.tau,
        seed: a.seed,
        w_yaw: a.w_yaw,
    };
    if let Some(run_dir) = &a.run_dir {
        let report = run_eval(run_dir, &eval)?;
        println!("{}", report.to_csv());
        return Ok(());
    }
    let (model_path, scen_path, vocab_path) = match (&a.model, &a.scenarios, &a.vocab) {
        (Some(m), Some(s), Some(v)) => (m, s, v),
        _ => {
            return Err(CliError::Config(
                "eval needs --run-dir, or all of --model/--scenarios/--vocab".into(),
            ))
        }
    };
    let scenarios = load_scenarios(scen_path).map_err(|e| CliError::Config(e.to_string()))?;
    let (_, holdout) = split_scenarios(scenarios, a.holdout_count, Some(a.holdout_frac));
    let vocab = TokenVocabulary::load(vocab_path).map_err(|e| CliError::Config(e.to_string()))?;
    let ckpt = load_checkpoint(model_path).map_err(|e| CliError::Config(e.to_string()))?;
    let report = evaluate_on(&ckpt.model, &holdout, &vocab, &eval);
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_eval_report(out, &report)?;
    }
    println!("{}", report.to_csv());
    Ok(())
}

fn sweep_command(a: SweepArgs) -> Result<(), CliError> {
    let spec = ExperimentSpec::load(&a.spec)?;
    let spec_text = std::fs::read_to_string(&a.spec)
        .map_err(|e| CliError::Config(format!("read spec: {e}")))?;
    let csv_path = match (&a.param, &a.values) {
        (None, None) => sweep::run_ablation(&spec, &spec_text, &a.out)?,
        (Some(param), Some(values)) => {
            let values = parse_values(values)?;
            match param.as_str() {
                "K" | "k" => sweep::run_k_sweep(&spec, &spec_text, &a.out, &values)?,
                "k_infer" | "K_infer" => {
                    sweep::run_k_infer_sweep(&spec, &spec_text, &a.out, &values)?
                }
                other => {
                    return Err(CliError::Config(format!(
                        "unknown sweep parameter {other:?} (expected K or k_infer)"
                    )))
                }
            }
        }
        _ => {
            return Err(CliError::Config(
                "--param and --values must be given together".into(),
            ))
        }
    };
    println!("wrote {}", csv_path.display());
    Ok(())
}
