//! Two-stage training: open-loop pre-training on tokenized (or raw) GT, then
//! closed-loop fine-tuning where rollouts from any strategy supply the states
//! and recovery targets. Single-worker and bit-deterministic given the seed.

use crate::policy::{
    ce_loss_grad, gmm_nll_grad, linear_decay_lr, FeatureVector, PolicyKind, PolicyModel,
    TrainState,
};
use crate::rollout::{
    distance_filter, distance_weighted_choice, noisy_tokenize_trajeglish, perturb_smart,
    rollout_ade, rollout_catk, rollout_deterministic, rollout_gmm_catk,
    rollout_gmm_deterministic, rollout_sample, RolloutRecord, RolloutTargets, SampleRule,
    SamplerConfig, StrategyTag,
};
use crate::scenario::{fnv1a64, Scenario};
use crate::vocabulary::{local_delta, tokenize_trajectory, TokenVocabulary};
use crate::world::{AgentState, DEFAULT_W_YAW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Candidate rollouts drawn per scenario for the distance-based sampling
/// strategy before one is chosen by ADE weighting.
pub const DIST_SAMPLE_CANDIDATES: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Bc,
    Catk,
    TopkSample,
    TopkFilter,
    TopkDistSample,
    Trajeglish,
    Smart,
    Deterministic,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Bc => "bc",
            Strategy::Catk => "catk",
            Strategy::TopkSample => "topk_sample",
            Strategy::TopkFilter => "topk_filter",
            Strategy::TopkDistSample => "topk_distsample",
            Strategy::Trajeglish => "trajeglish",
            Strategy::Smart => "smart",
            Strategy::Deterministic => "deterministic",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bc" => Ok(Strategy::Bc),
            "catk" => Ok(Strategy::Catk),
            "topk_sample" => Ok(Strategy::TopkSample),
            "topk_filter" => Ok(Strategy::TopkFilter),
            "topk_distsample" => Ok(Strategy::TopkDistSample),
            "trajeglish" => Ok(Strategy::Trajeglish),
            "smart" => Ok(Strategy::Smart),
            "deterministic" => Ok(Strategy::Deterministic),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_scenarios: usize,
    pub learning_rate: f64,
    pub lr_floor_frac: f64,
    pub strategy: Strategy,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub w_yaw: f64,
    /// When set, agents whose GT future mean speed falls below this value
    /// contribute no training pairs.
    pub min_speed_filter: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_scenarios: 4,
            learning_rate: 3e-3,
            lr_floor_frac: 0.01,
            strategy: Strategy::Bc,
            sampler: SamplerConfig::default(),
            seed: 0,
            w_yaw: DEFAULT_W_YAW,
            min_speed_filter: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &PolicyModel, vocab_size: Option<usize>) -> Result<(), TrainError> {
        if self.batch_scenarios == 0 {
            return Err(TrainError::Config("batch_scenarios must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if !(self.lr_floor_frac > 0.0 && self.lr_floor_frac <= 1.0) {
            return Err(TrainError::Config("lr_floor_frac must be in (0, 1]".into()));
        }
        let selection_bound = match model.kind {
            PolicyKind::Categorical { vocab_size: v } => {
                if let Some(vs) = vocab_size {
                    if vs != v {
                        return Err(TrainError::Config(format!(
                            "model vocabulary head {v} does not match vocabulary size {vs}"
                        )));
                    }
                }
                v
            }
            PolicyKind::Gmm { n_modes, .. } => n_modes,
        };
        let needs_k = matches!(
            self.strategy,
            Strategy::Catk
                | Strategy::TopkSample
                | Strategy::TopkFilter
                | Strategy::TopkDistSample
                | Strategy::Trajeglish
                | Strategy::Smart
        );
        if needs_k && (self.sampler.k < 1 || self.sampler.k > selection_bound) {
            return Err(TrainError::Config(format!(
                "sampler.k = {} outside 1..={selection_bound}",
                self.sampler.k
            )));
        }
        let needs_tau = matches!(
            self.strategy,
            Strategy::TopkSample | Strategy::TopkFilter | Strategy::TopkDistSample
                | Strategy::Trajeglish
        );
        if needs_tau && !(self.sampler.tau > 0.0) {
            return Err(TrainError::Config("sampler.tau must be > 0".into()));
        }
        if self.strategy == Strategy::TopkFilter && self.sampler.distance_threshold < 0.0 {
            return Err(TrainError::Config(
                "sampler.distance_threshold must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch trace row: mean training loss and mean displacement between the
/// training rollouts and GT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub loss: f64,
    pub ade_rollout_gt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: PolicyModel,
    pub state: TrainState,
    pub trace: Vec<EpochTrace>,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xE70C, epoch as u64]));
    idx.shuffle(&mut rng);
    idx
}

pub(crate) fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ base.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for p in parts {
        h ^= *p;
        h = h.wrapping_mul(0x100_0000_01b3);
        h ^= h >> 31;
    }
    h
}

fn rollout_seed_for(cfg: &TrainConfig, epoch: usize, scenario_id: &str, draw: u64) -> u64 {
    mix_seed(
        cfg.seed,
        &[epoch as u64, fnv1a64(scenario_id.as_bytes()), draw],
    )
}

fn agent_mean_future_speed(scenario: &Scenario, i: usize, period: f64) -> f64 {
    let fut = scenario.gt_future(i);
    let total: f64 = fut.windows(2).map(|w| w[0].planar_distance(&w[1])).sum();
    total / ((fut.len() - 1) as f64 * period)
}

fn agents_in_loss(scenario: &Scenario, cfg: &TrainConfig, period: f64) -> Vec<bool> {
    (0..scenario.n_agents())
        .map(|i| match cfg.min_speed_filter {
            Some(v) => agent_mean_future_speed(scenario, i, period) >= v,
            None => true,
        })
        .collect()
}

/// Feature/target pairs from a token rollout record: features are encoded at
/// the rollout states (GT history prepended for the early windows), neighbors
/// are the other agents' rollout states at the same step.
fn record_pairs_categorical(
    record: &RolloutRecord,
    scenario: &Scenario,
    period: f64,
    keep: Option<&[bool]>,
    in_loss: &[bool],
) -> Vec<(FeatureVector, usize)> {
    let targets = match &record.targets {
        RolloutTargets::Indices(t) => t,
        RolloutTargets::Deltas(_) => unreachable!("categorical pairs need index targets"),
    };
    let h = scenario.history_len;
    let n = record.n_agents();
    let mut timelines: Vec<Vec<AgentState>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut tl: Vec<AgentState> = (0..h).map(|t| scenario.agents[i].state(t)).collect();
        tl.extend_from_slice(&record.states[i]);
        timelines.push(tl);
    }
    // The trajectory-perturbation records store their own next tokens as
    // targets (the chosen sequence shifted by one); the token stored at slot
    // t is the action applied at state t+1, so supervise it there. Recovery
    // targets supervise the state they were computed from.
    let offset = if record.strategy == StrategyTag::Smart { 1 } else { 0 };
    let mut pairs = Vec::new();
    for i in 0..n {
        if keep.map_or(false, |k| !k[i]) || !in_loss[i] {
            continue;
        }
        for (t, &target) in targets[i].iter().enumerate() {
            let t = t + offset;
            let history = &timelines[i][t..=t + h];
            let neighbors: Vec<AgentState> = (0..n)
                .filter(|j| *j != i)
                .map(|j| timelines[j][h + t])
                .collect();
            let features = crate::policy::encode(history, &neighbors, &scenario.map, period);
            pairs.push((features, target));
        }
    }
    pairs
}

/// Pairs for the GMM ego records: continuous recovery deltas, non-ego agents
/// replay GT as neighbors.
fn record_pairs_gmm(
    record: &RolloutRecord,
    scenario: &Scenario,
    period: f64,
) -> Vec<(FeatureVector, crate::world::ActionToken)> {
    let targets = match &record.targets {
        RolloutTargets::Deltas(t) => t,
        RolloutTargets::Indices(_) => unreachable!("gmm pairs need delta targets"),
    };
    let h = scenario.history_len;
    let mut timeline: Vec<AgentState> = (0..h).map(|t| scenario.agents[0].state(t)).collect();
    timeline.extend_from_slice(&record.states[0]);
    let mut pairs = Vec::new();
    for (t, target) in targets[0].iter().enumerate() {
        let history = &timeline[t..=t + h];
        let neighbors: Vec<AgentState> = (1..scenario.n_agents())
            .map(|j| scenario.agents[j].state(h + t))
            .collect();
        let features = crate::policy::encode(history, &neighbors, &scenario.map, period);
        pairs.push((features, *target));
    }
    pairs
}

/// Open-loop pairs for categorical BC: sequential tokenization of the GT
/// future supplies both the teacher states and the target indices.
fn bc_pairs_categorical(
    scenario: &Scenario,
    vocab: &TokenVocabulary,
    cfg: &TrainConfig,
) -> (Vec<(FeatureVector, usize)>, f64) {
    let period = vocab.replanning_period();
    let h = scenario.history_len;
    let n = scenario.n_agents();
    let in_loss = agents_in_loss(scenario, cfg, period);
    let mut timelines = Vec::with_capacity(n);
    let mut all_indices = Vec::with_capacity(n);
    let mut quant = 0.0;
    for i in 0..n {
        let fut = scenario.gt_future(i);
        let (indices, states) = tokenize_trajectory(&fut, vocab, cfg.w_yaw);
        let total: f64 = states
            .iter()
            .zip(&fut)
            .map(|(s, g)| s.planar_distance(g))
            .sum();
        quant += total / fut.len() as f64;
        let mut tl: Vec<AgentState> = (0..h).map(|t| scenario.agents[i].state(t)).collect();
        tl.extend_from_slice(&states);
        timelines.push(tl);
        all_indices.push(indices);
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        if !in_loss[i] {
            continue;
        }
        for (t, &target) in all_indices[i].iter().enumerate() {
            let history = &timelines[i][t..=t + h];
            let neighbors: Vec<AgentState> = (0..n)
                .filter(|j| *j != i)
                .map(|j| timelines[j][h + t])
                .collect();
            let features = crate::policy::encode(history, &neighbors, &scenario.map, period);
            pairs.push((features, target));
        }
    }
    (pairs, quant / n as f64)
}

/// Open-loop pairs for GMM BC: raw GT teacher forcing with continuous deltas.
fn bc_pairs_gmm(
    scenario: &Scenario,
    period: f64,
    cfg: &TrainConfig,
) -> Vec<(FeatureVector, crate::world::ActionToken)> {
    let h = scenario.history_len;
    let t_total = scenario.horizon();
    let in_loss = agents_in_loss(scenario, cfg, period);
    if !in_loss[0] {
        return Vec::new();
    }
    let mut pairs = Vec::new();
    for t in h..t_total {
        let history: Vec<AgentState> = (t - h..=t).map(|k| scenario.agents[0].state(k)).collect();
        let neighbors: Vec<AgentState> = (1..scenario.n_agents())
            .map(|j| scenario.agents[j].state(t))
            .collect();
        let features = crate::policy::encode(&history, &neighbors, &scenario.map, period);
        let cur = scenario.agents[0].state(t);
        let next = scenario.agents[0].state(t + 1);
        pairs.push((features, local_delta(&cur, &next)));
    }
    pairs
}

enum Batch {
    Categorical(Vec<(FeatureVector, usize)>),
    Gmm(Vec<(FeatureVector, crate::world::ActionToken)>),
}

impl Batch {
    fn is_empty(&self) -> bool {
        match self {
            Batch::Categorical(v) => v.is_empty(),
            Batch::Gmm(v) => v.is_empty(),
        }
    }
}

struct EpochStats {
    loss_sum: f64,
    loss_batches: usize,
    ade_sum: f64,
    ade_count: usize,
}

/// The shared epoch/batch/step loop. `make_batch` turns a chunk of scenarios
/// into one training batch and reports the mean rollout-to-GT displacement of
/// the rollouts it generated.
fn run_training<F>(
    model: &PolicyModel,
    scenarios: &[Scenario],
    cfg: &TrainConfig,
    resume: Option<&TrainState>,
    stop_after: Option<usize>,
    mut make_batch: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&PolicyModel, usize, &[usize], &[Scenario]) -> (Batch, f64, usize),
{
    let mut model = model.clone();
    let n = scenarios.len();
    if n == 0 {
        return Err(TrainError::Config("no scenarios".into()));
    }
    let batches_per_epoch = n.div_ceil(cfg.batch_scenarios);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let mut state = match resume {
        Some(s) => s.clone(),
        None => TrainState::fresh(model.params.len()),
    };
    if state.adam_m.len() != model.params.len() {
        return Err(TrainError::Config(
            "resume state does not match model size".into(),
        ));
    }
    let mut adam = state.to_adam();
    let mut trace = Vec::new();
    // The LR schedule always spans cfg.epochs; stop_after only ends this
    // call early so segmented runs resume bit-identically.
    let end_epoch = stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in state.next_epoch as usize..end_epoch {
        let order = epoch_order(n, cfg.seed, epoch);
        let mut stats = EpochStats {
            loss_sum: 0.0,
            loss_batches: 0,
            ade_sum: 0.0,
            ade_count: 0,
        };
        for chunk in order.chunks(cfg.batch_scenarios) {
            let (batch, ade_sum, ade_count) = make_batch(&model, epoch, chunk, scenarios);
            stats.ade_sum += ade_sum;
            stats.ade_count += ade_count;
            if batch.is_empty() {
                continue;
            }
            let lr = linear_decay_lr(
                cfg.learning_rate,
                cfg.lr_floor_frac,
                state.global_step,
                total_steps,
            );
            let (loss, grad) = match &batch {
                Batch::Categorical(pairs) => ce_loss_grad(&model, pairs),
                Batch::Gmm(pairs) => gmm_nll_grad(&model, pairs),
            };
            if !loss.is_finite() {
                return Err(TrainError::Divergence(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            adam.step(&mut model.params, &grad, lr);
            state.global_step += 1;
            stats.loss_sum += loss;
            stats.loss_batches += 1;
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(TrainError::Divergence(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
        trace.push(EpochTrace {
            epoch,
            loss: if stats.loss_batches > 0 {
                stats.loss_sum / stats.loss_batches as f64
            } else {
                f64::NAN
            },
            ade_rollout_gt: if stats.ade_count > 0 {
                stats.ade_sum / stats.ade_count as f64
            } else {
                f64::NAN
            },
        });
        state.next_epoch = epoch as u64 + 1;
    }
    state.adam_m = adam.m;
    state.adam_v = adam.v;
    state.adam_t = adam.t;
    Ok(TrainOutcome {
        model,
        state,
        trace,
    })
}

/// Open-loop pre-training. Categorical models train with cross-entropy on
/// sequentially tokenized GT; GMM models with NLL on raw GT deltas.
pub fn pretrain_bc(
    model: &PolicyModel,
    scenarios: &[Scenario],
    vocab: &TokenVocabulary,
    cfg: &TrainConfig,
    resume: Option<&TrainState>,
) -> Result<TrainOutcome, TrainError> {
    pretrain_bc_until(model, scenarios, vocab, cfg, resume, None)
}

/// [`pretrain_bc`] that stops after `stop_after` epochs while keeping the
/// full-run learning-rate schedule, for interval checkpointing.
pub fn pretrain_bc_until(
    model: &PolicyModel,
    scenarios: &[Scenario],
    vocab: &TokenVocabulary,
    cfg: &TrainConfig,
    resume: Option<&TrainState>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(model, Some(vocab.len()))?;
    match model.kind {
        PolicyKind::Categorical { .. } => {
            // Tokenization is model-independent; cache pairs across epochs.
            let cached: Vec<(Vec<(FeatureVector, usize)>, f64)> = scenarios
                .iter()
                .map(|s| bc_pairs_categorical(s, vocab, cfg))
                .collect();
            run_training(model, scenarios, cfg, resume, stop_after, |_, _, chunk, _| {
                let mut pairs = Vec::new();
                let mut ade_sum = 0.0;
                for &si in chunk {
                    pairs.extend_from_slice(&cached[si].0);
                    ade_sum += cached[si].1;
                }
                (Batch::Categorical(pairs), ade_sum, chunk.len())
            })
        }
        PolicyKind::Gmm { .. } => {
            let period = vocab.replanning_period();
            let cached: Vec<Vec<(FeatureVector, crate::world::ActionToken)>> = scenarios
                .iter()
                .map(|s| bc_pairs_gmm(s, period, cfg))
                .collect();
            run_training(model, scenarios, cfg, resume, stop_after, |_, _, chunk, _| {
                let mut pairs = Vec::new();
                for &si in chunk {
                    pairs.extend_from_slice(&cached[si]);
                }
                (Batch::Gmm(pairs), 0.0, 0)
            })
        }
    }
}

/// Closed-loop supervised fine-tuning of the categorical policy with the
/// configured rollout strategy.
pub fn finetune_closed_loop(
    model: &PolicyModel,
    scenarios: &[Scenario],
    vocab: &TokenVocabulary,
    cfg: &TrainConfig,
    resume: Option<&TrainState>,
) -> Result<TrainOutcome, TrainError> {
    finetune_closed_loop_until(model, scenarios, vocab, cfg, resume, None)
}

/// [`finetune_closed_loop`] with an early-stop epoch for interval checkpoints.
pub fn finetune_closed_loop_until(
    model: &PolicyModel,
    scenarios: &[Scenario],
    vocab: &TokenVocabulary,
    cfg: &TrainConfig,
    resume: Option<&TrainState>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(model, Some(vocab.len()))?;
    if !matches!(model.kind, PolicyKind::Categorical { .. }) {
        return Err(TrainError::Config(
            "finetune_closed_loop requires a categorical model (use finetune_gmm)".into(),
        ));
    }
    if cfg.strategy == Strategy::Bc {
        return pretrain_bc_until(model, scenarios, vocab, cfg, resume, stop_after);
    }
    let period = vocab.replanning_period();
    let s = cfg.sampler;
    let w = cfg.w_yaw;
    let cfg_copy = *cfg;
    run_training(model, scenarios, cfg, resume, stop_after, move |model, epoch, chunk, scenarios| {
        let mut pairs = Vec::new();
        let mut ade_sum = 0.0;
        let mut ade_count = 0;
        for &si in chunk {
            let scenario = &scenarios[si];
            let in_loss = agents_in_loss(scenario, &cfg_copy, period);
            let seed0 = rollout_seed_for(&cfg_copy, epoch, &scenario.id, 0);
            let (record, keep): (RolloutRecord, Option<Vec<bool>>) = match cfg_copy.strategy {
                Strategy::Catk => (rollout_catk(model, scenario, vocab, s.k, w), None),
                Strategy::Deterministic => {
                    (rollout_deterministic(model, scenario, vocab, w), None)
                }
                Strategy::TopkSample => (
                    rollout_sample(model, scenario, vocab, s.k, s.tau, seed0, w),
                    None,
                ),
                Strategy::TopkFilter => {
                    let record = rollout_sample(model, scenario, vocab, s.k, s.tau, seed0, w);
                    let filtered = distance_filter(
                        std::slice::from_ref(&record),
                        &[scenario],
                        s.distance_threshold,
                    );
                    let keep = filtered
                        .first()
                        .map(|f| f.keep.clone())
                        .unwrap_or_else(|| vec![false; record.n_agents()]);
                    (record, Some(keep))
                }
                Strategy::TopkDistSample => {
                    let candidates: Vec<RolloutRecord> = (0..DIST_SAMPLE_CANDIDATES)
                        .map(|j| {
                            rollout_sample(
                                model,
                                scenario,
                                vocab,
                                s.k,
                                s.tau,
                                rollout_seed_for(&cfg_copy, epoch, &scenario.id, 1 + j as u64),
                                w,
                            )
                        })
                        .collect();
                    let pick = distance_weighted_choice(&candidates, scenario, s.tau, seed0);
                    (candidates.into_iter().nth(pick).unwrap(), None)
                }
                // Canonical baseline settings: noisy tokenization samples by
                // negative distance toward GT targets; trajectory perturbation
                // samples uniformly and supervises with its own next token.
                Strategy::Trajeglish => (
                    noisy_tokenize_trajeglish(
                        scenario,
                        vocab,
                        s.k,
                        s.tau,
                        SampleRule::NegDist,
                        seed0,
                        w,
                    ),
                    None,
                ),
                Strategy::Smart => (
                    perturb_smart(scenario, vocab, s.k, SampleRule::Uniform, s.tau, seed0, w),
                    None,
                ),
                Strategy::Bc => unreachable!(),
            };
            ade_sum += rollout_ade(&record, scenario);
            ade_count += 1;
            pairs.extend(record_pairs_categorical(
                &record,
                scenario,
                period,
                keep.as_deref(),
                &in_loss,
            ));
        }
        (Batch::Categorical(pairs), ade_sum, ade_count)
    })
}

/// Closed-loop fine-tuning of the GMM ego policy: closest-among-top-K over
/// modes for the rollout, NLL toward the continuous GT recovery delta.
pub fn finetune_gmm(
    model: &PolicyModel,
    scenarios: &[Scenario],
    period: f64,
    cfg: &TrainConfig,
    resume: Option<&TrainState>,
) -> Result<TrainOutcome, TrainError> {
    finetune_gmm_until(model, scenarios, period, cfg, resume, None)
}

/// [`finetune_gmm`] with an early-stop epoch for interval checkpoints.
pub fn finetune_gmm_until(
    model: &PolicyModel,
    scenarios: &[Scenario],
    period: f64,
    cfg: &TrainConfig,
    resume: Option<&TrainState>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(model, None)?;
    if !matches!(model.kind, PolicyKind::Gmm { .. }) {
        return Err(TrainError::Config("finetune_gmm requires a GMM model".into()));
    }
    let s = cfg.sampler;
    let w = cfg.w_yaw;
    let strategy = cfg.strategy;
    match strategy {
        Strategy::Catk | Strategy::Deterministic => {}
        Strategy::Bc => {
            let cached: Vec<Vec<(FeatureVector, crate::world::ActionToken)>> = scenarios
                .iter()
                .map(|sc| bc_pairs_gmm(sc, period, cfg))
                .collect();
            return run_training(model, scenarios, cfg, resume, stop_after, |_, _, chunk, _| {
                let mut pairs = Vec::new();
                for &si in chunk {
                    pairs.extend_from_slice(&cached[si]);
                }
                (Batch::Gmm(pairs), 0.0, 0)
            });
        }
        other => {
            return Err(TrainError::Config(format!(
                "strategy {other:?} is not defined for the GMM policy"
            )))
        }
    }
    run_training(model, scenarios, cfg, resume, stop_after, move |model, _, chunk, scenarios| {
        let mut pairs = Vec::new();
        let mut ade_sum = 0.0;
        let mut ade_count = 0;
        for &si in chunk {
            let scenario = &scenarios[si];
            let record = match strategy {
                Strategy::Catk => rollout_gmm_catk(model, scenario, period, s.k, w),
                Strategy::Deterministic => rollout_gmm_deterministic(model, scenario, period),
                _ => unreachable!(),
            };
            ade_sum += rollout_ade(&record, scenario);
            ade_count += 1;
            pairs.extend(record_pairs_gmm(&record, scenario, period));
        }
        (Batch::Gmm(pairs), ade_sum, ade_count)
    })
}
