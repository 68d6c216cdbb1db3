//! Closed-loop rollout strategies: closest-among-top-K selection, top-K
//! sampling, deterministic argmax, policy-free noisy tokenization and
//! trajectory perturbation, distance-based filtering/sampling over rollouts,
//! and the GMM mode-selection analogues.

use crate::policy::{encode, forward_categorical, forward_gmm, GmmOutput, PolicyModel};
use crate::scenario::Scenario;
use crate::vocabulary::{local_delta, nearest_token, TokenVocabulary};
use crate::world::{apply_token, state_distance, ActionToken, AgentState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Sampling knobs shared by the rollout strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Training-time selection width (closest-among-top-K, candidate sets).
    pub k: usize,
    /// Inference-time top-K truncation.
    pub k_infer: usize,
    /// Temperature for softmax / negative-distance sampling.
    pub tau: f64,
    /// Final-state distance threshold for the filter strategy, meters.
    pub distance_threshold: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 16,
            k_infer: 16,
            tau: 1.0,
            distance_threshold: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyTag {
    Catk,
    Deterministic,
    TopkSample,
    Trajeglish,
    Smart,
    GmmCatk,
    GmmDeterministic,
    GmmSample,
}

/// How a noised-tokenization candidate is drawn from the K closest tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleRule {
    /// Probability proportional to exp(-distance / tau).
    NegDist,
    /// Uniform over the candidate set.
    Uniform,
}

/// Training targets recorded along a rollout: recovery token indices for the
/// categorical policy, continuous local-frame deltas for the GMM policy.
#[derive(Debug, Clone, PartialEq)]
pub enum RolloutTargets {
    Indices(Vec<Vec<usize>>),
    Deltas(Vec<Vec<ActionToken>>),
}

impl RolloutTargets {
    pub fn len_for_agent(&self, i: usize) -> usize {
        match self {
            RolloutTargets::Indices(v) => v[i].len(),
            RolloutTargets::Deltas(v) => v[i].len(),
        }
    }
}

/// One closed-loop rollout: visited states (starting at the GT state where
/// history ends), chosen actions, recovery targets, and the probability the
/// acting distribution assigned to each chosen action.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub states: Vec<Vec<AgentState>>,
    pub chosen: Vec<Vec<usize>>,
    pub targets: RolloutTargets,
    pub probs_at_chosen: Vec<Vec<f64>>,
    pub strategy: StrategyTag,
    pub seed: u64,
}

impl RolloutRecord {
    pub fn n_agents(&self) -> usize {
        self.states.len()
    }

    pub fn n_steps(&self) -> usize {
        self.chosen.first().map_or(0, |c| c.len())
    }
}

/// Indices of the K largest probabilities, descending, with equal values
/// ordered by lower index first.
pub fn topk_indices(probs: &[f64], k: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= probs.len(), "K must be in 1..=|V|");
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap()
            .then_with(|| a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Closest-among-top-K: among the K most probable tokens, the one whose
/// successor state lies closest to the GT next state. Distance ties resolve
/// to the higher-probability candidate, then the lower index.
pub fn catk_select(
    probs: &[f64],
    state: &AgentState,
    gt_next: &AgentState,
    vocab: &TokenVocabulary,
    k: usize,
    w_yaw: f64,
) -> usize {
    let candidates = topk_indices(probs, k);
    let mut best = candidates[0];
    let mut best_d = f64::INFINITY;
    for c in candidates {
        let d = state_distance(&apply_token(state, vocab.token(c)), gt_next, w_yaw);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Among the K highest-weight modes, the one whose mean-advanced state lies
/// closest to the GT next state. Returns the mode index and its mean action.
pub fn catk_select_gmm(
    out: &GmmOutput,
    state: &AgentState,
    gt_next: &AgentState,
    k: usize,
    w_yaw: f64,
) -> (usize, ActionToken) {
    let candidates = topk_indices(&out.weights, k);
    let mut best = candidates[0];
    let mut best_d = f64::INFINITY;
    for m in candidates {
        let d = state_distance(&apply_token(state, out.means[m]), gt_next, w_yaw);
        if d < best_d {
            best_d = d;
            best = m;
        }
    }
    (best, out.means[best])
}

/// Shared closed-loop driver for the policy-backed token strategies. The
/// selector sees the per-step categorical output, the current rollout state,
/// and the GT next state; all agents advance on the shared step states.
fn rollout_policy_tokens<S>(
    model: &PolicyModel,
    scenario: &Scenario,
    vocab: &TokenVocabulary,
    w_yaw: f64,
    tag: StrategyTag,
    seed: u64,
    mut select: S,
) -> RolloutRecord
where
    S: FnMut(&mut ChaCha8Rng, &crate::policy::CategoricalOutput, &AgentState, &AgentState) -> usize,
{
    let h = scenario.history_len;
    let t_total = scenario.horizon();
    let steps = t_total - h;
    let n = scenario.n_agents();
    let period = vocab.replanning_period();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut timelines: Vec<Vec<AgentState>> = (0..n)
        .map(|i| (0..=h).map(|t| scenario.agents[i].state(t)).collect())
        .collect();
    let mut chosen = vec![Vec::with_capacity(steps); n];
    let mut targets = vec![Vec::with_capacity(steps); n];
    let mut probs_at = vec![Vec::with_capacity(steps); n];

    for step in 0..steps {
        let t_now = h + step;
        let current: Vec<AgentState> = timelines.iter().map(|tl| *tl.last().unwrap()).collect();
        for i in 0..n {
            let history = &timelines[i][step..=step + h];
            let neighbors: Vec<AgentState> = current
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, s)| *s)
                .collect();
            let features = encode(history, &neighbors, &scenario.map, period);
            let out = forward_categorical(model, &features);
            let cur = current[i];
            let gt_next = scenario.agents[i].state(t_now + 1);
            let c = select(&mut rng, &out, &cur, &gt_next);
            chosen[i].push(c);
            probs_at[i].push(out.probs[c]);
            targets[i].push(nearest_token(&cur, &gt_next, vocab, w_yaw));
            timelines[i].push(apply_token(&cur, vocab.token(c)));
        }
    }

    RolloutRecord {
        states: timelines.into_iter().map(|tl| tl[h..].to_vec()).collect(),
        chosen,
        targets: RolloutTargets::Indices(targets),
        probs_at_chosen: probs_at,
        strategy: tag,
        seed,
    }
}

/// Deterministic closest-among-top-K rollout with recovery targets.
pub fn rollout_catk(
    model: &PolicyModel,
    scenario: &Scenario,
    vocab: &TokenVocabulary,
    k: usize,
    w_yaw: f64,
) -> RolloutRecord {
    rollout_policy_tokens(
        model,
        scenario,
        vocab,
        w_yaw,
        StrategyTag::Catk,
        0,
        |_, out, cur, gt_next| catk_select(&out.probs, cur, gt_next, vocab, k, w_yaw),
    )
}

/// Per-step argmax rollout (ties to the lowest index).
pub fn rollout_deterministic(
    model: &PolicyModel,
    scenario: &Scenario,
    vocab: &TokenVocabulary,
    w_yaw: f64,
) -> RolloutRecord {
    rollout_policy_tokens(
        model,
        scenario,
        vocab,
        w_yaw,
        StrategyTag::Deterministic,
        0,
        |_, out, _, _| topk_indices(&out.probs, 1)[0],
    )
}

/// Top-K sampling rollout: restrict to the K_infer most probable tokens,
/// renormalize softmax(logits / tau) over them, and sample with the seeded
/// generator. Targets are still the recovery indices toward GT.
pub fn rollout_sample(
    model: &PolicyModel,
    scenario: &Scenario,
    vocab: &TokenVocabulary,
    k_infer: usize,
    tau: f64,
    seed: u64,
    w_yaw: f64,
) -> RolloutRecord {
    assert!(tau > 0.0, "temperature must be positive");
    rollout_policy_tokens(
        model,
        scenario,
        vocab,
        w_yaw,
        StrategyTag::TopkSample,
        seed,
        |rng, out, _, _| {
            let candidates = topk_indices(&out.probs, k_infer);
            let max_logit = candidates
                .iter()
                .map(|&c| out.logits[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = candidates
                .iter()
                .map(|&c| ((out.logits[c] - max_logit) / tau).exp())
                .collect();
            candidates[weighted_pick(rng, &weights)]
        },
    )
}

fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= *w;
    }
    weights.len() - 1
}

/// How a perturbed tokenization supervises each step.
enum TargetRule {
    /// Recovery index toward GT (the closest token over the full vocabulary).
    Recovery,
    /// The perturbed sequence's own next chosen token; the final step drops
    /// out of the training set.
    NextChosen,
}

/// Shared driver for the policy-free perturbed tokenizations: per step the
/// candidate set is the K tokens whose successor states lie closest to the GT
/// next state, one of which is sampled by the rule.
fn rollout_perturbed(
    scenario: &Scenario,
    vocab: &TokenVocabulary,
    k: usize,
    rule: SampleRule,
    tau: f64,
    seed: u64,
    w_yaw: f64,
    tag: StrategyTag,
    target_rule: TargetRule,
) -> RolloutRecord {
    assert!(k >= 1 && k <= vocab.len());
    if rule == SampleRule::NegDist {
        assert!(tau > 0.0, "temperature must be positive");
    }
    let h = scenario.history_len;
    let steps = scenario.horizon() - h;
    let n = scenario.n_agents();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut states: Vec<Vec<AgentState>> = (0..n)
        .map(|i| vec![scenario.agents[i].state(h)])
        .collect();
    let mut chosen = vec![Vec::with_capacity(steps); n];
    let mut targets: Vec<Vec<usize>> = vec![Vec::with_capacity(steps); n];
    let mut probs_at = vec![Vec::with_capacity(steps); n];

    for step in 0..steps {
        let t_now = h + step;
        for i in 0..n {
            let cur = *states[i].last().unwrap();
            let gt_next = scenario.agents[i].state(t_now + 1);
            let mut dists: Vec<(f64, usize)> = vocab
                .tokens()
                .iter()
                .enumerate()
                .map(|(c, tok)| (state_distance(&apply_token(&cur, *tok), &gt_next, w_yaw), c))
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
            let candidates = &dists[..k];
            let (pick, q) = match rule {
                SampleRule::Uniform => {
                    let j = rng.random_range(0..k);
                    (candidates[j].1, 1.0 / k as f64)
                }
                SampleRule::NegDist => {
                    let d0 = candidates[0].0;
                    let weights: Vec<f64> = candidates
                        .iter()
                        .map(|(d, _)| (-(d - d0) / tau).exp())
                        .collect();
                    let total: f64 = weights.iter().sum();
                    let j = weighted_pick(&mut rng, &weights);
                    (candidates[j].1, weights[j] / total)
                }
            };
            chosen[i].push(pick);
            probs_at[i].push(q);
            if let TargetRule::Recovery = target_rule {
                targets[i].push(candidates[0].1);
            }
            states[i].push(apply_token(&cur, vocab.token(pick)));
        }
    }

    if let TargetRule::NextChosen = target_rule {
        for i in 0..n {
            targets[i] = chosen[i][1..].to_vec();
        }
    }

    RolloutRecord {
        states,
        chosen,
        targets: RolloutTargets::Indices(targets),
        probs_at_chosen: probs_at,
        strategy: tag,
        seed,
    }
}

/// Policy-free noisy tokenization: candidates are the K closest tokens to the
/// GT next state, sampled ~ exp(-d/tau) or uniformly; targets are recovery
/// indices toward GT.
pub fn noisy_tokenize_trajeglish(
    scenario: &Scenario,
    vocab: &TokenVocabulary,
    k: usize,
    tau: f64,
    rule: SampleRule,
    seed: u64,
    w_yaw: f64,
) -> RolloutRecord {
    rollout_perturbed(
        scenario,
        vocab,
        k,
        rule,
        tau,
        seed,
        w_yaw,
        StrategyTag::Trajeglish,
        TargetRule::Recovery,
    )
}

/// Policy-free trajectory perturbation: same candidate mechanism, but each
/// training target is the perturbed sequence's own next chosen token, and the
/// final step is dropped from the training set.
pub fn perturb_smart(
    scenario: &Scenario,
    vocab: &TokenVocabulary,
    k: usize,
    rule: SampleRule,
    tau: f64,
    seed: u64,
    w_yaw: f64,
) -> RolloutRecord {
    rollout_perturbed(
        scenario,
        vocab,
        k,
        rule,
        tau,
        seed,
        w_yaw,
        StrategyTag::Smart,
        TargetRule::NextChosen,
    )
}

/// A rollout with a per-agent keep mask from distance filtering.
#[derive(Debug, Clone)]
pub struct FilteredRecord<'a> {
    pub record: &'a RolloutRecord,
    pub keep: Vec<bool>,
}

/// Keeps, per agent, only rollouts whose final state lies within `threshold`
/// meters (planar) of the GT final state; records with no surviving agent are
/// dropped entirely.
pub fn distance_filter<'a>(
    records: &'a [RolloutRecord],
    scenarios: &[&Scenario],
    threshold: f64,
) -> Vec<FilteredRecord<'a>> {
    assert!(threshold >= 0.0);
    assert_eq!(records.len(), scenarios.len());
    let mut out = Vec::new();
    for (record, scenario) in records.iter().zip(scenarios) {
        let t_final = scenario.horizon();
        let keep: Vec<bool> = (0..record.n_agents())
            .map(|i| {
                let gt_final = scenario.agents[i].state(t_final);
                record.states[i]
                    .last()
                    .unwrap()
                    .planar_distance(&gt_final)
                    <= threshold
            })
            .collect();
        if keep.iter().any(|k| *k) {
            out.push(FilteredRecord { record, keep });
        }
    }
    out
}

/// Mean planar displacement between a rollout's states and the GT segment it
/// covers (times H..=T of the scenario).
pub fn rollout_ade(record: &RolloutRecord, scenario: &Scenario) -> f64 {
    let h = scenario.history_len;
    let mut per_agent = 0.0;
    for (i, states) in record.states.iter().enumerate() {
        let total: f64 = states
            .iter()
            .enumerate()
            .map(|(t, s)| s.planar_distance(&scenario.agents[i].state(h + t)))
            .sum();
        per_agent += total / states.len() as f64;
    }
    per_agent / record.states.len() as f64
}

/// Samples one rollout from the candidates with probability proportional to
/// exp(-ADE_to_GT / tau). Returns the index of the chosen candidate.
pub fn distance_weighted_choice(
    candidates: &[RolloutRecord],
    scenario: &Scenario,
    tau: f64,
    seed: u64,
) -> usize {
    assert!(!candidates.is_empty());
    assert!(tau > 0.0);
    let ades: Vec<f64> = candidates
        .iter()
        .map(|r| rollout_ade(r, scenario))
        .collect();
    let d0 = ades.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = ades.iter().map(|d| (-(d - d0) / tau).exp()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    weighted_pick(&mut rng, &weights)
}

/// Shared driver for the GMM ego rollouts: agent 0 is controlled, the other
/// agents replay their GT states. Targets are the continuous local-frame
/// recovery deltas toward the GT next state.
fn rollout_gmm<S>(
    model: &PolicyModel,
    scenario: &Scenario,
    period: f64,
    tag: StrategyTag,
    seed: u64,
    mut select: S,
) -> RolloutRecord
where
    S: FnMut(&mut ChaCha8Rng, &GmmOutput, &AgentState, &AgentState) -> (usize, ActionToken),
{
    let h = scenario.history_len;
    let steps = scenario.horizon() - h;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut timeline: Vec<AgentState> = (0..=h).map(|t| scenario.agents[0].state(t)).collect();
    let mut chosen = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps);
    let mut probs_at = Vec::with_capacity(steps);

    for step in 0..steps {
        let t_now = h + step;
        let history = &timeline[step..=step + h];
        let neighbors: Vec<AgentState> = (1..scenario.n_agents())
            .map(|j| scenario.agents[j].state(t_now))
            .collect();
        let features = encode(history, &neighbors, &scenario.map, period);
        let out = forward_gmm(model, &features);
        let cur = *timeline.last().unwrap();
        let gt_next = scenario.agents[0].state(t_now + 1);
        let (mode, action) = select(&mut rng, &out, &cur, &gt_next);
        chosen.push(mode);
        probs_at.push(out.weights[mode]);
        targets.push(local_delta(&cur, &gt_next));
        timeline.push(apply_token(&cur, action));
    }

    RolloutRecord {
        states: vec![timeline[h..].to_vec()],
        chosen: vec![chosen],
        targets: RolloutTargets::Deltas(vec![targets]),
        probs_at_chosen: vec![probs_at],
        strategy: tag,
        seed,
    }
}

/// Closest-among-top-K over mixture modes, advancing with the mode mean.
pub fn rollout_gmm_catk(
    model: &PolicyModel,
    scenario: &Scenario,
    period: f64,
    k: usize,
    w_yaw: f64,
) -> RolloutRecord {
    rollout_gmm(
        model,
        scenario,
        period,
        StrategyTag::GmmCatk,
        0,
        |_, out, cur, gt_next| catk_select_gmm(out, cur, gt_next, k, w_yaw),
    )
}

/// Highest-weight mode mean at every step.
pub fn rollout_gmm_deterministic(
    model: &PolicyModel,
    scenario: &Scenario,
    period: f64,
) -> RolloutRecord {
    rollout_gmm(
        model,
        scenario,
        period,
        StrategyTag::GmmDeterministic,
        0,
        |_, out, _, _| {
            let m = topk_indices(&out.weights, 1)[0];
            (m, out.means[m])
        },
    )
}

/// Samples a mode among the top-K_infer weights (softmax of log-weights over
/// tau), then advances with that mode's mean.
pub fn rollout_gmm_sample(
    model: &PolicyModel,
    scenario: &Scenario,
    period: f64,
    k_infer: usize,
    tau: f64,
    seed: u64,
) -> RolloutRecord {
    assert!(tau > 0.0);
    rollout_gmm(
        model,
        scenario,
        period,
        StrategyTag::GmmSample,
        seed,
        |rng, out, _, _| {
            let candidates = topk_indices(&out.weights, k_infer);
            let max_lw = candidates
                .iter()
                .map(|&m| out.weights[m].ln())
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = candidates
                .iter()
                .map(|&m| ((out.weights[m].ln() - max_lw) / tau).exp())
                .collect();
            let m = candidates[weighted_pick(rng, &weights)];
            (m, out.means[m])
        },
    )
}

/// Recomputes the state chain from the chosen token indices and compares it
/// bitwise against the recorded states. Applies to token-strategy records.
pub fn check_dynamics_consistency(record: &RolloutRecord, vocab: &TokenVocabulary) -> bool {
    for (states, chosen) in record.states.iter().zip(&record.chosen) {
        let mut cur = states[0];
        for (t, &c) in chosen.iter().enumerate() {
            cur = apply_token(&cur, vocab.token(c));
            if cur != states[t + 1] {
                return false;
            }
        }
    }
    true
}

#[derive(Serialize, Deserialize)]
struct AgentDump {
    length: f64,
    width: f64,
    states: Vec<[f64; 3]>,
    chosen: Vec<usize>,
    probs_at_chosen: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_indices: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_deltas: Option<Vec<[f64; 3]>>,
}

#[derive(Serialize, Deserialize)]
struct RecordDump {
    strategy: StrategyTag,
    seed: u64,
    agents: Vec<AgentDump>,
}

/// Writes rollout records as JSON-lines for debugging and golden tests.
pub fn dump_records(path: &Path, records: &[RolloutRecord]) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let agents = (0..r.n_agents())
            .map(|i| {
                let s0 = r.states[i][0];
                AgentDump {
                    length: s0.length,
                    width: s0.width,
                    states: r.states[i].iter().map(|s| [s.x, s.y, s.yaw]).collect(),
                    chosen: r.chosen[i].clone(),
                    probs_at_chosen: r.probs_at_chosen[i].clone(),
                    target_indices: match &r.targets {
                        RolloutTargets::Indices(v) => Some(v[i].clone()),
                        _ => None,
                    },
                    target_deltas: match &r.targets {
                        RolloutTargets::Deltas(v) => {
                            Some(v[i].iter().map(|d| [d.dx, d.dy, d.dyaw]).collect())
                        }
                        _ => None,
                    },
                }
            })
            .collect();
        let dump = RecordDump {
            strategy: r.strategy,
            seed: r.seed,
            agents,
        };
        writeln!(w, "{}", serde_json::to_string(&dump).unwrap())?;
    }
    w.flush()
}

/// Reads records written by [`dump_records`].
pub fn load_records(path: &Path) -> std::io::Result<Vec<RolloutRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let dump: RecordDump = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let n = dump.agents.len();
        let deltas = dump.agents.iter().all(|a| a.target_deltas.is_some());
        let mut states = Vec::with_capacity(n);
        let mut chosen = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        let mut tidx = Vec::new();
        let mut tdel = Vec::new();
        for a in dump.agents {
            states.push(
                a.states
                    .iter()
                    .map(|p| AgentState::new(p[0], p[1], p[2], a.length, a.width))
                    .collect(),
            );
            chosen.push(a.chosen);
            probs.push(a.probs_at_chosen);
            if deltas {
                tdel.push(
                    a.target_deltas
                        .unwrap()
                        .iter()
                        .map(|d| ActionToken::new(d[0], d[1], d[2]))
                        .collect(),
                );
            } else {
                tidx.push(a.target_indices.unwrap_or_default());
            }
        }
        out.push(RolloutRecord {
            states,
            chosen,
            targets: if deltas {
                RolloutTargets::Deltas(tdel)
            } else {
                RolloutTargets::Indices(tidx)
            },
            probs_at_chosen: probs,
            strategy: dump.strategy,
            seed: dump.seed,
        });
    }
    Ok(out)
}
