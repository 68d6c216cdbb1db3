//! Closed-loop evaluation: displacement errors, collision and off-road rates,
//! and simplified realism scores as per-feature histogram divergences.

use crate::policy::PolicyModel;
use crate::rollout::{rollout_gmm_sample, rollout_sample, RolloutRecord};
use crate::scenario::{fnv1a64, Scenario};
use crate::vocabulary::TokenVocabulary;
use crate::world::{footprints_overlap, in_drivable, wrap_angle, AgentState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: rollout {rollout} vs gt {gt}")]
    LengthMismatch { rollout: usize, gt: usize },
}

/// Mean planar displacement: per-agent mean over steps, then mean over agents.
pub fn ade(rollout: &[Vec<AgentState>], gt: &[Vec<AgentState>]) -> Result<f64, MetricsError> {
    if rollout.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            rollout: rollout.len(),
            gt: gt.len(),
        });
    }
    let mut acc = 0.0;
    for (r, g) in rollout.iter().zip(gt) {
        if r.len() != g.len() {
            return Err(MetricsError::LengthMismatch {
                rollout: r.len(),
                gt: g.len(),
            });
        }
        let total: f64 = r.iter().zip(g).map(|(a, b)| a.planar_distance(b)).sum();
        acc += total / g.len() as f64;
    }
    Ok(acc / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinAdeMode {
    /// Per-agent minimum over the rollout set, averaged over agents (default).
    PerAgent,
    /// Minimum over rollouts of the scene-level ADE.
    Joint,
}

/// Minimum displacement error over a set of R rollouts of the same scene.
pub fn min_ade(
    rollout_set: &[Vec<Vec<AgentState>>],
    gt: &[Vec<AgentState>],
    mode: MinAdeMode,
) -> Result<f64, MetricsError> {
    assert!(!rollout_set.is_empty(), "need at least one rollout");
    match mode {
        MinAdeMode::Joint => {
            let mut best = f64::INFINITY;
            for r in rollout_set {
                best = best.min(ade(r, gt)?);
            }
            Ok(best)
        }
        MinAdeMode::PerAgent => {
            let n = gt.len();
            let mut acc = 0.0;
            for i in 0..n {
                let mut best = f64::INFINITY;
                for r in rollout_set {
                    if r[i].len() != gt[i].len() {
                        return Err(MetricsError::LengthMismatch {
                            rollout: r[i].len(),
                            gt: gt[i].len(),
                        });
                    }
                    let total: f64 = r[i]
                        .iter()
                        .zip(&gt[i])
                        .map(|(a, b)| a.planar_distance(b))
                        .sum();
                    best = best.min(total / gt[i].len() as f64);
                }
                acc += best;
            }
            Ok(acc / n as f64)
        }
    }
}

/// Fraction of (scenario, rollout, agent) triples whose footprint overlaps
/// any other agent at any step. The initial step is excused for pairs that
/// already overlap in the GT at the history boundary.
pub fn collision_rate(per_scenario: &[(&Scenario, &[RolloutRecord])]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (scenario, records) in per_scenario {
        let h = scenario.history_len;
        for record in *records {
            let n = record.n_agents();
            for i in 0..n {
                total += 1;
                'steps: for t in 0..record.states[i].len() {
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        if footprints_overlap(&record.states[i][t], &record.states[j][t]) {
                            let gt_overlap = t == 0
                                && footprints_overlap(
                                    &scenario.agents[i].state(h),
                                    &scenario.agents[j].state(h),
                                );
                            if !gt_overlap {
                                hits += 1;
                                break 'steps;
                            }
                        }
                    }
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Fraction of (scenario, rollout, agent) triples whose center leaves the
/// drivable region at any step.
pub fn offroad_rate(per_scenario: &[(&Scenario, &[RolloutRecord])]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (scenario, records) in per_scenario {
        for record in *records {
            for states in &record.states {
                total += 1;
                if states.iter().any(|s| !in_drivable(&scenario.map, s.x, s.y)) {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

const N_BINS: usize = 32;
const SPEED_RANGE: (f64, f64) = (0.0, 16.0);
const ACCEL_RANGE: (f64, f64) = (-8.0, 8.0);
const YAW_RATE_RANGE: (f64, f64) = (-2.5, 2.5);
const NEAREST_RANGE: (f64, f64) = (0.0, 40.0);

/// Per-feature Jensen-Shannon divergences (base 2, each in [0, 1]) between
/// rollout and GT populations over fixed histogram bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealismDivergence {
    pub speed: f64,
    pub accel: f64,
    pub yaw_rate: f64,
    pub nearest_dist: f64,
}

#[derive(Default, Clone)]
struct FeaturePop {
    speed: Vec<f64>,
    accel: Vec<f64>,
    yaw_rate: Vec<f64>,
    nearest: Vec<f64>,
}

fn collect_features(agents: &[Vec<AgentState>], period: f64, pop: &mut FeaturePop) {
    for (i, traj) in agents.iter().enumerate() {
        let mut speeds = Vec::with_capacity(traj.len().saturating_sub(1));
        for w in traj.windows(2) {
            speeds.push(w[0].planar_distance(&w[1]) / period);
            pop.yaw_rate.push(wrap_angle(w[1].yaw - w[0].yaw) / period);
        }
        for w in speeds.windows(2) {
            pop.accel.push((w[1] - w[0]) / period);
        }
        pop.speed.extend_from_slice(&speeds);
        if agents.len() > 1 {
            for t in 0..traj.len() {
                let mut best = f64::INFINITY;
                for (j, other) in agents.iter().enumerate() {
                    if j != i {
                        best = best.min(traj[t].planar_distance(&other[t]));
                    }
                }
                pop.nearest.push(best);
            }
        }
    }
}

fn histogram(values: &[f64], range: (f64, f64)) -> Vec<f64> {
    let mut bins = vec![0.0; N_BINS];
    if values.is_empty() {
        return bins;
    }
    let width = (range.1 - range.0) / N_BINS as f64;
    for v in values {
        let idx = (((v - range.0) / width).floor() as i64).clamp(0, N_BINS as i64 - 1) as usize;
        bins[idx] += 1.0;
    }
    let total: f64 = bins.iter().sum();
    for b in bins.iter_mut() {
        *b /= total;
    }
    bins
}

/// Jensen-Shannon divergence in bits between two normalized histograms.
pub fn jensen_shannon_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let kl_to_mid = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                if *x > 0.0 {
                    x * (x / (0.5 * (x + y))).log2()
                } else {
                    0.0
                }
            })
            .sum::<f64>()
    };
    0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)
}

fn divergence_for(rollout: &[f64], gt: &[f64], range: (f64, f64)) -> f64 {
    if rollout.is_empty() || gt.is_empty() {
        return 0.0;
    }
    jensen_shannon_divergence(&histogram(rollout, range), &histogram(gt, range))
}

/// Realism histogram divergences between rollout populations and the GT
/// future segments of the same scenarios.
pub fn realism_divergence(
    per_scenario: &[(&Scenario, &[RolloutRecord])],
    period: f64,
) -> RealismDivergence {
    let mut roll = FeaturePop::default();
    let mut gt = FeaturePop::default();
    for (scenario, records) in per_scenario {
        let gt_future: Vec<Vec<AgentState>> = (0..scenario.n_agents())
            .map(|i| scenario.gt_future(i))
            .collect();
        collect_features(&gt_future, period, &mut gt);
        for record in *records {
            collect_features(&record.states, period, &mut roll);
        }
    }
    RealismDivergence {
        speed: divergence_for(&roll.speed, &gt.speed, SPEED_RANGE),
        accel: divergence_for(&roll.accel, &gt.accel, ACCEL_RANGE),
        yaw_rate: divergence_for(&roll.yaw_rate, &gt.yaw_rate, YAW_RATE_RANGE),
        nearest_dist: divergence_for(&roll.nearest, &gt.nearest, NEAREST_RANGE),
    }
}

/// Closed-loop evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ade: f64,
    pub min_ade: f64,
    pub collision_rate: f64,
    pub offroad_rate: f64,
    pub realism: RealismDivergence,
    pub n_scenarios: usize,
    pub n_rollouts: usize,
}

pub const METRICS_CSV_HEADER: &str = "# catk-metrics v1";

impl EvalReport {
    pub fn csv_columns() -> &'static str {
        "ade,min_ade,collision_rate,offroad_rate,jsd_speed,jsd_accel,jsd_yaw_rate,jsd_nearest_dist,n_scenarios,n_rollouts"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.ade,
            self.min_ade,
            self.collision_rate,
            self.offroad_rate,
            self.realism.speed,
            self.realism.accel,
            self.realism.yaw_rate,
            self.realism.nearest_dist,
            self.n_scenarios,
            self.n_rollouts
        )
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{}\n{}\n",
            METRICS_CSV_HEADER,
            Self::csv_columns(),
            self.csv_row()
        )
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }
}

/// Evaluation protocol knobs. The rollout seed for (scenario, r) depends only
/// on `seed`, the scenario id, and r, so different models are compared on
/// identical rollout seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_rollouts: usize,
    pub k_infer: usize,
    pub tau: f64,
    pub seed: u64,
    pub w_yaw: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_rollouts: 16,
            k_infer: 16,
            tau: 1.0,
            seed: 0,
            w_yaw: crate::world::DEFAULT_W_YAW,
        }
    }
}

pub fn rollout_seed(base: u64, scenario_id: &str, r: usize) -> u64 {
    let mut h = fnv1a64(scenario_id.as_bytes()) ^ base.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= r as u64;
    h = h.wrapping_mul(0x100_0000_01b3);
    h ^ (h >> 31)
}

/// Samples R rollouts per scenario from the categorical policy and aggregates
/// the full report.
pub fn evaluate_categorical(
    model: &PolicyModel,
    scenarios: &[Scenario],
    vocab: &TokenVocabulary,
    cfg: &EvalConfig,
) -> EvalReport {
    let mut all_records: Vec<Vec<RolloutRecord>> = Vec::with_capacity(scenarios.len());
    for scenario in scenarios {
        let records: Vec<RolloutRecord> = (0..cfg.n_rollouts)
            .map(|r| {
                rollout_sample(
                    model,
                    scenario,
                    vocab,
                    cfg.k_infer,
                    cfg.tau,
                    rollout_seed(cfg.seed, &scenario.id, r),
                    cfg.w_yaw,
                )
            })
            .collect();
        all_records.push(records);
    }
    aggregate_report(scenarios, &all_records, vocab.replanning_period(), cfg)
}

/// GMM ego evaluation: R mode-sampled rollouts per scenario; the non-ego
/// agents replay GT, so collision is judged against those replayed states.
pub fn evaluate_gmm(
    model: &PolicyModel,
    scenarios: &[Scenario],
    period: f64,
    cfg: &EvalConfig,
) -> EvalReport {
    let mut all_records: Vec<Vec<RolloutRecord>> = Vec::with_capacity(scenarios.len());
    for scenario in scenarios {
        let records: Vec<RolloutRecord> = (0..cfg.n_rollouts)
            .map(|r| {
                rollout_gmm_sample(
                    model,
                    scenario,
                    period,
                    cfg.k_infer,
                    cfg.tau,
                    rollout_seed(cfg.seed, &scenario.id, r),
                )
            })
            .collect();
        all_records.push(records);
    }

    // Extend each ego record with the other agents' GT replay so the shared
    // aggregation sees the full scene.
    let extended: Vec<Vec<RolloutRecord>> = scenarios
        .iter()
        .zip(&all_records)
        .map(|(scenario, records)| {
            records
                .iter()
                .map(|record| {
                    let mut states = record.states.clone();
                    for j in 1..scenario.n_agents() {
                        states.push(scenario.gt_future(j));
                    }
                    RolloutRecord {
                        states,
                        ..record.clone()
                    }
                })
                .collect()
        })
        .collect();
    let mut report = aggregate_report(scenarios, &extended, period, cfg);

    // Displacement metrics stay ego-only: recompute from the raw records.
    let mut acc_ade = 0.0;
    let mut acc_min = 0.0;
    for (scenario, records) in scenarios.iter().zip(&all_records) {
        let gt = vec![scenario.gt_future(0)];
        let sets: Vec<Vec<Vec<AgentState>>> =
            records.iter().map(|r| r.states.clone()).collect();
        let mut mean = 0.0;
        for set in &sets {
            mean += ade(set, &gt).unwrap();
        }
        acc_ade += mean / sets.len() as f64;
        acc_min += min_ade(&sets, &gt, MinAdeMode::PerAgent).unwrap();
    }
    report.ade = acc_ade / scenarios.len() as f64;
    report.min_ade = acc_min / scenarios.len() as f64;
    report
}

fn aggregate_report(
    scenarios: &[Scenario],
    all_records: &[Vec<RolloutRecord>],
    period: f64,
    cfg: &EvalConfig,
) -> EvalReport {
    let mut acc_ade = 0.0;
    let mut acc_min = 0.0;
    for (scenario, records) in scenarios.iter().zip(all_records) {
        let n = records[0].n_agents().min(scenario.n_agents());
        let gt: Vec<Vec<AgentState>> = (0..n).map(|i| scenario.gt_future(i)).collect();
        let sets: Vec<Vec<Vec<AgentState>>> = records
            .iter()
            .map(|r| r.states[..n].to_vec())
            .collect();
        let mut mean = 0.0;
        for set in &sets {
            mean += ade(set, &gt).unwrap();
        }
        acc_ade += mean / sets.len() as f64;
        acc_min += min_ade(&sets, &gt, MinAdeMode::PerAgent).unwrap();
    }
    let pairs: Vec<(&Scenario, &[RolloutRecord])> = scenarios
        .iter()
        .zip(all_records)
        .map(|(s, r)| (s, r.as_slice()))
        .collect();
    EvalReport {
        ade: acc_ade / scenarios.len() as f64,
        min_ade: acc_min / scenarios.len() as f64,
        collision_rate: collision_rate(&pairs),
        offroad_rate: offroad_rate(&pairs),
        realism: realism_divergence(&pairs, period),
        n_scenarios: scenarios.len(),
        n_rollouts: cfg.n_rollouts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(x: f64, y: f64) -> AgentState {
        AgentState::new(x, y, 0.0, 4.5, 2.0)
    }

    fn line(n: usize, offset: f64) -> Vec<AgentState> {
        (0..n).map(|i| st(i as f64, offset)).collect()
    }

    #[test]
    fn ade_examples() {
        let gt = vec![line(5, 0.0)];
        assert_eq!(ade(&gt, &gt).unwrap(), 0.0);
        let shifted = vec![line(5, 1.0)];
        assert!((ade(&shifted, &gt).unwrap() - 1.0).abs() < 1e-15);
        let two_gt = vec![line(5, 0.0), line(5, 0.0)];
        let two_roll = vec![line(5, 0.0), line(5, 2.0)];
        assert!((ade(&two_roll, &two_gt).unwrap() - 1.0).abs() < 1e-15);
        assert!(ade(&gt, &two_gt).is_err());
    }

    #[test]
    fn min_ade_examples() {
        let gt = vec![line(5, 0.0)];
        let r1 = vec![line(5, 2.0)];
        assert_eq!(
            min_ade(&[r1.clone()], &gt, MinAdeMode::PerAgent).unwrap(),
            ade(&r1, &gt).unwrap()
        );
        let with_gt = vec![gt.clone(), r1.clone()];
        assert_eq!(min_ade(&with_gt, &gt, MinAdeMode::PerAgent).unwrap(), 0.0);
        let set = vec![vec![line(5, 2.0)], vec![line(5, 1.0)], vec![line(5, 3.0)]];
        assert!((min_ade(&set, &gt, MinAdeMode::PerAgent).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn min_ade_monotone_in_rollouts() {
        let gt = vec![line(6, 0.0)];
        let mut set: Vec<Vec<Vec<AgentState>>> = Vec::new();
        let mut prev = f64::INFINITY;
        for r in 0..6 {
            set.push(vec![line(6, 3.0 - 0.4 * r as f64)]);
            let m = min_ade(&set, &gt, MinAdeMode::PerAgent).unwrap();
            assert!(m <= prev + 1e-15);
            prev = m;
        }
    }

    #[test]
    fn jsd_hand_computed_case() {
        let p = [0.5, 0.5, 0.0];
        let q = [0.25, 0.25, 0.5];
        let jsd = jensen_shannon_divergence(&p, &q);
        // 0.5*KL(p||m) + 0.5*KL(q||m) with m = (0.375, 0.375, 0.25):
        // KL(p||m) = log2(4/3), KL(q||m) = 0.5*log2(2/3) + 0.5.
        let expected = 0.5 * (4.0_f64 / 3.0).log2()
            + 0.5 * (0.5 * (2.0_f64 / 3.0).log2() + 0.5);
        assert!((jsd - expected).abs() < 1e-12);
        assert_eq!(jensen_shannon_divergence(&p, &p), 0.0);
        let disjoint_a = [1.0, 0.0];
        let disjoint_b = [0.0, 1.0];
        assert!((jensen_shannon_divergence(&disjoint_a, &disjoint_b) - 1.0).abs() < 1e-12);
    }

    fn tiny_record(states: Vec<Vec<AgentState>>) -> RolloutRecord {
        let n = states.len();
        let steps = states[0].len() - 1;
        RolloutRecord {
            states,
            chosen: vec![vec![0; steps]; n],
            targets: crate::rollout::RolloutTargets::Indices(vec![vec![0; steps]; n]),
            probs_at_chosen: vec![vec![1.0; steps]; n],
            strategy: crate::rollout::StrategyTag::Deterministic,
            seed: 0,
        }
    }

    fn square_scenario(n_agents: usize) -> Scenario {
        let traj: Vec<[f64; 3]> = (0..7).map(|t| [t as f64, 0.0, 0.0]).collect();
        let traj2: Vec<[f64; 3]> = (0..7).map(|t| [t as f64, 20.0, 0.0]).collect();
        let mut agents = vec![crate::scenario::ScenarioAgent {
            length: 4.5,
            width: 2.0,
            traj,
        }];
        if n_agents > 1 {
            agents.push(crate::scenario::ScenarioAgent {
                length: 4.5,
                width: 2.0,
                traj: traj2,
            });
        }
        Scenario {
            id: "sq".into(),
            map: crate::world::MapContext {
                drivable_region: vec![[-50.0, -50.0], [50.0, -50.0], [50.0, 50.0], [-50.0, 50.0]],
                lane_centerlines: vec![vec![[-50.0, 0.0], [50.0, 0.0]]],
                goal_hints: None,
            },
            agents,
            history_len: 2,
            mode_label: None,
        }
    }

    #[test]
    fn collision_rate_examples() {
        let single = square_scenario(1);
        let rec = tiny_record(vec![single.gt_future(0)]);
        let pairs = vec![(&single, std::slice::from_ref(&rec))];
        assert_eq!(collision_rate(&pairs), 0.0);

        let double = square_scenario(2);
        // Drive both agents to coincident states.
        let coincident = tiny_record(vec![double.gt_future(0), double.gt_future(0)]);
        let pairs = vec![(&double, std::slice::from_ref(&coincident))];
        assert_eq!(collision_rate(&pairs), 1.0);
        let apart = tiny_record(vec![double.gt_future(0), double.gt_future(1)]);
        let pairs = vec![(&double, std::slice::from_ref(&apart))];
        assert_eq!(collision_rate(&pairs), 0.0);
    }

    #[test]
    fn offroad_rate_examples() {
        let s = square_scenario(1);
        let on = tiny_record(vec![s.gt_future(0)]);
        let pairs = vec![(&s, std::slice::from_ref(&on))];
        assert_eq!(offroad_rate(&pairs), 0.0);
        let mut off_states = s.gt_future(0);
        off_states[2] = AgentState::new(500.0, 0.0, 0.0, 4.5, 2.0);
        let off = tiny_record(vec![off_states]);
        let pairs = vec![(&s, std::slice::from_ref(&off))];
        assert_eq!(offroad_rate(&pairs), 1.0);
    }

    #[test]
    fn realism_zero_for_identical_populations() {
        let s = square_scenario(2);
        let rec = tiny_record(vec![s.gt_future(0), s.gt_future(1)]);
        let pairs = vec![(&s, std::slice::from_ref(&rec))];
        let r = realism_divergence(&pairs, 0.5);
        assert_eq!(r.speed, 0.0);
        assert_eq!(r.accel, 0.0);
        assert_eq!(r.yaw_rate, 0.0);
        assert_eq!(r.nearest_dist, 0.0);
    }

    #[test]
    fn realism_max_for_disjoint_populations() {
        let s = square_scenario(1);
        // Teleporting rollout: speeds land in the top bin, far from GT speeds.
        let mut states = Vec::new();
        let mut x = 0.0;
        for _ in 0..7 {
            states.push(st(x, 0.0));
            x += 40.0;
        }
        let rec = tiny_record(vec![states]);
        let pairs = vec![(&s, std::slice::from_ref(&rec))];
        let r = realism_divergence(&pairs, 0.5);
        assert!((r.speed - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rates_invariant_under_reordering() {
        let s1 = square_scenario(2);
        let mut s2 = square_scenario(2);
        s2.id = "sq2".into();
        let r1 = tiny_record(vec![s1.gt_future(0), s1.gt_future(0)]);
        let r2 = tiny_record(vec![s2.gt_future(0), s2.gt_future(1)]);
        let a = collision_rate(&[(&s1, std::slice::from_ref(&r1)), (&s2, std::slice::from_ref(&r2))]);
        let b = collision_rate(&[(&s2, std::slice::from_ref(&r2)), (&s1, std::slice::from_ref(&r1))]);
        assert_eq!(a, b);
        let oa = offroad_rate(&[(&s1, std::slice::from_ref(&r1)), (&s2, std::slice::from_ref(&r2))]);
        let ob = offroad_rate(&[(&s2, std::slice::from_ref(&r2)), (&s1, std::slice::from_ref(&r1))]);
        assert_eq!(oa, ob);
    }

    #[test]
    fn report_csv_and_json() {
        let report = EvalReport {
            ade: 1.25,
            min_ade: 0.5,
            collision_rate: 0.1,
            offroad_rate: 0.05,
            realism: RealismDivergence {
                speed: 0.2,
                accel: 0.3,
                yaw_rate: 0.1,
                nearest_dist: 0.4,
            },
            n_scenarios: 10,
            n_rollouts: 16,
        };
        let csv = report.to_csv();
        assert!(csv.starts_with(METRICS_CSV_HEADER));
        assert!(csv.contains("1.25,0.5,0.1,0.05"));
        let parsed: EvalReport = serde_json::from_str(&report.to_pretty_json()).unwrap();
        assert_eq!(parsed, report);
        assert!(report.min_ade <= report.ade);
    }
}
