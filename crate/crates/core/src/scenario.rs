//! Synthetic multimodal driving scenarios: a four-way junction world where
//! each agent approaches on a shared lane and commits to one of three
//! branches, plus JSON-lines persistence and hash-based splits.

use crate::world::{wrap_angle, AgentState, MapContext};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

/// History steps: 2 s at the 2 Hz token clock.
pub const HISTORY_STEPS: usize = 4;
/// Total steps per trajectory: history plus 8 s of future at 2 Hz.
pub const TOTAL_STEPS: usize = 20;

pub const ROAD_HALF_WIDTH: f64 = 5.0;
pub const LANE_OFFSET: f64 = 2.5;
pub const ARM_REACH: f64 = 60.0;
/// Per-scenario cruise speed range. The spread keeps the token vocabulary
/// from spending all its resolution on positional noise.
pub const SPEED_MIN_MPS: f64 = 5.2;
pub const SPEED_MAX_MPS: f64 = 6.8;
/// Token clock: scenarios are sampled at this period.
pub const PERIOD_S: f64 = 0.5;
pub const AGENT_LENGTH: f64 = 4.5;
pub const AGENT_WIDTH: f64 = 2.0;

const CONVOY_GAP: f64 = 10.0;
const MAX_AGENTS: usize = 4;

const SCENARIO_HEADER: &str = "catk-scenarios v1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// Which junction branch an agent's ground truth follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Left,
    Straight,
    Right,
}

/// One agent's footprint and ground-truth pose trajectory (x, y, yaw rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAgent {
    pub length: f64,
    pub width: f64,
    pub traj: Vec<[f64; 3]>,
}

impl ScenarioAgent {
    pub fn state(&self, t: usize) -> AgentState {
        let p = self.traj[t];
        AgentState {
            x: p[0],
            y: p[1],
            yaw: p[2],
            length: self.length,
            width: self.width,
        }
    }

    pub fn states(&self) -> Vec<AgentState> {
        (0..self.traj.len()).map(|t| self.state(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub map: MapContext,
    pub agents: Vec<ScenarioAgent>,
    #[serde(rename = "H")]
    pub history_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_label: Option<Vec<Branch>>,
}

impl Scenario {
    /// Number of steps T; trajectories hold T+1 states.
    pub fn horizon(&self) -> usize {
        self.agents[0].traj.len() - 1
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// GT states of agent `i` from the end of history onward (times H..=T).
    pub fn gt_future(&self, i: usize) -> Vec<AgentState> {
        (self.history_len..self.agents[i].traj.len())
            .map(|t| self.agents[i].state(t))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.agents.is_empty() {
            return Err(ScenarioError::InvalidConfig(format!(
                "scenario {} has no agents",
                self.id
            )));
        }
        let len = self.agents[0].traj.len();
        if self.history_len < 1 || len < self.history_len + 2 {
            return Err(ScenarioError::InvalidConfig(format!(
                "scenario {}: need T >= H+1 with H >= 1 (got {} states, H={})",
                self.id, len, self.history_len
            )));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.traj.len() != len {
                return Err(ScenarioError::InvalidConfig(format!(
                    "scenario {}: agent {} trajectory length mismatch",
                    self.id, i
                )));
            }
            if !(a.length > 0.0) || !(a.width > 0.0) {
                return Err(ScenarioError::InvalidConfig(format!(
                    "scenario {}: agent {} has non-positive footprint",
                    self.id, i
                )));
            }
            for p in &a.traj {
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(ScenarioError::InvalidConfig(format!(
                        "scenario {}: agent {} has non-finite state",
                        self.id, i
                    )));
                }
            }
        }
        self.map
            .validate()
            .map_err(|e| ScenarioError::InvalidConfig(format!("scenario {}: {e}", self.id)))?;
        Ok(())
    }
}

/// Point on a branch path, parameterized by arc length with s = 0 at the
/// junction entry of the westbound approach lane.
pub fn fork_path_point(branch: Branch, s: f64) -> [f64; 2] {
    if s <= 0.0 {
        return [-ROAD_HALF_WIDTH + s, -LANE_OFFSET];
    }
    match branch {
        Branch::Straight => [-ROAD_HALF_WIDTH + s, -LANE_OFFSET],
        Branch::Right => {
            let r = ROAD_HALF_WIDTH - LANE_OFFSET;
            let arc = r * PI / 2.0;
            if s <= arc {
                let ang = PI / 2.0 - s / r;
                [
                    -ROAD_HALF_WIDTH + r * ang.cos(),
                    -ROAD_HALF_WIDTH + r * ang.sin(),
                ]
            } else {
                [-LANE_OFFSET, -ROAD_HALF_WIDTH - (s - arc)]
            }
        }
        Branch::Left => {
            let r = ROAD_HALF_WIDTH + LANE_OFFSET;
            let arc = r * PI / 2.0;
            if s <= arc {
                let ang = -PI / 2.0 + s / r;
                [
                    -ROAD_HALF_WIDTH + r * ang.cos(),
                    ROAD_HALF_WIDTH + r * ang.sin(),
                ]
            } else {
                [LANE_OFFSET, ROAD_HALF_WIDTH + (s - arc)]
            }
        }
    }
}

/// The cross-shaped junction map shared by all fork-world scenarios.
pub fn fork_map() -> MapContext {
    let rw = ROAD_HALF_WIDTH;
    let l = ARM_REACH;
    let drivable_region = vec![
        [l, -rw],
        [l, rw],
        [rw, rw],
        [rw, l],
        [-rw, l],
        [-rw, rw],
        [-l, rw],
        [-l, -rw],
        [-rw, -rw],
        [-rw, -l],
        [rw, -l],
        [rw, -rw],
    ];
    let approach = ARM_REACH - ROAD_HALF_WIDTH;
    let mut lane_centerlines = Vec::new();
    for branch in [Branch::Left, Branch::Straight, Branch::Right] {
        let turn_arc = match branch {
            Branch::Left => (ROAD_HALF_WIDTH + LANE_OFFSET) * PI / 2.0,
            Branch::Right => (ROAD_HALF_WIDTH - LANE_OFFSET) * PI / 2.0,
            Branch::Straight => 2.0 * ROAD_HALF_WIDTH,
        };
        let end = turn_arc + approach;
        let mut line = Vec::new();
        let mut s = -approach;
        while s <= end {
            line.push(fork_path_point(branch, s));
            s += 1.0;
        }
        lane_centerlines.push(line);
    }
    MapContext {
        drivable_region,
        lane_centerlines,
        goal_hints: None,
    }
}

/// Generates fork-world scenarios: a convoy of agents approaches the junction
/// on the west lane; each samples a branch from `branch_probs` and follows it
/// at constant speed, with isotropic Gaussian positional noise and yaw
/// recomputed from the motion direction. Deterministic given the seed.
pub fn generate_fork_world(
    n_scenarios: usize,
    n_agents: usize,
    branch_probs: [f64; 3],
    noise_std: f64,
    seed: u64,
) -> Result<Vec<Scenario>, ScenarioError> {
    if branch_probs.iter().any(|p| *p < 0.0) || (branch_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(ScenarioError::InvalidConfig(format!(
            "branch_probs must be non-negative and sum to 1, got {branch_probs:?}"
        )));
    }
    if noise_std < 0.0 {
        return Err(ScenarioError::InvalidConfig("noise_std must be >= 0".into()));
    }
    if n_agents == 0 || n_agents > MAX_AGENTS {
        return Err(ScenarioError::InvalidConfig(format!(
            "n_agents must be in 1..={MAX_AGENTS}"
        )));
    }
    let map = fork_map();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut scenarios = Vec::with_capacity(n_scenarios);
    for j in 0..n_scenarios {
        // One cruise speed per scenario; the convoy shares it so gaps hold.
        let step_dist = rng.random_range(SPEED_MIN_MPS..SPEED_MAX_MPS) * PERIOD_S;
        // The lead agent sits just before the junction entry when history ends.
        let lead_start = -2.0 - HISTORY_STEPS as f64 * step_dist;
        let mut agents = Vec::with_capacity(n_agents);
        let mut labels = Vec::with_capacity(n_agents);
        for a in 0..n_agents {
            let u: f64 = rng.random();
            let branch = if u < branch_probs[0] {
                Branch::Left
            } else if u < branch_probs[0] + branch_probs[1] {
                Branch::Straight
            } else {
                Branch::Right
            };
            labels.push(branch);
            let start = lead_start - CONVOY_GAP * a as f64 + rng.random_range(-1.0..1.0);
            let mut pts: Vec<[f64; 2]> = (0..=TOTAL_STEPS)
                .map(|t| fork_path_point(branch, start + step_dist * t as f64))
                .collect();
            if noise_std > 0.0 {
                for p in pts.iter_mut() {
                    p[0] += noise.sample(&mut rng);
                    p[1] += noise.sample(&mut rng);
                }
            }
            let mut traj = Vec::with_capacity(pts.len());
            for t in 0..pts.len() {
                let (from, to) = if t + 1 < pts.len() {
                    (pts[t], pts[t + 1])
                } else {
                    (pts[t - 1], pts[t])
                };
                let yaw = wrap_angle((to[1] - from[1]).atan2(to[0] - from[0]));
                traj.push([pts[t][0], pts[t][1], yaw]);
            }
            agents.push(ScenarioAgent {
                length: AGENT_LENGTH,
                width: AGENT_WIDTH,
                traj,
            });
        }
        scenarios.push(Scenario {
            id: format!("fork-{j:06}"),
            map: map.clone(),
            agents,
            history_len: HISTORY_STEPS,
            mode_label: Some(labels),
        });
    }
    Ok(scenarios)
}

/// Writes scenarios as a header line followed by one JSON object per line.
pub fn save_scenarios(path: &Path, scenarios: &[Scenario]) -> Result<(), ScenarioError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{SCENARIO_HEADER}")?;
    for s in scenarios {
        let line = serde_json::to_string(s).map_err(|e| ScenarioError::Format {
            line: 0,
            msg: format!("serialize {}: {e}", s.id),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>, ScenarioError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| ScenarioError::Format {
            line: 1,
            msg: "empty file".into(),
        })?
        .map_err(ScenarioError::Io)?;
    if header.trim() != SCENARIO_HEADER {
        return Err(ScenarioError::Format {
            line: 1,
            msg: format!("bad header {header:?}"),
        });
    }
    for (k, line) in lines.enumerate() {
        let line = line.map_err(ScenarioError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let scenario: Scenario =
            serde_json::from_str(&line).map_err(|e| ScenarioError::Format {
                line: k + 2,
                msg: e.to_string(),
            })?;
        scenario.validate()?;
        out.push(scenario);
    }
    Ok(out)
}

/// Stable 64-bit FNV-1a, used for split hygiene so holdout membership depends
/// only on the scenario id.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Splits off exactly `holdout` scenarios: the ones whose ids rank lowest
/// under (fnv1a64(id), id). Disjoint and stable under list reordering.
pub fn split_holdout(scenarios: Vec<Scenario>, holdout: usize) -> (Vec<Scenario>, Vec<Scenario>) {
    assert!(holdout <= scenarios.len());
    let mut ranked: Vec<(u64, String)> = scenarios
        .iter()
        .map(|s| (fnv1a64(s.id.as_bytes()), s.id.clone()))
        .collect();
    ranked.sort();
    let held: std::collections::HashSet<String> =
        ranked.into_iter().take(holdout).map(|(_, id)| id).collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in scenarios {
        if held.contains(&s.id) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

/// Fractional variant of [`split_holdout`], rounding to the nearest count.
pub fn split_holdout_frac(
    scenarios: Vec<Scenario>,
    frac: f64,
) -> (Vec<Scenario>, Vec<Scenario>) {
    let n = scenarios.len();
    let holdout = ((n as f64 * frac).round() as usize).min(n);
    split_holdout(scenarios, holdout)
}
