//! Action-token vocabulary: k-means construction from trajectory deltas,
//! sequential tokenization, and quantization-error analysis.

use crate::world::{apply_token, state_distance, wrap_angle, ActionToken, AgentState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

/// Minimum pairwise component distance between tokens after construction.
pub const EPS_DUP: f64 = 1e-6;

const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("insufficient data: {distinct} distinct delta samples for target size {target}")]
    InsufficientData { distinct: usize, target: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// Ordered, deduplicated set of template actions with a fixed re-planning period.
/// Token components are canonicalized to 9 fractional decimal digits so the
/// text format round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVocabulary {
    tokens: Vec<ActionToken>,
    replanning_period: f64,
}

fn canon(v: f64) -> f64 {
    format!("{v:.9}").parse().unwrap()
}

impl TokenVocabulary {
    pub fn new(tokens: Vec<ActionToken>, replanning_period: f64) -> Self {
        assert!(tokens.len() >= 2, "vocabulary needs at least 2 tokens");
        assert!(replanning_period > 0.0);
        let tokens = tokens
            .into_iter()
            .map(|t| ActionToken::new(canon(t.dx), canon(t.dy), canon(t.dyaw)))
            .collect();
        Self {
            tokens,
            replanning_period: canon(replanning_period),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[ActionToken] {
        &self.tokens
    }

    pub fn token(&self, index: usize) -> ActionToken {
        self.tokens[index]
    }

    pub fn replanning_period(&self) -> f64 {
        self.replanning_period
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.tokens.len() {
            for j in (i + 1)..self.tokens.len() {
                best = best.min(self.tokens[i].component_distance(&self.tokens[j]));
            }
        }
        best
    }

    /// Writes the line-oriented text format:
    /// header `catk-vocab v1 <size> <period_s>`, then one `dx dy dyaw` per line,
    /// fixed decimal with 9 fractional digits.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut out = String::new();
        out.push_str(&format!(
            "catk-vocab v1 {} {:.9}\n",
            self.tokens.len(),
            self.replanning_period
        ));
        for t in &self.tokens {
            out.push_str(&format!("{:.9} {:.9} {:.9}\n", t.dx, t.dy, t.dyaw));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| VocabError::Format {
                line: 1,
                msg: "empty file".into(),
            })?
            .map_err(VocabError::Io)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "catk-vocab" || parts[1] != "v1" {
            return Err(VocabError::Format {
                line: 1,
                msg: format!("bad header {header:?}"),
            });
        }
        let size: usize = parts[2].parse().map_err(|_| VocabError::Format {
            line: 1,
            msg: "bad size field".into(),
        })?;
        let period: f64 = parts[3].parse().map_err(|_| VocabError::Format {
            line: 1,
            msg: "bad period field".into(),
        })?;
        let mut tokens = Vec::with_capacity(size);
        for (k, line) in lines.enumerate() {
            let line = line.map_err(VocabError::Io)?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(VocabError::Format {
                    line: k + 2,
                    msg: format!("expected 3 fields, got {}", fields.len()),
                });
            }
            let mut vals = [0.0; 3];
            for (slot, f) in vals.iter_mut().zip(&fields) {
                *slot = f.parse().map_err(|_| VocabError::Format {
                    line: k + 2,
                    msg: format!("bad float {f:?}"),
                })?;
            }
            tokens.push(ActionToken::new(vals[0], vals[1], vals[2]));
        }
        if tokens.len() != size {
            return Err(VocabError::Format {
                line: tokens.len() + 1,
                msg: format!("header promises {size} tokens, found {}", tokens.len()),
            });
        }
        Ok(Self {
            tokens,
            replanning_period: period,
        })
    }
}

/// Local-frame pose delta between consecutive states: world displacement
/// rotated into the frame of the earlier state.
pub fn local_delta(from: &AgentState, to: &AgentState) -> ActionToken {
    let (s, c) = from.yaw.sin_cos();
    let wx = to.x - from.x;
    let wy = to.y - from.y;
    ActionToken::new(
        c * wx + s * wy,
        -s * wx + c * wy,
        wrap_angle(to.yaw - from.yaw),
    )
}

/// Builds a vocabulary of exactly `target_size` centroids by seeded k-means
/// (k-means++ init, Lloyd iterations to convergence or 100 rounds) over the
/// local-frame per-step deltas of the corpus trajectories.
pub fn build_vocabulary(
    corpus: &[Vec<AgentState>],
    target_size: usize,
    replanning_period: f64,
    seed: u64,
) -> Result<TokenVocabulary, VocabError> {
    assert!(target_size >= 2, "target_size must be at least 2");
    let mut samples: Vec<[f64; 3]> = Vec::new();
    for traj in corpus {
        for w in traj.windows(2) {
            let d = local_delta(&w[0], &w[1]);
            samples.push([d.dx, d.dy, d.dyaw]);
        }
    }
    // Distinctness at the dedup resolution decides feasibility.
    let distinct = distinct_samples(&samples);
    if distinct.len() < target_size {
        return Err(VocabError::InsufficientData {
            distinct: distinct.len(),
            target: target_size,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(&distinct, target_size, &mut rng);
    let mut assignment = vec![0usize; samples.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, s) in samples.iter().enumerate() {
            let a = nearest_centroid(&centroids, s);
            if assignment[i] != a {
                assignment[i] = a;
                changed = true;
            }
        }
        let mut sums = vec![[0.0; 3]; target_size];
        let mut counts = vec![0usize; target_size];
        for (s, &a) in samples.iter().zip(&assignment) {
            for k in 0..3 {
                sums[a][k] += s[k];
            }
            counts[a] += 1;
        }
        for c in 0..target_size {
            if counts[c] == 0 {
                // Reseed an empty cluster with the sample farthest from its
                // assigned centroid.
                let far = (0..samples.len())
                    .max_by(|&a, &b| {
                        let da = dist2(&samples[a], &centroids[assignment[a]]);
                        let db = dist2(&samples[b], &centroids[assignment[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c] = samples[far];
            } else {
                for k in 0..3 {
                    centroids[c][k] = sums[c][k] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    // Enforce the dedup invariant before canonicalization so the 9-decimal
    // rounding cannot push a pair back under EPS_DUP.
    repair_duplicates(&mut centroids, &distinct, target_size)?;
    let tokens = centroids
        .iter()
        .map(|c| ActionToken::new(c[0], c[1], c[2]))
        .collect();
    Ok(TokenVocabulary::new(tokens, replanning_period))
}

fn distinct_samples(samples: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for s in samples {
        let key = [
            (s[0] / EPS_DUP).round() as i64,
            (s[1] / EPS_DUP).round() as i64,
            (s[2] / EPS_DUP).round() as i64,
        ];
        if seen.insert(key) {
            out.push(*s);
        }
    }
    out
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let mut acc = 0.0;
    for k in 0..3 {
        let d = a[k] - b[k];
        acc += d * d;
    }
    acc
}

fn nearest_centroid(centroids: &[[f64; 3]], s: &[f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(s, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn kmeans_pp_init(distinct: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(distinct[rng.random_range(0..distinct.len())]);
    let mut d2: Vec<f64> = distinct.iter().map(|s| dist2(s, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining mass at existing centroids: take any unused distinct point.
            distinct
                .iter()
                .position(|s| centroids.iter().all(|c| dist2(s, c) > 0.0))
                .unwrap_or(0)
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut pick = distinct.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= *w;
            }
            pick
        };
        let c = distinct[next];
        for (i, s) in distinct.iter().enumerate() {
            d2[i] = d2[i].min(dist2(s, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn repair_duplicates(
    centroids: &mut [[f64; 3]],
    distinct: &[[f64; 3]],
    target: usize,
) -> Result<(), VocabError> {
    // Canonicalization moves each coordinate by < 5e-10, so demand a little slack.
    let min_sep = EPS_DUP + 2e-9;
    for i in 0..centroids.len() {
        let clashes = |c: &[f64; 3], upto: usize, centroids: &[[f64; 3]]| {
            (0..upto).any(|j| dist2(c, &centroids[j]).sqrt() <= min_sep)
        };
        if clashes(&centroids[i].clone(), i, centroids) {
            // Replace with the distinct sample farthest from all kept centroids.
            let mut best: Option<(f64, [f64; 3])> = None;
            for s in distinct {
                let d = (0..centroids.len())
                    .filter(|&j| j != i)
                    .map(|j| dist2(s, &centroids[j]).sqrt())
                    .fold(f64::INFINITY, f64::min);
                if d > min_sep && best.map_or(true, |(bd, _)| d > bd) {
                    best = Some((d, *s));
                }
            }
            match best {
                Some((_, s)) => centroids[i] = s,
                None => {
                    return Err(VocabError::InsufficientData {
                        distinct: distinct.len(),
                        target,
                    })
                }
            }
        }
    }
    Ok(())
}

/// Recovery index: the token whose application brings `state` closest to
/// `gt_next` under the state distance metric. Ties break to the lowest index.
pub fn nearest_token(
    state: &AgentState,
    gt_next: &AgentState,
    vocab: &TokenVocabulary,
    w_yaw: f64,
) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, tok) in vocab.tokens().iter().enumerate() {
        let d = state_distance(&apply_token(state, *tok), gt_next, w_yaw);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Sequential tokenization: starts at the first GT state and greedily chooses
/// the recovery token toward each next GT state, advancing with the chosen
/// token so quantization errors carry forward instead of resetting to GT.
pub fn tokenize_trajectory(
    gt: &[AgentState],
    vocab: &TokenVocabulary,
    w_yaw: f64,
) -> (Vec<usize>, Vec<AgentState>) {
    assert!(gt.len() >= 2, "trajectory needs at least 2 states");
    let mut indices = Vec::with_capacity(gt.len() - 1);
    let mut states = Vec::with_capacity(gt.len());
    states.push(gt[0]);
    for next in &gt[1..] {
        let cur = *states.last().unwrap();
        let c = nearest_token(&cur, next, vocab, w_yaw);
        indices.push(c);
        states.push(apply_token(&cur, vocab.token(c)));
    }
    (indices, states)
}

/// Mean planar distance between the sequentially tokenized states and the GT
/// states: the irreducible displacement-error floor for this vocabulary.
pub fn quantization_ade(gt: &[AgentState], vocab: &TokenVocabulary, w_yaw: f64) -> f64 {
    let (_, states) = tokenize_trajectory(gt, vocab, w_yaw);
    let total: f64 = states
        .iter()
        .zip(gt)
        .map(|(s, g)| s.planar_distance(g))
        .sum();
    total / gt.len() as f64
}
