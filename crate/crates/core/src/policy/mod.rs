//! Trainable policy heads: a categorical next-token head and a Gaussian
//! mixture head on a shared two-layer tanh encoder, with hand-derived
//! backprop so every gradient is finite-difference checkable.

mod checkpoint;
mod encoder;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, TrainState};
pub use encoder::{encode, feature_dim, FeatureVector, FEATURE_CLAMP, NEIGHBOR_K};
pub use optim::{linear_decay_lr, Adam};

use crate::world::ActionToken;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Fixed divisor applied to features before the first layer, so meter-scale
/// inputs land in the tanh-friendly range regardless of clamping.
pub const FEATURE_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    Categorical { vocab_size: usize },
    Gmm { n_modes: usize, sigma: f64 },
}

/// Flat-parameter policy model. Layout (row-major):
/// `w1 (hidden x feat) | b1 | w2 (hidden x hidden) | b2 | head`.
/// Categorical head: `head_w (V x hidden) | head_b (V)`. GMM head:
/// `mix_w (M x hidden) | mix_b (M) | mean_w (3M x hidden) | mean_b (3M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub kind: PolicyKind,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CategoricalOutput {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GmmOutput {
    pub weights: Vec<f64>,
    pub means: Vec<ActionToken>,
    pub sigma: f64,
}

fn encoder_param_count(feature_dim: usize, hidden_dim: usize) -> usize {
    hidden_dim * feature_dim + hidden_dim + hidden_dim * hidden_dim + hidden_dim
}

pub fn param_count(kind: &PolicyKind, feature_dim: usize, hidden_dim: usize) -> usize {
    let enc = encoder_param_count(feature_dim, hidden_dim);
    match kind {
        PolicyKind::Categorical { vocab_size } => enc + vocab_size * hidden_dim + vocab_size,
        PolicyKind::Gmm { n_modes, .. } => {
            enc + n_modes * hidden_dim + n_modes + 3 * n_modes * hidden_dim + 3 * n_modes
        }
    }
}

impl PolicyModel {
    /// Weights drawn from N(0, 1/fan_in), biases zero, seeded.
    pub fn new(kind: PolicyKind, feature_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let n = param_count(&kind, feature_dim, hidden_dim);
        let mut params = vec![0.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, params: &mut [f64]| {
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            for i in range {
                params[i] = dist.sample(&mut rng);
            }
        };
        let h = hidden_dim;
        let f = feature_dim;
        let w1 = 0..h * f;
        let w2_start = h * f + h;
        let w2 = w2_start..w2_start + h * h;
        let head_start = w2_start + h * h + h;
        fill(w1, f, &mut params);
        fill(w2, h, &mut params);
        match kind {
            PolicyKind::Categorical { vocab_size } => {
                fill(head_start..head_start + vocab_size * h, h, &mut params);
            }
            PolicyKind::Gmm { n_modes, .. } => {
                fill(head_start..head_start + n_modes * h, h, &mut params);
                let mean_start = head_start + n_modes * h + n_modes;
                fill(mean_start..mean_start + 3 * n_modes * h, h, &mut params);
            }
        }
        Self {
            kind,
            feature_dim,
            hidden_dim,
            params,
        }
    }

    pub fn new_categorical(feature_dim: usize, hidden_dim: usize, vocab_size: usize, seed: u64) -> Self {
        Self::new(PolicyKind::Categorical { vocab_size }, feature_dim, hidden_dim, seed)
    }

    pub fn new_gmm(feature_dim: usize, hidden_dim: usize, n_modes: usize, sigma: f64, seed: u64) -> Self {
        Self::new(PolicyKind::Gmm { n_modes, sigma }, feature_dim, hidden_dim, seed)
    }

    pub fn head_size(&self) -> usize {
        match self.kind {
            PolicyKind::Categorical { vocab_size } => vocab_size,
            PolicyKind::Gmm { n_modes, .. } => n_modes,
        }
    }

    fn offsets(&self) -> Offsets {
        let h = self.hidden_dim;
        let f = self.feature_dim;
        let w1 = 0;
        let b1 = w1 + h * f;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let head = b2 + h;
        Offsets { w1, b1, w2, b2, head }
    }

    /// Hidden activations h1, h2 for one feature vector.
    fn encode_hidden(&self, features: &[f64], h1: &mut Vec<f64>, h2: &mut Vec<f64>) {
        debug_assert_eq!(features.len(), self.feature_dim);
        let o = self.offsets();
        let h = self.hidden_dim;
        let f = self.feature_dim;
        let p = &self.params;
        h1.clear();
        h2.clear();
        for i in 0..h {
            let row = o.w1 + i * f;
            let mut z = p[o.b1 + i];
            for (j, x) in features.iter().enumerate() {
                z += p[row + j] * (x / FEATURE_SCALE);
            }
            h1.push(z.tanh());
        }
        for i in 0..h {
            let row = o.w2 + i * h;
            let mut z = p[o.b2 + i];
            for (j, v) in h1.iter().enumerate() {
                z += p[row + j] * v;
            }
            h2.push(z.tanh());
        }
    }

    fn linear_head(&self, h2: &[f64], head_offset: usize, rows: usize, out: &mut Vec<f64>) {
        let h = self.hidden_dim;
        let p = &self.params;
        out.clear();
        let bias_off = head_offset + rows * h;
        for r in 0..rows {
            let row = head_offset + r * h;
            let mut z = p[bias_off + r];
            for (j, v) in h2.iter().enumerate() {
                z += p[row + j] * v;
            }
            out.push(z);
        }
    }
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    head: usize,
}

/// Numerically stable softmax (max subtraction).
pub fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn forward_categorical(model: &PolicyModel, features: &[f64]) -> CategoricalOutput {
    assert!(matches!(model.kind, PolicyKind::Categorical { .. }));
    let mut h1 = Vec::new();
    let mut h2 = Vec::new();
    model.encode_hidden(features, &mut h1, &mut h2);
    let mut logits = Vec::new();
    model.linear_head(&h2, model.offsets().head, model.head_size(), &mut logits);
    let probs = stable_softmax(&logits);
    CategoricalOutput { probs, logits }
}

pub fn forward_gmm(model: &PolicyModel, features: &[f64]) -> GmmOutput {
    let (n_modes, sigma) = match model.kind {
        PolicyKind::Gmm { n_modes, sigma } => (n_modes, sigma),
        _ => panic!("forward_gmm requires a GMM model"),
    };
    let mut h1 = Vec::new();
    let mut h2 = Vec::new();
    model.encode_hidden(features, &mut h1, &mut h2);
    let o = model.offsets();
    let h = model.hidden_dim;
    let mut mix_logits = Vec::new();
    model.linear_head(&h2, o.head, n_modes, &mut mix_logits);
    let mean_off = o.head + n_modes * h + n_modes;
    let mut means_flat = Vec::new();
    model.linear_head(&h2, mean_off, 3 * n_modes, &mut means_flat);
    let weights = stable_softmax(&mix_logits);
    let means = (0..n_modes)
        .map(|m| ActionToken::new(means_flat[3 * m], means_flat[3 * m + 1], means_flat[3 * m + 2]))
        .collect();
    GmmOutput { weights, means, sigma }
}

/// Mean cross-entropy of the batch and its analytic gradient over all
/// parameters (softmax-CE backprop through the shared encoder).
pub fn ce_loss_grad(model: &PolicyModel, batch: &[(FeatureVector, usize)]) -> (f64, Vec<f64>) {
    let vocab_size = match model.kind {
        PolicyKind::Categorical { vocab_size } => vocab_size,
        _ => panic!("ce_loss_grad requires a categorical model"),
    };
    let o = model.offsets();
    let h = model.hidden_dim;
    let f = model.feature_dim;
    let p = &model.params;
    let inv_b = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; p.len()];
    let mut loss = 0.0;
    let mut h1 = Vec::new();
    let mut h2 = Vec::new();
    let mut logits = Vec::new();
    let head_bias = o.head + vocab_size * h;
    for (x, target) in batch {
        assert!(*target < vocab_size, "target index out of range");
        model.encode_hidden(x, &mut h1, &mut h2);
        model.linear_head(&h2, o.head, vocab_size, &mut logits);
        let probs = stable_softmax(&logits);
        loss -= probs[*target].ln();

        // dL/dlogits = (p - onehot) / B
        let mut dh2 = vec![0.0; h];
        for c in 0..vocab_size {
            let mut d = probs[c] * inv_b;
            if c == *target {
                d -= inv_b;
            }
            let row = o.head + c * h;
            for j in 0..h {
                grad[row + j] += d * h2[j];
                dh2[j] += d * p[row + j];
            }
            grad[head_bias + c] += d;
        }
        backprop_encoder(model, x, &h1, &h2, &dh2, &mut grad, o.w1, o.b1, o.w2, o.b2, f, h);
    }
    (loss * inv_b, grad)
}

/// Mean negative log-likelihood of the batch under the mixture (computed via
/// log-sum-exp) and its analytic gradient.
pub fn gmm_nll_grad(model: &PolicyModel, batch: &[(FeatureVector, ActionToken)]) -> (f64, Vec<f64>) {
    let (n_modes, sigma) = match model.kind {
        PolicyKind::Gmm { n_modes, sigma } => (n_modes, sigma),
        _ => panic!("gmm_nll_grad requires a GMM model"),
    };
    let o = model.offsets();
    let h = model.hidden_dim;
    let f = model.feature_dim;
    let p = &model.params;
    let inv_b = 1.0 / batch.len() as f64;
    let inv_var = 1.0 / (sigma * sigma);
    let log_norm = -1.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let mut grad = vec![0.0; p.len()];
    let mut loss = 0.0;
    let mut h1 = Vec::new();
    let mut h2 = Vec::new();
    let mut mix_logits = Vec::new();
    let mut means_flat = Vec::new();
    let mean_off = o.head + n_modes * h + n_modes;
    let mix_bias = o.head + n_modes * h;
    let mean_bias = mean_off + 3 * n_modes * h;
    for (x, a) in batch {
        model.encode_hidden(x, &mut h1, &mut h2);
        model.linear_head(&h2, o.head, n_modes, &mut mix_logits);
        model.linear_head(&h2, mean_off, 3 * n_modes, &mut means_flat);
        let lse_mix = log_sum_exp(&mix_logits);
        let target = [a.dx, a.dy, a.dyaw];
        let joint: Vec<f64> = (0..n_modes)
            .map(|m| {
                let mut sq = 0.0;
                for k in 0..3 {
                    let d = target[k] - means_flat[3 * m + k];
                    sq += d * d;
                }
                (mix_logits[m] - lse_mix) + log_norm - 0.5 * sq * inv_var
            })
            .collect();
        loss -= log_sum_exp(&joint);
        let resp = stable_softmax(&joint);
        let weights = stable_softmax(&mix_logits);

        let mut dh2 = vec![0.0; h];
        for m in 0..n_modes {
            // Mixture logits: d loss/dz_m = (w_m - r_m) / B
            let dz = (weights[m] - resp[m]) * inv_b;
            let row = o.head + m * h;
            for j in 0..h {
                grad[row + j] += dz * h2[j];
                dh2[j] += dz * p[row + j];
            }
            grad[mix_bias + m] += dz;
            // Means: d loss/dmu_mk = r_m (mu_mk - a_k) / sigma^2 / B
            for k in 0..3 {
                let dmu = resp[m] * (means_flat[3 * m + k] - target[k]) * inv_var * inv_b;
                let row = mean_off + (3 * m + k) * h;
                for j in 0..h {
                    grad[row + j] += dmu * h2[j];
                    dh2[j] += dmu * p[row + j];
                }
                grad[mean_bias + 3 * m + k] += dmu;
            }
        }
        backprop_encoder(model, x, &h1, &h2, &dh2, &mut grad, o.w1, o.b1, o.w2, o.b2, f, h);
    }
    (loss * inv_b, grad)
}

#[allow(clippy::too_many_arguments)]
fn backprop_encoder(
    model: &PolicyModel,
    x: &[f64],
    h1: &[f64],
    h2: &[f64],
    dh2: &[f64],
    grad: &mut [f64],
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    f: usize,
    h: usize,
) {
    let p = &model.params;
    let mut dh1 = vec![0.0; h];
    for i in 0..h {
        let dz2 = dh2[i] * (1.0 - h2[i] * h2[i]);
        let row = w2 + i * h;
        for j in 0..h {
            grad[row + j] += dz2 * h1[j];
            dh1[j] += dz2 * p[row + j];
        }
        grad[b2 + i] += dz2;
    }
    for i in 0..h {
        let dz1 = dh1[i] * (1.0 - h1[i] * h1[i]);
        let row = w1 + i * f;
        for (j, xj) in x.iter().enumerate() {
            grad[row + j] += dz1 * (xj / FEATURE_SCALE);
        }
        grad[b1 + i] += dz1;
    }
}
