//! Adam with bias correction and a linear learning-rate decay schedule.

/// Adam state (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Linear decay from `lr0` at step 0 to `lr0 * floor_frac` at the final step.
pub fn linear_decay_lr(lr0: f64, floor_frac: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps <= 1 {
        return lr0;
    }
    let progress = (step as f64 / (total_steps - 1) as f64).clamp(0.0, 1.0);
    lr0 * (1.0 - (1.0 - floor_frac) * progress)
}
