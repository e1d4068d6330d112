//! First-order optimizer with per-parameter adaptive moments, driving a flat
//! parameter vector with per-entry learning rates and an optional cosine
//! schedule.

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    /// Steps of the cosine schedule; None disables decay.
    total_steps: Option<usize>,
}

impl Adam {
    pub fn new(dim: usize, total_steps: Option<usize>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            total_steps,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Cosine-decayed schedule factor in (0, 1].
    pub fn schedule(&self) -> f64 {
        match self.total_steps {
            Some(total) if total > 0 => {
                let t = (self.step as f64 / total as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * t).cos()).max(1e-3)
            }
            _ => 1.0,
        }
    }

    /// One update; `lr` holds the per-entry learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        assert_eq!(lr.len(), self.m.len());
        let factor = self.schedule();
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            debug_assert!(g.is_finite(), "non-finite gradient at {}", i);
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= factor * lr[i] * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
