use crate::error::{Error, Result};

/// Step-decay learning rate: `base_lr · decay_factor^⌊epoch / interval⌋`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    base_lr: f64,
    decay_factor: f64,
    decay_interval_epochs: u32,
}

impl LrSchedule {
    pub fn new(base_lr: f64, decay_factor: f64, decay_interval_epochs: u32) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Param(format!("base_lr must be positive, got {base_lr}")));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(Error::Param(format!(
                "decay_factor must be in (0, 1], got {decay_factor}"
            )));
        }
        if decay_interval_epochs == 0 {
            return Err(Error::Param("decay interval must be positive".into()));
        }
        Ok(Self {
            base_lr,
            decay_factor,
            decay_interval_epochs,
        })
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn decay_factor(&self) -> f64 {
        self.decay_factor
    }

    pub fn decay_interval_epochs(&self) -> u32 {
        self.decay_interval_epochs
    }

    pub fn lr_at(&self, epoch: u32) -> f64 {
        let k = epoch / self.decay_interval_epochs;
        self.base_lr * self.decay_factor.powi(k as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW moment accumulators, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub(crate) fn from_parts(
        config: AdamWConfig,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// One decoupled-weight-decay Adam update:
    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + λθ)`.
    ///
    /// Nothing is modified when shapes disagree or a gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::dim(self.first.len(), params.len().min(grads.len())));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::dim(m.len(), p.len().min(g.len())));
            }
        }
        if !grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
            return Err(Error::Numeric("gradient".into()));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p[i]);
            }
        }
        Ok(())
    }
}
