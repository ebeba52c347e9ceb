//! Adam with optional weight decay on selected parameters.

use serde::{Deserialize, Serialize};

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// `w <- w * (1 - lr * wd)` before the adaptive step.
    #[default]
    Decoupled,
    /// `g <- g + wd * w`, so the decay term passes through the moment estimates.
    Coupled,
}

/// Which parameters weight decay applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayScope {
    /// Linear weights only; biases and LayerNorm parameters are exempt.
    #[default]
    Weights,
    /// Every trainable parameter.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay_mode: DecayMode::Decoupled,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Per-slot first and second moments. Call [`Adam::begin_step`] once per
/// optimizer step, then [`Adam::update`] for each parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates `param` in place from `grad`. `decay` selects whether weight
    /// decay applies to this tensor.
    pub fn update(&mut self, slot: usize, param: &mut [f32], grad: &[f32], decay: bool) {
        assert_eq!(param.len(), grad.len(), "parameter and gradient lengths differ");
        assert!(self.step > 0, "begin_step must be called before update");
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, Moments::default);
        }
        let st = &mut self.slots[slot];
        if st.m.len() != param.len() {
            st.m = vec![0.0; param.len()];
            st.v = vec![0.0; param.len()];
        }
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2_sqrt = (1.0 - c.beta2.powi(t)).sqrt();
        let step_size = (c.lr / bc1) as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        let bc2_sqrt = bc2_sqrt as f32;
        let wd = if decay { c.weight_decay as f32 } else { 0.0 };
        let shrink = 1.0 - (c.lr as f32) * wd;

        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut st.m).zip(&mut st.v) {
            let g = match c.decay_mode {
                DecayMode::Coupled => g + wd * *p,
                DecayMode::Decoupled => {
                    *p *= shrink;
                    g
                }
            };
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = Adam::new(AdamConfig { lr: 0.01, ..Default::default() });
        let mut p = vec![1.0f32, -2.0, 0.5];
        opt.begin_step();
        opt.update(0, &mut p, &[3.0, -0.1, 0.0], false);
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 1.99).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn decoupled_decay_shrinks_only_flagged_tensors() {
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = Adam::new(cfg);
        let mut w = vec![2.0f32];
        let mut b = vec![2.0f32];
        opt.begin_step();
        opt.update(0, &mut w, &[0.0], true);
        opt.update(1, &mut b, &[0.0], false);
        assert!((w[0] - 2.0 * 0.95).abs() < 1e-6);
        assert_eq!(b[0], 2.0);
    }

    #[test]
    fn coupled_decay_acts_like_a_gradient() {
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, decay_mode: DecayMode::Coupled, ..Default::default() };
        let mut opt = Adam::new(cfg);
        let mut w = vec![2.0f32];
        opt.begin_step();
        opt.update(0, &mut w, &[0.0], true);
        // Effective gradient wd * w = 1 > 0, so the first step is -lr.
        assert!((w[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn matches_reference_on_a_quadratic() {
        // Independent f64 Adam on f(p) = p^2 / 2.
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut opt = Adam::new(cfg);
        let mut p = vec![1.5f32];
        let (mut rp, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = p[0];
            opt.begin_step();
            opt.update(0, &mut p, &[g], false);
            let rg = rp;
            m = 0.9 * m + 0.1 * rg;
            v = 0.999 * v + 0.001 * rg * rg;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            rp -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] as f64 - rp).abs() < 1e-4, "{} vs {rp}", p[0]);
    }
}
