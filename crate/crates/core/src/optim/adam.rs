//! The Adam update with bias correction.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyper-parameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One Adam step: `θ <- θ − lr · m̂ / (√v̂ + ε)`.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grad.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "Adam state has {} entries, got {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grad.len()
        )));
    }
    let c = state.config;
    state.step += 1;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= c.lr * mh / (vh.sqrt() + c.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), 2);
        st.m = vec![1.0, -1.0];
        let mut p = vec![0.5, 0.25];
        adam_step(&mut st, &mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(st.m, vec![0.9, -0.9]);
        // the decayed first moment still moves parameters; with fresh moments nothing moves
        let mut fresh = AdamState::new(AdamConfig::with_lr(0.1), 2);
        let mut q = vec![0.5, 0.25];
        for _ in 0..5 {
            adam_step(&mut fresh, &mut q, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(q, vec![0.5, 0.25]);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut st = AdamState::new(AdamConfig::with_lr(0.01), 3);
        let g = [2.5, -1e-3, 40.0];
        let mut p = vec![0.0; 3];
        let mut prev = p.clone();
        for _ in 0..200 {
            prev.copy_from_slice(&p);
            adam_step(&mut st, &mut p, &g).unwrap();
        }
        for i in 0..3 {
            let step = p[i] - prev[i];
            assert!((step + 0.01 * g[i].signum()).abs() < 1e-6, "{step}");
        }
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let run = || {
            let mut st = AdamState::new(AdamConfig::with_lr(0.05), 2);
            let mut p = vec![1.0, 2.0];
            for k in 0..10 {
                let g = [p[0] - k as f64, p[1] * p[0]];
                adam_step(&mut st, &mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
        let mut st = AdamState::new(AdamConfig::with_lr(0.05), 2);
        assert!(adam_step(&mut st, &mut [0.0], &[0.0]).is_err());
        assert!(AdamConfig::with_lr(-1.0).validate().is_err());
    }
}
