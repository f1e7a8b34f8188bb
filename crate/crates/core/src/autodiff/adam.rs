use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "params {}, grads {}, state {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a fixed, ordered list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            states: sizes.iter().map(|&n| AdamState::new(n)).collect(),
        }
    }

    /// Updates every tensor that has a gradient buffer, then clears it.
    /// Tensors without gradients (frozen, or unreachable this step) keep
    /// their values and moment estimates.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.states.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                detail: format!("{} tensors for {} states", params.len(), self.states.len()),
            });
        }
        for (p, state) in params.iter_mut().zip(&mut self.states) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            adam_step(p.data_mut(), &g, state, &self.config)?;
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, 1.0, 1.0];
        let g = [0.5, -2.0, 1e-3];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            let expected = 1.0 - cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((pi - expected).abs() < 1e-15);
            assert!((pi - (1.0 - cfg.lr * gi.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.25, -4.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.25, -4.0]);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p = vec![0.3, -0.7, 1.1];
            let mut st = AdamState::new(3);
            for t in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| x * (t as f64).sin()).collect();
                adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_mismatch() {
        let mut st = AdamState::new(2);
        let err = adam_step(&mut [0.0; 3], &[0.0; 3], &mut st, &AdamConfig::default());
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn optimizer_skips_tensors_without_grad() {
        let mut a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut b = Tensor::new(vec![1], vec![5.0]).unwrap();
        a.accumulate_grad(&[1.0, -1.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &[2, 1]);
        opt.step(&mut [&mut a, &mut b]).unwrap();
        assert!(a.data()[0] < 1.0 && a.data()[1] > 2.0);
        assert_eq!(b.data(), &[5.0]);
        assert!(a.grad().is_none());
    }
}
