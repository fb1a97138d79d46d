use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `peak`, then inverse-square-root decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak: 5e-4,
            warmup: 4000,
        }
    }
}

impl LrSchedule {
    /// Learning rate for 1-based step `t`.
    pub fn at(&self, t: u64) -> f64 {
        let t = t.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.peak * (t / w).min((w / t).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction, using `state.lr`.
pub fn optimizer_step(params: &mut [f64], grads: &[f64], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: grads.len(),
        });
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    if let Some(position) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            what: "parameter",
            position,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.3, -0.2];
        let mut s = OptimState::new(2, 1e-3);
        optimizer_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![0.3, -0.2]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        for &g in &[1e-3, 0.5, -7.0] {
            let mut p = vec![1.0];
            let mut s = OptimState::new(1, 1e-3);
            optimizer_step(&mut p, &[g], &mut s).unwrap();
            let expected = 1e-3 * g.abs() / (g.abs() + 1e-8);
            assert!(((1.0 - p[0]).abs() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let mut a = vec![0.1, 0.2, 0.3];
        let mut b = a.clone();
        let mut sa = OptimState::new(3, 1e-2);
        let mut sb = sa.clone();
        let g = [0.4, -0.1, 2.0];
        optimizer_step(&mut a, &g, &mut sa).unwrap();
        optimizer_step(&mut b, &g, &mut sb).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(optimizer_step(&mut a, &g[..2], &mut sa).is_err());
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak: 1e-3,
            warmup: 100,
        };
        assert!((s.at(50) - 5e-4).abs() < 1e-15);
        assert!((s.at(100) - 1e-3).abs() < 1e-15);
        assert!((s.at(400) - 5e-4).abs() < 1e-15);
    }
}
