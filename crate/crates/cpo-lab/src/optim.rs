//! AdamW with decoupled weight decay.
//!
//! One step with gradient `g`, moments `(m, v)`, step count `t`:
//!
//! ```text
//! m      <- beta1 * m + (1 - beta1) * g
//! v      <- beta2 * v + (1 - beta2) * g^2
//! m_hat   = m / (1 - beta1^t)
//! v_hat   = v / (1 - beta2^t)
//! update  = m_hat / (sqrt(v_hat) + eps)
//! theta  <- theta - lr * (update + weight_decay * theta)
//! ```
//!
//! Decay multiplies the parameter, not the gradient, so a step with zero
//! gradient still shrinks every parameter by the factor `1 - lr * wd`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameters;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Applies one AdamW step in place.
pub fn optimizer_step(
    params: &mut Parameters,
    grad: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    hyper.validate()?;
    let n = params.len();
    if grad.len() != n || state.m.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "optimizer shapes disagree: {n} params, {} grads, {} moments",
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::ShapeMismatch(format!(
            "non-finite gradient at flat index {i}: {}",
            grad[i]
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    let p = params.flat_mut();
    for i in 0..n {
        let g = grad[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let update = m_hat / (v_hat.sqrt() + hyper.eps);
        p[i] -= hyper.lr * (update + hyper.weight_decay * p[i]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_from(vals: &[f64]) -> Parameters {
        Parameters::from_raw(vals.to_vec())
    }

    #[test]
    fn zero_gradient_step_shrinks_by_one_minus_lr_wd() {
        let hyper = AdamHyper::new(1e-5, 0.05);
        let mut params = params_from(&[1.0, -2.0, 0.5]);
        let before = params.flat().to_vec();
        let mut state = AdamState::new(3);
        optimizer_step(&mut params, &[0.0, 0.0, 0.0], &mut state, &hyper).unwrap();
        let factor = 1.0 - 1e-5 * 0.05;
        for (a, b) in params.flat().iter().zip(&before) {
            let expected = b * factor;
            assert!((a - expected).abs() <= 1e-15 * expected.abs().max(1.0));
        }
        assert_eq!(state.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_up_to_eps() {
        // Bias correction makes m_hat = g and v_hat = g^2 at t = 1, so the
        // update magnitude is |g| / (|g| + eps) ~ 1 regardless of scale.
        for &g in &[1.0, 1e-3, -40.0] {
            let hyper = AdamHyper::new(0.01, 0.0);
            let mut params = params_from(&[0.0]);
            let mut state = AdamState::new(1);
            optimizer_step(&mut params, &[g], &mut state, &hyper).unwrap();
            let moved = params.flat()[0];
            let expected = -0.01 * g.signum();
            // update = |g| / (|g| + eps), so the shortfall scales as eps/|g|.
            let slack = 0.01 * 2.0 * (1e-8 / g.abs()) + 1e-15;
            assert!(
                (moved - expected).abs() < slack,
                "g={g}: moved {moved}, expected about {expected}"
            );
        }
    }

    #[test]
    fn steps_are_bitwise_deterministic() {
        let hyper = AdamHyper::new(3e-3, 0.01);
        let grads = [[0.3, -1.2], [0.7, 0.1], [-0.2, 0.9]];
        let run = || {
            let mut params = params_from(&[0.4, -0.6]);
            let mut state = AdamState::new(2);
            for g in &grads {
                optimizer_step(&mut params, g, &mut state, &hyper).unwrap();
            }
            params.flat().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn second_moment_dampens_repeated_large_gradients() {
        let hyper = AdamHyper::new(0.1, 0.0);
        let mut params = params_from(&[0.0]);
        let mut state = AdamState::new(1);
        for _ in 0..50 {
            optimizer_step(&mut params, &[100.0], &mut state, &hyper).unwrap();
        }
        // Adam is scale-free: 50 steps of constant gradient move by about
        // 50 * lr no matter how large the gradient is.
        let moved = params.flat()[0].abs();
        assert!(moved < 50.0 * 0.1 + 1e-6, "moved {moved}");
        assert!(moved > 49.0 * 0.1, "moved {moved}");
    }

    #[test]
    fn rejects_shape_mismatch_and_non_finite_gradients() {
        let hyper = AdamHyper::new(0.01, 0.0);
        let mut params = params_from(&[0.0, 1.0]);
        let mut state = AdamState::new(2);
        assert!(optimizer_step(&mut params, &[1.0], &mut state, &hyper).is_err());
        assert!(optimizer_step(&mut params, &[1.0, f64::NAN], &mut state, &hyper).is_err());
        let bad = AdamHyper::new(-1.0, 0.0);
        assert!(optimizer_step(&mut params, &[1.0, 1.0], &mut state, &bad).is_err());
    }
}
