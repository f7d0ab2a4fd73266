//! SGD with Nesterov momentum and weight decay folded into the gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{AdaptationModel, Param, Part};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("invalid SGD config: {0}")]
    Config(String),
    #[error("gradient of {name} has {got} entries, parameter has {expected}")]
    Shape {
        name: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub nesterov_momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            nesterov_momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.learning_rate > 0.0) {
            return Err(OptimError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.nesterov_momentum) {
            return Err(OptimError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.nesterov_momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(OptimError::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter, allocated lazily.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<S> {
    buffers: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> SgdState<S> {
    pub fn new() -> Self {
        Self {
            buffers: Vec::new(),
        }
    }

    /// One update on a single parameter vector:
    /// `g <- g + wd*theta; v <- mu*v + g; theta <- theta - lr*(g + mu*v)`.
    pub fn update(
        &mut self,
        slot: usize,
        theta: &mut [S],
        grad: &[S],
        decay: bool,
        config: &SgdConfig,
    ) {
        if self.buffers.len() <= slot {
            self.buffers.resize(slot + 1, None);
        }
        let (lr, mu, wd) = (
            S::of(config.learning_rate),
            S::of(config.nesterov_momentum),
            S::of(if decay { config.weight_decay } else { 0.0 }),
        );
        let buf = self.buffers[slot].get_or_insert_with(|| vec![S::zero(); theta.len()]);
        for ((t, &g0), v) in theta.iter_mut().zip(grad).zip(buf.iter_mut()) {
            let g = g0 + wd * *t;
            *v = mu * *v + g;
            *t -= lr * (g + mu * *v);
        }
    }

    /// Updates every parameter in `params` that holds a gradient. Slots are
    /// keyed by position, so call with the same parameter list each step.
    pub fn step(&mut self, params: &mut [Param<S>], config: &SgdConfig) -> Result<(), OptimError> {
        self.step_range(params, 0, config)
    }

    fn step_range(
        &mut self,
        params: &mut [Param<S>],
        offset: usize,
        config: &SgdConfig,
    ) -> Result<(), OptimError> {
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = p.tensor.grad.take() else { continue };
            if g.len() != p.tensor.len() {
                return Err(OptimError::Shape {
                    name: p.name.clone(),
                    expected: p.tensor.len(),
                    got: g.len(),
                });
            }
            self.update(offset + i, p.tensor.values_mut(), &g, p.decay, config);
            p.tensor.grad = Some(g);
        }
        Ok(())
    }

    pub fn step_model(
        &mut self,
        model: &mut AdaptationModel<S>,
        config: &SgdConfig,
    ) -> Result<(), OptimError> {
        self.step(model.params_mut(), config)
    }

    /// Updates only one parameter group, leaving the others frozen.
    pub fn step_part(
        &mut self,
        model: &mut AdaptationModel<S>,
        part: Part,
        config: &SgdConfig,
    ) -> Result<(), OptimError> {
        let r = model.group(part);
        let start = r.start;
        self.step_range(&mut model.params_mut()[r], start, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(v: f64, decay: bool) -> Param<f64> {
        Param {
            name: "p".into(),
            tensor: Tensor::vector(vec![v]).with_grad(),
            decay,
        }
    }

    #[test]
    fn plain_step() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            nesterov_momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = [param(1.0, true)];
        p[0].tensor.accumulate_grad(&[1.0]);
        SgdState::new().step(&mut p, &cfg).unwrap();
        assert!((p[0].tensor.values()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_weights_not_biases() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            nesterov_momentum: 0.9,
            weight_decay: 0.01,
        };
        let mut p = [param(2.0, true), param(2.0, false)];
        p[0].tensor.accumulate_grad(&[0.0]);
        p[1].tensor.accumulate_grad(&[0.0]);
        let mut st = SgdState::new();
        for _ in 0..3 {
            st.step(&mut p, &cfg).unwrap();
        }
        let w = p[0].tensor.values()[0];
        assert!(w < 2.0 && w > 0.0);
        assert_eq!(p[1].tensor.values()[0], 2.0);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = SgdConfig::default();
        c.nesterov_momentum = 1.0;
        assert!(c.validate().is_err());
        c = SgdConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }

    #[test]
    fn nesterov_trajectory_on_quadratic() {
        // f(x) = 0.5 * a * x^2, grad = a x. Reference recurrence written out by hand.
        let (a, lr, mu, wd) = (3.0, 0.05, 0.9, 0.01);
        let cfg = SgdConfig {
            learning_rate: lr,
            nesterov_momentum: mu,
            weight_decay: wd,
        };
        let mut p = [param(1.5, true)];
        let mut st = SgdState::new();
        let (mut x, mut v) = (1.5f64, 0.0f64);
        for _ in 0..3 {
            p[0].tensor.zero_grad();
            let cur = p[0].tensor.values()[0];
            p[0].tensor.accumulate_grad(&[a * cur]);
            st.step(&mut p, &cfg).unwrap();

            let g = a * x + wd * x;
            v = mu * v + g;
            x -= lr * (g + mu * v);
            assert_eq!(p[0].tensor.values()[0], x);
        }
    }
}
