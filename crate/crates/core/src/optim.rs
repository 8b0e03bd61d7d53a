//! Parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Param;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Momentum { momentum: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn adam(lr: f64) -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay: 0.0,
        }
    }

    pub fn momentum(lr: f64, momentum: f64) -> Self {
        OptimConfig {
            kind: OptimizerKind::Momentum { momentum },
            lr,
            weight_decay: 0.0,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

/// Per-parameter accumulators. `first` holds Adam's first moment or the
/// momentum velocity; `second` is only populated for Adam.
#[derive(Clone, Debug)]
pub struct OptimState {
    config: OptimConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl OptimState {
    pub fn new(config: OptimConfig) -> Self {
        OptimState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            shapes: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn ensure_layout(&mut self, params: &[Param], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(
                "optim_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "optim_step",
                    format!("parameter {} has shape {:?}, gradient {:?}", p.name(), p.shape(), g.shape()),
                ));
            }
        }
        if self.shapes.is_empty() {
            self.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if matches!(self.config.kind, OptimizerKind::Adam { .. }) {
                self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
            }
        } else if self.shapes.len() != params.len()
            || self.shapes.iter().zip(params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::dim(
                "optim_step",
                "parameter layout changed since the state was created",
            ));
        }
        Ok(())
    }

    /// Apply one update in place. Deterministic for identical inputs.
    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor]) -> Result<()> {
        self.ensure_layout(params, grads)?;
        self.step += 1;
        let OptimConfig { kind, lr, weight_decay } = self.config;
        match kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        let gj = g.data()[j] + weight_decay * f64::from(*w);
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                        *w = (f64::from(*w) - update) as f32;
                    }
                }
            }
            OptimizerKind::Momentum { momentum } => {
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let vel = &mut self.first[i];
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        let gj = g.data()[j] + weight_decay * f64::from(*w);
                        vel[j] = momentum * vel[j] + gj;
                        *w = (f64::from(*w) - lr * vel[j]) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: &[f32]) -> Param {
        Param::new("w", vec![vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for cfg in [OptimConfig::adam(0.1), OptimConfig::momentum(0.1, 0.9)] {
            let mut ps = vec![param(&[0.5, -1.25, 3.0])];
            let before = ps[0].clone();
            let mut st = OptimState::new(cfg);
            for _ in 0..3 {
                st.step(&mut ps, &[Tensor::zeros(&[3])]).unwrap();
            }
            assert_eq!(ps[0], before);
        }
    }

    #[test]
    fn first_adam_step_is_lr_against_gradient_sign() {
        let lr = 0.01;
        let mut ps = vec![param(&[1.0, 1.0, 1.0])];
        let mut st = OptimState::new(OptimConfig::adam(lr));
        st.step(&mut ps, &[Tensor::new(vec![3], vec![0.3, -2.0, 1e-3]).unwrap()]).unwrap();
        // m̂ = g, v̂ = g², so update = lr·g/(|g|+eps)
        let expect = [1.0 - lr, 1.0 + lr, 1.0 - lr * 1e-3 / (1e-3 + 1e-8)];
        for (w, e) in ps[0].data().iter().zip(expect) {
            assert!((f64::from(*w) - e).abs() < 1e-6, "{w} vs {e}");
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut ps = vec![param(&[1.0, 2.0])];
        let mut st = OptimState::new(OptimConfig::adam(0.1));
        let err = st.step(&mut ps, &[Tensor::zeros(&[3])]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn step_counter_increases() {
        let mut ps = vec![param(&[1.0])];
        let mut st = OptimState::new(OptimConfig::adam(0.1));
        for k in 1..=4 {
            st.step(&mut ps, &[Tensor::full(&[1], 1.0)]).unwrap();
            assert_eq!(st.steps(), k);
        }
    }
}
