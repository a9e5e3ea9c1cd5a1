//! First-order optimizers over [`StudentModel`] parameters.

use serde::{Deserialize, Serialize};

use crate::student::{Gradients, StudentModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: one moment buffer pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, model: &StudentModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|(_, _, d)| vec![0.0; d.len()]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            lr,
            step: 0,
            first: zeros,
            second,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut StudentModel, grads: &Gradients) {
        self.step += 1;
        let grads = grads.tensors();
        let params = model.tensors_mut();
        debug_assert_eq!(grads.len(), params.len());
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), vel) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for i in 0..p.len() {
                        vel[i] = momentum * vel[i] + g[i];
                        p[i] -= self.lr * vel[i];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::HeadMode;

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::default(), OptimizerKind::SgdMomentum { momentum: 0.9 }] {
            let mut m = StudentModel::init(4, Some(3), 2, 2, HeadMode::Fc, 5).unwrap();
            let before = m.clone();
            let mut opt = Optimizer::new(kind, 1e-2, &m);
            let g = Gradients::zeros_like(&m);
            for _ in 0..5 {
                opt.step(&mut m, &g);
            }
            assert_eq!(m, before, "{kind:?}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = StudentModel::init(2, None, 2, 2, HeadMode::Fc, 5).unwrap();
        let before = m.projection.weight[0];
        let mut g = Gradients::zeros_like(&m);
        g.projection_weight[0] = 3.0;
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.01, &m);
        opt.step(&mut m, &g);
        assert!((before - m.projection.weight[0] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut m = StudentModel::init(2, None, 2, 2, HeadMode::Fc, 5).unwrap();
        let before = m.classifier.bias[1];
        let mut g = Gradients::zeros_like(&m);
        g.classifier_bias[1] = 1.0;
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.5 }, 0.1, &m);
        opt.step(&mut m, &g);
        opt.step(&mut m, &g);
        // velocities 1.0 then 1.5
        assert!((before - m.classifier.bias[1] - 0.25).abs() < 1e-12);
    }
}
