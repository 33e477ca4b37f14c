use bacl_numerics::Tensor;

use super::config::OptimizerConfig;
use crate::error::{Error, Result};

/// Per-parameter optimizer state. Every parameter is updated on every step;
/// a parameter that received no gradient is treated as having a zero one.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub lr: f64,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, lr: f64, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        let (first, second) = match config {
            OptimizerConfig::Sgd => (Vec::new(), Vec::new()),
            OptimizerConfig::Adamw { .. } => (zeros(), zeros()),
        };
        Self {
            config,
            lr,
            step: 0,
            first,
            second,
        }
    }

    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                op: "optimizer step",
                left: params.len(),
                right: grads.len(),
            });
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    **p = p.zip_map(g, "sgd", |w, g| w - self.lr * g)?;
                }
            }
            OptimizerConfig::Adamw {
                weight_decay,
                beta1,
                beta2,
                eps,
            } => {
                if self.first.len() != params.len() {
                    return Err(Error::LengthMismatch {
                        op: "optimizer state",
                        left: self.first.len(),
                        right: params.len(),
                    });
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let lr = self.lr;
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.first[i].zip_map(g, "adamw", |m, g| beta1 * m + (1.0 - beta1) * g)?;
                    let v = self.second[i].zip_map(g, "adamw", |v, g| beta2 * v + (1.0 - beta2) * g * g)?;
                    let mut w = p.data().to_vec();
                    for ((w, &m), &v) in w.iter_mut().zip(m.data()).zip(v.data()) {
                        let update = (m / c1) / ((v / c2).sqrt() + eps);
                        *w -= lr * (update + weight_decay * *w);
                    }
                    **p = Tensor::new(p.shape().to_vec(), w)?;
                    self.first[i] = m;
                    self.second[i] = v;
                }
            }
        }
        Ok(())
    }
}
