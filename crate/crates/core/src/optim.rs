//! First-order optimizers over a flat list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Algorithm {
    Adam { beta1: f32, beta2: f32, eps: f32 },
    Sgd,
}

impl Default for Algorithm {
    fn default() -> Self {
        Algorithm::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub algorithm: Algorithm,
    pub lr: f32,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(algorithm: Algorithm, lr: f32) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        Ok(OptimizerState {
            algorithm,
            lr,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn adam(lr: f32) -> Result<Self> {
        Self::new(Algorithm::default(), lr)
    }

    pub fn sgd(lr: f32) -> Result<Self> {
        Self::new(Algorithm::Sgd, lr)
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "optimizer got {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "parameter {i} has shape {:?} but gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if let Algorithm::Adam { .. } = self.algorithm {
            if self.first_moment.is_empty() {
                self.first_moment = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                self.second_moment = self.first_moment.clone();
            } else if self.first_moment.len() != params.len()
                || self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
            {
                return Err(Error::Contract("parameter set changed between optimizer steps".into()));
            }
        }
        self.step += 1;
        let lr = self.lr;
        match self.algorithm {
            Algorithm::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            Algorithm::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
                {
                    let (pw, gd) = (p.data_mut(), g.data());
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for i in 0..pw.len() {
                        md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                        vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                        let m_hat = md[i] / c1;
                        let v_hat = vd[i] / c2;
                        pw[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
