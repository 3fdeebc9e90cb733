use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

/// Optimizer with per-parameter moment buffers. Weight decay `λ` adds `λ·w`
/// to every gradient before the update.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Result<Self> {
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        let lr = match kind {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        };
        if !(lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(Self {
            kind,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Nothing is written if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "parameter {i} is {:?}, gradient is {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            g.check_finite()
                .map_err(|_| Error::numeric(format!("non-finite gradient for parameter {i}")))?;
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::shape("moment buffers do not match parameters"));
        }
        self.steps += 1;
        let lambda = self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd { lr, momentum } => {
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &gv), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        let wf = *w as f64;
                        *v = momentum * *v - lr * (gv as f64 + lambda * wf);
                        *w = (wf + *v) as f32;
                    }
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m1), m2) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &gv), a), b) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m1.iter_mut())
                        .zip(m2.iter_mut())
                    {
                        let wf = *w as f64;
                        let gd = gv as f64 + lambda * wf;
                        *a = beta1 * *a + (1.0 - beta1) * gd;
                        *b = beta2 * *b + (1.0 - beta2) * gd * gd;
                        let update = lr * (*a / c1) / ((*b / c2).sqrt() + eps);
                        *w = (wf - update) as f32;
                    }
                }
            }
        }
        for (i, p) in params.iter().enumerate() {
            p.check_finite()
                .map_err(|_| Error::numeric(format!("parameter {i} became non-finite")))?;
        }
        Ok(())
    }
}
