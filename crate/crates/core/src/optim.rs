//! First-order optimizers with an optional cosine-annealed learning rate.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::Parameter;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd => f.write_str("sgd"),
            OptimizerKind::SgdMomentum { .. } => f.write_str("sgd-momentum"),
            OptimizerKind::Adam { .. } => f.write_str("adam"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    /// Parses `sgd`, `sgd-momentum` (β = 0.9) or `adam` (0.9, 0.999, 1e-8).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgd-momentum" => Ok(OptimizerKind::SgdMomentum { momentum: 0.9 }),
            "adam" => Ok(OptimizerKind::adam()),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected sgd, sgd-momentum or adam)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    first: Tensor,
    second: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    base_lr: f64,
    lr: f64,
    /// Cosine annealing period in epochs.
    cosine_period: Option<usize>,
    steps: u64,
    state: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            base_lr: lr,
            lr,
            cosine_period: None,
            steps: 0,
            state: Vec::new(),
        })
    }

    pub fn with_cosine(mut self, period_epochs: usize) -> Self {
        self.cosine_period = Some(period_epochs.max(1));
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Learning rate at the start of `epoch` under the configured schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.cosine_period {
            Some(period) => {
                let t = (epoch.min(period)) as f64 / period as f64;
                0.5 * self.base_lr * (1.0 + (PI * t).cos())
            }
            None => self.base_lr,
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.lr_at(epoch);
    }

    /// Bytes held in moment buffers.
    pub fn state_bytes(&self) -> usize {
        self.state
            .iter()
            .map(|s| s.first.size_bytes() + s.second.as_ref().map_or(0, Tensor::size_bytes))
            .sum()
    }

    /// Applies one update to every parameter that requires a gradient and
    /// clears the gradients. Parameters are identified by position, so the
    /// same ordering must be passed on every call.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.requires_grad && p.grad.is_none() {
                return Err(Error::MissingGrad(i));
            }
        }
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| Slot {
                    first: Tensor::zeros(p.value.shape()),
                    second: matches!(self.kind, OptimizerKind::Adam { .. })
                        .then(|| Tensor::zeros(p.value.shape())),
                })
                .collect();
        } else if self.state.len() != params.len()
            || self.state.iter().zip(params.iter()).any(|(s, p)| s.first.shape() != p.value.shape())
        {
            return Err(Error::Invalid("parameter set changed between optimizer steps".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let lr = self.lr;

        for (slot, p) in self.state.iter_mut().zip(params.iter_mut()) {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let g = grad.data();
            let w = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(g) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::SgdMomentum { momentum } => {
                    let v = slot.first.data_mut();
                    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = slot.first.data_mut();
                    let v = slot.second.as_mut().expect("adam slot").data_mut();
                    for (((w, g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("optimizer step".into()));
            }
        }
        Ok(())
    }
}
