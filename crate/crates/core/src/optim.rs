//! First-order optimizers.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradient;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    /// Adam with `(beta1, beta2, eps) = (0.9, 0.999, 1e-8)`.
    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        let state = Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        let open_unit = |b: f64| b > 0.0 && b < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("Adam needs 0 < beta < 1 and eps > 0".into()));
        }
        Ok(())
    }

    /// Applies one update. `grads[i]` must match `params[i]` in shape;
    /// parameter identity is positional, the `param` ids are not consulted.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Gradient]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} params, {} gradients", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.value.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("param {:?} vs gradient {:?}", p.shape(), g.value.shape()),
                ));
            }
            g.value.check_finite("gradient")?;
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.value.data()) {
                        *x -= self.learning_rate * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.is_empty() {
                    self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                    self.second = self.first.clone();
                } else if self.first.len() != params.len()
                    || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
                {
                    return Err(Error::shape("optimizer_step", "parameter set changed"));
                }
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut().zip(self.second.iter_mut()))
                {
                    for (((x, &d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.value.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *x -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
