//! Sigmoid focal loss with its analytic gradient.
//!
//! Per class with `p = sigmoid(x)`:
//!
//! ```text
//! t = 1:  L = -a (1-p)^g log p         dL/dx = a (1-p)^g (g p log p - (1-p))
//! t = 0:  L = -(1-a) p^g log(1-p)      dL/dx = (1-a) p^g (p - g (1-p) log(1-p))
//! ```
//!
//! `log p` and `log(1-p)` are evaluated through softplus so that saturated
//! logits neither overflow nor lose the tail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalLossParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalLossParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::range("alpha", format!("{} not in (0, 1)", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::range("gamma", format!("{} must be >= 0", self.gamma)));
        }
        Ok(())
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `t^g` with `0^0 = 1`.
fn powg(t: f64, g: f64) -> f64 {
    if g == 0.0 {
        1.0
    } else {
        t.powf(g)
    }
}

/// Focal loss and gradient for a single logit.
pub fn focal_term(logit: f64, positive: bool, params: FocalLossParams) -> (f64, f64) {
    let FocalLossParams { alpha, gamma } = params;
    let p = super::head::sigmoid(logit);
    let q = super::head::sigmoid(-logit);
    if positive {
        let log_p = -softplus(-logit);
        let w = alpha * powg(q, gamma);
        (-w * log_p, w * (gamma * p * log_p - q))
    } else {
        let log_q = -softplus(logit);
        let w = (1.0 - alpha) * powg(p, gamma);
        (-w * log_q, w * (p - gamma * q * log_q))
    }
}

/// Sum over classes of the focal term; gradient with respect to each logit.
pub fn focal_loss_and_grad(
    logits: &[f64],
    targets: &[f64],
    params: FocalLossParams,
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() {
        return Err(Error::dim("focal targets", logits.len(), targets.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &t) in logits.iter().zip(targets) {
        let (l, g) = focal_term(x, t >= 0.5, params);
        loss += l;
        grad.push(g);
    }
    Ok((loss, grad))
}
