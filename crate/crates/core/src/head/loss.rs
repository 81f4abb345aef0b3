//! Binary multi-label losses over sets of logit cells.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Zero-threshold log-sum-exp ranking loss, pooled over all cells of a head.
    Zlpr,
    /// Mean binary cross-entropy with logits.
    Ce,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "zlpr" => Ok(LossKind::Zlpr),
            "ce" => Ok(LossKind::Ce),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Zlpr => "zlpr",
            LossKind::Ce => "ce",
        })
    }
}

/// `log(1 + sum(exp(x)))`, stable for large `x`.
fn log1p_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(0.0f64, f64::max);
    let sum = (-max).exp() + xs.map(|x| (x - max).exp()).sum::<f64>();
    max + sum.ln()
}

/// `log(1 + exp(z))`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one logit against one label.
pub fn bce_with_logits(z: f64, label: bool) -> f64 {
    if label {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// Loss over `logits` with `labels`, and its gradient with respect to each logit.
///
/// * `Ce`: mean of [`bce_with_logits`] over the cells.
/// * `Zlpr`: `log(1 + sum_pos exp(-z)) + log(1 + sum_neg exp(z))`.
///
/// An empty cell set has loss 0.
pub fn binary_loss(logits: &[f64], labels: &[bool], kind: LossKind) -> (f64, Vec<f64>) {
    debug_assert_eq!(logits.len(), labels.len());
    if logits.is_empty() {
        return (0.0, Vec::new());
    }
    match kind {
        LossKind::Ce => {
            let n = logits.len() as f64;
            let loss = logits
                .iter()
                .zip(labels)
                .map(|(&z, &y)| bce_with_logits(z, y))
                .sum::<f64>()
                / n;
            let grad = logits
                .iter()
                .zip(labels)
                .map(|(&z, &y)| (sigmoid(z) - f64::from(u8::from(y))) / n)
                .collect();
            (loss, grad)
        }
        LossKind::Zlpr => {
            let cells = || logits.iter().zip(labels);
            let pos = cells().filter(|(_, &y)| y).map(|(&z, _)| -z);
            let neg = cells().filter(|(_, &y)| !y).map(|(&z, _)| z);
            let lse_pos = log1p_sum_exp(pos);
            let lse_neg = log1p_sum_exp(neg);
            let grad = cells()
                .map(|(&z, &y)| {
                    if y {
                        -(-z - lse_pos).exp()
                    } else {
                        (z - lse_neg).exp()
                    }
                })
                .collect();
            (lse_pos + lse_neg, grad)
        }
    }
}

pub fn loss_total(qtc: f64, top: f64, lambda: f64) -> f64 {
    qtc + lambda * top
}
