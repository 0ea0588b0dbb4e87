//! Softmax, cross-entropy and KL divergence on logits.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoftLabel {
    pub probs: Vec<f64>,
}

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Argument("soft label entries must be finite and non-negative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Argument(format!("soft label sums to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        Self { probs: softmax(logits) }
    }

    pub fn one_hot(label: usize, classes: usize) -> Self {
        let mut probs = vec![0.0; classes];
        probs[label] = 1.0;
        Self { probs }
    }

    /// Most probable class; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Argument(format!("label {label} outside [0, {})", logits.len())));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// `KL(teacher || softmax(student_logits))`, with `0 ln 0 = 0`.
pub fn kl_loss(teacher: &SoftLabel, student_logits: &[f64]) -> f64 {
    let log_s = log_softmax(student_logits);
    teacher.probs.iter().zip(&log_s).filter(|(t, _)| **t > 0.0).map(|(t, ls)| t * (t.ln() - ls)).sum()
}

/// What an example is trained toward.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Gold class, cross-entropy.
    Label(usize),
    /// Teacher distribution, KL divergence.
    Soft(SoftLabel),
}

impl Target {
    /// Loss value and its gradient with respect to the logits. Both losses
    /// share the gradient `softmax(logits) - target`.
    pub fn loss_and_grad(&self, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = softmax(logits);
        match self {
            Target::Label(y) => {
                let loss = cross_entropy_loss(logits, *y)?;
                grad[*y] -= 1.0;
                Ok((loss, grad))
            }
            Target::Soft(t) => {
                if t.probs.len() != logits.len() {
                    return Err(Error::Model(format!(
                        "soft label has {} classes, logits {}",
                        t.probs.len(),
                        logits.len()
                    )));
                }
                for (g, p) in grad.iter_mut().zip(&t.probs) {
                    *g -= p;
                }
                Ok((kl_loss(t, logits), grad))
            }
        }
    }
}
