//! Soft-target entropy losses over logits.
//!
//! Both losses share the gradient `softmax(z) - q`; they differ only by the
//! target entropy `H(q)`, which is constant in the logits. All values are
//! in nats.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoothing::{TargetDistribution, TargetTable};
use crate::vocab::PAD_ID;

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Contract("empty logits".into()));
    }
    if let Some(pos) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit at position {pos}")));
    }
    Ok(())
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn check_dims(q: &TargetDistribution, logits: &[f64]) -> Result<()> {
    if q.vocab_size != logits.len() {
        return Err(Error::Contract(format!(
            "target over {} classes but {} logits",
            q.vocab_size,
            logits.len()
        )));
    }
    check_finite(logits)
}

fn gradient(q: &TargetDistribution, logits: &[f64]) -> Result<Vec<f64>> {
    let mut grad = softmax(logits)?;
    for (m, p) in q.nonzero() {
        grad[m] -= p;
    }
    Ok(grad)
}

/// `-Σ q log softmax(z)`.
pub fn cross_entropy_soft(q: &TargetDistribution, logits: &[f64]) -> Result<LossResult> {
    check_dims(q, logits)?;
    let lse = log_sum_exp(logits);
    let loss = q.nonzero().map(|(m, p)| p * (lse - logits[m])).sum();
    Ok(LossResult {
        loss,
        gradient: gradient(q, logits)?,
    })
}

/// `Σ q (log q - log softmax(z))`, with 0·log 0 = 0.
pub fn kl_divergence_loss(q: &TargetDistribution, logits: &[f64]) -> Result<LossResult> {
    check_dims(q, logits)?;
    let lse = log_sum_exp(logits);
    let loss: f64 = q
        .nonzero()
        .map(|(m, p)| p * (p.ln() + lse - logits[m]))
        .sum();
    Ok(LossResult {
        loss: loss.max(0.0),
        gradient: gradient(q, logits)?,
    })
}

/// A per-token training objective.
pub trait EntropyLoss: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn evaluate(&self, q: &TargetDistribution, logits: &[f64]) -> Result<LossResult>;
}

#[derive(Debug, Clone, Copy)]
pub struct CrossEntropy;

impl EntropyLoss for CrossEntropy {
    fn name(&self) -> &'static str {
        "ce"
    }

    fn evaluate(&self, q: &TargetDistribution, logits: &[f64]) -> Result<LossResult> {
        cross_entropy_soft(q, logits)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KlDivergence;

impl EntropyLoss for KlDivergence {
    fn name(&self) -> &'static str {
        "kl"
    }

    fn evaluate(&self, q: &TargetDistribution, logits: &[f64]) -> Result<LossResult> {
        kl_divergence_loss(q, logits)
    }
}

/// The two loss families, as named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Kl,
}

impl LossKind {
    pub const ALL: [LossKind; 2] = [LossKind::Ce, LossKind::Kl];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Kl => "kl",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::Ce),
            "kl" => Ok(LossKind::Kl),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected ce or kl)"))),
        }
    }
}

/// Name → loss map.
pub struct LossRegistry {
    losses: BTreeMap<&'static str, Box<dyn EntropyLoss>>,
}

impl Default for LossRegistry {
    fn default() -> Self {
        let mut registry = Self {
            losses: BTreeMap::new(),
        };
        registry.register(Box::new(CrossEntropy));
        registry.register(Box::new(KlDivergence));
        registry
    }
}

impl LossRegistry {
    pub fn register(&mut self, loss: Box<dyn EntropyLoss>) {
        self.losses.insert(loss.name(), loss);
    }

    pub fn get(&self, name: &str) -> Result<&dyn EntropyLoss> {
        self.losses
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Config(format!("no loss named `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.losses.keys().copied()
    }
}

/// Mean loss over the non-pad rows of `logits` and the gradient of that
/// mean. Rows whose target is `[pad]` get a zero gradient.
pub fn batch_loss(
    table: &TargetTable,
    targets: &[usize],
    logits: &Array2<f64>,
    loss: &dyn EntropyLoss,
) -> Result<(f64, Array2<f64>)> {
    if targets.len() != logits.nrows() {
        return Err(Error::Contract(format!(
            "{} targets but {} logit rows",
            targets.len(),
            logits.nrows()
        )));
    }
    let active = targets.iter().filter(|&&t| t != PAD_ID).count();
    if active == 0 {
        return Err(Error::Contract("batch contains only padding".into()));
    }
    let scale = 1.0 / active as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (row, &target) in targets.iter().enumerate() {
        if target == PAD_ID {
            continue;
        }
        let q = table.get(target)?;
        let z = logits.row(row);
        let result = match z.as_slice() {
            Some(slice) => loss.evaluate(&q, slice)?,
            None => loss.evaluate(&q, &z.to_vec())?,
        };
        if !result.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at batch row {row}")));
        }
        total += result.loss;
        for (g, r) in grad.row_mut(row).iter_mut().zip(result.gradient) {
            *g = r * scale;
        }
    }
    Ok((total * scale, grad))
}
