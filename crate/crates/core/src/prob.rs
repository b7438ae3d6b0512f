//! Probability primitives over a vocabulary: temperature softmax, Shannon
//! entropy, KL divergence, the center distribution of a set of tokens, and
//! the exact decomposition of mean token entropy around that center.
//!
//! All quantities are in nats. Sums over the vocabulary are pairwise.

use rayon::prelude::*;
use serde::Serialize;

use crate::store::LogitDump;
use crate::sum::{pairwise_sum, pairwise_sum_by, symmetric_sum};
use crate::{Error, Result};

/// Largest tolerated gap in the entropy identity before a layer is rejected.
pub const IDENTITY_TOLERANCE: f64 = 1e-6;

/// A probability vector together with its natural logarithms.
///
/// `log_probs[j]` is computed directly in the log domain wherever possible;
/// it is `-inf` only where `probs[j]` is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ProbVector {
    /// Wraps plain probabilities, checking they form a distribution.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("probability vector"));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0 && **p <= 1.0)) {
            return Err(Error::Invalid(format!("probability {p} outside [0, 1]")));
        }
        let total = pairwise_sum(&probs);
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("probabilities sum to {total}")));
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(ProbVector { probs, log_probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `ln Σ exp(v)` with max shifting; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + pairwise_sum_by(values.len(), |i| (values[i] - max).exp()).ln()
}

/// [`log_sum_exp`] whose result does not depend on the order of `values`.
pub fn log_sum_exp_symmetric(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let terms: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    max + symmetric_sum(&terms).ln()
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidBeta(beta))
    }
}

/// `softmax(beta · logits)`.
pub fn softmax(logits: &[f64], beta: f64) -> Result<ProbVector> {
    check_beta(beta)?;
    if logits.len() < 2 {
        return Err(Error::Invalid(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i} is {}", logits[i])));
    }
    let scaled: Vec<f64> = logits.iter().map(|&x| beta * x).collect();
    let log_z = log_sum_exp(&scaled);
    let log_probs: Vec<f64> = scaled.iter().map(|&s| s - log_z).collect();
    let probs = log_probs.iter().map(|&lp| lp.exp()).collect();
    Ok(ProbVector { probs, log_probs })
}

/// Shannon entropy `−Σ p ln p`, with `0 · ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    let h = -pairwise_sum_by(p.len(), |j| {
        let pj = p.probs[j];
        if pj > 0.0 {
            pj * p.log_probs[j]
        } else {
            0.0
        }
    });
    h.max(0.0)
}

/// `D_KL(p ‖ q)`; errors where `q` is zero but `p` is not.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(p.len(), q.len()));
    }
    if let Some(index) = (0..p.len()).find(|&j| p.probs[j] > 0.0 && q.probs[j] == 0.0) {
        return Err(Error::SupportViolation {
            index,
            p: p.probs[index],
        });
    }
    let kl = pairwise_sum_by(p.len(), |j| {
        let pj = p.probs[j];
        if pj > 0.0 {
            pj * (p.log_probs[j] - q.log_probs[j])
        } else {
            0.0
        }
    });
    Ok(kl.max(0.0))
}

/// The distribution minimizing total KL from the rows to it: their mean.
///
/// Log-probabilities are taken in the log domain (log-sum-exp over the rows'
/// log-probabilities minus `ln N`), so entries whose row probabilities all
/// underflow still get a finite logarithm. Sums over rows are
/// order-independent, so permuting the rows leaves the result bit-identical.
pub fn center_distribution(rows: &[ProbVector]) -> Result<ProbVector> {
    let n = rows.len();
    let first = rows.first().ok_or(Error::Empty("center of zero tokens"))?;
    let v = first.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != v) {
        return Err(Error::ShapeMismatch(bad.len(), v));
    }
    let ln_n = (n as f64).ln();
    let (probs, log_probs): (Vec<f64>, Vec<f64>) = (0..v)
        .into_par_iter()
        .map(|j| {
            let probs: Vec<f64> = rows.iter().map(|r| r.probs[j]).collect();
            let logs: Vec<f64> = rows.iter().map(|r| r.log_probs[j]).collect();
            (
                symmetric_sum(&probs) / n as f64,
                log_sum_exp_symmetric(&logs) - ln_n,
            )
        })
        .unzip();
    Ok(ProbVector { probs, log_probs })
}

/// Entropy split of one layer: `mean_entropy = center_entropy − mean_kl`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyReport {
    pub layer: usize,
    /// Mean of the tokens' softmax entropies.
    pub mean_entropy: f64,
    /// Entropy of the center distribution.
    pub center_entropy: f64,
    /// Mean KL divergence from each token to the center (the interaction).
    pub mean_kl: f64,
    pub per_token_entropy: Vec<f64>,
    pub per_token_kl: Vec<f64>,
}

impl EntropyReport {
    /// `|mean_entropy − (center_entropy − mean_kl)|`.
    pub fn identity_gap(&self) -> f64 {
        (self.mean_entropy - (self.center_entropy - self.mean_kl)).abs()
    }

    pub(crate) fn checked(self) -> Result<Self> {
        let gap = self.identity_gap();
        if gap.is_finite() && gap <= IDENTITY_TOLERANCE {
            Ok(self)
        } else {
            Err(Error::Inconsistent {
                layer: self.layer,
                gap,
            })
        }
    }
}

/// Softmax rows of one layer at the dump's beta.
pub fn layer_softmax(dump: &LogitDump, layer: usize) -> Result<Vec<ProbVector>> {
    layer_softmax_with(dump, layer, dump.beta())
}

pub(crate) fn layer_softmax_with(
    dump: &LogitDump,
    layer: usize,
    beta: f64,
) -> Result<Vec<ProbVector>> {
    let logits = dump.layer(layer)?;
    let v = dump.vocab();
    (0..dump.tokens())
        .into_par_iter()
        .map(|t| softmax(&logits.row_f64(t, v), beta))
        .collect()
}

/// Entropy decomposition of `layer`, verified against the exact identity.
pub fn entropy_decomposition(dump: &LogitDump, layer: usize) -> Result<EntropyReport> {
    let rows = layer_softmax(dump, layer)?;
    let center = center_distribution(&rows)?;
    let per_token: Vec<(f64, f64)> = rows
        .par_iter()
        .map(|p| Ok((entropy(p), kl_divergence(p, &center)?)))
        .collect::<Result<_>>()?;
    let n = per_token.len() as f64;
    let per_token_entropy: Vec<f64> = per_token.iter().map(|x| x.0).collect();
    let per_token_kl: Vec<f64> = per_token.iter().map(|x| x.1).collect();
    EntropyReport {
        layer,
        mean_entropy: symmetric_sum(&per_token_entropy) / n,
        center_entropy: entropy(&center),
        mean_kl: symmetric_sum(&per_token_kl) / n,
        per_token_entropy,
        per_token_kl,
    }
    .checked()
}
