//! Fused per-layer analysis.
//!
//! Computes the entropy decomposition and the cumulant profile of one layer
//! in three sweeps over the logits, with one `exp` per logit. This is the
//! path `analyze` takes; [`crate::prob`] and [`crate::cumulant`] hold the
//! step-by-step versions it is tested against.
//!
//! Work is split over tokens (and over fixed 64-token blocks for the center),
//! and every cross-token reduction runs in a fixed order, so the output does
//! not depend on the number of workers.

use rayon::prelude::*;
use serde::Serialize;

use crate::cumulant::{cumulants_from_central, CumulantProfile};
use crate::prob::EntropyReport;
use crate::store::{LayerLogits, Logit};
use crate::sum::{pairwise_fold, pairwise_sum_by, symmetric_sum, Cascade};
use crate::{Error, Result, MAX_SUPPORTED_ORDER};

const TOKEN_BLOCK: usize = 64;

/// Below this the column mean may have lost mass to underflow, and the
/// center log-probability is recomputed in the log domain.
const LOG_DOMAIN_THRESHOLD: f64 = 1e-280;

/// Everything computed for one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub entropy: EntropyReport,
    pub profile: CumulantProfile,
}

/// Shape and settings for [`analyze_layer`].
#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub layer: usize,
    pub tokens: usize,
    pub vocab: usize,
    pub beta: f64,
    pub max_order: usize,
    pub keep_per_token: bool,
}

/// Analyzes one layer of `tokens × vocab` logits.
pub fn analyze_layer(logits: LayerLogits<'_>, params: &LayerParams) -> Result<LayerStats> {
    match logits {
        LayerLogits::F32(x) => analyze_typed(x, params),
        LayerLogits::F64(x) => analyze_typed(x, params),
    }
}

fn analyze_typed<T: Logit>(x: &[T], params: &LayerParams) -> Result<LayerStats> {
    let &LayerParams {
        layer,
        tokens: n,
        vocab: v,
        beta,
        max_order: k,
        keep_per_token,
    } = params;
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidBeta(beta));
    }
    if !(2..=MAX_SUPPORTED_ORDER).contains(&k) {
        return Err(Error::UnsupportedOrder(k));
    }
    if n == 0 {
        return Err(Error::Empty("layer with zero tokens"));
    }
    if v < 2 {
        return Err(Error::Invalid(format!("vocab must be >= 2, got {v}")));
    }
    if x.len() != n * v {
        return Err(Error::ShapeMismatch(x.len(), n * v));
    }

    // Sweep 1: token softmax rows and log-partition functions.
    let mut probs = vec![0.0f64; n * v];
    let log_z: Vec<f64> = probs
        .par_chunks_mut(v)
        .zip(x.par_chunks(v))
        .enumerate()
        .map(|(t, (p, row))| softmax_row(row, beta, p).map_err(|j| non_finite(layer, t, j, row[j])))
        .collect::<std::result::Result<_, _>>()?;

    // Sweep 2: center distribution, summed over fixed token blocks.
    let block_sums: Vec<Vec<f64>> = probs
        .par_chunks(TOKEN_BLOCK * v)
        .map(|block| {
            let mut acc = vec![0.0; v];
            for row in block.chunks_exact(v) {
                for (a, p) in acc.iter_mut().zip(row) {
                    *a += p;
                }
            }
            acc
        })
        .collect();
    let mut tree = Cascade::new();
    for b in block_sums {
        tree.push(b);
    }
    let mut center = tree.finish().expect("at least one token");
    let ln_n = (n as f64).ln();
    let log_center: Vec<f64> = center
        .par_iter_mut()
        .enumerate()
        .map(|(j, c)| {
            *c /= n as f64;
            if *c >= LOG_DOMAIN_THRESHOLD {
                c.ln()
            } else {
                column_log_mean(x, &log_z, v, j, beta) - ln_n
            }
        })
        .collect();
    let center_entropy = -pairwise_sum_by(v, |j| {
        if center[j] > 0.0 {
            center[j] * log_center[j]
        } else {
            0.0
        }
    });
    let mu: Vec<f64> = log_center.iter().map(|l| l / beta).collect();

    // Sweep 3: per-token entropy, KL and cumulants of δX = X − μ.
    let per_token: Vec<(f64, f64, Vec<f64>)> = probs
        .par_chunks(v)
        .zip(x.par_chunks(v))
        .zip(log_z.par_iter())
        .enumerate()
        .map(|(t, ((p, row), &lz))| {
            token_stats(p, row, lz, &log_center, &mu, beta, k).map_err(|e| match e {
                Error::Range { order } => Error::Invalid(format!(
                    "layer {layer} token {t}: moment of order {order} overflowed"
                )),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    drop(probs);

    let per_token_entropy: Vec<f64> = per_token.iter().map(|s| s.0).collect();
    let per_token_kl: Vec<f64> = per_token.iter().map(|s| s.1).collect();
    let cumulants: Vec<Vec<f64>> = per_token.into_iter().map(|s| s.2).collect();
    let entropy = EntropyReport {
        layer,
        mean_entropy: symmetric_sum(&per_token_entropy) / n as f64,
        center_entropy: center_entropy.max(0.0),
        mean_kl: symmetric_sum(&per_token_kl) / n as f64,
        per_token_entropy,
        per_token_kl,
    }
    .checked()?;
    let profile = CumulantProfile::from_token_cumulants(layer, k, cumulants, keep_per_token);
    Ok(LayerStats { entropy, profile })
}

fn non_finite(layer: usize, token: usize, vocab: usize, value: impl std::fmt::Debug) -> Error {
    Error::NonFinite(format!(
        "layer {layer} token {token} vocab {vocab} is {value:?}"
    ))
}

/// Fills `out` with `softmax(beta · row)` and returns `ln Z`; on a
/// non-finite logit returns its index.
fn softmax_row<T: Logit>(row: &[T], beta: f64, out: &mut [f64]) -> std::result::Result<f64, usize> {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if !x.is_finite() {
            return Err(j);
        }
        max = max.max(beta * x.to_f64());
    }
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (beta * x.to_f64() - max).exp();
    }
    let z = pairwise_sum_by(out.len(), |j| out[j]);
    let inv = 1.0 / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(max + z.ln())
}

/// `ln Σ_t p_tj` computed from logits, for columns that underflow.
fn column_log_mean<T: Logit>(x: &[T], log_z: &[f64], v: usize, j: usize, beta: f64) -> f64 {
    let logs: Vec<f64> = log_z
        .iter()
        .enumerate()
        .map(|(t, lz)| beta * x[t * v + j].to_f64() - lz)
        .collect();
    crate::prob::log_sum_exp_symmetric(&logs)
}

/// Entropy, KL to the center, and `κ_1..κ_k` of one token.
fn token_stats<T: Logit>(
    p: &[f64],
    row: &[T],
    log_z: f64,
    log_center: &[f64],
    mu: &[f64],
    beta: f64,
    k: usize,
) -> Result<(f64, f64, Vec<f64>)> {
    let [neg_h, kl, mean] = pairwise_fold::<3>(p.len(), |j, acc| {
        let w = p[j];
        if w > 0.0 {
            let x = row[j].to_f64();
            let lp = beta * x - log_z;
            acc[0] += w * lp;
            acc[1] += w * (lp - log_center[j]);
            acc[2] += w * (x - mu[j]);
        }
    });
    let central = pairwise_fold::<MAX_SUPPORTED_ORDER>(p.len(), |j, acc| {
        let w = p[j];
        if w > 0.0 {
            let e = row[j].to_f64() - mu[j] - mean;
            let mut term = w * e * e;
            for a in acc[1..k].iter_mut() {
                *a += term;
                term *= e;
            }
        }
    });
    if let Some(i) = central[..k].iter().position(|c| !c.is_finite()) {
        return Err(Error::Range { order: i + 1 });
    }
    let kappa = cumulants_from_central(mean, &central[..k])?;
    Ok(((-neg_h).max(0.0), kl.max(0.0), kappa))
}
