//! Monte Carlo check that token-averaged cumulants equal the cumulants of the
//! aggregate deviation divided by the token count.
//!
//! One sample draws a vocabulary index `t_i ~ p_β(X_i)` for every token `i`
//! and sums `δX_{i,t_i}`. The tokens are independent, so the aggregate's
//! cumulants are the sums of the per-token cumulants.
//!
//! Samples are produced in fixed-size chunks. Chunk `c` draws from its own
//! ChaCha8 stream seeded with `seed ^ splitmix64(c)`, so the sample vector is
//! the same for any number of workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedAliasIndex};
use rayon::prelude::*;
use serde::Serialize;

use crate::cumulant::{cumulants_from_central, deviations, layer_cumulant_profile, DeviationView};
use crate::rng::substream_seed;
use crate::store::LogitDump;
use crate::sum::{pairwise_fold, pairwise_sum};
use crate::{Error, Result, MAX_SUPPORTED_ORDER};

/// Number of equal batches used for standard errors.
pub const BATCHES: usize = 20;
/// Largest order the oracle checks.
pub const MAX_MC_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct McConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub max_order: usize,
    /// Samples per independent substream.
    pub chunk_size: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_samples: 1_000_000,
            seed: 0,
            max_order: 4,
            chunk_size: 1 << 16,
        }
    }
}

impl McConfig {
    pub fn new(n_samples: usize, seed: u64, max_order: usize) -> Self {
        McConfig {
            n_samples,
            seed,
            max_order,
            chunk_size: McConfig::default().chunk_size.min(n_samples.max(1)),
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(2..=MAX_MC_ORDER).contains(&self.max_order) {
            return Err(Error::UnsupportedOrder(self.max_order));
        }
        let need = (10 * self.max_order).max(BATCHES);
        if self.n_samples < need {
            return Err(Error::TooFewSamples {
                have: self.n_samples,
                need,
            });
        }
        if self.chunk_size == 0 || self.chunk_size > self.n_samples {
            return Err(Error::Invalid(format!(
                "chunk_size must be in 1..={}, got {}",
                self.n_samples, self.chunk_size
            )));
        }
        Ok(())
    }
}

/// Draws `cfg.n_samples` realizations of `Σ_i δX_{i,t_i}` for `layer`.
pub fn sample_aggregate_deviation(
    dump: &LogitDump,
    layer: usize,
    cfg: &McConfig,
) -> Result<Vec<f64>> {
    cfg.check()?;
    sample_views(deviations(dump, layer)?, cfg)
}

/// Sampler over explicit deviation views, one independent draw per view.
pub fn sample_views(views: Vec<DeviationView>, cfg: &McConfig) -> Result<Vec<f64>> {
    cfg.check()?;
    let tokens: Vec<(Vec<f64>, WeightedAliasIndex<f64>)> = views
        .into_par_iter()
        .map(|view| {
            let alias = WeightedAliasIndex::new(view.weights.probs().to_vec())
                .map_err(|e| Error::Invalid(format!("token {}: {e}", view.token_index)))?;
            Ok((view.delta, alias))
        })
        .collect::<Result<_>>()?;

    let mut samples = vec![0.0; cfg.n_samples];
    samples
        .par_chunks_mut(cfg.chunk_size)
        .enumerate()
        .for_each(|(chunk, out)| {
            let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, chunk as u64));
            for s in out.iter_mut() {
                let mut total = 0.0;
                for (delta, alias) in &tokens {
                    total += delta[alias.sample(&mut rng)];
                }
                *s = total;
            }
        });
    Ok(samples)
}

/// Sample cumulants with batch-means standard errors, orders `1..=k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleCumulants {
    pub estimates: Vec<f64>,
    pub standard_errors: Vec<f64>,
}

fn cumulants_of(samples: &[f64], k: usize) -> Result<Vec<f64>> {
    let n = samples.len() as f64;
    let mean = pairwise_sum(samples) / n;
    let sums = pairwise_fold::<MAX_SUPPORTED_ORDER>(samples.len(), |i, acc| {
        let e = samples[i] - mean;
        let mut term = e * e;
        for a in acc[1..k].iter_mut() {
            *a += term;
            term *= e;
        }
    });
    let central: Vec<f64> = sums[..k].iter().map(|s| s / n).collect();
    if let Some(i) = central.iter().position(|c| !c.is_finite()) {
        return Err(Error::Range { order: i + 1 });
    }
    cumulants_from_central(mean, &central)
}

/// Cumulant estimates of `samples` up to order `k`.
///
/// Standard errors come from [`BATCHES`] contiguous equal batches: the
/// spread of the per-batch estimates divided by `√BATCHES`.
pub fn sample_cumulants(samples: &[f64], k: usize) -> Result<SampleCumulants> {
    if !(1..=MAX_SUPPORTED_ORDER).contains(&k) {
        return Err(Error::UnsupportedOrder(k));
    }
    let need = (10 * k).max(BATCHES);
    if samples.len() < need {
        return Err(Error::TooFewSamples {
            have: samples.len(),
            need,
        });
    }
    let estimates = cumulants_of(samples, k)?;
    let n = samples.len();
    let batches: Vec<Vec<f64>> = (0..BATCHES)
        .into_par_iter()
        .map(|b| cumulants_of(&samples[b * n / BATCHES..(b + 1) * n / BATCHES], k))
        .collect::<Result<_>>()?;
    let standard_errors = (0..k)
        .map(|order| {
            let values: Vec<f64> = batches.iter().map(|b| b[order]).collect();
            let mean = pairwise_sum(&values) / BATCHES as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (BATCHES - 1) as f64;
            (var / BATCHES as f64).sqrt()
        })
        .collect();
    Ok(SampleCumulants {
        estimates,
        standard_errors,
    })
}

/// Monte Carlo estimates against token-averaged cumulants, orders `2..=K`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub layer: usize,
    pub tokens: usize,
    pub config: McConfig,
    /// Aggregate sample cumulants divided by the token count.
    pub mc_estimates: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub analytic: Vec<f64>,
    pub z_scores: Vec<f64>,
}

impl McReport {
    /// Cumulant order of entry `i` in the vectors.
    pub fn order(&self, i: usize) -> usize {
        i + 2
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("order,mc_estimate,standard_error,analytic,z_score\n");
        for i in 0..self.mc_estimates.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.order(i),
                self.mc_estimates[i],
                self.standard_errors[i],
                self.analytic[i],
                self.z_scores[i]
            ));
        }
        out
    }
}

/// Runs the sampler and compares against the analytic profile of `layer`.
pub fn verify_additivity(dump: &LogitDump, layer: usize, cfg: &McConfig) -> Result<McReport> {
    let samples = sample_aggregate_deviation(dump, layer, cfg)?;
    report_from_samples(dump, layer, cfg, &samples)
}

/// Builds the report from samples already drawn (lets callers also keep them,
/// e.g. for a histogram).
pub fn report_from_samples(
    dump: &LogitDump,
    layer: usize,
    cfg: &McConfig,
    samples: &[f64],
) -> Result<McReport> {
    let k = cfg.max_order;
    let n = dump.tokens() as f64;
    let sc = sample_cumulants(samples, k)?;
    let analytic = layer_cumulant_profile(dump, layer, k, false)?.raw;
    let mc_estimates: Vec<f64> = sc.estimates[1..].iter().map(|x| x / n).collect();
    let standard_errors: Vec<f64> = sc.standard_errors[1..].iter().map(|x| x / n).collect();
    let z_scores = mc_estimates
        .iter()
        .zip(&analytic)
        .zip(&standard_errors)
        .map(|((m, a), se)| z_score(*m, *a, *se))
        .collect();
    Ok(McReport {
        layer,
        tokens: dump.tokens(),
        config: *cfg,
        mc_estimates,
        standard_errors,
        analytic,
        z_scores,
    })
}

/// `(mc − analytic) / se`; with a zero standard error (degenerate samples)
/// agreement to rounding counts as `z = 0`.
fn z_score(mc: f64, analytic: f64, se: f64) -> f64 {
    let diff = mc - analytic;
    if se > 0.0 {
        diff / se
    } else if diff.abs() <= 1e-12 * (1.0 + analytic.abs()) {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Equal-width histogram of the samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(samples: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Invalid("histogram needs at least one bin".into()));
        }
        if samples.is_empty() {
            return Err(Error::Empty("histogram of no samples"));
        }
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0u64; bins];
        for &s in samples {
            let b = (((s - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Ok(Histogram { edges, counts })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthMode, SynthSpec};
    use rand_distr::{Normal, Poisson};

    #[test]
    fn config_checks() {
        assert!(McConfig::new(1000, 0, 4).check().is_ok());
        assert!(McConfig::new(39, 0, 4).check().is_err());
        assert!(McConfig::new(1000, 0, 9).check().is_err());
        let mut c = McConfig::new(1000, 0, 4);
        c.chunk_size = 2000;
        assert!(c.check().is_err());
    }

    #[test]
    fn constant_samples() {
        let s = sample_cumulants(&vec![2.5; 400], 4).unwrap();
        assert_eq!(s.estimates, vec![2.5, 0.0, 0.0, 0.0]);
        assert!(matches!(
            sample_cumulants(&[1.0; 30], 4),
            Err(Error::TooFewSamples { have: 30, need: 40 })
        ));
    }

    #[test]
    fn gaussian_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..1_000_000).map(|_| normal.sample(&mut rng)).collect();
        let s = sample_cumulants(&xs, 4).unwrap();
        for (i, expected) in [0.0, 1.0, 0.0, 0.0].iter().enumerate() {
            let z = (s.estimates[i] - expected) / s.standard_errors[i];
            assert!(z.abs() <= 3.0, "order {} z {z}", i + 1);
        }
    }

    #[test]
    fn poisson_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let poisson = Poisson::new(1.0).unwrap();
        let xs: Vec<f64> = (0..1_000_000).map(|_| poisson.sample(&mut rng)).collect();
        let s = sample_cumulants(&xs, 4).unwrap();
        for i in 0..4 {
            let z = (s.estimates[i] - 1.0) / s.standard_errors[i];
            assert!(z.abs() <= 3.0, "order {} z {z}", i + 1);
        }
    }

    #[test]
    fn zero_deviation_gives_zero_samples() {
        let dump = generate(&SynthSpec::new(1, 4, 6, SynthMode::Constant, 1)).unwrap();
        // Constant rows are not gauge-fixed, so subtract the common ln Z.
        let samples = sample_aggregate_deviation(&dump, 0, &McConfig::new(200, 3, 2)).unwrap();
        assert!(samples.iter().all(|s| (s - samples[0]).abs() < 1e-12));

        let row = crate::prob::softmax(&[0.3, -0.2, 1.1], 1.0).unwrap().log_probs().to_vec();
        let dump = LogitDump::from_rows(&[vec![row.clone(), row]]).unwrap();
        let samples = sample_aggregate_deviation(&dump, 0, &McConfig::new(200, 3, 2)).unwrap();
        assert!(samples.iter().all(|s| s.abs() < 1e-14));
    }

    #[test]
    fn symmetric_two_point_token() {
        let weights = crate::prob::ProbVector::new(vec![0.5, 0.5]).unwrap();
        let view = DeviationView::new(0, vec![-1.0, 1.0], weights).unwrap();
        let samples = sample_views(vec![view], &McConfig::new(200_000, 5, 2)).unwrap();
        let s = sample_cumulants(&samples, 2).unwrap();
        assert!(s.estimates[0].abs() < 4.0 * s.standard_errors[0]);
        assert!((s.estimates[1] - 1.0).abs() < 4.0 * s.standard_errors[1].max(1e-3));

        // Two tokens with mirrored weights give δX ∈ {c, c + d} per token.
        let d = 2.0;
        let dump = LogitDump::from_rows(&[vec![vec![0.0, d], vec![d, 0.0]]]).unwrap();
        let samples = sample_aggregate_deviation(&dump, 0, &McConfig::new(200_000, 9, 2)).unwrap();
        let s = sample_cumulants(&samples, 2).unwrap();
        let p = 1.0 / (1.0 + (-d).exp());
        let expected_var = 2.0 * p * (1.0 - p) * d * d;
        assert!(((s.estimates[1] - expected_var) / s.standard_errors[1]).abs() < 4.0);
    }

    #[test]
    fn independent_of_worker_count() {
        let dump = generate(&SynthSpec::new(1, 16, 32, SynthMode::IidGaussian { sigma: 1.0 }, 4)).unwrap();
        let mut cfg = McConfig::new(50_000, 7, 4);
        cfg.chunk_size = 4096;
        let run = |jobs| {
            crate::with_jobs(Some(jobs), || sample_aggregate_deviation(&dump, 0, &cfg).unwrap()).unwrap()
        };
        let one = run(1);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&one), bits(&run(4)));
        assert_eq!(bits(&one), bits(&run(8)));
    }

    #[test]
    fn single_token_matches_its_cumulants() {
        // A lone token is its own center: both sides are zero.
        let dump = generate(&SynthSpec::new(1, 1, 16, SynthMode::IidGaussian { sigma: 1.5 }, 8)).unwrap();
        let r = verify_additivity(&dump, 0, &McConfig::new(10_000, 1, 4)).unwrap();
        for i in 0..3 {
            assert!((r.mc_estimates[i] - r.analytic[i]).abs() < 1e-9, "{r:?}");
            assert!(r.z_scores[i].is_finite());
        }
    }

    #[test]
    fn small_dump_additivity() {
        let dump = generate(&SynthSpec::new(1, 8, 16, SynthMode::IidGaussian { sigma: 1.5 }, 8)).unwrap();
        let r = verify_additivity(&dump, 0, &McConfig::new(400_000, 1, 4)).unwrap();
        for z in &r.z_scores {
            assert!(z.abs() < 4.5, "{r:?}");
        }
        assert!(r.standard_errors.iter().all(|se| *se > 0.0));
        assert!(r.to_csv().starts_with("order,mc_estimate"));
    }

    #[test]
    fn histogram_counts_every_sample() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let h = Histogram::new(&xs, 10).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 1000);
        assert_eq!(h.edges.len(), 11);
        assert!(h.to_csv().starts_with("bin_lo,bin_hi,count\n"));
    }
}
