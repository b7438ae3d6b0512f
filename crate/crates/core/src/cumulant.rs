//! Per-token deviations from the center, their moments and cumulants, the
//! token-averaged cumulant profile of a layer, and partial sums of the KL
//! cumulant series.
//!
//! For token `t` the deviation is `δX_t = X_t − μ`, where `μ = ln p_μ / β` is
//! the center's log-distribution. Sampling a vocabulary index `j` from the
//! token's own softmax `p_t` turns `δX_t` into a scalar random variable; its
//! cumulants are the observables.
//!
//! Logits are used as stored. The per-token constant `ln Z_t` only moves
//! `κ₁`, so profiles start at order 2.

use rayon::prelude::*;
use serde::Serialize;

use crate::prob::{center_distribution, layer_softmax_with, ProbVector};
use crate::store::LogitDump;
use crate::sum::{pairwise_fold, pairwise_sum_by, symmetric_sum};
use crate::{Error, Result, MAX_SUPPORTED_ORDER};

const K_MAX: usize = MAX_SUPPORTED_ORDER;

const fn binomial_table() -> [[u64; K_MAX]; K_MAX] {
    let mut t = [[0u64; K_MAX]; K_MAX];
    let mut n = 0;
    while n < K_MAX {
        t[n][0] = 1;
        let mut k = 1;
        while k <= n {
            t[n][k] = t[n - 1][k - 1] + if k < n { t[n - 1][k] } else { 0 };
            k += 1;
        }
        n += 1;
    }
    t
}

/// `BINOMIAL[n][k] = C(n, k)` for `n < 20`, exact.
const BINOMIAL: [[u64; K_MAX]; K_MAX] = binomial_table();

/// `n!` as f64 (exact for `n ≤ 20`).
pub fn factorial(n: usize) -> f64 {
    (1..=n as u64).product::<u64>() as f64
}

fn check_order(k: usize) -> Result<()> {
    if (1..=K_MAX).contains(&k) {
        Ok(())
    } else {
        Err(Error::UnsupportedOrder(k))
    }
}

/// One token's deviation from the center and its own softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationView {
    pub token_index: usize,
    /// `X_t − μ` over the vocabulary.
    pub delta: Vec<f64>,
    /// The token's softmax distribution `p_t`.
    pub weights: ProbVector,
}

impl DeviationView {
    pub fn new(token_index: usize, delta: Vec<f64>, weights: ProbVector) -> Result<Self> {
        if delta.len() != weights.len() {
            return Err(Error::ShapeMismatch(delta.len(), weights.len()));
        }
        if let Some(j) = (0..delta.len()).find(|&j| weights.probs()[j] > 0.0 && !delta[j].is_finite())
        {
            return Err(Error::NonFinite(format!(
                "token {token_index}: deviation {j} is {}",
                delta[j]
            )));
        }
        Ok(DeviationView {
            token_index,
            delta,
            weights,
        })
    }

    /// Weighted mean of the deviation, `E_p[δX]`.
    pub fn mean(&self) -> f64 {
        let p = self.weights.probs();
        pairwise_sum_by(p.len(), |j| if p[j] > 0.0 { p[j] * self.delta[j] } else { 0.0 })
    }
}

/// Deviations of every token of `layer` at the dump's beta.
pub fn deviations(dump: &LogitDump, layer: usize) -> Result<Vec<DeviationView>> {
    deviations_with_beta(dump, layer, dump.beta())
}

/// [`deviations`] with an explicit inverse temperature.
pub fn deviations_with_beta(
    dump: &LogitDump,
    layer: usize,
    beta: f64,
) -> Result<Vec<DeviationView>> {
    let rows = layer_softmax_with(dump, layer, beta)?;
    let center = center_distribution(&rows)?;
    let mu: Vec<f64> = center.log_probs().iter().map(|l| l / beta).collect();
    let logits = dump.layer(layer)?;
    let v = dump.vocab();
    rows.into_par_iter()
        .enumerate()
        .map(|(t, weights)| {
            let mut delta = logits.row_f64(t, v);
            for (d, m) in delta.iter_mut().zip(&mu) {
                *d -= m;
            }
            DeviationView::new(t, delta, weights)
        })
        .collect()
}

/// `Σ_j p_j (δ_j − shift)^n` for `n = 1..=k`, skipping zero-weight entries.
fn shifted_moments(view: &DeviationView, shift: f64, k: usize) -> Result<Vec<f64>> {
    check_order(k)?;
    let p = view.weights.probs();
    let delta = &view.delta;
    let sums = pairwise_fold::<K_MAX>(p.len(), |j, acc| {
        let w = p[j];
        if w > 0.0 {
            let e = delta[j] - shift;
            let mut term = w * e;
            for a in acc.iter_mut().take(k) {
                *a += term;
                term *= e;
            }
        }
    });
    if let Some(n) = sums[..k].iter().position(|m| !m.is_finite()) {
        return Err(Error::Range { order: n + 1 });
    }
    Ok(sums[..k].to_vec())
}

/// Raw moments `m_1..m_k` of the deviation under the token's weights.
pub fn raw_moments(view: &DeviationView, k: usize) -> Result<Vec<f64>> {
    shifted_moments(view, 0.0, k)
}

/// Cumulants `κ_1..κ_k` from raw moments `m_1..m_k` by the recursion
/// `κ_n = m_n − Σ_{j=1}^{n−1} C(n−1, j−1) κ_j m_{n−j}`.
pub fn moments_to_cumulants(moments: &[f64]) -> Result<Vec<f64>> {
    let k = moments.len();
    check_order(k)?;
    let mut kappa = vec![0.0; k];
    for n in 1..=k {
        let mut value = moments[n - 1];
        for j in 1..n {
            value -= BINOMIAL[n - 1][j - 1] as f64 * kappa[j - 1] * moments[n - j - 1];
        }
        kappa[n - 1] = value;
    }
    Ok(kappa)
}

/// Cumulants from the mean and central moments `c_1..c_k` (with `c_1 = 0`).
pub(crate) fn cumulants_from_central(mean: f64, central: &[f64]) -> Result<Vec<f64>> {
    let mut centered = central.to_vec();
    centered[0] = 0.0;
    let mut kappa = moments_to_cumulants(&centered)?;
    kappa[0] = mean;
    Ok(kappa)
}

/// Cumulants `κ_1..κ_k` of one token's deviation.
///
/// Moments are taken about the weighted mean before the recursion; this is
/// the same quantity as feeding raw moments in, but stays accurate when the
/// deviation carries a large constant offset.
pub fn token_cumulants(view: &DeviationView, k: usize) -> Result<Vec<f64>> {
    check_order(k)?;
    let mean = view.mean();
    if !mean.is_finite() {
        return Err(Error::Range { order: 1 });
    }
    let central = shifted_moments(view, mean, k)?;
    cumulants_from_central(mean, &central)
}

/// Token-averaged cumulants of one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CumulantProfile {
    pub layer: usize,
    pub max_order: usize,
    /// Token average of `κ₁`, which depends on the logit gauge.
    pub mean_first: f64,
    /// `raw[i]` is the token-averaged `κ_{i+2}`.
    pub raw: Vec<f64>,
    /// `normalized[i] = raw[i] / (i + 2)!`.
    pub normalized: Vec<f64>,
    /// Per token, `κ_2..κ_K`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_token: Option<Vec<Vec<f64>>>,
}

impl CumulantProfile {
    /// Builds a profile from per-token `κ_1..κ_K` rows.
    pub(crate) fn from_token_cumulants(
        layer: usize,
        max_order: usize,
        rows: Vec<Vec<f64>>,
        keep_per_token: bool,
    ) -> Self {
        let n = rows.len() as f64;
        let average = |order: usize| -> f64 {
            let column: Vec<f64> = rows.iter().map(|r| r[order - 1]).collect();
            symmetric_sum(&column) / n
        };
        let raw: Vec<f64> = (2..=max_order).map(average).collect();
        let normalized = raw
            .iter()
            .enumerate()
            .map(|(i, k)| k / factorial(i + 2))
            .collect();
        CumulantProfile {
            layer,
            max_order,
            mean_first: average(1),
            raw,
            normalized,
            per_token: keep_per_token.then(|| rows.into_iter().map(|r| r[1..].to_vec()).collect()),
        }
    }

    /// Token-averaged `κ_order`, for `2 ≤ order ≤ max_order`.
    pub fn kappa(&self, order: usize) -> Option<f64> {
        order.checked_sub(2).and_then(|i| self.raw.get(i).copied())
    }

    /// `κ_order / order!`.
    pub fn kappa_normalized(&self, order: usize) -> Option<f64> {
        order.checked_sub(2).and_then(|i| self.normalized.get(i).copied())
    }
}

/// Averages token cumulants of `layer` up to order `k`.
pub fn layer_cumulant_profile(
    dump: &LogitDump,
    layer: usize,
    k: usize,
    keep_per_token: bool,
) -> Result<CumulantProfile> {
    if k < 2 {
        return Err(Error::UnsupportedOrder(k));
    }
    check_order(k)?;
    let views = deviations(dump, layer)?;
    let rows = views
        .par_iter()
        .map(|v| token_cumulants(v, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(CumulantProfile::from_token_cumulants(
        layer,
        k,
        rows,
        keep_per_token,
    ))
}

/// Partial sums of `D_KL(p_t ‖ p_μ) = Σ_{n≥2} ((−β)^n / n!) κ_n(δX_t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlSeries {
    /// `partial_sums[i]` sums orders `2..=i + 2`.
    pub partial_sums: Vec<f64>,
    /// The KL evaluated directly, `ln E_p[exp(−β (δX − E_p δX))]`.
    pub direct: f64,
}

pub fn kl_series_partial_sums(view: &DeviationView, k: usize, beta: f64) -> Result<KlSeries> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidBeta(beta));
    }
    if k < 2 {
        return Err(Error::UnsupportedOrder(k));
    }
    let kappa = token_cumulants(view, k)?;
    let mut partial_sums = Vec::with_capacity(k - 1);
    let mut total = 0.0;
    for n in 2..=k {
        total += (-beta).powi(n as i32) / factorial(n) * kappa[n - 1];
        partial_sums.push(total);
    }

    let mean = view.mean();
    let p = view.weights.probs();
    let lp = view.weights.log_probs();
    let exponents: Vec<f64> = (0..p.len())
        .filter(|&j| p[j] > 0.0)
        .map(|j| lp[j] - beta * (view.delta[j] - mean))
        .collect();
    let direct = crate::prob::log_sum_exp(&exponents).max(0.0);
    Ok(KlSeries {
        partial_sums,
        direct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{kl_divergence, softmax};
    use proptest::prelude::*;

    fn view(weights: &[f64], delta: &[f64]) -> DeviationView {
        DeviationView::new(0, delta.to_vec(), ProbVector::new(weights.to_vec()).unwrap()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn binomials_are_exact() {
        assert_eq!(BINOMIAL[19][9], 92378);
        assert_eq!(BINOMIAL[4][2], 6);
        assert_eq!(BINOMIAL[0][0], 1);
        assert_eq!(factorial(20), 2_432_902_008_176_640_000.0);
    }

    #[test]
    fn raw_moment_examples() {
        let v = view(&[0.5, 0.5], &[-1.0, 1.0]);
        assert_eq!(raw_moments(&v, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);

        let v = view(&[0.3, 0.7], &[0.0, 0.0]);
        assert_eq!(raw_moments(&v, 5).unwrap(), vec![0.0; 5]);

        let d = 1.7;
        let v = view(&[0.25, 0.75], &[0.0, d]);
        let expected: Vec<f64> = (1..=6).map(|n| 0.75 * d.powi(n)).collect();
        assert_close(&raw_moments(&v, 6).unwrap(), &expected, 1e-13);
    }

    #[test]
    fn raw_moment_overflow_names_order() {
        let v = view(&[0.5, 0.5], &[1e80, -1e80]);
        assert!(matches!(raw_moments(&v, 6), Err(Error::Range { order: 4 })));
    }

    #[test]
    fn cumulant_reference_cases() {
        assert_eq!(
            moments_to_cumulants(&[0.0, 1.0, 0.0, 3.0]).unwrap(),
            vec![0.0, 1.0, 0.0, 0.0]
        );
        assert_eq!(
            moments_to_cumulants(&[1.0, 2.0, 5.0, 15.0]).unwrap(),
            vec![1.0, 1.0, 1.0, 1.0]
        );
        let c: f64 = 1.3;
        let k = moments_to_cumulants(&[c, c * c, c.powi(3), c.powi(4)]).unwrap();
        assert_close(&k, &[c, 0.0, 0.0, 0.0], 1e-14);
    }

    #[test]
    fn order_guard() {
        assert!(matches!(
            moments_to_cumulants(&[0.0; 21]),
            Err(Error::UnsupportedOrder(21))
        ));
        assert!(matches!(moments_to_cumulants(&[]), Err(Error::UnsupportedOrder(0))));
        assert!(moments_to_cumulants(&[0.0; 20]).is_ok());
    }

    #[test]
    fn bernoulli_token_cumulants() {
        // Value d with probability p = 0.75, else 0.
        let (p, q, d) = (0.75, 0.25, 3f64.ln());
        let v = view(&[q, p], &[0.0, d]);
        let k = token_cumulants(&v, 4).unwrap();
        assert!((k[1] - p * q * d * d).abs() < 1e-15);
        assert!((k[2] - p * q * (q - p) * d.powi(3)).abs() < 1e-15);
        assert!((k[1] - 0.226303).abs() < 1e-6);
        assert!((k[2] + 0.124309).abs() < 1e-6);

        assert_eq!(token_cumulants(&view(&[q, p], &[0.0, 0.0]), 5).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn single_token_has_no_spread() {
        let x = vec![0.2, -1.0, 3.0, 0.5];
        let gauge_fixed = softmax(&x, 1.0).unwrap().log_probs().to_vec();
        let dump = LogitDump::from_rows(&[vec![gauge_fixed]]).unwrap();
        let views = deviations(&dump, 0).unwrap();
        assert_eq!(views.len(), 1);
        for d in &views[0].delta {
            assert!(d.abs() < 1e-15);
        }
        let p = layer_cumulant_profile(&dump, 0, 6, false).unwrap();
        for k in &p.raw {
            assert!(k.abs() < 1e-28);
        }
    }

    #[test]
    fn two_by_two_deviations() {
        let rows = vec![vec![2.0, 0.0], vec![0.0, 1.0]];
        let dump = LogitDump::from_rows(&[rows.clone()]).unwrap();
        let views = deviations(&dump, 0).unwrap();
        // Hand-evaluated center: p_μ = mean of the two softmax rows.
        let s = |a: f64, b: f64| [a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp())];
        let (r0, r1) = (s(2.0, 0.0), s(0.0, 1.0));
        let center = [(r0[0] + r1[0]) / 2.0, (r0[1] + r1[1]) / 2.0];
        for (t, v) in views.iter().enumerate() {
            for j in 0..2 {
                let expected = rows[t][j] - center[j].ln();
                assert!((v.delta[j] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn layer_profile_normalization() {
        let dump = LogitDump::from_rows(&[vec![
            vec![0.1, 2.0, -1.0],
            vec![1.5, -0.3, 0.2],
            vec![-2.0, 0.0, 0.7],
        ]])
        .unwrap();
        let p = layer_cumulant_profile(&dump, 0, 6, true).unwrap();
        assert_eq!(p.raw.len(), 5);
        for n in 2..=6 {
            assert_eq!(p.kappa_normalized(n).unwrap(), p.kappa(n).unwrap() / factorial(n));
        }
        assert!(p.kappa(2).unwrap() >= 0.0);
        let per_token = p.per_token.unwrap();
        assert_eq!(per_token.len(), 3);
        assert_eq!(per_token[0].len(), 5);
        assert!(layer_cumulant_profile(&dump, 0, 1, false).is_err());
        assert!(layer_cumulant_profile(&dump, 0, 21, false).is_err());
    }

    #[test]
    fn kl_series_examples() {
        // Identical token and center: every term vanishes.
        let v = view(&[0.4, 0.6], &[2.5, 2.5]);
        let s = kl_series_partial_sums(&v, 8, 1.0).unwrap();
        assert!(s.partial_sums.iter().all(|x| x.abs() < 1e-15));
        assert!(s.direct.abs() < 1e-15);

        // p_t = (0.6, 0.4) against p_μ = (0.5, 0.5) with gauge-fixed logits.
        let p = ProbVector::new(vec![0.6, 0.4]).unwrap();
        let delta: Vec<f64> = p.log_probs().iter().map(|l| l - 0.5f64.ln()).collect();
        let v = DeviationView::new(0, delta, p.clone()).unwrap();
        let s = kl_series_partial_sums(&v, 12, 1.0).unwrap();
        let direct = 0.6 * 1.2f64.ln() + 0.4 * 0.8f64.ln();
        assert!((s.direct - direct).abs() < 1e-15);
        assert!((direct - 0.020135).abs() < 1e-6);
        let c = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&p, &c).unwrap() - direct).abs() < 1e-15);
        let errs: Vec<f64> = s.partial_sums.iter().map(|x| (x - direct).abs()).collect();
        assert!(errs.last().unwrap() < &1e-6);
        assert!(errs[6] < errs[0]);
        assert!(s.partial_sums[0] >= 0.0);
    }

    #[test]
    fn kl_series_far_from_center_stays_finite() {
        let p = ProbVector::new(vec![0.99, 0.01]).unwrap();
        let c = [0.2f64, 0.8];
        let delta: Vec<f64> = (0..2).map(|j| p.log_probs()[j] - c[j].ln()).collect();
        let v = DeviationView::new(0, delta, p).unwrap();
        let s = kl_series_partial_sums(&v, 8, 1.0).unwrap();
        assert!(s.partial_sums.iter().all(|x| x.is_finite()));
        assert!(s.direct > 0.0);
    }

    fn weights_and_delta() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|v| {
            (
                prop::collection::vec(-5.0f64..5.0, v),
                prop::collection::vec(-3.0f64..3.0, v),
            )
        })
    }

    proptest! {
        #[test]
        fn homogeneity((logits, delta) in weights_and_delta(), c in -3.0f64..3.0) {
            let w = softmax(&logits, 1.0).unwrap();
            let base = token_cumulants(&DeviationView::new(0, delta.clone(), w.clone()).unwrap(), 6).unwrap();
            let scaled_delta: Vec<f64> = delta.iter().map(|d| d * c).collect();
            let scaled = token_cumulants(&DeviationView::new(0, scaled_delta, w).unwrap(), 6).unwrap();
            let scale = base[1].max(1e-300).sqrt();
            for n in 1..=6 {
                let expected = base[n - 1] * c.powi(n as i32);
                let tol = 1e-9 * (expected.abs().max((scale * c.abs()).powi(n as i32))) + 1e-300;
                prop_assert!((scaled[n - 1] - expected).abs() <= tol,
                    "order {}: {} vs {}", n, scaled[n - 1], expected);
            }
        }

        #[test]
        fn translation_invariance((logits, delta) in weights_and_delta(), c in -50.0f64..50.0) {
            let w = softmax(&logits, 1.0).unwrap();
            let base = token_cumulants(&DeviationView::new(0, delta.clone(), w.clone()).unwrap(), 6).unwrap();
            let shifted_delta: Vec<f64> = delta.iter().map(|d| d + c).collect();
            let shifted = token_cumulants(&DeviationView::new(0, shifted_delta, w).unwrap(), 6).unwrap();
            prop_assert!((shifted[0] - base[0] - c).abs() < 1e-10 * (1.0 + c.abs()));
            let scale = base[1].sqrt();
            for n in 2..=6 {
                let tol = 1e-10 * base[n - 1].abs().max(scale.powi(n as i32)).max(1e-300);
                prop_assert!((shifted[n - 1] - base[n - 1]).abs() <= tol);
            }
        }

        #[test]
        fn variance_is_nonnegative((logits, delta) in weights_and_delta()) {
            let w = softmax(&logits, 1.0).unwrap();
            let k = token_cumulants(&DeviationView::new(0, delta, w).unwrap(), 2).unwrap();
            prop_assert!(k[1] >= -1e-12);
        }

        #[test]
        fn central_route_matches_raw_route((logits, delta) in weights_and_delta()) {
            let w = softmax(&logits, 1.0).unwrap();
            let v = DeviationView::new(0, delta, w).unwrap();
            let via_raw = moments_to_cumulants(&raw_moments(&v, 5).unwrap()).unwrap();
            let via_central = token_cumulants(&v, 5).unwrap();
            for n in 0..5 {
                prop_assert!((via_raw[n] - via_central[n]).abs() <= 1e-9 * (1.0 + via_raw[n].abs()) * 3f64.powi(n as i32 + 1));
            }
        }
    }
}
