//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's numerics.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Integer partitions of `n` as multiplicities: `mult[s]` = number of parts of size `s`.
fn partitions(n: usize) -> Vec<Vec<usize>> {
    fn go(remaining: usize, max: usize, mult: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if remaining == 0 {
            out.push(mult.clone());
            return;
        }
        for s in (1..=max.min(remaining)).rev() {
            mult[s] += 1;
            go(remaining - s, s, mult, out);
            mult[s] -= 1;
        }
    }
    let mut out = Vec::new();
    go(n, n, &mut vec![0; n + 1], &mut out);
    out
}

fn fact(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Cumulants `κ_1..κ_K` from raw moments `m_1..m_K` by summing over set
/// partitions: κ_n = Σ_π (−1)^{|π|−1} (|π|−1)! Π_{B∈π} m_{|B|}.
/// Set partitions are grouped by block-size profile, each profile counted by
/// `n! / Π (s!)^{c_s} c_s!`.
pub fn bell_cumulants(moments: &[f64]) -> Vec<f64> {
    (1..=moments.len())
        .map(|n| {
            partitions(n)
                .iter()
                .map(|mult| {
                    let blocks: usize = mult.iter().sum();
                    let mut count = fact(n);
                    let mut product = 1.0;
                    for (s, &c) in mult.iter().enumerate().skip(1) {
                        count /= fact(s).powi(c as i32) * fact(c);
                        product *= moments[s - 1].powi(c as i32);
                    }
                    let sign = if blocks % 2 == 1 { 1.0 } else { -1.0 };
                    sign * fact(blocks - 1) * count * product
                })
                .sum()
        })
        .collect()
}

/// Sample variance by the textbook two-pass formula.
pub fn two_pass_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Bernoulli(p) scaled by d: κ_2, κ_3, κ_4.
pub fn bernoulli_cumulants(p: f64, d: f64) -> [f64; 3] {
    let q = 1.0 - p;
    [p * q * d * d, p * q * (q - p) * d.powi(3), p * q * (1.0 - 6.0 * p * q) * d.powi(4)]
}

/// KL(p‖c) on two outcomes, evaluated directly.
pub fn kl2(p: f64, c: f64) -> f64 {
    let term = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    term(p, c) + term(1.0 - p, 1.0 - c)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random logits `[layer][token][vocab]` with per-row scale and offset.
pub fn random_rows(r: &mut ChaCha8Rng, l: usize, n: usize, v: usize) -> Vec<Vec<Vec<f64>>> {
    (0..l)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let scale = r.gen_range(0.1..4.0);
                    let offset = r.gen_range(-5.0..5.0);
                    (0..v).map(|_| offset + scale * r.gen_range(-1.0..1.0)).collect()
                })
                .collect()
        })
        .collect()
}
