//! Counter-based random streams.
//!
//! Every value is a pure function of `(seed, counter)`, so generation can be
//! split across workers in any order with identical results.

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for substream `stream` of `seed`.
#[inline]
pub fn substream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ splitmix64(stream)
}

/// Uniform in the open interval (0, 1), 53-bit resolution.
#[inline]
pub fn uniform_open(seed: u64, counter: u64) -> f64 {
    let bits = splitmix64(seed ^ splitmix64(counter)) >> 11;
    (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box–Muller: counter `2k` yields the cosine branch of
/// pair `k`, `2k + 1` the sine branch.
#[inline]
pub fn standard_normal(seed: u64, counter: u64) -> f64 {
    let pair = counter >> 1;
    let u1 = uniform_open(seed, pair << 1);
    let u2 = uniform_open(seed, (pair << 1) | 1);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    if counter & 1 == 0 {
        r * theta.cos()
    } else {
        r * theta.sin()
    }
}

/// Fills `out` with `standard_normal(seed, first + i)`, computing each
/// Box–Muller pair once.
pub fn standard_normals(seed: u64, first: u64, out: &mut [f64]) {
    let mut i = 0;
    if first & 1 == 1 && !out.is_empty() {
        out[0] = standard_normal(seed, first);
        i = 1;
    }
    while i + 1 < out.len() {
        let pair = (first + i as u64) >> 1;
        let u1 = uniform_open(seed, pair << 1);
        let u2 = uniform_open(seed, (pair << 1) | 1);
        let r = (-2.0 * u1.ln()).sqrt();
        let (sin, cos) = (std::f64::consts::TAU * u2).sin_cos();
        out[i] = r * cos;
        out[i + 1] = r * sin;
        i += 2;
    }
    if i < out.len() {
        out[i] = standard_normal(seed, first + i as u64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_matches_single() {
        for first in [0u64, 1, 6, 7] {
            for len in [0usize, 1, 2, 5, 8] {
                let mut out = vec![0.0; len];
                standard_normals(3, first, &mut out);
                for (i, x) in out.iter().enumerate() {
                    assert_eq!(x.to_bits(), standard_normal(3, first + i as u64).to_bits());
                }
            }
        }
    }

    #[test]
    fn normal_moments() {
        let n = 400_000u64;
        let xs: Vec<f64> = (0..n).map(|i| standard_normal(7, i)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let kurt = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64 / var.powi(2);
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
        assert!((kurt - 3.0).abs() < 0.05, "{kurt}");
    }

    #[test]
    fn uniform_stays_open() {
        for i in 0..10_000 {
            let u = uniform_open(0, i);
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn seeds_decorrelate() {
        let a: Vec<f64> = (0..64).map(|i| standard_normal(1, i)).collect();
        let b: Vec<f64> = (0..64).map(|i| standard_normal(2, i)).collect();
        assert_ne!(a, b);
    }
}
