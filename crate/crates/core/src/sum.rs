//! Deterministic pairwise (cascade) summation.
//!
//! Values are summed sequentially inside fixed-size blocks, and block sums are
//! combined in a balanced binary tree. The tree shape depends only on the
//! input length, never on scheduling, so results are reproducible bit-for-bit.

/// Entries summed sequentially before entering the tree.
pub const BLOCK: usize = 128;

/// Something that can be added into itself elementwise.
pub trait Accumulate {
    fn absorb(&mut self, other: &Self);
}

impl Accumulate for f64 {
    fn absorb(&mut self, other: &Self) {
        *self += *other;
    }
}

impl<const M: usize> Accumulate for [f64; M] {
    fn absorb(&mut self, other: &Self) {
        for (a, b) in self.iter_mut().zip(other) {
            *a += *b;
        }
    }
}

impl Accumulate for Vec<f64> {
    fn absorb(&mut self, other: &Self) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.iter_mut().zip(other) {
            *a += *b;
        }
    }
}

/// Binary-counter tree of partial sums.
#[derive(Debug, Clone)]
pub struct Cascade<T> {
    stack: Vec<(u32, T)>,
}

impl<T: Accumulate> Default for Cascade<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Accumulate> Cascade<T> {
    pub fn new() -> Self {
        Cascade { stack: Vec::new() }
    }

    /// Adds the next leaf, in input order.
    pub fn push(&mut self, mut value: T) {
        let mut level = 0;
        while let Some((top_level, _)) = self.stack.last() {
            if *top_level != level {
                break;
            }
            let (_, mut left) = self.stack.pop().expect("non-empty");
            left.absorb(&value);
            value = left;
            level += 1;
        }
        self.stack.push((level, value));
    }

    /// Total of all leaves, or `None` when nothing was pushed.
    pub fn finish(mut self) -> Option<T> {
        let (_, mut acc) = self.stack.pop()?;
        while let Some((_, mut left)) = self.stack.pop() {
            left.absorb(&acc);
            acc = left;
        }
        Some(acc)
    }
}

/// Pairwise sum of a slice.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    pairwise_sum_by(values.len(), |i| values[i])
}

/// Pairwise sum of `term(0) + … + term(len − 1)`.
pub fn pairwise_sum_by(len: usize, mut term: impl FnMut(usize) -> f64) -> f64 {
    let mut tree = Cascade::new();
    for start in (0..len).step_by(BLOCK) {
        let end = (start + BLOCK).min(len);
        let mut block = 0.0;
        for i in start..end {
            block += term(i);
        }
        tree.push(block);
    }
    tree.finish().unwrap_or(0.0)
}

/// Pairwise sums of `M` accumulators at once; `term(i, acc)` adds entry `i`'s
/// contributions into `acc`.
pub fn pairwise_fold<const M: usize>(
    len: usize,
    mut term: impl FnMut(usize, &mut [f64; M]),
) -> [f64; M] {
    let mut tree = Cascade::new();
    for start in (0..len).step_by(BLOCK) {
        let end = (start + BLOCK).min(len);
        let mut block = [0.0; M];
        for i in start..end {
            term(i, &mut block);
        }
        tree.push(block);
    }
    tree.finish().unwrap_or([0.0; M])
}

/// Order-independent sum: sorts a copy, then sums pairwise. Any permutation
/// of `values` gives the same bits.
pub fn symmetric_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    pairwise_sum(&sorted)
}

/// Mean of `values` via pairwise summation.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}
