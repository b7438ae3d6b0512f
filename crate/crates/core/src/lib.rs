//! Cumulant-expansion observables of softmax entropy over per-layer logit dumps.
//!
//! A dump holds `layers × tokens × vocab` logits. For each layer the crate
//! computes the center distribution (mean of the tokens' softmax outputs), the
//! exact split of mean token entropy into center entropy minus mean KL to the
//! center, and the token-averaged cumulants of the deviation `δX = X − μ`
//! under each token's own softmax distribution.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`store`] | binary dump format, sidecar manifest, validation |
//! | [`prob`] | softmax, entropy, KL, center distribution, entropy decomposition |
//! | [`cumulant`] | deviations, moments, cumulants, KL cumulant series |
//! | [`layer`] | fused single-pass per-layer analysis used on large dumps |
//! | [`mc`] | Monte Carlo check that averaged cumulants match the aggregate's |
//! | [`synth`] | synthetic dumps with controlled structure |
//! | [`harness`] | analyze / aggregate / compare-groups and table output |

pub mod cumulant;
mod error;
pub mod harness;
pub mod layer;
pub mod mc;
pub mod prob;
pub mod rng;
pub mod store;
pub mod sum;
pub mod synth;

pub use error::{Error, Result};

/// Default highest cumulant order.
pub const DEFAULT_MAX_ORDER: usize = 8;

/// Hard cap on cumulant order; binomial coefficients stay exact below it.
pub const MAX_SUPPORTED_ORDER: usize = 20;

/// Runs `f` on a rayon pool with `jobs` workers (`None` = one per core).
///
/// Every reduction in this crate has a fixed order, so results do not depend
/// on `jobs`.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}
