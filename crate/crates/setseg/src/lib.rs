//! Instruction-conditioned multi-instance segmentation at desk scale.
//!
//! A small language-model backbone reads a synthetic scene (a grid of colored
//! shapes) together with a free-form instruction, contextualizes a bank of
//! learnable instance queries under a hybrid attention mask, and decodes each
//! query into a binary mask plus a presence score. Training uses Hungarian
//! matching with DETR-style set losses; evaluation reports instance-level mAP
//! alongside semantic gIoU/cIoU, stratified by target count.

pub mod cli;
pub mod losses;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod net_core;
pub mod oracle;
pub mod rng;
pub mod scenegen;
pub mod seq_layout;
pub mod trainer;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Environment variable bounding the worker-thread count (default: logical cores).
pub const THREADS_ENV: &str = "SETSEG_THREADS";

/// Initialize the global worker pool from `SETSEG_THREADS`.
///
/// Safe to call more than once; only the first call takes effect.
pub fn init_thread_pool() {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = threads {
        // Ignore the error if a pool was already built.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
