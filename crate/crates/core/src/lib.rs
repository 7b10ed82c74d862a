//! Trace-driven simulation of cache-aware expert routing for
//! Mixture-of-Experts inference.
//!
//! On memory-constrained devices only a subset of an MoE model's expert
//! weights fits in fast memory, so experts are cached and evicted as the
//! router selects them. This crate simulates that setup from recorded or
//! synthetic router-logit traces: it implements top-K routing and a family
//! of cache-aware selection strategies (pruning, max-rank promotion,
//! cumulative-probability thresholding, and logit-bias cache priors),
//! weight-ordered LRU and clairvoyant Belady eviction, and the metrics that
//! quantify the trade-off between cache misses and routing fidelity.
//!
//! # Quick start
//!
//! ```
//! use moe_cache_sim::model::ModelConfig;
//! use moe_cache_sim::routing::{DeltaMode, StrategyParams};
//! use moe_cache_sim::sim::{run, RunConfig};
//! use moe_cache_sim::trace::{generate_synthetic, SynthParams};
//!
//! let model = ModelConfig::preset("mixtral-8x7b").unwrap();
//! let params = SynthParams::new(0.7, 0.25, 4.0, 42).unwrap();
//! let trace = generate_synthetic(&model, 256, 0, &params).unwrap();
//!
//! let strategy = StrategyParams::cache_prior(0.5, DeltaMode::RunningMean, 1);
//! let metrics = run(&trace, &model, &RunConfig::new(strategy, 4)).unwrap();
//! assert!(metrics.miss_rate <= 1.0);
//! ```
//!
//! The `moe-sim` binary exposes the same functionality as a CLI; the book
//! under `book/` walks through the concepts chapter by chapter.

pub mod cache;
pub mod error;
pub mod model;
pub mod report;
pub mod routing;
pub mod sim;
pub mod trace;

pub use error::ConfigError;
pub use model::ModelConfig;
pub use routing::{DeltaMode, Selection, StrategyKind, StrategyParams};
pub use sim::{run, sweep, RunConfig, RunMetrics, SweepKind, SweepResult};
pub use trace::{generate_synthetic, read_trace_file, write_trace_file, LogitTrace, SynthParams};

// The book's code blocks compile and run under `cargo test --doc`, keeping
// the guide in lockstep with the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/strategies.md")]
    mod strategies {}
    #[doc = include_str!("../../../book/src/caching.md")]
    mod caching {}
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
