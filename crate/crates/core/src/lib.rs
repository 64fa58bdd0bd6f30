//! Probability-aware resource allocation for speculative task execution.
//!
//! - [`cost_model`]: completion time `T(w)` as a function of resources, its fit to
//!   benchmark data, and the marginal efficiency `F = -T'/T²` with its inverse.
//! - [`allocator`]: the throughput-optimal allocation and the naive / constant-share
//!   baselines it is compared against.
//! - [`taskdist`]: synthetic task-probability distributions.
//! - [`markov`]: first-passage and visit-count analysis of Markov chains, and the
//!   Monte Carlo estimator of segment consumption probabilities.
//! - [`splice_sim`]: a discrete-event simulator of parallel trajectory splicing
//!   under several scheduling policies.
//! - [`io`]: the text and JSON file formats read and written by the CLI.
//! - [`cli`]: the `specalloc` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod cli;
pub mod cost_model;
pub mod io;
pub mod markov;
pub mod splice_sim;
pub mod taskdist;

pub use allocator::{Allocation, TaskProbabilityDistribution};
pub use cost_model::{BenchmarkSample, CostModel};
