//! Evaluation harness for vision-language model endpoints treated as image
//! classifiers, plus a small numerical lab for the collapse phenomena that
//! drive class-split forgetting.
//!
//! The crate is organized around the evaluation pipeline:
//!
//! * [`datasets`] — classification task definitions (label sets, manifests,
//!   splits, synthetic data).
//! * [`prompts`] — byte-exact prompt and instruction-record construction.
//! * [`client`] — HTTP chat/embedding client with retries, bounded
//!   concurrency and a content-addressed response cache, plus a scriptable
//!   mock server for offline runs.
//! * [`postproc`] — grading of raw model output against ground truth
//!   (rule match, embedding match, judge) into a five-way verdict.
//! * [`metrics`] — aggregation into accuracy matrices, verdict histograms,
//!   forgetting gaps and top-k prediction tables.
//! * [`collapse`] — norm-constrained cross-entropy geometry (equiangular
//!   frames, minority collapse under imbalance) and desk-scale forgetting
//!   simulations.

pub mod client;
pub mod collapse;
pub mod datasets;
pub mod metrics;
pub mod postproc;
pub mod prompts;

mod util;

pub use util::sha256_hex;
