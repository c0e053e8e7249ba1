//! Numerical laboratory for terminal-training geometry and class-split
//! forgetting at desk scale.
//!
//! * [`layer_peeled`] — the norm-constrained cross-entropy program over
//!   last-layer classifiers and features, solved with projected gradient
//!   descent; its minimizers form a simplex equiangular tight frame when
//!   classes are balanced and exhibit minority collapse under imbalance.
//! * [`toy`] — a two-phase class-split training run on Gaussian clusters
//!   with a small MLP, reproducing the forgetting curve shapes, plus the
//!   classifier/optimizer re-initialization variants.
//! * [`adapter`] — a frozen-encoder adapter simulator contrasting
//!   adapter-only fine-tuning with low-rank head adaptation.

pub mod adapter;
pub mod layer_peeled;
pub mod toy;

pub use adapter::{adapter_sim, AdapterMode, AdapterRun, AdapterSimConfig};
pub use layer_peeled::{
    ce_loss, collapse_metrics, gradients, imbalance_sweep, objective, project, solve_layer_peeled,
    CollapseMetrics, Features, LayerPeeledProblem, LayerPeeledState, SolveOpts, SolveOutcome,
    SweepRow,
};
pub use toy::{
    reinit_variants, train_toy, ForgettingRun, MaskMode, ReinitComparison, ToyTrainConfig,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CollapseError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("state violates the norm constraints: {0}")]
    Infeasible(String),
    #[error("classifier row {row} has zero norm; cosine undefined")]
    ZeroNormRow { row: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Accuracy curves recorded before the divergence, one pair of
        /// series per tracked group/task.
        partial_curves: Vec<(String, Vec<f64>)>,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] crate::datasets::DatasetError),
}
