//! One module per command group: evaluation and re-grading, report
//! building, and the numerical lab wrappers.

pub mod eval;
pub mod lab;
pub mod report;

pub use eval::{cmd_eval, cmd_judge, EvalSummary};
pub use lab::{cmd_adapter_sim, cmd_collapse_solve, cmd_collapse_sweep, cmd_forget_sim};
pub use report::cmd_report;
