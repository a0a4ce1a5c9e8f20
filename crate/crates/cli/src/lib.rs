//! Batch front-end for expert-guided decoding: corpus ingestion, benchmark
//! evaluation, knob ablation, plot-data reports and a synthetic world
//! generator. The `expert-cfg` binary is a thin argument parser over
//! [`commands`].

// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablate;
pub mod commands;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod manifest;
pub mod report;
pub mod synth;

pub use ablate::{run_ablation, write_ablation, AblationCell, AblationTable};
pub use error::{CliError, Result};
pub use eval::{run_eval, EvalContext, MetricsBundle, ARMS};
pub use manifest::{Overrides, RunManifest, RunSettings};
pub use report::emit_report;
