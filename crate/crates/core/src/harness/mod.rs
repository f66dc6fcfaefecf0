//! Config-driven runs on small deterministic tasks, sweeps over config
//! axes, and synthetic gradient streams for similarity checks.

pub mod config;
pub mod run;
pub mod stream;
pub mod sweep;
pub mod task;

pub use config::{parse_override, Method, MomentumSet, OptimizerKind, RunConfig};
pub use run::{run_experiment, run_on_task, RunReport};
pub use stream::{stream_similarities, SyntheticStream};
pub use sweep::{expand, run_sweep, summary_csv, summary_rows, Axis, AxisPoint, SummaryRow, SweepResult, PRESETS};
pub use task::{TaskConfig, TaskKind, ToyTask};
