//! Batch experiments, metrics and file formats.

mod io;
mod metrics;
mod run;

pub use io::{read_trajectory_csv, write_schedule_csv, write_trajectory_csv};
pub use metrics::{order_estimate, sliced_wasserstein};
pub use run::{
    run_experiment, run_with_model, write_report, MetricsReport, MetricsRow, RunConfig,
    ScheduleSpec, SolverOrder,
};
