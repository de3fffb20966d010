//! Trajectory geometry: PCA planarity, split-ratio grid search, and the
//! logistic/shell error-bound machinery.

mod align;
mod bound;
mod pca;

pub use align::{grid_align, parse_grid, AlignRow, AlignmentTable};
pub use bound::{
    bound_report, fit_logistic, logistic_bound, mc_shell_check, shell_radius, shell_variance,
    BoundParams, BoundReport, BoundSample, ShellReport,
};
pub use pca::{cumulative_variance, pca_trajectory, projection_error, total_variance, PcaResult};
