//! Bayesian optimization of exit thresholds: a Gaussian-process surrogate,
//! UCB acquisition maximized with DIRECT, and the outer search loop.

pub mod direct;
pub mod gp;
pub mod tuner;

pub use direct::{direct_maximize, DirectResult};
pub use gp::{gp_fit, se_kernel, GpConfig, GpModel};
pub use tuner::{
    history_csv, latin_hypercube, optimize_shared_threshold, optimize_thresholds, ucb_score,
    AcquisitionConfig, BetaSchedule, BoBudget, BoConfig, BoResult, HistoryEntry, PointSource,
    StopReason,
};
