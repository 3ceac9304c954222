//! Inner maximization and geometric robustness probes: PGD in l-inf and l2
//! balls, DeepFool distances, and 2-D loss landscapes.

mod deepfool;
mod landscape;
mod pgd;

use thiserror::Error;

pub use deepfool::{deepfool, rho_metric, DeepFoolResult, RhoReport, DEFAULT_MAX_ITER, DEFAULT_OVERSHOOT};
pub use landscape::{loss_landscape, orthogonal_direction, Landscape};
pub use pgd::{pgd, pgd_batch, pgd_eval_attack, project_l2, project_linf, AttackConfig, Norm, PgdOutput};

use crate::ad::AdError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error("direction vector is zero")]
    ZeroDirection,
    #[error("DeepFool converged on none of {total} examples")]
    NoneConverged { total: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}
