//! Component-wise likelihood-based boosting for Gaussian linear mixed models.
//!
//! The booster updates one fixed effect per iteration, performs a separate
//! weak Fisher-scoring step for the random effects and then removes from the
//! random intercepts everything that the cluster-constant covariates can
//! explain. Variance components follow an approximate EM update. Early
//! stopping is chosen by cluster-wise k-fold cross-validation.

pub mod cv;
pub mod engine;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod sim;

pub use error::{Error, Result};
pub use model::{Dataset, ParamState};
