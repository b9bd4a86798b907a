//! Option discovery from continuous-control demonstrations.
//!
//! A two-level policy (a high-level selector over options, each option a
//! Gaussian control policy with a logistic termination) is fitted to
//! demonstration trajectories by maximum likelihood. The E-step computes exact
//! marginal posteriors over options and terminations with scaled
//! forward-backward messages; the G-step turns them into the log-likelihood
//! gradient, which drives a first-order optimizer.
//!
//! Also included: behavior cloning baselines, a hybrid high-level head that can
//! emit controls directly, vector-quantization initialization, layer-wise
//! training, cross-validated selection of the number of options, consistency
//! diagnostics, and two demonstration sources (a planar three-link pushing
//! task and a switching linear system with ground-truth labels).

#![allow(clippy::needless_range_loop)]
pub mod approx;
pub mod env;
pub mod error;
pub mod inference;
pub mod io;
pub mod modelselect;
pub mod policy;
pub mod testutil;
pub mod training;
pub mod types;

pub use approx::{Approximator, Architecture, Head, HeadOutput, Mode, Target};
pub use error::{Error, Result};
pub use inference::{annotate_segments, brute_force_posteriors, forward_backward, trajectory_loglikelihood};
pub use policy::{FlatPolicy, HeadMode, HierarchicalPolicy, OptionSpec};
pub use types::{validate_trajectory, Dataset, LatentPath, PosteriorTables, Trajectory, Violation};
