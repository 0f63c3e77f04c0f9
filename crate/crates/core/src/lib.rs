//! Online fair classification with soft-routed oblique decision forests.
//!
//! Each internal node emits `sigmoid(w . x + b)` and routes an instance to
//! both children with complementary probabilities. Fairness is enforced per
//! node through a Huber penalty on the gap between group-conditional mean
//! node outputs, estimated from running aggregates so that no history is
//! stored.

pub mod baselines;
pub mod data;
pub mod error;
pub mod forest;
pub mod gradients;
pub mod learner;
pub mod optim;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use forest::{build_mask, ForestShape, ObliqueForest};
pub use learner::{Learner, LearnerConfig, OnlineLearner, StepRecord};
