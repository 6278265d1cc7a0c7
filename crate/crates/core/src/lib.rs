//! Chance-constrained covariance steering for discrete-time linear-Gaussian
//! systems, and maximal-covariance backward reachable trees built from it.

pub mod brt;
pub mod config;
pub mod conic;
pub mod error;
pub mod linalg;
pub mod moments;
pub mod montecarlo;
pub mod planner;
mod serde_mat;
pub mod steering;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    AffineFeedbackLaw, FeedbackStep, GaussianBelief, HalfspaceChanceConstraint, LinearGaussianSystem, PlanningScene,
    SteeringWeights,
};
