//! Peer-effects estimation for school friendship networks with latent
//! effort and isolated students.
//!
//! The crate simulates data from a network game in which students choose
//! study effort given their friends' effort, estimates the resulting
//! linear-in-means outcome equation by instrumented GMM after fixed-effect
//! annihilation, recovers error-variance components by concentrated
//! quasi-maximum likelihood, runs graph-based identification checks,
//! propagates counterfactual shocks through the social multiplier, and
//! corrects for endogenous link formation with a dyadic-logit control
//! function.

pub mod counterfactual;
pub mod dgp;
pub mod diagnostics;
pub mod error;
pub mod gmm;
pub mod ingest;
pub mod netform;
pub mod netgraph;
pub mod structsim;
pub mod varcomp;

pub use error::{Error, Result};
