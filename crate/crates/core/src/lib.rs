//! Simulation of a two-phase self-sensing IRS system that jointly localizes
//! targets/scatterers/user and estimates the sensing and communication
//! channels.
//!
//! Pipeline: [`scene`] geometry → [`channel`] synthesis → [`measurement`]
//! model → [`estep`] + [`mstep`] (turbo variational inference with grid-offset
//! refinement) → [`crb`] + [`rcg`] reflection design for phase II. The
//! [`baselines`] and [`harness`] modules run Monte-Carlo comparisons.

pub mod baselines;
pub mod channel;
pub mod crb;
pub mod dump;
pub mod error;
pub mod estep;
pub mod harness;
pub mod linalg;
pub mod measurement;
pub mod mstep;
pub mod priors;
pub mod rcg;
pub mod scene;
pub mod validate;

pub use error::{Error, Result};
