//! Reconstruction of noisy, partially observed multi-agent crowd trajectories.
//!
//! The crate recovers per-agent trajectories from masked, noisy observations by
//! minimizing a decoupled energy: a quadratic tracker term on observed frames,
//! a kinetic smoothness term, a hard per-step speed cap, and a data-driven
//! motion prior that replaces explicit inter-agent collision terms. Priors come
//! in two flavors that can be combined: a Gaussian-process flow field over
//! (x, y, t) and a neural collision-avoidance regressor fed with local range
//! scans. Three interchangeable optimizers minimize the energy per agent:
//! a message-passing solver (`opt::mpa`), an unscented Kalman smoother
//! (`opt::uks`) and a quasi-Newton direct minimizer (`opt::direct`), all
//! driven by an outer alternation loop that refreshes the priors' view of the
//! world between rounds (`opt::alternate`).
//!
//! A small synthetic-experiment harness (`harness`, exposed through the
//! `crowdfill` binary) generates social-force ground truth, trains the priors,
//! masks segments, reconstructs them and reports DTW-based error metrics.

pub mod config;
pub mod dataset;
pub mod energy;
pub mod geom;
pub mod gp;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod numopt;
pub mod opt;
pub mod scenario;
pub mod sim;
pub mod traj;

#[doc(hidden)]
pub mod testutil;

/// 2-d point / vector used throughout. Positions are meters, velocities m/s.
pub type Vec2 = nalgebra::Vector2<f64>;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
