//! Optimizers.
pub mod mpa;
pub mod uks;
pub mod direct;
pub mod alternate;
