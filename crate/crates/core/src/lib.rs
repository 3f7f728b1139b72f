//! LSTD(λ) estimators, random Markov reward processes, and a λ×α sweep harness.

pub mod analysis;
pub mod engine;
pub mod harness;
pub mod linalg;
pub mod mrp;
pub mod seed;
