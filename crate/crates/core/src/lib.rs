//! Decentralized learning with correlated zero-sum noise.

pub mod accountant;
pub mod attacks;
pub mod averaging;
pub mod harness;
pub mod learning;
pub mod noise;
pub mod rng;
pub mod topology;
