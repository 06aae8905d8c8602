//! Debiased explicit-feedback rating prediction with inverse propensity
//! scoring, including multifactorial (item and rating value) propensities,
//! a semi-synthetic simulator and an experiment runner.

// negated float comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod propensity;
pub mod rng;
pub mod sim;
