//! Numerical laboratory for strong limits of supercritical measure-valued
//! branching processes on finite state spaces.
//!
//! The crate computes mean and twisted matrix semigroups with their leading
//! eigendata, solves the nonlinear cumulant flows and the extinction
//! functional, builds the embedded branching particle system (the skeleton),
//! samples the strong limit `W` through its compound Poisson representation,
//! and tests the distributional predictions (positive density, small-value
//! power law, tail decay) against closed-form oracles and Monte Carlo data.

pub mod cumulant;
pub mod manifest;
pub mod model;
pub mod ode;
pub mod rng;
pub mod scenarios;
pub mod skeleton;
pub mod spectral;
pub mod staging;
pub mod stats;
