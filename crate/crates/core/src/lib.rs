//! Deterministic simulator for privacy-preserving horizontal federated learning.
//!
//! Clients draw Bernoulli mini-batches, take a FedSGD step from the global
//! parameter, and distort the result with isotropic Gaussian noise before the
//! server aggregates. Noise variance and sampling probability are calibrated
//! from a per-client privacy budget, and every inequality relating utility
//! loss, privacy leakage and total variation is evaluated numerically into a
//! [`BoundReport`].
//!
//! The numeric core ([`ParamVector`], the loss family, the sampling moment
//! formulas, discrete divergences) is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. Simulation, Monte Carlo estimation and
//! reporting run in `f64`; the aliases below name the concrete types used
//! there.

pub mod adversary;
pub mod commands;
pub mod config;
pub mod divergence;
pub mod domain;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod output;
pub mod protection;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod suite;
pub mod toy;

pub use domain::{ClientShard, DataPoint, ParamVector, RoundRecord};
pub use error::{Error, Result};
pub use metrics::{BoundEntry, BoundReport, Status};
pub use rng::{RngSeedTree, StreamTag};
pub use scalar::Scalar;

/// Model parameters in double precision.
pub type Param = ParamVector<f64>;
/// Model parameters in single precision.
pub type Param32 = ParamVector<f32>;
/// A client shard in double precision.
pub type Shard = ClientShard<f64>;
/// A labelled point in double precision.
pub type Point = DataPoint<f64>;
/// A probability mass function in double precision.
pub type Pmf = divergence::DiscreteDist<f64>;
/// A probability mass function in single precision.
pub type Pmf32 = divergence::DiscreteDist<f32>;
