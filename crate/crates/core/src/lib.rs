//! Source ranging with a feed-forward network and fitting-based early stopping.
//!
//! The pipeline simulates narrowband fields in range-independent waveguides
//! ([`waveguide`]), turns each array snapshot into a normalized covariance
//! feature ([`features`]), builds labeled training sets and unlabeled
//! moving-source tracks ([`scenario`]), trains a classifier while tracing
//! its test predictions ([`network`]), and picks the stopping epoch from the
//! straightness of the predicted track ([`feast`]). A Bartlett processor
//! ([`mfp`]) serves as the model-based baseline. [`pipeline`] ties the steps
//! to run directories and configuration files.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod features;
pub mod feast;
pub mod mfp;
pub mod network;
pub mod pipeline;
pub mod scenario;
pub mod waveguide;

pub use features::{CovarianceFeature, HermitianMatrix, RangeBinning, RangeLabel};
pub use feast::{FeastOptions, FeastTrace, LinearTrack};
pub use mfp::{MfpEstimate, ReplicaGrid};
pub use network::{EpochTrace, MlpParams, TrainConfig};
pub use scenario::{Dataset, Simulator, SourceDomain, TrajectorySpec};
pub use waveguide::{ArrayGeometry, BottomCondition, ModeSet, PressureVector, SoundSpeedProfile, WaveguideEnv};
