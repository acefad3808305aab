//! Covert byte-stream tunnel over datagrams that mimic a captured UDP host
//! protocol in both syntax and interpacket timing.
//!
//! The pipeline: [`profile`] learns observation tables and a delay corpus
//! from a capture, [`fte`] maps encrypted bits onto previously observed
//! field values, [`framing`] segments and encrypts messages, [`timing`]
//! infers a deterministic HMM from interpacket delays and regenerates them,
//! [`stats`] verifies generated traffic with KS and chi-square tests, and
//! [`tunnel`] runs the paced client/server endpoints.

pub mod checksum;
pub mod fixtures;
pub mod framing;
pub mod fte;
pub mod num;
pub mod profile;
pub mod stats;
pub mod timing;
pub mod tunnel;

pub use num::Float;
pub use profile::Profile;

/// Double-precision aliases for the scalar-generic numeric types.
pub type BinMap64 = timing::BinMap<f64>;
pub type TimingModel64 = timing::TimingModel<f64>;
pub type KsReport64 = stats::KsReport<f64>;
pub type ModelComparison64 = stats::ModelComparison<f64>;
