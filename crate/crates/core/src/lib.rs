//! Simulation lab for interface-based side channels on enclave-backed
//! network function chains.

pub mod classifier;
pub mod collector;
pub mod defense;
pub mod enclave;
pub mod event;
pub mod features;
pub mod harness;
pub mod packet;
pub mod profiling;
pub mod recognition;
pub mod scalar;
pub mod seed;
pub mod traffic;

pub use event::{read_trace, write_trace, Direction, InterfaceEvent, TraceError};
pub use features::{features_match, PacketFeatureVector, ProfiledPacket};
pub use packet::PacketGroundTruth;
pub use scalar::Scalar;

/// Sequence classifier in double precision, the default for training.
pub type Classifier = classifier::LstmParams<f64>;
pub type ClassifierF32 = classifier::LstmParams<f32>;
