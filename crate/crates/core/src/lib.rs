//! Building blocks for benchmarking real-time semantic segmentation networks.
//!
//! Feature extractors ([`zoo`]) and decoding meta-architectures
//! ([`meta_arch`]) are described declaratively as [`graph::NetworkGraph`]s,
//! so any encoder can be paired with any decoder. Each pairing can be costed
//! analytically ([`cost`]), executed and trained on the CPU ([`engine`],
//! [`training`]) and scored with the IoU family of metrics ([`evaluation`]).

pub mod graph;
pub mod zoo;
pub mod cost;
pub mod meta_arch;
pub mod engine;
pub mod data;
pub mod training;
pub mod evaluation;
pub mod checkpoint;
