//! Wheel-graph attention networks for joint intent detection and slot filling.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors and a reverse-mode tape
//! - [`dataset`]: corpus loading, vocabularies and index encoding
//! - [`encoder`]: embedding, affine projection and the two-layer BiGRU
//! - [`wheelgraph`]: wheel topology, graph attention and node updates
//! - [`model`]: the joint model, its output heads and loss
//! - [`checkpoint`]: binary checkpoint container
//! - [`training`]: optimizer, clipping, dropout and the training loop
//! - [`metrics`]: intent accuracy, span-level slot F1, sentence accuracy

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod init;
pub mod metrics;
pub mod model;
pub mod training;
pub mod wheelgraph;
