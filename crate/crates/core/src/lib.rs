//! Desk-scale simulator of a heterogeneous federated learning protocol in
//! which clients share class prototypes and a server aligns them into a
//! frozen generator's latent domain, returning prototypical image-vector
//! pairs that drive an auxiliary supervised task on every client.

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod etf;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rng;
pub mod server;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
