//! Federated parameter-efficient fine-tuning simulator.
//!
//! Clients fine-tune a small subset of a pre-trained model (head, biases,
//! adapters or prompts) and only that subset travels to and from the server,
//! which averages it FedAvg-style. The crate contains its own tensor engine,
//! model zoo, data partitioning, differential privacy and byte-exact
//! communication accounting.
//!
//! Clients within a round train on a rayon pool when the `parallel` feature
//! is enabled (the default); results are identical for any thread count.

pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod ledger;
pub mod model;
pub mod peft;
pub mod privacy;
pub mod tensor;

pub use error::{Error, Result};
