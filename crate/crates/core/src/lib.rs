//! Federated learning over noisy digital links: a deterministic simulator of
//! FedAvg with bit errors injected into fixed-point payloads, and evaluators
//! for the associated convergence bounds and BER-tolerance predictions.

pub mod channel;
pub mod codec;
pub mod data;
pub mod error;
pub mod nn;
pub mod par;
pub mod sim;
pub mod theory;

pub use error::{Error, Result};
