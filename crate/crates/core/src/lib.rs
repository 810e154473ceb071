//! Network interface between uncertainty-quantification methods and
//! numerical models.
//!
//! A model is a map `F: Rⁿ → Rᵐ` (plus optional derivative actions) hosted by
//! a [`server`] and reached through a [`client::RemoteModel`], which presents
//! it as an ordinary [`Model`]. The [`balancer`] sits in front of many
//! identical servers and behaves like one of them.

pub mod balancer;
pub mod client;
pub mod model;
pub mod models;
pub mod protocol;
pub mod server;

pub use client::{evaluate_batch, ClientOptions, RemoteModel};
pub use model::Model;
pub use protocol::{Config, ErrorKind, ModelDescriptor, OperationKind, ParameterBlock, ProtocolError, Support};
pub use server::{serve_models, ServerConfig, ServerHandle};
