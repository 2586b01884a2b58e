//! Seeded, deterministic federated-learning simulator.
//!
//! Each client trains two models: an *online* model whose non-BN parameters
//! are averaged on the server, and an *offline* model that never leaves the
//! client. Predictions are fused by summing logits. Under feature skew the two
//! models additionally distill into each other through frozen teacher copies,
//! and every client regularizes its feature extractors against the offline
//! classifiers uploaded by the other clients.
//!
//! Alongside the simulator, [`theory`] evaluates the auxiliary NTK Gram
//! matrices of two-layer BN regression networks and checks the minimum
//! eigenvalue ordering between the online model, the offline model and their
//! ensemble.
//!
//! All numerical code is generic over [`Scalar`]; the `*64` aliases below fix
//! the scalar to `f64`, which is what the harness uses.

pub mod cooperation;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Library version, echoed into run summaries.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tape64 = numerics::Tape<f64>;
pub type ParamSet64 = models::ParamSet<f64>;
pub type Mlp64 = models::Mlp<f64>;
pub type SampleStore64 = datagen::SampleStore<f64>;
pub type FederatedDataset64 = datagen::FederatedDataset<f64>;
pub type ClientState64 = federation::ClientState<f64>;
pub type ServerState64 = federation::ServerState<f64>;
pub type Simulation64 = federation::Simulation<f64>;
pub type ClassifierSet64 = cooperation::ClassifierSet<f64>;
pub type TwoLayerBnNet64 = theory::TwoLayerBnNet<f64>;
pub type GramEstimate64 = theory::GramEstimate<f64>;

pub type Tensor32 = numerics::Tensor<f32>;
pub type ParamSet32 = models::ParamSet<f32>;
