//! Fingerprint liveness detection with gram-matrix texture features.
//!
//! The crate carries its own reverse-mode autograd ([`Graph`]), the layer
//! primitives the network needs ([`nn`]), the gram and fire building blocks,
//! the assembled [`GramNet`], an Adamax trainer, dataset ingestion with a
//! synthetic texture generator, and biometric metrics (ACE, DET).
//!
//! Everything numeric is generic over [`Scalar`]; `f32` is used for
//! training and inference and `f64` for gradient checks.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fire;
pub mod gradcheck;
pub mod gram;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
mod persist;
pub mod report;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use dataset::{Label, Sample};
pub use error::{Error, Result};
pub use fire::{FireModule, FireSpec};
pub use gram::GramModule;
pub use graph::{Graph, Var};
pub use metrics::{ace, det_curve, detection_rate, error_rates, ScoreSet};
pub use model::{GramNet, NetConfig};
pub use nn::Mode;
pub use optim::{Adamax, PlateauScheduler};
pub use params::{ParamId, ParamKind, ParamStore};
pub use report::LayerReport;
pub use scalar::Scalar;
pub use tensor::{Init, Tensor};
pub use train::{fit, FitOptions, FitOutcome, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type GramNet32 = GramNet<f32>;
pub type GramNet64 = GramNet<f64>;
