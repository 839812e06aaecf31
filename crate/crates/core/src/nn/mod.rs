//! Layer primitives with forward and backward rules.

pub mod activation;
pub mod concat;
pub mod conv;
pub mod loss;
pub mod norm;
pub mod pool;

pub use activation::LEAKY_SLOPE;
pub use conv::{Conv2d, ConvGeom};
pub use loss::softmax;
pub use norm::{BatchNorm, BnStats, StatUpdate};
pub use pool::pool_output_extent;

/// Train mode normalizes with batch statistics and queues running-stat
/// updates; infer mode reads the running buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Every max-pool in the network is 3×3 with stride 2.
pub const POOL_WINDOW: usize = 3;
pub const POOL_STRIDE: usize = 2;
