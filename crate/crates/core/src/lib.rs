//! Rotation-equivariant visual place recognition at desk scale.
//!
//! The pipeline runs end to end on the CPU with hand-written forward and
//! backward passes: cyclic-group steerable convolutions produce
//! orientation-indexed feature maps, orientation plus spatial pooling turn
//! them into rotation-invariant descriptors, a multi-similarity metric loss
//! trains the encoder on synthetically generated aerial worlds, and a
//! brute-force descriptor store evaluates Recall@N retrieval.
//!
//! All numerical code is generic over the scalar type ([`Scalar`], `f32` or
//! `f64`): correctness and gradient checks run in `f64`, training and
//! encoding default to `f32`.

pub mod aggregation;
pub mod backbone;
pub mod dataset;
pub mod equivariant;
pub mod error;
pub mod gradcheck;
pub mod group;
pub mod loss;
pub mod norm;
pub mod ops;
pub mod par;
pub mod retrieval;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use group::GroupSpec;
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// 32-bit tensor: the training/encoding default.
pub type Tensor32 = Tensor<f32>;
/// 64-bit tensor: used by gradient and equivariance checks.
pub type Tensor64 = Tensor<f64>;

/// 32-bit model: the training/encoding default.
pub type Model32 = backbone::Model<f32>;
/// 64-bit model: used by exactness checks.
pub type Model64 = backbone::Model<f64>;
