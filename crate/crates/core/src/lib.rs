//! Hierarchical CNN–transformer classifier built from multi-scale patch
//! tokens, a fused scale token, and stacked scale-wise (local) and
//! patch-wise (global) attention, on top of a small self-contained
//! reverse-mode tensor library.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the working precision to `f64`.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scale_token;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type FeatureHierarchy64 = backbone::FeatureHierarchy<f64>;
pub type Backbone64 = backbone::Backbone<f64>;
pub type DuoFormer64 = model::DuoFormer<f64>;
pub type DuoFormer32 = model::DuoFormer<f32>;
pub type Split64 = trainer::Split<f64>;

pub use model::{DuoFormerConfig, EncoderConfig, InputKind};
