//! Query-aware knowledge retrieval fused with a knowledge-infused multimodal
//! transformer for image search over named visual entities.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autograd`], [`params`], [`optim`], [`gradcheck`]: a small
//!   define-by-run reverse-mode engine with Adam and finite-difference checks.
//! * [`text`]: tokenizer, vocabulary and the trainable text encoder.
//! * [`retrieval`]: likelihood/similarity fusion and knowledge selection.
//! * [`model`]: region projection, joint sequence assembly, the joint
//!   transformer and its alignment/MLM heads.
//! * [`train`]: pair sampling, MLM masking, the training step and schedules.
//! * [`eval`]: gallery ranking and retrieval/linking metrics.
//! * [`verify`]: the gradient-check suite over primitives and the full loss.
//! * [`data`]: corpus files, region feature files, checkpoints and the
//!   synthetic corpus generator.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod tensor;
pub mod text;
pub mod train;
pub mod verify;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
