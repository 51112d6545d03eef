//! A desk-scale convolutional soiling model, written from scratch.
//!
//! The model has a shared encoder of strided `conv -> batch norm -> ReLU`
//! blocks and two heads on top of it:
//!
//! - a surrogate head, a linear projection of the tile-pooled features onto
//!   per-tile intensity and texture statistics of the input (see
//!   [`surrogate_targets`]), standing in for the tasks the encoder would
//!   normally be trained on, and
//! - the soiling head, a stack of `conv -> batch norm -> ReLU` blocks pooled
//!   to tile resolution and projected to four channels. In coverage mode the
//!   output goes through softsign and is trained with the coverage RMSE; in
//!   classification mode it goes through softmax and is trained with
//!   categorical cross-entropy.
//!
//! Training runs in two phases: encoder plus surrogate head first, then the
//! encoder (weights and batch-norm statistics) is frozen and only the
//! soiling head is trained.
//!
//! All numeric code is generic over [`Real`] so gradients can be checked in
//! `f64` while training runs in `f32`.

mod adam;
mod augment;
mod checkpoint;
mod layers;
mod loss;
mod model;
mod params;
mod predict;
mod tensor;
mod train;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment_sample, AugmentConfig};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use layers::{softsign, softsign_backward};
pub use loss::{
    loss_and_grad, loss_only, surrogate_targets, surrogate_width, Batch, LossOutput, Objective,
    RMSE_SMOOTHING,
};
pub use model::{EncoderPass, ForwardPass, HeadMode, HeadOutput, ModelConfig, ToyModel};
pub use params::{Grads, Param, ParamGroup, ParamKind, ParamStore};
pub use predict::{predict_to_files, PredictSummary};
pub use tensor::{Tensor4, TensorGrid};
pub use train::{
    evaluate_coverage, train_two_phase, train_two_phase_logged, write_training_log, CoverageEval,
    EpochLog, TrainConfig, TrainOutcome, TrainPhase,
};

/// Floating-point element type of tensors and parameters.
pub trait Real:
    num_traits::Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn append_le_bytes(self, out: &mut Vec<u8>);
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}
