//! Small feed-forward networks trained with Adam on embeddings.
//!
//! [`Mlp`] stacks affine layers with `tanh` between them, [`loss`] provides
//! the cosine-distance regression loss and AAM-softmax, and [`train`] runs
//! seeded mini-batch training that keeps the snapshot with the lowest
//! validation loss. [`gradcheck`] compares every analytic gradient with
//! central finite differences.

pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod mlp;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use loss::{
    aam_loss_and_grad, cosine_loss_and_grad, AamGrad, AamHead, DEFAULT_AAM_MARGIN,
    DEFAULT_AAM_SCALE,
};
pub use mlp::{ForwardTrace, Layer, Mlp};
pub use train::{
    train, write_history_csv, AamClassifier, CosineRegression, HistoryRow, Task, TrainConfig,
    TrainOutcome,
};
