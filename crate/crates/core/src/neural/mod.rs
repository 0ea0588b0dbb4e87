//! A small differentiable classifier with attention over comments.
//!
//! Everything runs in `f64` with hand-written backpropagation; see
//! [`grad_check`] for the finite-difference verification.

mod adamw;
mod attention;
mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod model;

pub use adamw::{adamw_step, AdamW, AdamWState};
pub use attention::{attend_comments, Attended};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, DEFAULT_STEP};
pub use loss::{argmax, cross_entropy_loss, kl_loss, log_softmax, softmax, SoftLabel, Target};
pub use model::{
    forward_classifier, ForwardOutput, FusionClassifier, ModelConfig, ModelInput, Scheme, WeightedExample,
};
