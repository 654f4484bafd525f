//! Toy-scale joint training of an encoder, class centers, and group
//! weights: self-distillation against an EMA teacher plus two center
//! divergence terms.

mod augment;
mod config;
pub(crate) mod encoder;
mod gradcheck;
mod loss;
mod state;

pub use augment::augment_views;
pub use config::TrainConfig;
pub use encoder::{param_count, Encoder, ForwardTrace};
pub use gradcheck::{check_gradients, relative_error, GradientCheck, RELATIVE_FLOOR};
pub use loss::{center_align_loss, divergence, kd_loss, weighted_center_loss, Objective};
pub use state::{
    init_state, loss_with_terms, total_loss, train, CenterBank, Gradients, LossOutput, StepRecord,
    TermWeights, TrainState, ViewBatch,
};
