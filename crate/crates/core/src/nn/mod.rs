//! Reverse-mode tape, dense classifier and trainer.

pub mod model;
pub mod tape;
pub mod train;

pub use model::{
    forward, forward_in, input_gradient, input_gradient_batch, input_gradient_in, input_gradient_with, Activation,
    DenseLayer, InputGradient, ModelWeights, DESK_ARCH,
};
pub use tape::{Gradients, Scalar, Tape, Tensor, Var};
pub use train::{accuracy, predict, train, EpochStats, PgdTraining, TrainConfig, TrainReport};
