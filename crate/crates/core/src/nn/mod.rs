//! A small self-contained network engine for the joint transmittance and
//! airlight estimator.

pub mod adadelta;
pub mod layers;
pub mod model_io;
pub mod network;
pub mod tensor;
pub mod train;

pub use adadelta::Adadelta;
pub use model_io::{load_model, save_model};
pub use network::{
    backward, forward, mse_loss, parameter_count, target_of, EstimatorOutput, Gradients, NetworkParams, ARCHITECTURE, OUTPUTS,
    PATCH_SIZE,
};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainReport, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS};
