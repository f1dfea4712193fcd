//! From-scratch CNN execution and training. Serves both as the fitness
//! oracle during evolution and as the final-training engine.

mod network;
pub mod ops;
mod optim;
mod tensor;
mod train;

use thiserror::Error;

use crate::data::DataError;
use crate::shapecheck::ShapeError;

pub use network::{ForwardPass, Gradients, Mode, Network, ParamBlock};
pub use optim::Adam;
pub use tensor::Tensor;
pub use train::{
    evaluate, evaluate_fitness, fitness_split, train, train_with_log, EarlyStopping, EvalSettings, Monitor,
    TrainConfig, TrainResult, Verdict,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("loss became non-finite ({0})")]
    NonFiniteLoss(f64),
    #[error("{0} data is empty")]
    EmptyData(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
}
