//! Single-layer LSTM with an MLP regression head, trained by plain SGD on
//! mean squared error. Gradients are computed by hand (backpropagation
//! through time), so the module carries no autodiff dependency.

mod lstm;
mod model;

pub use lstm::{lstm_step, CellState, Gate, LstmWeights, StepRecord};
pub use model::{
    evaluate_mse, forward, loss_and_grad, sgd_step, sgd_step_in_place, Architecture, MlpHead,
    ModelShape, ModelWeights, Tape,
};

pub(crate) use lstm::sigmoid;
