//! Learned mean-direction solver: predictor network, step rules, training.

mod predictor;
pub(crate) mod step;
mod train;

pub use predictor::{
    predict, time_embedding, ForwardCache, PredictorConfig, PredictorOutput, PredictorParams,
};
pub use step::{amed_plugin_step, amed_sample, amed_step, AmedKind};
pub use train::{
    evaluation_loss, mean_endpoint_error, step_loss, step_loss_and_gradient, teacher_targets,
    train, train_from, LossRecord, Metric, StepBatch, StepGradient, StudentState, TrainConfig,
    TrainReport,
};
