//! Base classifiers: training, out-of-fold predictions, temperature
//! calibration, and the simulated peer-to-peer model exchange.

mod calibration;
mod exchange;
mod model;
mod train;

pub use calibration::{
    calibrate_logits, calibrate_temperature, temperature_nll, Calibration, LOG_TEMPERATURE_TOLERANCE,
    MAX_TEMPERATURE, MIN_TEMPERATURE,
};
pub use exchange::{
    assign_architectures, exchange_models, ClassifierPool, ClientTraffic, Exchange, ExchangeLog, PoolEntry,
};
pub(crate) use model::glorot;
pub use model::{Activation, Architecture, ClassifierModel, DenseLayer, MODEL_FORMAT, MODEL_VERSION};
pub use train::{
    class_weights, oof_predictions, stratified_folds, train_classifier, OutOfFold, TrainOptions,
    TrainedClassifier,
};
