//! Heterogeneous GATv2 meta-learner producing per-classifier competence logits.

mod model;
mod train;

pub use model::{
    gatv2_attention, GatEdgeParams, GatLayerParams, MetaConfig, MetaLearner, EDGE_WEIGHT_FLOOR, LEAKY_SLOPE,
    META_FORMAT, META_VERSION,
};
pub use train::{loss_and_gradients, train_metalearner, EpochRecord, MetaTrainConfig, TrainingHistory};
