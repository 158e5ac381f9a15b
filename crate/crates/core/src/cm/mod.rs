//! Countermeasure: front end, back end, augmentation, losses and fine-tuning.

mod augment;
mod backend;
mod loss;
mod model;
mod train;

pub use augment::{augment, augment_with_draw, AugConfig, AugDraw};
pub use backend::{backend_score, Backend, BackendParams, LEAKY_SLOPE};
pub use loss::{
    contrastive_feature_loss, contrastive_var, cross_entropy_loss, positive_sets, total_loss,
    ViewClass, ViewEmbedding, DEFAULT_TEMPERATURE,
};
pub use model::{cm_score, CMModel, CmMode, Teachers};
pub use train::{
    batch_gradients, batch_loss, dev_loss, finetune, BatchLoss, EarlyStopping, EpochReport,
    TrainConfig, TrainReport, Trainable, View,
};
