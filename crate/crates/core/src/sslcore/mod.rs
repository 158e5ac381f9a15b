//! Toy self-supervised speech encoder.

mod model;
mod train;

pub use model::{
    conv_features, encoder_pass, num_frames, Block, EncoderConfig, EncoderParams, EncoderPass,
    EncoderWeights, FeatureSequence, CONV_SCHEDULE, EDGE_PAD, FRAME_STRIDE, RECEPTIVE_FIELD,
};
pub use train::{
    continual_train, masked_loss, mean_ssl_loss, pretrain, span_mask, ssl_pretrain_loss,
    train_ssl, EpochStat, MaskConfig, SslTrainConfig, TrainLog,
};
