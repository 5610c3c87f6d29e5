//! Vision encoder, query decoder, losses and training.

pub mod layers;
mod losses;
mod net;
mod optim;
mod segmenter;
mod train;

pub use losses::{
    class_target, loss_backbone_v, loss_backbone_vl, loss_mask2former, scene_targets, token_classes, SegLoss,
    DICE_EPS,
};
pub use net::{Augment, ForwardOut, ModelConfig, SegNet, ENCODER_PREFIX};
pub use optim::{decays, AdamW, AdamWConfig};
pub use segmenter::{Binding, OodQueries, Prediction, Segmenter};
pub use train::{
    scene_loss, LossRecord, LossWeights, SampleDraw, SceneLoss, Supervision, TrainConfig, Trainer, TRAIN_STREAM,
};

#[cfg(test)]
mod tests;
