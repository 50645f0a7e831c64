//! Trainable human encoder and frozen pose teacher.

mod human;
mod pose;

pub use human::{HumanEncoder, HumanPass, Mode, MultiScaleFeatureSet, NUM_STAGES};
pub use pose::{pretrain_pose_encoder, PoseEncoder, PoseOutput, PretrainReport};
