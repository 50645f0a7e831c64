#![allow(dead_code)]

use std::path::Path;

use pgds::datagen::{generate_dataset, Dataset, GeneratorSpec};
use pgds::encoders::{pretrain_pose_encoder, PoseEncoder};
use pgds::PgdsConfig;

/// A configuration small enough for a training run in well under a second.
pub fn tiny_config() -> PgdsConfig {
    let mut cfg = PgdsConfig::default();
    cfg.model.channels = vec![4, 6, 8, 10, 12];
    cfg.model.embedding_dim = 16;
    cfg.train.identities_per_batch = 2;
    cfg.train.instances_per_identity = 2;
    cfg.train.epochs = 2;
    cfg.pose.channels = vec![4, 6];
    cfg.pose.epochs = 1;
    cfg
}

pub fn tiny_dataset(root: &Path) -> Dataset {
    generate_dataset(&GeneratorSpec::new(4, 2, 2, 2, 5), root).unwrap();
    Dataset::load(root).unwrap()
}

pub fn tiny_pose(ds: &Dataset, cfg: &PgdsConfig) -> PoseEncoder {
    pretrain_pose_encoder(ds, &cfg.pose, cfg.model.embedding_dim, cfg.pose.epochs, cfg.seed)
        .unwrap()
        .0
}
