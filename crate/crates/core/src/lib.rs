//! Pose-guided deep supervision for clothes-changing person re-identification.
//!
//! A convolutional human encoder is trained with a batch-hard triplet loss
//! while a frozen pose encoder supervises several of its intermediate stages
//! through small projectors and a KL-divergence contrastive guide loss. Only
//! the human encoder runs at inference time.

pub mod ablation;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod image_tensor;
pub mod losses;
pub mod nn;
pub mod php;
pub mod report;
pub mod rng;
pub mod simplex;
pub mod trainer;

pub use config::PgdsConfig;
pub use error::{PgdsError, Result};
pub use image_tensor::ImageTensor;
pub use simplex::{kl_divergence, softmax_with_temperature, EmbeddingVector, ProbVector};
