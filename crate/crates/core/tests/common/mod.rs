#![allow(dead_code)]

use primus::data::{gen_synthetic, Dataset, SyntheticSpec};
use primus::encoder::EncoderConfig;
use primus::losses::LossConfig;
use primus::train::TrainConfig;

/// Encoder small enough to pretrain the default synthetic set in minutes.
pub fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 6,
        conv_channels: vec![16, 32, 32],
        kernel: 7,
        pool_window: 2,
        gn_groups: 4,
        gru_hidden: 32,
        head_hidden: 64,
        embed_dim: 64,
    }
}

/// Training setup used for the synthetic experiments.
pub fn experiment_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        queue_capacity: 256,
        encoder: small_encoder(),
        ..TrainConfig::default()
    }
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 6,
        conv_channels: vec![8],
        kernel: 5,
        pool_window: 2,
        gn_groups: 2,
        gru_hidden: 8,
        head_hidden: 16,
        embed_dim: 16,
    }
}

pub fn tiny_dataset(seed: u64) -> Dataset {
    gen_synthetic(&SyntheticSpec {
        n_classes: 4,
        segments_per_class: 40,
        t: 40,
        embed_dim: 16,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

/// Fast full-objective run on [`tiny_dataset`] that reaches the neighbor
/// term within the first epoch.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 3,
        lr: 1e-3,
        seed: 7,
        loss: LossConfig {
            nn_warmup: 32,
            ..LossConfig::default()
        },
        queue_capacity: 64,
        encoder: tiny_encoder(),
        ..TrainConfig::default()
    }
}
