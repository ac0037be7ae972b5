#![allow(dead_code)]

use mscm::model::{ModelConfig, StreamInputs};
use mscm::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-1.0..1.0)))
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        stage_channels: vec![2, 4, 4, 4, 4],
        stage_strides: vec![2, 2, 2, 2, 1],
        num_alb: 4,
        attn_dim: 4,
        attn_heads: 2,
        token_grid: (2, 2),
        num_classes: 2,
        embed_dim: 4,
        ..ModelConfig::default()
    }
}

pub fn random_inputs<T: Scalar>(b: usize, h: usize, w: usize, seed: u64) -> StreamInputs<T> {
    StreamInputs {
        streams: [0, 1, 2, 3].map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 4 + s);
            Tensor::from_fn(&[b, 3, h, w], |_| T::lit(rng.gen_range(0.0..1.0)))
        }),
    }
}

/// A run small enough for unit tests: 32×16 images, a narrow backbone and
/// two identities per batch.
pub fn tiny_run(ids: usize, test_ids: usize, epochs: usize) -> (mscm::config::RunConfig, mscm::data::Dataset) {
    use mscm::config::RunConfig;
    use mscm::data::{generate_dataset, GenParams};
    let mut cfg = RunConfig::default();
    cfg.model = tiny_config();
    cfg.model.token_grid = (2, 1);
    cfg.augment.target_h = 32;
    cfg.augment.target_w = 16;
    cfg.sampler.ids_per_batch = 2;
    cfg.sampler.v_per_id = 2;
    cfg.sampler.t_per_id = 2;
    cfg.epochs = epochs;
    cfg.schedule.milestones = vec![];
    cfg.optimizer.lr = 1e-3;
    cfg.eval.test_ids = test_ids;
    cfg.eval.trials = 3;
    cfg.eval.max_rank = 4;
    let ds = generate_dataset(&GenParams {
        num_identities: ids as u32,
        samples_per_id_per_modality: 3,
        image_h: 32,
        image_w: 16,
        ..GenParams::default()
    })
    .unwrap();
    (cfg, ds)
}
