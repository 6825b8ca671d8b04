#![allow(dead_code)]

use flowdisagg::autodiff::Tensor;
use flowdisagg::data::WindowSample;
use flowdisagg::model::{ModelConfig, PfvaeModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// T=16, M=2, C_z=4, one encoder/decoder block, two flow blocks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        window_len: 16,
        n_input_channels: 3,
        n_appliances: 2,
        latent_channels: 4,
        n_encoder_blocks: 1,
        n_decoder_blocks: 1,
        n_flow_blocks: 2,
        hidden_channels: 4,
        ..ModelConfig::default()
    }
}

pub fn toy_batch(config: &ModelConfig, n: usize, seed: u64) -> Vec<WindowSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = config.window_len;
    (0..n)
        .map(|i| WindowSample {
            y: Tensor::from_fn(&[config.n_input_channels, t], |_| StandardNormal.sample(&mut rng)),
            x: Tensor::from_fn(&[config.n_appliances, t], |_| StandardNormal.sample(&mut rng)),
            window_start: i * t,
            normalized: true,
        })
        .collect()
}

/// Gives every zero-initialised coupling output conv small random weights.
pub fn perturb_couplings(model: &mut PfvaeModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0f32, 0.1).unwrap();
    for (_, p) in model.params_mut().iter_mut() {
        if p.name.contains("coupling.out") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = d.sample(&mut rng));
        }
    }
}

/// Toy model with initialized actnorm and non-trivial couplings.
pub fn toy_model(config: ModelConfig, seed: u64) -> (PfvaeModel, Vec<WindowSample>) {
    let mut model = PfvaeModel::new(config).unwrap();
    let batch = toy_batch(model.config(), 6, seed);
    model.ensure_initialized(&batch).unwrap();
    perturb_couplings(&mut model, seed + 1);
    (model, batch)
}
