#![allow(dead_code)]

use ensbc_core::data::{generate_dataset, sample_batch, Batch, Dataset, RewardTransform, StateNormalizer};
use ensbc_core::env::{EnvSpec, Tier};
use ensbc_core::nn::Mlp;
use ensbc_core::sac::{SacBcnAgent, SacConfig};
use ensbc_core::td3::{Td3BcnAgent, Td3Config};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_td3() -> Td3Config {
    Td3Config {
        hidden_width: 16,
        hidden_layers: 2,
        batch_size: 32,
        ensemble_size: 3,
        ..Td3Config::default()
    }
}

pub fn small_sac() -> SacConfig {
    SacConfig {
        hidden_width: 16,
        hidden_layers: 2,
        batch_size: 32,
        ensemble_size: 3,
        ..SacConfig::default()
    }
}

pub fn medium(size: usize, seed: u64) -> Dataset {
    generate_dataset(&EnvSpec::point_dense(), Tier::Medium, size, seed).unwrap()
}

pub fn td3(config: Td3Config, seed: u64) -> Td3BcnAgent {
    Td3BcnAgent::new(config, 2, 2, StateNormalizer::identity(2), &mut rng(seed)).unwrap()
}

pub fn sac(config: SacConfig, seed: u64) -> SacBcnAgent {
    SacBcnAgent::new(config, 2, 2, StateNormalizer::identity(2), &mut rng(seed)).unwrap()
}

pub fn batch(dataset: &Dataset, n: usize, seed: u64) -> Batch {
    sample_batch(dataset, n, RewardTransform::IDENTITY, &mut rng(seed)).unwrap()
}

/// Batch with well-separated states and actions inside the tanh range.
pub fn spread_batch(n: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let mut u = |lo: f64, hi: f64, shape: (usize, usize)| Array2::from_shape_fn(shape, |_| r.random_range(lo..hi));
    let states = u(-1.0, 1.0, (n, 2));
    let actions = u(-0.8, 0.8, (n, 2));
    let next_states = u(-1.0, 1.0, (n, 2));
    let rewards = u(-1.0, 0.0, (n, 1)).column(0).to_owned();
    Batch {
        states,
        actions,
        rewards,
        next_states,
        not_done: Array1::ones(n),
    }
}

/// Zeroes the output layer's weights and sets its bias.
pub fn set_output_layer(net: &mut Mlp, bias: &[f64]) {
    let widths = net.arch().widths().to_vec();
    let (fan_in, fan_out) = (widths[widths.len() - 2], widths[widths.len() - 1]);
    assert_eq!(bias.len(), fan_out);
    let p = net.params_mut();
    let start = p.len() - fan_in * fan_out - fan_out;
    p[start..start + fan_in * fan_out].fill(0.0);
    p[start + fan_in * fan_out..].copy_from_slice(bias);
}

/// Multiplies the output layer (weights and bias) by `c`.
pub fn scale_output_layer(net: &mut Mlp, c: f64) {
    let widths = net.arch().widths().to_vec();
    let (fan_in, fan_out) = (widths[widths.len() - 2], widths[widths.len() - 1]);
    let p = net.params_mut();
    let start = p.len() - fan_in * fan_out - fan_out;
    p[start..].iter_mut().for_each(|v| *v *= c);
}

pub fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}
