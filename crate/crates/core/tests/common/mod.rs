#![allow(dead_code)]

use bivsr::model::{ModelBundle, ModelConfig};
use bivsr::rng::{normal_vec, SeedTree};
use candle_core::{DType, Device, Tensor};

pub fn small_config(frames: usize) -> ModelConfig {
    ModelConfig {
        frames,
        latent_channels: 4,
        base_width: 8,
        num_heads: 2,
        latent_downscale: 4,
        ref_embed_dim: 8,
        ref_grid: 2,
        resolutions: vec![8, 12],
        vae_width: 8,
        vae_lora_rank: 2,
        disc_width: 4,
    }
}

pub fn random_tensor(seed: u64, dims: &[usize], std: f32, dtype: DType) -> Tensor {
    let mut rng = SeedTree::new(seed).rng();
    let n = dims.iter().product();
    Tensor::from_vec(normal_vec(&mut rng, n, std), dims, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

/// Give every zero-initialized parameter random values so each branch matters.
pub fn randomize_zero_init(bundle: &ModelBundle, seed: u64) {
    let names = bundle.store.names();
    for (i, name) in names.iter().enumerate() {
        let var = bundle.store.get(name).unwrap();
        let abs = var.as_tensor().abs().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        if abs == 0.0 {
            let t = random_tensor(seed ^ (i as u64) << 8, var.dims(), 0.1, bundle.dtype());
            bundle.store.set(name, &t).unwrap();
        }
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}
