//! Losses for decoder fine-tuning and the diffusion objective.

use candle_core::{DType, Tensor};

use crate::error::{ensure, Result};
use crate::model::PatchDiscriminator;
use crate::nn::{Conv2d, ParamStore, Padding};
use crate::rng::SeedTree;

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure!(a.dims() == b.dims(), Contract, "mse of {:?} and {:?}", a.dims(), b.dims());
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// A frozen, randomly initialized convolutional feature extractor.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    convs: Vec<Conv2d>,
}

impl PerceptualNet {
    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(dtype);
        let pb = store.builder(SeedTree::new(seed).child("perceptual"));
        let rep = |c: Conv2d| c.with_padding(Padding::Replicate);
        Ok(Self {
            convs: vec![
                rep(Conv2d::new(&pb.pp("conv0"), 3, 8, 3, 1)?),
                rep(Conv2d::new(&pb.pp("conv1"), 8, 16, 3, 2)?),
                rep(Conv2d::new(&pb.pp("conv2"), 16, 16, 3, 2)?),
            ],
        })
    }

    /// Activations after each layer.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = c.forward(&h)?.silu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Sum over layers of the mean squared feature distance.
    pub fn loss(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ensure!(a.dims() == b.dims(), Contract, "perceptual loss of {:?} and {:?}", a.dims(), b.dims());
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total = Tensor::zeros((), a.dtype(), a.device())?;
        for (x, y) in fa.iter().zip(&fb) {
            total = (total + mse(x, y)?)?;
        }
        Ok(total)
    }
}

/// Hinge discriminator loss on raw scores.
pub fn hinge_d_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    let real = (1.0 - real_scores)?.relu()?.mean_all()?;
    let fake = (fake_scores + 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

/// Generator side of the hinge loss.
pub fn hinge_g_loss(fake_scores: &Tensor) -> Result<Tensor> {
    Ok(fake_scores.mean_all()?.neg()?)
}

/// `(generator loss, discriminator loss)`; the discriminator sees `fake` detached.
pub fn gan_losses(disc: &PatchDiscriminator, real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = hinge_g_loss(&disc.forward(fake)?)?;
    let d = hinge_d_loss(&disc.forward(real)?, &disc.forward(&fake.detach())?)?;
    Ok((g, d))
}

/// Fraction of patches the discriminator classifies correctly (score sign).
pub fn disc_accuracy(real_scores: &Tensor, fake_scores: &Tensor) -> Result<f64> {
    let r = real_scores.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let f = fake_scores.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let correct = r.iter().filter(|v| **v > 0.0).count() + f.iter().filter(|v| **v <= 0.0).count();
    Ok(correct as f64 / (r.len() + f.len()).max(1) as f64)
}
