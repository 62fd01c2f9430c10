//! Cosine noise schedule, v-prediction algebra and deterministic stepping.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::normal_vec;
use crate::video::LatentVideo;

/// Discretized schedule on step indices `0..=T`.
///
/// `alpha[t] = cos(pi t / 2T)`, `sigma[t] = sin(pi t / 2T)`, with the end point
/// pinned to `alpha[T] = 0`, `sigma[T] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    num_steps: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    timestep_embed_values: Vec<f64>,
}

/// Time-embedding input at noise fraction 1.0. The embedding depends only on
/// `t / T`, so schedules with different step counts share one denoiser.
pub const TIME_EMBED_SCALE: f64 = 1000.0;

impl NoiseSchedule {
    pub fn cosine(num_steps: usize) -> Result<Self> {
        ensure!(num_steps >= 1, Range, "schedule needs at least one step");
        let big_t = num_steps as f64;
        let mut alpha = Vec::with_capacity(num_steps + 1);
        let mut sigma = Vec::with_capacity(num_steps + 1);
        for t in 0..=num_steps {
            let angle = std::f64::consts::FRAC_PI_2 * t as f64 / big_t;
            if t == num_steps {
                alpha.push(0.0);
                sigma.push(1.0);
            } else {
                alpha.push(angle.cos());
                sigma.push(angle.sin());
            }
        }
        let timestep_embed_values = (0..=num_steps)
            .map(|t| TIME_EMBED_SCALE * t as f64 / big_t)
            .collect();
        Ok(Self {
            num_steps,
            alpha,
            sigma,
            timestep_embed_values,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn embed_value(&self, t: usize) -> f64 {
        self.timestep_embed_values[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        ensure!(
            t <= self.num_steps,
            Range,
            "step {t} outside schedule 0..={}",
            self.num_steps
        );
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    ensure!(
        a.dims() == b.dims(),
        Contract,
        "{what}: shapes {:?} and {:?} differ",
        a.dims(),
        b.dims()
    );
    Ok(())
}

/// `a * x + b * y` on tensors of equal shape.
fn lincomb(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Result<Tensor> {
    Ok(((x * a)? + (y * b)?)?)
}

/// `z_t = alpha_t z0 + sigma_t eps`.
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z0, eps, "add_noise")?;
    sched.check_step(t)?;
    lincomb(sched.alpha(t), z0, sched.sigma(t), eps)
}

/// `v = alpha_t eps - sigma_t z0`.
pub fn v_target(z0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z0, eps, "v_target")?;
    sched.check_step(t)?;
    lincomb(sched.alpha(t), eps, -sched.sigma(t), z0)
}

/// Clean-latent estimate `alpha_t z_t - sigma_t v`.
pub fn predict_z0(z_t: &Tensor, v: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z_t, v, "predict_z0")?;
    sched.check_step(t)?;
    lincomb(sched.alpha(t), z_t, -sched.sigma(t), v)
}

/// Noise estimate `sigma_t z_t + alpha_t v`.
pub fn predict_eps(z_t: &Tensor, v: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z_t, v, "predict_eps")?;
    sched.check_step(t)?;
    lincomb(sched.sigma(t), z_t, sched.alpha(t), v)
}

/// One deterministic update from `t` to `t_next < t`.
pub fn denoise_step(
    z_t: &Tensor,
    v_pred: &Tensor,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_step(t)?;
    ensure!(t_next < t, Range, "denoise_step needs t_next < t (got {t_next} >= {t})");
    let z0 = predict_z0(z_t, v_pred, t, sched)?;
    if t_next == 0 {
        return Ok(z0);
    }
    let eps = predict_eps(z_t, v_pred, t, sched)?;
    lincomb(sched.alpha(t_next), &z0, sched.sigma(t_next), &eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeditConfig {
    pub strength: f64,
    pub total_steps: usize,
}

impl SdeditConfig {
    /// Number of denoising iterations left after partial noising
    /// (`strength * total_steps`, rounded half up).
    pub fn remaining_steps(&self) -> Result<usize> {
        ensure!(
            self.strength > 0.0 && self.strength <= 1.0,
            Range,
            "sdedit strength {} outside (0, 1]",
            self.strength
        );
        ensure!(self.total_steps >= 1, Range, "total_steps must be positive");
        let remaining = (self.strength * self.total_steps as f64 + 0.5).floor() as usize;
        ensure!(
            (1..=self.total_steps).contains(&remaining),
            Range,
            "strength {} leaves {remaining} of {} steps",
            self.strength,
            self.total_steps
        );
        Ok(remaining)
    }
}

/// Partially noise `lq_latent` so that exactly `remaining_steps()` iterations
/// remain; returns the noised latent and the starting step index.
pub fn sdedit_start<R: Rng + ?Sized>(
    lq_latent: &LatentVideo,
    cfg: &SdeditConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(LatentVideo, usize)> {
    ensure!(
        cfg.total_steps == sched.num_steps(),
        Contract,
        "sdedit total_steps {} differs from schedule length {}",
        cfg.total_steps,
        sched.num_steps()
    );
    let t_start = cfg.remaining_steps()?;
    let z0 = lq_latent.tensor();
    let eps = gaussian_like(z0, rng)?;
    let zt = add_noise(z0, &eps, t_start, sched)?;
    Ok((LatentVideo(zt), t_start))
}

/// Descending step indices `t_start, t_start-1, ..., 1` paired with their successor.
pub fn step_pairs(t_start: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..=t_start).rev().map(|t| (t, t - 1))
}

pub fn gaussian_like<R: Rng + ?Sized>(t: &Tensor, rng: &mut R) -> Result<Tensor> {
    let data = normal_vec(rng, t.elem_count(), 1.0);
    Ok(Tensor::from_vec(data, t.dims(), t.device())?.to_dtype(t.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::SeedTree;
    use candle_core::{DType, Device};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let data = normal_vec(&mut SeedTree::new(seed).rng(), shape.iter().product(), 1.0);
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
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

    #[test]
    fn schedule_invariants() {
        for steps in [1, 2, 7, 30, 1000] {
            let s = NoiseSchedule::cosine(steps).unwrap();
            assert!((s.alpha(0) - 1.0).abs() < 1e-9 && s.sigma(0).abs() < 1e-9);
            for t in 0..=steps {
                assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-9);
            }
            for t in 1..=steps {
                assert!(s.alpha(t) < s.alpha(t - 1));
                assert!(s.sigma(t) > s.sigma(t - 1));
            }
        }
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn add_noise_boundaries() {
        let s = NoiseSchedule::cosine(30).unwrap();
        let z0 = randn(&[2, 4, 4, 1], 1);
        let eps = randn(&[2, 4, 4, 1], 2);
        assert_eq!(max_abs(&add_noise(&z0, &eps, 0, &s).unwrap(), &z0), 0.0);
        assert!(max_abs(&add_noise(&z0, &eps, 30, &s).unwrap(), &eps) <= 1e-6);
        assert!(matches!(add_noise(&z0, &eps, 31, &s), Err(Error::Range(_))));
        let wrong = randn(&[2, 4, 4, 2], 3);
        assert!(matches!(add_noise(&z0, &wrong, 3, &s), Err(Error::Contract(_))));
    }

    #[test]
    fn add_noise_at_quarter_turn() {
        // With T = 30, t = 15 gives angle pi/4.
        let s = NoiseSchedule::cosine(30).unwrap();
        let ones = Tensor::ones((2, 4, 4, 1), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let out = add_noise(&ones, &zeros, 15, &s).unwrap();
        let want = std::f64::consts::FRAC_1_SQRT_2;
        for v in out.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn v_target_identities() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let z0 = randn(&[3, 2, 4, 4], 4);
        let eps = randn(&[3, 2, 4, 4], 5);
        assert_eq!(max_abs(&v_target(&z0, &eps, 0, &s).unwrap(), &eps), 0.0);
        let t = 17;
        let v = v_target(&z0, &z0, t, &s).unwrap();
        let want = (&z0 * (s.alpha(t) - s.sigma(t))).unwrap();
        assert!(max_abs(&v, &want) < 1e-6);
        for t in [1, 10, 25, 49, 50] {
            let zt = add_noise(&z0, &eps, t, &s).unwrap();
            let v = v_target(&z0, &eps, t, &s).unwrap();
            assert!(max_abs(&predict_z0(&zt, &v, t, &s).unwrap(), &z0) <= 1e-6);
            assert!(max_abs(&predict_eps(&zt, &v, t, &s).unwrap(), &eps) <= 1e-6);
        }
    }

    #[test]
    fn zero_prediction_step_by_hand() {
        let s = NoiseSchedule::cosine(30).unwrap();
        let zt = randn(&[1, 2, 3, 3], 6);
        let zero = zt.zeros_like().unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let out = denoise_step(&zt, &zero, 15, 9, &s).unwrap();
        let want = ((&zt * (s.alpha(9) * h)).unwrap() + (&zt * (s.sigma(9) * h)).unwrap()).unwrap();
        assert!(max_abs(&out, &want) < 1e-6);
        assert!(matches!(denoise_step(&zt, &zero, 5, 5, &s), Err(Error::Range(_))));
    }

    #[test]
    fn oracle_predictions_recover_the_clean_latent() {
        let s = NoiseSchedule::cosine(30).unwrap();
        let z0 = randn(&[4, 3, 4, 4], 10);
        let eps = randn(&[4, 3, 4, 4], 11);
        for path in [vec![30, 29, 20, 7, 0], (0..=30).rev().collect::<Vec<_>>(), vec![18, 0]] {
            let mut z = add_noise(&z0, &eps, path[0], &s).unwrap();
            for w in path.windows(2) {
                let v = v_target(&z0, &eps, w[0], &s).unwrap();
                z = denoise_step(&z, &v, w[0], w[1], &s).unwrap();
            }
            assert!(max_abs(&z, &z0) <= 1e-5);
        }
    }

    #[test]
    fn sdedit_counts() {
        let cases = [(30, 0.6, 18), (30, 1.0, 30), (10, 0.5, 5)];
        for (total_steps, strength, want) in cases {
            let cfg = SdeditConfig { strength, total_steps };
            assert_eq!(cfg.remaining_steps().unwrap(), want);
        }
        for strength in [0.0, -0.1, 1.01] {
            let cfg = SdeditConfig { strength, total_steps: 30 };
            assert!(matches!(cfg.remaining_steps(), Err(Error::Range(_))));
        }
    }

    #[test]
    fn sdedit_full_strength_is_pure_noise_plus_zero_signal() {
        let s = NoiseSchedule::cosine(30).unwrap();
        let lq = LatentVideo(randn(&[2, 2, 3, 3], 7));
        let cfg = SdeditConfig { strength: 1.0, total_steps: 30 };
        let (z, t) = sdedit_start(&lq, &cfg, &s, &mut SeedTree::new(9).rng()).unwrap();
        assert_eq!(t, 30);
        let eps = gaussian_like(lq.tensor(), &mut SeedTree::new(9).rng()).unwrap();
        assert_eq!(max_abs(z.tensor(), &eps), 0.0);
        assert_eq!(step_pairs(t).count(), 30);
        let bad = SdeditConfig { strength: 0.6, total_steps: 20 };
        assert!(sdedit_start(&lq, &bad, &s, &mut SeedTree::new(9).rng()).is_err());
    }
}
