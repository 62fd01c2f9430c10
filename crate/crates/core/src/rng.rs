//! Seed derivation. One run seed fans out into independent, named streams so
//! that e.g. model initialization and noise draws never share state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream identified by `label`; stable across platforms and releases.
    pub fn child(&self, label: &str) -> SeedTree {
        // FNV-1a over the label, then a splitmix finalizer with the parent seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        SeedTree {
            seed: splitmix(self.seed ^ h),
        }
    }

    pub fn index(&self, i: u64) -> SeedTree {
        SeedTree {
            seed: splitmix(self.seed.wrapping_add(splitmix(i.wrapping_add(0x9e37_79b9)))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
        .collect()
}
