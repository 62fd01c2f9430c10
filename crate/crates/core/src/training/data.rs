//! Procedural toy videos with exactly known motion.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::flow::FlowField;
use crate::rng::SeedTree;
use crate::video::{Frame, VideoClip, CHANNELS};

/// How the scene moves. Velocities are in pixels per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSpec {
    /// Uniform translation of the whole background.
    pub background: (f64, f64),
    /// The foreground rectangle moves in a random direction with a speed drawn from this range.
    pub object_speed: (f64, f64),
    /// Foreground side length as a fraction of the frame's shorter side.
    pub object_fraction: f64,
}

impl MotionSpec {
    pub fn static_scene() -> Self {
        Self {
            background: (0.0, 0.0),
            object_speed: (0.0, 0.0),
            object_fraction: 0.4,
        }
    }

    /// Everything, foreground included, translates by `(u, v)` per frame.
    pub fn translation(u: f64, v: f64) -> Self {
        Self {
            background: (u, v),
            object_speed: (0.0, 0.0),
            object_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (u, v) = self.background;
        ensure!(u.is_finite() && v.is_finite(), Config, "background motion ({u}, {v}) is not finite");
        let (lo, hi) = self.object_speed;
        ensure!(
            lo >= 0.0 && lo <= hi && hi.is_finite(),
            Range,
            "object speed range {:?} is invalid",
            self.object_speed
        );
        ensure!(
            (0.0..=1.0).contains(&self.object_fraction),
            Config,
            "object_fraction must lie in [0, 1], got {}",
            self.object_fraction
        );
        Ok(())
    }
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            background: (0.0, 0.0),
            object_speed: (1.0, 2.0),
            object_fraction: 0.4,
        }
    }
}

/// A ground-truth clip plus the flow between each consecutive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVideo {
    pub hq: VideoClip,
    pub flows: Vec<FlowField>,
}

#[derive(Debug, Clone)]
struct Grating {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: [f64; CHANNELS],
}

/// Smooth color field with a few fine sinusoidal gratings on top.
#[derive(Debug, Clone)]
struct Texture {
    base: [f64; CHANNELS],
    tilt: [(f64, f64); CHANNELS],
    gratings: Vec<Grating>,
}

impl Texture {
    fn random<R: Rng + ?Sized>(rng: &mut R, size: f64) -> Self {
        let mut base = [0f64; CHANNELS];
        let mut tilt = [(0f64, 0f64); CHANNELS];
        for c in 0..CHANNELS {
            base[c] = rng.random_range(0.3..0.7);
            tilt[c] = (rng.random_range(-0.1..0.1) / size, rng.random_range(-0.1..0.1) / size);
        }
        let gratings = (0..3)
            .map(|_| {
                let period = rng.random_range(2.5..7.0);
                let angle = rng.random_range(0.0..TAU);
                let mut amp = [0f64; CHANNELS];
                for a in &mut amp {
                    *a = rng.random_range(0.02..0.08);
                }
                Grating {
                    fy: angle.sin() / period,
                    fx: angle.cos() / period,
                    phase: rng.random_range(0.0..TAU),
                    amp,
                }
            })
            .collect();
        Self { base, tilt, gratings }
    }

    fn sample(&self, c: usize, y: f64, x: f64) -> f32 {
        let mut v = self.base[c] + self.tilt[c].0 * y + self.tilt[c].1 * x;
        for g in &self.gratings {
            v += g.amp[c] * (TAU * (g.fy * y + g.fx * x) + g.phase).sin();
        }
        v as f32
    }
}

struct Scene {
    background: Texture,
    object: Option<(Texture, (f64, f64), (f64, f64), f64)>,
    bg_velocity: (f64, f64),
}

impl Scene {
    /// Whether the pixel center `(y, x)` lies on the object at frame `t`.
    fn on_object(&self, t: f64, y: f64, x: f64) -> Option<(f64, f64)> {
        let (_, origin, vel, side) = self.object.as_ref()?;
        let top = origin.0 + vel.1 * t;
        let left = origin.1 + vel.0 * t;
        let (cy, cx) = (y + 0.5, x + 0.5);
        (cy >= top && cy < top + side && cx >= left && cx < left + side).then_some((y - top, x - left))
    }

    fn render(&self, t: usize, h: usize, w: usize) -> Frame {
        let tf = t as f64;
        Frame::from_fn(h, w, |c, y, x| {
            let (yf, xf) = (y as f64, x as f64);
            match (self.on_object(tf, yf, xf), &self.object) {
                (Some((oy, ox)), Some((tex, ..))) => tex.sample(c, oy, ox),
                _ => self
                    .background
                    .sample(c, yf - self.bg_velocity.1 * tf, xf - self.bg_velocity.0 * tf),
            }
        })
    }

    fn flow(&self, t_next: usize, h: usize, w: usize) -> FlowField {
        let bg = (self.bg_velocity.0 as f32, self.bg_velocity.1 as f32);
        FlowField::from_fn(h, w, |y, x| match (&self.object, self.on_object(t_next as f64, y as f64, x as f64)) {
            (Some((_, _, vel, _)), Some(_)) => (vel.0 as f32, vel.1 as f32),
            _ => bg,
        })
    }
}

/// `count` videos of `frames` frames at `height x width`, reproducible from `seed`.
pub fn synthesize_toy_videos(
    count: usize,
    frames: usize,
    (height, width): (usize, usize),
    motion: &MotionSpec,
    seed: u64,
) -> Result<Vec<ToyVideo>> {
    ensure!(frames >= 1 && height > 0 && width > 0, Range, "empty video geometry");
    motion.validate()?;
    let seeds = SeedTree::new(seed).child("toy-video");
    (0..count)
        .map(|i| {
            let mut rng = seeds.index(i as u64).rng();
            let size = height.min(width) as f64;
            let background = Texture::random(&mut rng, size);
            let side = (motion.object_fraction * size).round();
            let object = (side >= 1.0).then(|| {
                let tex = Texture::random(&mut rng, size);
                let speed = if motion.object_speed.1 > motion.object_speed.0 {
                    rng.random_range(motion.object_speed.0..motion.object_speed.1)
                } else {
                    motion.object_speed.0
                };
                let angle = rng.random_range(0.0..TAU);
                let vel = (speed * angle.cos(), speed * angle.sin());
                // Start so the object stays roughly centered over the clip.
                let travel = (frames.saturating_sub(1)) as f64;
                let mid = ((height as f64 - side) / 2.0, (width as f64 - side) / 2.0);
                let origin = (
                    (mid.0 - vel.1 * travel / 2.0).round(),
                    (mid.1 - vel.0 * travel / 2.0).round(),
                );
                (tex, origin, vel, side)
            });
            let scene = Scene {
                background,
                object,
                bg_velocity: motion.background,
            };
            let hq = VideoClip::new((0..frames).map(|t| scene.render(t, height, width)).collect())?;
            let flows = (1..frames).map(|t| scene.flow(t, height, width)).collect();
            Ok(ToyVideo { hq, flows })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_scene_has_identical_frames_and_zero_flow() {
        let v = synthesize_toy_videos(2, 4, (16, 16), &MotionSpec::static_scene(), 1).unwrap();
        for vid in &v {
            assert!(vid.hq.frames().windows(2).all(|p| p[0] == p[1]));
            assert!(vid.flows.iter().all(|f| f.data().iter().all(|x| *x == 0.0)));
        }
    }

    #[test]
    fn translation_flow_is_constant() {
        let v = synthesize_toy_videos(1, 3, (12, 12), &MotionSpec::translation(1.0, 0.0), 2).unwrap();
        assert!(v[0].flows.iter().all(|f| f.data().chunks(2).all(|p| p == [1.0, 0.0])));
    }

    #[test]
    fn moving_object_pixels_carry_the_object_velocity() {
        let motion = MotionSpec {
            object_speed: (1.5, 1.5),
            ..MotionSpec::default()
        };
        let v = synthesize_toy_videos(1, 3, (20, 20), &motion, 3).unwrap();
        let f = &v[0].flows[0];
        let speeds: Vec<f32> = f.data().chunks(2).map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).collect();
        assert!(speeds.iter().any(|s| (s - 1.5).abs() < 1e-5));
        assert!(speeds.iter().any(|s| *s == 0.0));
    }

    #[test]
    fn seeded_determinism() {
        let m = MotionSpec::default();
        let a = synthesize_toy_videos(2, 3, (8, 8), &m, 9).unwrap();
        let b = synthesize_toy_videos(2, 3, (8, 8), &m, 9).unwrap();
        assert_eq!(a, b);
        let c = synthesize_toy_videos(2, 3, (8, 8), &m, 10).unwrap();
        assert_ne!(a, c);
    }
}
