//! Shared fixtures for the criterion benches.

use scenestage::pipeline::{no_progress, run_stage0, SessionConfig, StagePrompt, StageRecord};
use scenestage::scene::{make_scene, Box3D, Camera, SceneLayout, Vec3};
use scenestage::{Latent, ToyDenoiser};

pub fn scene(size: u32) -> SceneLayout {
    let mut s = make_scene([4.0, 3.0, 6.0], Camera::looking_forward(size, size)).unwrap();
    s.add_box(Box3D::new("table", Vec3::new(0.8, -1.1, 4.0), [1.2, 0.8, 0.7], 0.4)).unwrap();
    s
}

pub fn sofa() -> Box3D {
    Box3D::new("sofa", Vec3::new(-0.3, -1.1, 3.5), [1.4, 0.8, 0.8], 0.3)
}

/// Deterministic pseudo-random latent in [-1, 1).
pub fn latent(channels: usize, h: usize, w: usize, seed: u64) -> Latent {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..channels * h * w)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Latent::from_vec(channels, h, w, data).unwrap()
}

pub fn config(steps: usize) -> SessionConfig {
    SessionConfig {
        steps,
        ..SessionConfig::default()
    }
}

pub fn background(model: &ToyDenoiser, cfg: &SessionConfig) -> StageRecord {
    let empty = make_scene([4.0, 3.0, 6.0], Camera::looking_forward(128, 128)).unwrap();
    run_stage0(model, &empty, &StagePrompt::new("a cozy living room"), cfg, &mut no_progress()).unwrap()
}
