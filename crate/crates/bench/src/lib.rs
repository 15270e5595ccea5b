//! Inputs shared by the benchmarks.

use poselab_core::labelgen::LabeledPatch;
use poselab_core::synth::{generate_scene, SynthConfig, SynthScene};
use poselab_core::{AnnotatedKeypoint, Ray, RigidTransform, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Noiseless two-frame scene; frame 0 is the one benchmarked.
pub fn scene() -> SynthScene {
    generate_scene(&SynthConfig { n_frames: 2, seed: 7, ..SynthConfig::default() }).expect("default views are valid")
}

/// Keypoints of frame 0 that the camera sees.
pub fn visible(scene: &SynthScene) -> Vec<AnnotatedKeypoint> {
    scene.frames[0].visible_keypoints()
}

/// `n` rays from cameras on a 1 m sphere through a common point.
pub fn ray_bundle(n: usize, seed: u64) -> Vec<Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = Vec3::new(0.05, -0.02, 0.1);
    (0..n)
        .map(|_| {
            let eye = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0).normalize();
            Ray::new(eye, target - eye).expect("distinct points")
        })
        .collect()
}

/// `n` random points and their image under a fixed rigid motion.
pub fn point_pairs(n: usize, seed: u64) -> (Vec<Vec3>, RigidTransform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)))
        .collect();
    let t = RigidTransform::new(poselab_core::UnitQuat::from_euler_angles(0.3, -0.2, 1.1), Vec3::new(0.1, 0.4, 0.9));
    (pts, t)
}

/// Opaque rectangular patch with one keypoint in the middle.
pub fn patch(width: u32, height: u32) -> LabeledPatch {
    let (w, h) = (width as f64, height as f64);
    LabeledPatch {
        source_frame: "bench".into(),
        image: image::RgbaImage::from_pixel(width, height, image::Rgba([180, 60, 30, 255])),
        hull: vec![
            poselab_core::Pixel::new(-0.5, -0.5),
            poselab_core::Pixel::new(w - 0.5, -0.5),
            poselab_core::Pixel::new(w - 0.5, h - 0.5),
            poselab_core::Pixel::new(-0.5, h - 0.5),
        ],
        keypoints: vec![poselab_core::labelgen::LabeledKeypoint {
            keypoint_id: "c".into(),
            pixel: poselab_core::Pixel::new(w / 2.0, h / 2.0),
            visible: true,
        }],
    }
}
