//! Domain randomization: paste labeled patches onto backgrounds.

use image::{Rgb, RgbImage, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Pixel;

use super::manifest::{BBox, DrConfig, FrameLabels, LabeledKeypoint, Similarity2D};
use super::segment::{clip_to_rect, Foreground};

const PLACEMENT_ATTEMPTS: usize = 16;

/// A cut-out object with labels in patch pixel coordinates.
#[derive(Debug, Clone)]
pub struct LabeledPatch {
    pub source_frame: String,
    pub image: RgbaImage,
    pub hull: Vec<Pixel>,
    pub keypoints: Vec<LabeledKeypoint>,
}

impl LabeledPatch {
    /// Shifts frame labels into the patch's coordinates. The hull is clipped
    /// to the patch's pixel footprint.
    pub fn from_foreground(source_frame: impl Into<String>, fg: &Foreground, labels: &FrameLabels) -> Self {
        let (ox, oy) = (fg.origin.0 as f64, fg.origin.1 as f64);
        let shift = |p: &Pixel| Pixel::new(p.u - ox, p.v - oy);
        let shifted: Vec<Pixel> = fg.hull.iter().map(shift).collect();
        let (w, h) = (fg.patch.width() as f64, fg.patch.height() as f64);
        Self {
            source_frame: source_frame.into(),
            image: fg.patch.clone(),
            hull: clip_to_rect(&shifted, -0.5, -0.5, w - 0.5, h - 0.5),
            keypoints: labels
                .keypoints
                .iter()
                .map(|k| LabeledKeypoint {
                    keypoint_id: k.keypoint_id.clone(),
                    pixel: shift(&k.pixel),
                    visible: k.visible,
                })
                .collect(),
        }
    }

    fn center(&self) -> Pixel {
        Pixel::new((self.image.width() as f64 - 1.0) / 2.0, (self.image.height() as f64 - 1.0) / 2.0)
    }
}

/// Everything about one composite except its pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrSample {
    pub index: usize,
    pub patch: usize,
    pub background: usize,
    pub similarity: Similarity2D,
    pub brightness: f64,
    pub saturation: f64,
    pub keypoints: Vec<LabeledKeypoint>,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct Composite {
    pub sample: DrSample,
    pub image: RgbImage,
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Per-sample generator: sample `i` depends only on `(seed, i)`.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn plan_one(index: usize, patches: &[LabeledPatch], backgrounds: &[(u32, u32)], cfg: &DrConfig) -> Result<DrSample> {
    let mut rng = sample_rng(cfg.seed, index);
    let pi = rng.random_range(0..patches.len());
    let bi = rng.random_range(0..backgrounds.len());
    let patch = &patches[pi];
    let (bw, bh) = (backgrounds[bi].0 as f64, backgrounds[bi].1 as f64);
    let (pw, ph) = (patch.image.width() as f64, patch.image.height() as f64);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let rotation_deg = draw(&mut rng, cfg.rotation_deg);
        let scale = draw(&mut rng, cfg.scale);
        let (s, c) = rotation_deg.to_radians().sin_cos();
        let ex = scale * (c.abs() * pw + s.abs() * ph) / 2.0;
        let ey = scale * (s.abs() * pw + c.abs() * ph) / 2.0;
        if 2.0 * ex > bw || 2.0 * ey > bh {
            continue;
        }
        let tx = draw(&mut rng, [ex - 0.5, bw - 0.5 - ex]);
        let ty = draw(&mut rng, [ey - 0.5, bh - 0.5 - ey]);
        let similarity = Similarity2D { scale, rotation_deg, center: patch.center(), translation: Pixel::new(tx, ty) };
        let brightness = draw(&mut rng, cfg.brightness);
        let saturation = draw(&mut rng, cfg.saturation);
        let keypoints = patch
            .keypoints
            .iter()
            .map(|k| LabeledKeypoint {
                keypoint_id: k.keypoint_id.clone(),
                pixel: similarity.apply(&k.pixel),
                visible: k.visible,
            })
            .collect();
        let hull: Vec<Pixel> = patch.hull.iter().map(|p| similarity.apply(p)).collect();
        let bbox = BBox::enclosing(&hull)
            .ok_or_else(|| Error::invalid("patch.hull", "empty hull"))?
            .clamped(backgrounds[bi].0, backgrounds[bi].1)
            .0;
        return Ok(DrSample { index, patch: pi, background: bi, similarity, brightness, saturation, keypoints, bbox });
    }
    Err(Error::PatchTooLarge { patch: pi, background: bi })
}

/// Draws placement, photometric jitter and labels for `cfg.n_samples`
/// composites. Output depends only on the inputs and `cfg.seed`, not on the
/// thread count.
pub fn plan_samples(patches: &[LabeledPatch], backgrounds: &[(u32, u32)], cfg: &DrConfig) -> Result<Vec<DrSample>> {
    cfg.validate()?;
    if cfg.n_samples == 0 {
        return Ok(Vec::new());
    }
    if patches.is_empty() {
        return Err(Error::invalid("patches", "no labeled patches to composite"));
    }
    if backgrounds.is_empty() {
        return Err(Error::invalid("backgrounds", "no background images"));
    }
    (0..cfg.n_samples).into_par_iter().map(|i| plan_one(i, patches, backgrounds, cfg)).collect()
}

/// Premultiplied bilinear sample; outside the patch is transparent.
fn sample_bilinear(img: &RgbaImage, u: f64, v: f64) -> [f64; 4] {
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let mut acc = [0.0; 4];
    for (dx, dy, w) in [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
        (1.0, 0.0, fx * (1.0 - fy)),
        (0.0, 1.0, (1.0 - fx) * fy),
        (1.0, 1.0, fx * fy),
    ] {
        let (x, y) = (x0 + dx, y0 + dy);
        if w == 0.0 || x < 0.0 || y < 0.0 || x >= img.width() as f64 || y >= img.height() as f64 {
            continue;
        }
        let p = img.get_pixel(x as u32, y as u32).0;
        let a = p[3] as f64 / 255.0 * w;
        acc[0] += p[0] as f64 * a;
        acc[1] += p[1] as f64 * a;
        acc[2] += p[2] as f64 * a;
        acc[3] += a;
    }
    acc
}

fn adjust(rgb: [f64; 3], brightness: f64, saturation: f64) -> [f64; 3] {
    let luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    rgb.map(|c| ((luma + (c - luma) * saturation) * brightness).clamp(0.0, 255.0))
}

/// Composites the patch onto the background as planned by `sample`.
pub fn render_sample(sample: &DrSample, patch: &LabeledPatch, background: &RgbImage) -> RgbImage {
    let mut out = background.clone();
    let sim = &sample.similarity;
    let (pw, ph) = (patch.image.width() as f64, patch.image.height() as f64);
    let corners = [
        Pixel::new(-0.5, -0.5),
        Pixel::new(pw - 0.5, -0.5),
        Pixel::new(pw - 0.5, ph - 0.5),
        Pixel::new(-0.5, ph - 0.5),
    ]
    .map(|p| sim.apply(&p));
    let b = BBox::enclosing(&corners).expect("four corners");
    let x0 = b.x_min.floor().max(0.0) as u32;
    let y0 = b.y_min.floor().max(0.0) as u32;
    let x1 = (b.x_max.ceil() as i64).clamp(0, out.width() as i64 - 1) as u32;
    let y1 = (b.y_max.ceil() as i64).clamp(0, out.height() as i64 - 1) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let q = sim.apply_inverse(&Pixel::new(x as f64, y as f64));
            let s = sample_bilinear(&patch.image, q.u, q.v);
            let a = s[3];
            if a <= 0.0 {
                continue;
            }
            let fg = adjust([s[0] / a, s[1] / a, s[2] / a], sample.brightness, sample.saturation);
            let bg = out.get_pixel(x, y).0;
            let px = [0, 1, 2].map(|c| (a * fg[c] + (1.0 - a) * bg[c] as f64).round().clamp(0.0, 255.0) as u8);
            out.put_pixel(x, y, Rgb(px));
        }
    }
    out
}

/// Plans and renders every composite in memory.
pub fn domain_randomize(patches: &[LabeledPatch], backgrounds: &[RgbImage], cfg: &DrConfig) -> Result<Vec<Composite>> {
    let sizes: Vec<(u32, u32)> = backgrounds.iter().map(|b| b.dimensions()).collect();
    let plan = plan_samples(patches, &sizes, cfg)?;
    Ok(plan
        .into_par_iter()
        .map(|s| {
            let image = render_sample(&s, &patches[s.patch], &backgrounds[s.background]);
            Composite { sample: s, image }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgba;

    fn patch() -> LabeledPatch {
        let image = RgbaImage::from_fn(40, 20, |x, _| Rgba([200, (x * 5) as u8, 30, 255]));
        LabeledPatch {
            source_frame: "f0".into(),
            image,
            hull: vec![Pixel::new(0.0, 0.0), Pixel::new(39.0, 0.0), Pixel::new(39.0, 19.0), Pixel::new(0.0, 19.0)],
            keypoints: vec![LabeledKeypoint { keypoint_id: "a".into(), pixel: Pixel::new(5.0, 5.0), visible: true }],
        }
    }

    fn cfg(n: usize) -> DrConfig {
        DrConfig { n_samples: n, seed: 7, ..DrConfig::default() }
    }

    #[test]
    fn identical_reruns() {
        let bgs = vec![RgbImage::from_pixel(160, 120, Rgb([10, 20, 30])); 3];
        let a = domain_randomize(&[patch()], &bgs, &cfg(12)).unwrap();
        let b = domain_randomize(&[patch()], &bgs, &cfg(12)).unwrap();
        assert_eq!(a.len(), 12);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sample, y.sample);
            assert_eq!(x.image.as_raw(), y.image.as_raw());
        }
    }

    #[test]
    fn labels_follow_similarity() {
        let plan = plan_samples(&[patch()], &[(160, 120)], &cfg(50)).unwrap();
        for s in &plan {
            let p = s.similarity.apply(&Pixel::new(5.0, 5.0));
            assert_eq!(s.keypoints[0].pixel, p);
            assert!(s.bbox.contains(&p));
            assert!(s.bbox.x_min >= 0.0 && s.bbox.x_max <= 160.0);
        }
    }

    #[test]
    fn sample_depends_only_on_index() {
        let a = plan_samples(&[patch()], &[(160, 120)], &cfg(20)).unwrap();
        let b = plan_samples(&[patch()], &[(160, 120)], &cfg(5)).unwrap();
        assert_eq!(&a[..5], &b[..]);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let r = plan_samples(&[patch()], &[(20, 10)], &cfg(1));
        assert!(matches!(r, Err(Error::PatchTooLarge { .. })));
    }

    #[test]
    fn identity_paste_copies_pixels() {
        let c = DrConfig {
            rotation_deg: [0.0, 0.0],
            scale: [1.0, 1.0],
            brightness: [1.0, 1.0],
            saturation: [1.0, 1.0],
            ..cfg(1)
        };
        let bg = RgbImage::from_pixel(160, 120, Rgb([0, 0, 0]));
        let out = domain_randomize(&[patch()], &[bg], &c).unwrap();
        let s = &out[0].sample;
        let q = s.similarity.apply(&Pixel::new(10.0, 10.0));
        let (x, y) = (q.u.round() as u32, q.v.round() as u32);
        let v = out[0].image.get_pixel(x, y).0;
        assert!(v[0] >= 190 && v[2] <= 40, "{v:?}");
    }
}
