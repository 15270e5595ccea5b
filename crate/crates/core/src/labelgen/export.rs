//! Training-set export: images, YOLO-style box labels and keypoint JSON.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::save_json;
use crate::SCHEMA_VERSION;

use super::manifest::{BBox, LabeledKeypoint, MixRatio, ProjectManifest, SplitConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportOptions {
    pub ratio: MixRatio,
    /// Total item count; `None` uses as many items as the ratio allows
    /// without repeating any.
    pub target: Option<usize>,
    pub split: SplitConfig,
}

impl ExportOptions {
    pub fn from_manifest(m: &ProjectManifest) -> Self {
        Self { ratio: m.dr.ratio, target: None, split: m.split.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemSource {
    Real,
    Dr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportItem {
    pub stem: String,
    pub source: ItemSource,
    /// Frame id for real items, sample index for randomized ones.
    pub origin: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub keypoints: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportCounts {
    pub real: usize,
    pub dr: usize,
    pub train: usize,
    pub val: usize,
    /// Items drawn more than once because a pool was smaller than its share.
    pub repeated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportIndex {
    pub schema_version: u32,
    pub ratio: MixRatio,
    pub counts: ExportCounts,
    pub items: Vec<ExportItem>,
}

#[derive(Debug, Clone, Serialize)]
struct KeypointFile<'a> {
    schema_version: u32,
    width: u32,
    height: u32,
    keypoints: &'a [LabeledKeypoint],
}

struct Candidate {
    source: ItemSource,
    origin: String,
    image: PathBuf,
    width: u32,
    height: u32,
    keypoints: Vec<LabeledKeypoint>,
    bbox: BBox,
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn candidates(m: &ProjectManifest, root: &Path) -> (Vec<Candidate>, Vec<Candidate>) {
    let mut real = Vec::new();
    for s in &m.sessions {
        for f in &s.frames {
            let Some(l) = &f.labels else { continue };
            let Some(bbox) = l.bbox.filter(|_| l.valid) else {
                continue;
            };
            real.push(Candidate {
                source: ItemSource::Real,
                origin: f.frame_id.clone(),
                image: resolve(root, &f.image),
                width: m.intrinsics.width(),
                height: m.intrinsics.height(),
                keypoints: l.keypoints.clone(),
                bbox,
            });
        }
    }
    let dr = m
        .randomized
        .iter()
        .map(|r| Candidate {
            source: ItemSource::Dr,
            origin: r.index.to_string(),
            image: resolve(root, &r.image),
            width: r.width,
            height: r.height,
            keypoints: r.keypoints.clone(),
            bbox: r.bbox,
        })
        .collect();
    (real, dr)
}

/// `(n_real, n_dr)` for the requested ratio and pool sizes.
pub fn mix_counts(ratio: MixRatio, target: Option<usize>, real_pool: usize, dr_pool: usize) -> Result<(usize, usize)> {
    let f = ratio.real_fraction();
    if let Some(t) = target {
        let n_real = (t as f64 * f).round() as usize;
        let n_dr = t - n_real;
        if n_real > 0 && real_pool == 0 {
            return Err(Error::invalid("ratio", "ratio needs real frames but none are labeled"));
        }
        if n_dr > 0 && dr_pool == 0 {
            return Err(Error::invalid("ratio", "ratio needs randomized samples but none exist"));
        }
        return Ok((n_real, n_dr));
    }
    if real_pool == 0 || dr_pool == 0 || f == 0.0 || f == 1.0 {
        let n_real = if f > 0.0 || dr_pool == 0 { real_pool } else { 0 };
        let n_dr = if f < 1.0 || real_pool == 0 { dr_pool } else { 0 };
        return Ok((n_real, n_dr));
    }
    let total = (real_pool as f64 / f).min(dr_pool as f64 / (1.0 - f)).floor() as usize;
    let n_real = ((total as f64 * f).round() as usize).min(real_pool);
    let n_dr = (total - n_real).min(dr_pool);
    Ok((n_real, n_dr))
}

/// Shuffled pool prefix of length `k`, topped up with draws with replacement
/// when `k` exceeds the pool.
fn select(pool_len: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool_len).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    while idx.len() < k {
        idx.push(rng.random_range(0..pool_len));
    }
    idx
}

fn label_line(b: &BBox, width: u32, height: u32) -> String {
    let n = b.normalized(width, height);
    format!("0 {:.6} {:.6} {:.6} {:.6}\n", n[0], n[1], n[2], n[3])
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `images/`, `labels/`, `keypoints/` and `index.json` under `out`.
///
/// Image paths in the manifest are resolved against `root`.
pub fn export_dataset(m: &ProjectManifest, root: &Path, out: &Path, opts: &ExportOptions) -> Result<ExportIndex> {
    if !(0.0..=1.0).contains(&opts.split.val_fraction) {
        return Err(Error::invalid("split.val_fraction", "must lie in [0, 1]"));
    }
    let (real, dr) = candidates(m, root);
    let (n_real, n_dr) = mix_counts(opts.ratio, opts.target, real.len(), dr.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.split.seed);
    let chosen_real = select(real.len(), n_real, &mut rng);
    let chosen_dr = select(dr.len(), n_dr, &mut rng);

    let mut picked: Vec<(&Candidate, usize)> = Vec::with_capacity(n_real + n_dr);
    let mut repeats_real = vec![0usize; real.len()];
    for i in chosen_real {
        picked.push((&real[i], repeats_real[i]));
        repeats_real[i] += 1;
    }
    let mut repeats_dr = vec![0usize; dr.len()];
    for i in chosen_dr {
        picked.push((&dr[i], repeats_dr[i]));
        repeats_dr[i] += 1;
    }

    let mut order: Vec<usize> = (0..picked.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (picked.len() as f64 * opts.split.val_fraction).round() as usize;
    let mut split = vec![Split::Train; picked.len()];
    for &i in &order[..n_val] {
        split[i] = Split::Val;
    }

    for d in ["images", "labels", "keypoints"] {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut counts = ExportCounts::default();
    let mut items = Vec::with_capacity(picked.len());
    for (i, (c, rep)) in picked.iter().enumerate() {
        let base = match c.source {
            ItemSource::Real => format!("real_{}", c.origin),
            ItemSource::Dr => format!("dr_{:05}", c.origin.parse::<usize>().unwrap_or(0)),
        };
        let stem = if *rep == 0 { base } else { format!("{base}_r{rep}") };
        let ext = c.image.extension().and_then(|e| e.to_str()).unwrap_or("png");
        let image = PathBuf::from("images").join(format!("{stem}.{ext}"));
        let label = PathBuf::from("labels").join(format!("{stem}.txt"));
        let keypoints = PathBuf::from("keypoints").join(format!("{stem}.json"));
        fs::copy(&c.image, out.join(&image)).map_err(|e| Error::io(&c.image, e))?;
        write_text(&out.join(&label), &label_line(&c.bbox, c.width, c.height))?;
        save_json(
            &out.join(&keypoints),
            &KeypointFile { schema_version: SCHEMA_VERSION, width: c.width, height: c.height, keypoints: &c.keypoints },
        )?;
        match c.source {
            ItemSource::Real => counts.real += 1,
            ItemSource::Dr => counts.dr += 1,
        }
        match split[i] {
            Split::Train => counts.train += 1,
            Split::Val => counts.val += 1,
        }
        if *rep > 0 {
            counts.repeated += 1;
        }
        items.push(ExportItem {
            stem,
            source: c.source,
            origin: c.origin.clone(),
            image,
            label,
            keypoints,
            split: split[i],
        });
    }
    let index = ExportIndex { schema_version: SCHEMA_VERSION, ratio: opts.ratio, counts, items };
    save_json(&out.join("index.json"), &index)?;
    Ok(index)
}
