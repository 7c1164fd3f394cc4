//! Deterministic repeated-object scenes with exact count labels.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image_io::save_png;
use super::{BoxRegion, DatasetRecord, ImageSource, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    TexturedBlob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Disk, Self::Square, Self::Triangle, Self::TexturedBlob];

    /// Whether the pixel offset `(dx, dy)` from the centre falls inside a
    /// shape of radius `r` rotated by `theta`. Returns a shade factor.
    fn coverage(self, dx: f64, dy: f64, r: f64, theta: f64) -> Option<f64> {
        let (s, c) = theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self {
            ShapeKind::Disk => (u * u + v * v <= r * r).then_some(1.0),
            ShapeKind::Square => {
                let h = r * std::f64::consts::FRAC_1_SQRT_2;
                (u.abs() <= h && v.abs() <= h).then_some(1.0)
            }
            ShapeKind::Triangle => {
                // Equilateral, circumradius r, apex along -v.
                let inside = (0..3).all(|k| {
                    let a = PI / 2.0 + k as f64 * 2.0 * PI / 3.0;
                    let (nx, ny) = (a.cos(), -a.sin());
                    -(u * nx + v * ny) <= r / 2.0
                });
                inside.then_some(1.0)
            }
            ShapeKind::TexturedBlob => {
                let phi = v.atan2(u);
                let rr = r * (0.85 + 0.15 * (3.0 * phi).sin());
                let d2 = u * u + v * v;
                (d2 <= rr * rr).then(|| 0.75 + 0.25 * (1.7 * u).sin())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    /// `(height, width)` in pixels.
    pub canvas: (usize, usize),
    /// Each scene draws one family from this list.
    pub shapes: Vec<ShapeKind>,
    /// Inclusive label range.
    pub count_range: (u32, u32),
    /// Object radius range in pixels.
    pub scale_range: (f64, f64),
    /// Rotation range in radians.
    pub orientation_range: (f64, f64),
    /// Standard deviation of additive background noise.
    pub noise_level: f64,
    /// Adds a few uncounted objects of another family.
    pub distractors: bool,
    /// Maximum pairwise bounding-box IoU between placed objects.
    pub iou_cap: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            canvas: (64, 64),
            shapes: ShapeKind::ALL.to_vec(),
            count_range: (1, 20),
            scale_range: (2.5, 4.0),
            orientation_range: (0.0, 2.0 * PI),
            noise_level: 0.02,
            distractors: false,
            iou_cap: 0.0,
            max_attempts: 2000,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.count_range;
        let (rlo, rhi) = self.scale_range;
        let (h, w) = self.canvas;
        if self.shapes.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one shape".into()));
        }
        if lo > hi || h == 0 || w == 0 {
            return Err(Error::Config(format!("invalid count range ({lo}, {hi}) or canvas {h}x{w}")));
        }
        if !(rlo > 0.0 && rlo <= rhi && 2.0 * rhi < h.min(w) as f64) {
            return Err(Error::Config(format!("invalid radius range ({rlo}, {rhi}) for a {h}x{w} canvas")));
        }
        if !(0.0..=1.0).contains(&self.iou_cap) || self.noise_level < 0.0 {
            return Err(Error::Config("iou_cap must lie in [0, 1] and noise_level be non-negative".into()));
        }
        Ok(())
    }
}

/// One generated scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Tensor,
    pub count: u32,
    pub boxes: Vec<BoxRegion>,
}

struct Placed {
    cx: f64,
    cy: f64,
    r: f64,
    theta: f64,
    bbox: BoxRegion,
}

fn place<R: Rng>(
    rng: &mut R,
    spec: &SyntheticSceneSpec,
    existing: &[BoxRegion],
    index: u64,
    count: u32,
) -> Result<Placed> {
    let (h, w) = (spec.canvas.0 as f64, spec.canvas.1 as f64);
    for _ in 0..spec.max_attempts.max(1) {
        let r = sample(rng, spec.scale_range);
        let cx = rng.random_range(r..=w - r);
        let cy = rng.random_range(r..=h - r);
        let bbox = BoxRegion {
            x0: cx - r,
            y0: cy - r,
            x1: cx + r,
            y1: cy + r,
        };
        if existing.iter().all(|b| b.iou(&bbox) <= spec.iou_cap) {
            let theta = sample(rng, spec.orientation_range);
            return Ok(Placed { cx, cy, r, theta, bbox });
        }
    }
    Err(Error::InfeasiblePacking {
        index,
        count: count as usize,
        iou_cap: spec.iou_cap,
    })
}

fn sample<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn paint(img: &mut Tensor, kind: ShapeKind, p: &Placed, color: [f64; 3]) {
    let (h, w) = (img.dim(1), img.dim(2));
    let y0 = (p.cy - p.r).floor().max(0.0) as usize;
    let x0 = (p.cx - p.r).floor().max(0.0) as usize;
    let y1 = ((p.cy + p.r).ceil() as usize).min(h);
    let x1 = ((p.cx + p.r).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 + 0.5 - p.cx, y as f64 + 0.5 - p.cy);
            if let Some(shade) = kind.coverage(dx, dy, p.r, p.theta) {
                for (c, &v) in color.iter().enumerate() {
                    img.set(&[c, y, x], v * shade);
                }
            }
        }
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.55..1.0), rng.random_range(0.55..1.0), rng.random_range(0.55..1.0)]
}

/// Renders scene `index`; `(spec.seed, index)` fully determines the output.
pub fn generate_scene(spec: &SyntheticSceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let count = rng.random_range(spec.count_range.0..=spec.count_range.1);
    let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
    let color = random_color(&mut rng);
    let bg = rng.random_range(0.0..0.25);
    let (h, w) = spec.canvas;
    let mut img = Tensor::full(&[3, h, w], bg);

    let mut boxes = Vec::with_capacity(count as usize);
    let mut placed = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let p = place(&mut rng, spec, &boxes, index, count)?;
        boxes.push(p.bbox);
        placed.push(p);
    }
    let mut occupied = boxes.clone();
    if spec.distractors {
        let others: Vec<ShapeKind> = ShapeKind::ALL.into_iter().filter(|k| *k != kind).collect();
        let dkind = others[rng.random_range(0..others.len())];
        let dcolor = random_color(&mut rng);
        for _ in 0..rng.random_range(1..=3) {
            let p = place(&mut rng, spec, &occupied, index, count)?;
            occupied.push(p.bbox);
            paint(&mut img, dkind, &p, dcolor);
        }
    }
    for p in &placed {
        paint(&mut img, kind, p, color);
    }
    if spec.noise_level > 0.0 {
        let noise = Normal::new(0.0, spec.noise_level).expect("validated noise level");
        for v in img.data_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(Scene { image: img, count, boxes })
}

/// Scenes `first .. first + n` as in-memory records tagged with `split`.
pub fn generate_range(spec: &SyntheticSceneSpec, first: u64, n: usize, split: Split) -> Result<Vec<DatasetRecord>> {
    (first..first + n as u64)
        .map(|i| {
            let scene = generate_scene(spec, i)?;
            Ok(DatasetRecord {
                id: format!("synth_{i:06}"),
                source: ImageSource::Tensor(scene.image),
                count: scene.count,
                exemplar_boxes: scene.boxes.into_iter().take(1).collect(),
                split,
            })
        })
        .collect()
}

/// The first `n_records` scenes, all tagged `train`.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, n_records: usize) -> Result<Vec<DatasetRecord>> {
    generate_range(spec, 0, n_records, Split::Train)
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Scene index; the record's RNG stream under `spec.seed`.
    pub index: u64,
    pub file: String,
    pub count: u32,
    pub split: Split,
    pub exemplar_boxes: Vec<BoxRegion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub spec: SyntheticSceneSpec,
    pub records: Vec<ManifestRecord>,
}

/// Writes PNGs plus a manifest. `splits` lists `(split, n)` blocks that take
/// consecutive scene indices.
pub fn write_dataset(dir: &Path, spec: &SyntheticSceneSpec, splits: &[(Split, usize)]) -> Result<SyntheticManifest> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    let mut index = 0u64;
    for &(split, n) in splits {
        for _ in 0..n {
            let scene = generate_scene(spec, index)?;
            let id = format!("synth_{index:06}");
            let file = format!("{id}.png");
            save_png(&dir.join(&file), &scene.image)?;
            records.push(ManifestRecord {
                id,
                index,
                file,
                count: scene.count,
                split,
                exemplar_boxes: scene.boxes.into_iter().take(1).collect(),
            });
            index += 1;
        }
    }
    let manifest = SyntheticManifest {
        spec: spec.clone(),
        records,
    };
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Reads a directory written by [`write_dataset`]; `split` filters records.
pub fn load_dataset(dir: &Path, split: Option<Split>) -> Result<Vec<DatasetRecord>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingFile { path });
    }
    let manifest: SyntheticManifest = serde_json::from_slice(&fs::read(&path)?)
        .map_err(|e| Error::MalformedAnnotation(format!("{}: {e}", path.display())))?;
    Ok(manifest
        .records
        .into_iter()
        .filter(|r| split.is_none_or(|s| s == r.split))
        .map(|r| DatasetRecord {
            id: r.id,
            source: ImageSource::Path(PathBuf::from(dir).join(r.file)),
            count: r.count,
            exemplar_boxes: r.exemplar_boxes,
            split: r.split,
        })
        .collect())
}
