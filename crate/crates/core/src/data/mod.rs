//! Datasets, resizing and augmentation.

pub mod augment;
pub mod fsc147;
pub mod image_io;
pub mod resize;
pub mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentationConfig};
pub use fsc147::{load_fsc147, Fsc147Split};
pub use resize::{resize_policy, ResizeMode, ResizePolicy};
pub use synthetic::{generate_range, generate_scene, generate_synthetic, ShapeKind, SyntheticSceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Axis-aligned rectangle in pixel coordinates, `x0 <= x1`, `y0 <= y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxRegion {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, other: &BoxRegion) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width && self.y1 <= height && self.x0 <= self.x1 && self.y0 <= self.y1
    }
}

#[derive(Clone, Debug)]
pub enum ImageSource {
    Path(PathBuf),
    /// `(3, H, W)` in `[0, 1]`.
    Tensor(Tensor),
}

#[derive(Clone, Debug)]
pub struct DatasetRecord {
    pub id: String,
    pub source: ImageSource,
    pub count: u32,
    pub exemplar_boxes: Vec<BoxRegion>,
    pub split: Split,
}

impl DatasetRecord {
    /// The image as a `(3, H, W)` tensor.
    pub fn load_image(&self) -> Result<Tensor> {
        match &self.source {
            ImageSource::Tensor(t) => Ok(t.clone()),
            ImageSource::Path(p) => image_io::load_image(p),
        }
    }
}

/// A record ready for the network: image resized for the main branch and,
/// when the record carries exemplar boxes, the first box cropped out.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub count: f64,
    pub crop: Option<Tensor>,
}

/// Loads, resizes (main-branch policy) and crops every record.
pub fn prepare_samples(records: &[DatasetRecord], policy: &ResizePolicy) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            let raw = r.load_image()?;
            let crop = r.exemplar_boxes.first().map(|b| crop_box(&raw, b)).transpose()?;
            let image = resize_policy(&raw, ResizeMode::TrainMain, policy)?;
            Ok(Sample {
                id: r.id.clone(),
                image,
                count: f64::from(r.count),
                crop,
            })
        })
        .collect()
}

/// Crops a box (rounded outwards, clamped to the image, at least 1×1) from a
/// `(C, H, W)` image.
pub fn crop_box(image: &Tensor, b: &BoxRegion) -> Result<Tensor> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let x0 = (b.x0.floor().max(0.0) as usize).min(w - 1);
    let y0 = (b.y0.floor().max(0.0) as usize).min(h - 1);
    let x1 = (b.x1.ceil() as usize).clamp(x0 + 1, w);
    let y1 = (b.y1.ceil() as usize).clamp(y0 + 1, h);
    Ok(Tensor::from_fn(&[c, y1 - y0, x1 - x0], |i| image.at(&[i[0], y0 + i[1], x0 + i[2]])))
}
