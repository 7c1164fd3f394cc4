//! FSC147 annotation reader.
//!
//! Expected layout under the root:
//! * `annotation_FSC147_384.json`: image name → `{ points, box_examples_coordinates, H?, W? }`
//! * `Train_Test_Val_FSC_147.json`: `{ train: [..], val: [..], test: [..] }`
//! * `images_384_VarV2/<image name>`
//!
//! Counts come from the point lists; density maps are never read.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{BoxRegion, DatasetRecord, ImageSource, Split};
use crate::error::{Error, Result};

pub const ANNOTATION_FILE: &str = "annotation_FSC147_384.json";
pub const SPLIT_FILE: &str = "Train_Test_Val_FSC_147.json";
pub const IMAGE_DIR: &str = "images_384_VarV2";

#[derive(Clone, Debug, Default, Deserialize)]
pub struct Fsc147Split {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl Fsc147Split {
    pub const EXPECTED_TRAIN: usize = 3659;
    pub const EXPECTED_VAL: usize = 1190;
    pub const EXPECTED_TEST: usize = 1286;

    pub fn names(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn expected_len(split: Split) -> usize {
        match split {
            Split::Train => Self::EXPECTED_TRAIN,
            Split::Val => Self::EXPECTED_VAL,
            Split::Test => Self::EXPECTED_TEST,
        }
    }

    /// One message per split whose size differs from the official one.
    pub fn size_warnings(&self) -> Vec<String> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .filter(|&s| self.names(s).len() != Self::expected_len(s))
            .map(|s| {
                format!(
                    "split `{s}` has {} images, expected {}",
                    self.names(s).len(),
                    Self::expected_len(s)
                )
            })
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct Annotation {
    points: Vec<[f64; 2]>,
    #[serde(default)]
    box_examples_coordinates: Vec<Vec<[f64; 2]>>,
    #[serde(rename = "H")]
    height: Option<f64>,
    #[serde(rename = "W")]
    width: Option<f64>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| Error::MalformedAnnotation(format!("{}: {e}", path.display())))
}

pub fn read_split_file(root: &Path) -> Result<Fsc147Split> {
    read_json(&root.join(SPLIT_FILE))
}

fn corners_to_box(name: &str, corners: &[[f64; 2]], w: Option<f64>, h: Option<f64>) -> Result<BoxRegion> {
    if corners.is_empty() {
        return Err(Error::MalformedAnnotation(format!("{name}: empty exemplar box")));
    }
    let xs = corners.iter().map(|c| c[0]);
    let ys = corners.iter().map(|c| c[1]);
    let mut b = BoxRegion {
        x0: xs.clone().fold(f64::INFINITY, f64::min),
        x1: xs.fold(f64::NEG_INFINITY, f64::max),
        y0: ys.clone().fold(f64::INFINITY, f64::min),
        y1: ys.fold(f64::NEG_INFINITY, f64::max),
    };
    b.x0 = b.x0.max(0.0);
    b.y0 = b.y0.max(0.0);
    if let Some(w) = w {
        b.x1 = b.x1.min(w);
    }
    if let Some(h) = h {
        b.y1 = b.y1.min(h);
    }
    Ok(b)
}

/// Records of one split. Split-size deviations from the official counts are
/// logged as warnings; missing images and malformed entries are errors.
pub fn load_fsc147(root: &Path, split: Split) -> Result<Vec<DatasetRecord>> {
    let splits = read_split_file(root)?;
    for w in splits.size_warnings() {
        log::warn!("{w}");
    }
    let annotations: BTreeMap<String, Annotation> = read_json(&root.join(ANNOTATION_FILE))?;
    let image_dir: PathBuf = root.join(IMAGE_DIR);
    splits
        .names(split)
        .iter()
        .map(|name| {
            let ann = annotations
                .get(name)
                .ok_or_else(|| Error::MalformedAnnotation(format!("no annotation for `{name}`")))?;
            let path = image_dir.join(name);
            if !path.exists() {
                return Err(Error::MissingFile { path });
            }
            let exemplar_boxes = ann
                .box_examples_coordinates
                .iter()
                .map(|c| corners_to_box(name, c, ann.width, ann.height))
                .collect::<Result<Vec<_>>>()?;
            Ok(DatasetRecord {
                id: name.clone(),
                source: ImageSource::Path(path),
                count: ann.points.len() as u32,
                exemplar_boxes,
                split,
            })
        })
        .collect()
}
