//! Similarity-map rendering.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::image_io::save_png;
use crate::data::resize::resize_image;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    #[default]
    Gray,
    /// Black, red, yellow, white.
    Heat,
}

/// Sidecar describing how a heatmap PNG maps back to similarity values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    /// Similarity value shown as 0.
    pub min: f64,
    /// Similarity value shown as 1.
    pub max: f64,
    /// `(h, w)` of the similarity map.
    pub map_size: (usize, usize),
    /// `(H, W)` of the rendered image.
    pub image_size: (usize, usize),
    pub colormap: Colormap,
}

fn heat(v: f64) -> [f64; 3] {
    let t = v.clamp(0.0, 1.0) * 3.0;
    [t.min(1.0), (t - 1.0).clamp(0.0, 1.0), (t - 2.0).clamp(0.0, 1.0)]
}

/// Min-max normalizes an `(h, w)` map, upsamples it bilinearly to
/// `out_h × out_w` and applies the colormap. Returns a `(3, out_h, out_w)` image.
pub fn render_similarity(sim: &Tensor, out_h: usize, out_w: usize, cmap: Colormap) -> Result<(Tensor, HeatmapMeta)> {
    if sim.ndim() != 2 || sim.numel() == 0 {
        return Err(shape_err("render_similarity", format!("expected (h, w), got {:?}", sim.shape())));
    }
    let min = sim.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = sim.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let norm = sim.map(|v| if range > 0.0 { (v - min) / range } else { 0.0 });
    let up = resize_image(&norm, out_h, out_w)?;
    let img = match cmap {
        Colormap::Gray => Tensor::from_fn(&[3, out_h, out_w], |i| up.at(&[i[1], i[2]])),
        Colormap::Heat => Tensor::from_fn(&[3, out_h, out_w], |i| heat(up.at(&[i[1], i[2]]))[i[0]]),
    };
    let meta = HeatmapMeta {
        min,
        max,
        map_size: (sim.dim(0), sim.dim(1)),
        image_size: (out_h, out_w),
        colormap: cmap,
    };
    Ok((img, meta))
}

/// Path of the JSON sidecar written next to a heatmap PNG.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Writes the PNG and its JSON sidecar.
pub fn save_heatmap(path: &Path, sim: &Tensor, out_h: usize, out_w: usize, cmap: Colormap) -> Result<HeatmapMeta> {
    let (img, meta) = render_similarity(sim, out_h, out_w, cmap)?;
    save_png(path, &img)?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsampled_to_requested_size() {
        let sim = Tensor::from_fn(&[4, 6], |i| (i[0] * 6 + i[1]) as f64);
        let (img, meta) = render_similarity(&sim, 64, 96, Colormap::Heat).unwrap();
        assert_eq!(img.shape(), &[3, 64, 96]);
        assert_eq!((meta.min, meta.max), (0.0, 23.0));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn constant_map_renders_black() {
        let (img, meta) = render_similarity(&Tensor::full(&[2, 2], 3.0), 8, 8, Colormap::Gray).unwrap();
        assert_eq!(meta.min, meta.max);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn writes_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        let sim = Tensor::from_fn(&[2, 3], |i| i[1] as f64);
        save_heatmap(&p, &sim, 32, 48, Colormap::Gray).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.height(), img.width()), (32, 48));
        let meta: HeatmapMeta = serde_json::from_slice(&fs::read(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(meta.max, 2.0);
    }
}
