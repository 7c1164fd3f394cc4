//! Conversions between image files and `(3, H, W)` tensors in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub fn load_image(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let img = image::open(path)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(&[3, h, w], |i| f64::from(img.get_pixel(i[2] as u32, i[1] as u32)[i[0]]) / 255.0)
}

/// Quantizes a `(3, H, W)` or `(1, H, W)` tensor (values clamped to `[0, 1]`).
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    if t.ndim() != 3 || !(t.dim(0) == 3 || t.dim(0) == 1) {
        return Err(shape_err("tensor_to_rgb", format!("expected (3|1, H, W), got {:?}", t.shape())));
    }
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| q(t.at(&[if c == 1 { 0 } else { ch }, y as usize, x as usize]));
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    tensor_to_rgb(t)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
