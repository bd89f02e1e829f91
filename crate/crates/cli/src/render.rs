use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use tesl_core::data::Sample;
use tesl_core::{Error, Result};

fn save_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Binary mask as an 8-bit PNG with values 0 and 255.
pub fn write_mask(path: &Path, size: usize, mask: &[u8]) -> Result<()> {
    let px = mask.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect();
    GrayImage::from_raw(size as u32, size as u32, px)
        .ok_or_else(|| Error::InvalidArgument(format!("mask of {} pixels is not {size}x{size}", mask.len())))?
        .save(path)
        .map_err(save_err(path))
}

/// Image, ground truth and prediction side by side.
pub fn write_panel(path: &Path, sample: &Sample, pred: &[u8]) -> Result<()> {
    let s = sample.size();
    let img = sample.image.data();
    let mut panel = RgbImage::new(3 * s as u32, s as u32);
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let rgb = [to_u8(img[i]), to_u8(img[s * s + i]), to_u8(img[2 * s * s + i])];
            let gt = if sample.mask[i] > 0 { 255 } else { 0 };
            let pr = if pred[i] > 0 { 255 } else { 0 };
            let (x, y) = (x as u32, y as u32);
            panel.put_pixel(x, y, Rgb(rgb));
            panel.put_pixel(x + s as u32, y, Rgb([gt; 3]));
            panel.put_pixel(x + 2 * s as u32, y, Rgb([pr; 3]));
        }
    }
    panel.save(path).map_err(save_err(path))
}
