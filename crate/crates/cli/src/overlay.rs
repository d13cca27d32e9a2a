//! PNG previews of reconstructed bands with detection boxes drawn on top.

use std::path::{Path, PathBuf};

use anyhow::Result;
use fun_core::cassi::HsiCube;
use fun_core::detection::Detection;
use image::{Rgb, RgbImage};

const SCALE: u32 = 4;

const PALETTE: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
];

/// Grayscale band image, upscaled `SCALE` times, with one outlined
/// rectangle per detection in a per-class colour.
pub fn band_image(cube: &HsiCube<f32>, band: usize, dets: &[Detection]) -> RgbImage {
    let (h, w) = (cube.height() as u32, cube.width() as u32);
    let mut img = RgbImage::from_fn(w * SCALE, h * SCALE, |x, y| {
        let v = cube.at((y / SCALE) as usize, (x / SCALE) as usize, band).clamp(0.0, 1.0);
        let g = (v * 255.0).round() as u8;
        Rgb([g, g, g])
    });
    for d in dets {
        let colour = Rgb(PALETTE[d.class_id % PALETTE.len()]);
        let to_px = |v: f64, limit: u32| ((v * SCALE as f64).round().max(0.0) as u32).min(limit - 1);
        let (x0, x1) = (to_px(d.bbox.x_min, img.width()), to_px(d.bbox.x_max, img.width()));
        let (y0, y1) = (to_px(d.bbox.y_min, img.height()), to_px(d.bbox.y_max, img.height()));
        for x in x0..=x1 {
            img.put_pixel(x, y0, colour);
            img.put_pixel(x, y1, colour);
        }
        for y in y0..=y1 {
            img.put_pixel(x0, y, colour);
            img.put_pixel(x1, y, colour);
        }
    }
    img
}

pub fn write_band_overlays(cube: &HsiCube<f32>, dets: &[Detection], dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for b in 0..cube.bands() {
        let path = dir.join(format!("{stem}_band{b:02}.png"));
        band_image(cube, b, dets).save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
