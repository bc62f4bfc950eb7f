//! Synthetic desk-scale datasets: elliptical "lesions" on textured
//! backgrounds with analytically exact masks, and oriented-grating
//! texture families for classification. Everything is a pure function
//! of (n, size, seed).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ClsRecord, Mask, Raster, SegRecord};
use crate::error::{Error, Result};

/// Rotated ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    /// Semi-axis along the rotated y direction.
    pub b: f64,
    /// Rotation in radians.
    pub theta: f64,
}

impl Ellipse {
    /// Membership of a point (pixel centers are `x + 0.5, y + 0.5`).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (sin, cos) = self.theta.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Exact mask: a pixel is foreground iff its center lies inside.
    pub fn rasterize(&self, height: usize, width: usize) -> Mask {
        let mut data = vec![0u8; width * height];
        for y in 0..height {
            for x in 0..width {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    data[y * width + x] = 1;
                }
            }
        }
        Mask { width, height, data }
    }
}

const BG_LEVEL: f64 = 170.0;
const LESION_LEVEL: f64 = 70.0;
const NOISE: f64 = 20.0;

fn clamp_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `n` grayscale lesion images of `height x width` with exact masks.
/// The drawn ellipse accompanies each record so tests can rasterize it
/// independently.
pub fn synth_lesions(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<(SegRecord, Ellipse)>> {
    if height == 0 || width == 0 {
        return Err(Error::data("synthetic image size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_edge = height.min(width) as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ellipse = Ellipse {
            cx: rng.random_range(0.3..0.7) * width as f64,
            cy: rng.random_range(0.3..0.7) * height as f64,
            a: rng.random_range(0.15..0.35) * min_edge,
            b: rng.random_range(0.15..0.35) * min_edge,
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        let mask = ellipse.rasterize(height, width);
        let mut image = Raster::filled(width, height, 1, 0);
        for y in 0..height {
            for x in 0..width {
                let base = if mask.data[y * width + x] == 1 { LESION_LEVEL } else { BG_LEVEL };
                let noise = rng.random_range(-NOISE..NOISE);
                image.set(x, y, 0, clamp_byte(base + noise));
            }
        }
        let record = SegRecord { id: format!("synth_{i:04}"), image, mask };
        out.push((record, ellipse));
    }
    Ok(out)
}

/// `n` grayscale oriented-grating images over `classes` orientation
/// families; labels are assigned round-robin so every class appears
/// once `n >= classes`.
pub fn synth_classes(n: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Vec<ClsRecord>> {
    if height == 0 || width == 0 {
        return Err(Error::data("synthetic image size must be positive"));
    }
    if classes < 2 {
        return Err(Error::data("synthetic classes must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wavelength = 8.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        // Orientations spread over a half-turn; a grating at angle
        // alpha + pi repeats alpha, so this keeps classes distinct.
        let alpha = std::f64::consts::PI * label as f64 / classes as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (sin_a, cos_a) = alpha.sin_cos();
        let mut image = Raster::filled(width, height, 1, 0);
        for y in 0..height {
            for x in 0..width {
                let along = (x as f64 + 0.5) * cos_a + (y as f64 + 0.5) * sin_a;
                let wave = (std::f64::consts::TAU * along / wavelength + phase).sin();
                let noise = rng.random_range(-10.0..10.0);
                image.set(x, y, 0, clamp_byte(128.0 + 100.0 * wave + noise));
            }
        }
        out.push(ClsRecord { id: format!("synth_{i:04}"), image, label });
    }
    Ok(out)
}

/// Encodes a raster as PNG (grayscale or RGB by channel count).
pub fn save_raster_png(path: &Path, r: &Raster) -> Result<()> {
    let (w, h) = (r.width as u32, r.height as u32);
    match r.channels {
        1 => image::GrayImage::from_raw(w, h, r.data.clone())
            .expect("buffer sized by construction")
            .save(path)
            .map_err(|e| Error::image(path, e)),
        3 => image::RgbImage::from_raw(w, h, r.data.clone())
            .expect("buffer sized by construction")
            .save(path)
            .map_err(|e| Error::image(path, e)),
        c => Err(Error::data(format!("cannot encode {c}-channel raster"))),
    }
}

/// Mask PNG with the on-disk {0, 255} convention.
pub fn save_mask_png(path: &Path, m: &Mask) -> Result<()> {
    let bytes: Vec<u8> = m.data.iter().map(|&v| v * 255).collect();
    let r = Raster { width: m.width, height: m.height, channels: 1, data: bytes };
    save_raster_png(path, &r)
}

/// Writes `dir/images/<id>.png` and `dir/masks/<id>.png`.
pub fn write_seg_dataset(dir: &Path, records: &[SegRecord]) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    for r in records {
        save_raster_png(&images.join(format!("{}.png", r.id)), &r.image)?;
        save_mask_png(&masks.join(format!("{}.png", r.id)), &r.mask)?;
    }
    Ok(())
}

/// Writes `dir/images/<id>.png` and a `dir/labels.csv` of
/// `filename,label` rows under a header.
pub fn write_cls_dataset(dir: &Path, records: &[ClsRecord]) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for r in records {
        save_raster_png(&images.join(format!("{}.png", r.id)), &r.image)?;
    }
    let csv_path = dir.join("labels.csv");
    let mut body = String::from("filename,label\n");
    for r in records {
        body.push_str(&format!("{}.png,{}\n", r.id, r.label));
    }
    std::fs::write(&csv_path, body).map_err(|e| Error::io(&csv_path, e))
}
