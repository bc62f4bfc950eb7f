//! Dataset ingestion, resizing, flip augmentation, splitting, and
//! batching. Every stage is a deterministic function of its inputs and
//! the run seed; records are kept sorted by id so directory iteration
//! order never leaks into training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nabla_core::{Scalar, Shape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit raster, row-major with interleaved channels (1 = grayscale,
/// 3 = RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::data(format!("unsupported raster geometry {width}x{height}x{channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::data(format!(
                "raster buffer of {} bytes for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Raster { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Raster { width, height, channels, data: vec![value; width * height * channels] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn hflip(&self) -> Raster {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(self.width - 1 - x, y, c));
                }
            }
        }
        out
    }

    pub fn vflip(&self) -> Raster {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(x, self.height - 1 - y, c));
                }
            }
        }
        out
    }

    /// Rec. 601 luma collapse; grayscale input returns unchanged.
    pub fn to_gray(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Raster::filled(self.width, self.height, 1, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                let l = 0.299 * f64::from(self.get(x, y, 0))
                    + 0.587 * f64::from(self.get(x, y, 1))
                    + 0.114 * f64::from(self.get(x, y, 2));
                out.set(x, y, 0, l.round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    /// Channel replication; RGB input returns unchanged.
    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        let mut out = Raster::filled(self.width, self.height, 3, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(x, y, 0);
                for c in 0..3 {
                    out.set(x, y, c, v);
                }
            }
        }
        out
    }

    /// Converts to the requested channel count (1 or 3).
    pub fn adapt_channels(&self, want: usize) -> Result<Raster> {
        match want {
            1 => Ok(self.to_gray()),
            3 => Ok(self.to_rgb()),
            c => Err(Error::data(format!("model wants {c} input channels, only 1 or 3 supported"))),
        }
    }

    /// `1 x C x H x W` tensor scaled so that byte 255 maps to 1.0.
    pub fn to_unit_tensor<E: Scalar>(&self) -> Tensor<E> {
        let shape = Shape::new(1, self.channels, self.height, self.width);
        let mut data = vec![E::zero(); shape.numel()];
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    data[shape.offset(0, c, y, x)] = E::from_f64(f64::from(self.get(x, y, c)) / 255.0);
                }
            }
        }
        Tensor::new(shape, data).expect("sized above")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Resizes a raster. Bilinear suits intensity images; nearest preserves
/// binarity and is what masks must use.
pub fn resize(src: &Raster, height: usize, width: usize, interp: Interp) -> Result<Raster> {
    if height == 0 || width == 0 {
        return Err(Error::data("resize target must be positive"));
    }
    if height == src.height && width == src.width {
        return Ok(src.clone());
    }
    let mut out = Raster::filled(width, height, src.channels, 0);
    let sx = src.width as f64 / width as f64;
    let sy = src.height as f64 / height as f64;
    for y in 0..height {
        for x in 0..width {
            // Pixel-center mapping keeps the grid symmetric under both
            // kernels (and exact for the identity resize).
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let fy = (y as f64 + 0.5) * sy - 0.5;
            match interp {
                Interp::Nearest => {
                    let nx = fx.round().clamp(0.0, (src.width - 1) as f64) as usize;
                    let ny = fy.round().clamp(0.0, (src.height - 1) as f64) as usize;
                    for c in 0..src.channels {
                        out.set(x, y, c, src.get(nx, ny, c));
                    }
                }
                Interp::Bilinear => {
                    let x0 = fx.floor().clamp(0.0, (src.width - 1) as f64) as usize;
                    let y0 = fy.floor().clamp(0.0, (src.height - 1) as f64) as usize;
                    let x1 = (x0 + 1).min(src.width - 1);
                    let y1 = (y0 + 1).min(src.height - 1);
                    let tx = (fx - x0 as f64).clamp(0.0, 1.0);
                    let ty = (fy - y0 as f64).clamp(0.0, 1.0);
                    for c in 0..src.channels {
                        let p00 = f64::from(src.get(x0, y0, c));
                        let p10 = f64::from(src.get(x1, y0, c));
                        let p01 = f64::from(src.get(x0, y1, c));
                        let p11 = f64::from(src.get(x1, y1, c));
                        let top = p00 + (p10 - p00) * tx;
                        let bot = p01 + (p11 - p01) * tx;
                        let v = (top + (bot - top) * ty).round().clamp(0.0, 255.0) as u8;
                        out.set(x, y, c, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Binary mask, values exactly `{0, 1}` in memory ({0, 255} on disk).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::data(format!("mask buffer of {} bytes for {width}x{height}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::data("mask values must be 0 or 1"));
        }
        Ok(Mask { width, height, data })
    }

    /// Grayscale raster thresholded at 128: bytes >= 128 become 1.
    pub fn from_gray(r: &Raster) -> Result<Self> {
        if r.channels != 1 {
            return Err(Error::data(format!("mask raster has {} channels, expected grayscale", r.channels)));
        }
        Mask::new(r.width, r.height, r.data.iter().map(|&v| u8::from(v >= 128)).collect())
    }

    fn as_raster(&self) -> Raster {
        Raster { width: self.width, height: self.height, channels: 1, data: self.data.clone() }
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Mask> {
        let r = resize(&self.as_raster(), height, width, Interp::Nearest)?;
        Mask::new(width, height, r.data)
    }

    pub fn hflip(&self) -> Mask {
        let r = self.as_raster().hflip();
        Mask { width: self.width, height: self.height, data: r.data }
    }

    pub fn vflip(&self) -> Mask {
        let r = self.as_raster().vflip();
        Mask { width: self.width, height: self.height, data: r.data }
    }

    /// `1 x 1 x H x W` tensor of exact zeros and ones.
    pub fn to_tensor<E: Scalar>(&self) -> Tensor<E> {
        let shape = Shape::new(1, 1, self.height, self.width);
        let data = self.data.iter().map(|&v| E::from_f64(f64::from(v))).collect();
        Tensor::new(shape, data).expect("sized above")
    }
}

/// One segmentation example: image and exactly co-registered mask.
#[derive(Debug, Clone)]
pub struct SegRecord {
    pub id: String,
    pub image: Raster,
    pub mask: Mask,
}

/// One classification example.
#[derive(Debug, Clone)]
pub struct ClsRecord {
    pub id: String,
    pub image: Raster,
    pub label: usize,
}

/// The seven lesion classes in their fixed order; CSV labels may use
/// the index, the full name, or the short code, case-insensitively.
pub const CLASS_NAMES: [(&str, &str); 7] = [
    ("melanoma", "mel"),
    ("melanocytic-nevus", "nv"),
    ("basal-cell-carcinoma", "bcc"),
    ("actinic-keratosis", "akiec"),
    ("benign-keratosis", "bkl"),
    ("dermatofibroma", "df"),
    ("vascular-lesion", "vasc"),
];

pub fn parse_class_label(field: &str) -> Option<usize> {
    let trimmed = field.trim();
    if let Ok(idx) = trimmed.parse::<usize>() {
        return Some(idx);
    }
    let lower = trimmed.to_ascii_lowercase();
    CLASS_NAMES.iter().position(|(name, code)| *name == lower || *code == lower)
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn stem_of(path: &Path) -> Option<String> {
    path.file_stem().and_then(|s| s.to_str()).map(str::to_owned)
}

/// Decodes a PNG or JPEG into a raster, keeping grayscale single
/// channel and collapsing anything else to RGB.
pub fn load_raster(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let raster = match img {
        image::DynamicImage::ImageLuma8(g) => Raster::new(
            g.width() as usize,
            g.height() as usize,
            1,
            g.into_raw(),
        )?,
        other => {
            let rgb = other.to_rgb8();
            Raster::new(rgb.width() as usize, rgb.height() as usize, 3, rgb.into_raw())?
        }
    };
    Ok(raster)
}

fn load_gray(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let g = img.to_luma8();
    Raster::new(g.width() as usize, g.height() as usize, 1, g.into_raw())
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_file(&path) {
            if let Some(stem) = stem_of(&path) {
                if let Some(prev) = out.insert(stem.clone(), path.clone()) {
                    return Err(Error::data(format!(
                        "duplicate id '{stem}': {} and {}",
                        prev.display(),
                        path.display()
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// Loads (image, mask) pairs matched by filename stem, sorted by id.
/// Masks are thresholded at 128 into `{0, 1}` and must match the image
/// extents. An image without a mask is an error naming the id.
pub fn load_segmentation_dataset(image_dir: &Path, mask_dir: &Path) -> Result<Vec<SegRecord>> {
    let images = list_images(image_dir)?;
    let masks = list_images(mask_dir)?;
    let mut records = Vec::with_capacity(images.len());
    for (id, image_path) in images {
        let mask_path = masks
            .get(&id)
            .ok_or_else(|| Error::data(format!("no mask for image id '{id}' in {}", mask_dir.display())))?;
        let image = load_raster(&image_path)?;
        let mask = Mask::from_gray(&load_gray(mask_path)?)?;
        if mask.width != image.width || mask.height != image.height {
            return Err(Error::data(format!(
                "id '{id}': image {}x{} but mask {}x{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        records.push(SegRecord { id, image, mask });
    }
    Ok(records)
}

/// Loads classification records from an image directory plus a CSV of
/// `filename,label` rows (label = index, class name, or short code; an
/// unparsable first row is treated as the header). Sorted by id.
pub fn load_classification_dataset(image_dir: &Path, labels_csv: &Path) -> Result<Vec<ClsRecord>> {
    let images = list_images(image_dir)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(labels_csv)
        .map_err(|e| Error::data(format!("{}: {e}", labels_csv.display())))?;
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::data(format!("{}: {e}", labels_csv.display())))?;
        if row.len() < 2 {
            return Err(Error::data(format!("{}: row {} needs filename,label", labels_csv.display(), i + 1)));
        }
        let stem = stem_of(Path::new(&row[0])).unwrap_or_else(|| row[0].to_string());
        match parse_class_label(&row[1]) {
            Some(label) => {
                labels.insert(stem, label);
            }
            None if i == 0 => continue, // header row
            None => {
                return Err(Error::data(format!(
                    "{}: row {}: unknown class '{}'",
                    labels_csv.display(),
                    i + 1,
                    &row[1]
                )))
            }
        }
    }
    let mut records = Vec::new();
    for (id, path) in images {
        let label = *labels
            .get(&id)
            .ok_or_else(|| Error::data(format!("no label for image id '{id}' in {}", labels_csv.display())))?;
        records.push(ClsRecord { id, image: load_raster(&path)?, label });
    }
    Ok(records)
}

/// Original records followed by their horizontal then vertical flips;
/// ids keep their lexicographic grouping via `/h` and `/v` suffixes.
pub fn augment_flips(records: &[SegRecord]) -> Vec<SegRecord> {
    let mut out = Vec::with_capacity(records.len() * 3);
    for r in records {
        out.push(r.clone());
        out.push(SegRecord {
            id: format!("{}/h", r.id),
            image: r.image.hflip(),
            mask: r.mask.hflip(),
        });
        out.push(SegRecord {
            id: format!("{}/v", r.id),
            image: r.image.vflip(),
            mask: r.mask.vflip(),
        });
    }
    out
}

/// Flip augmentation for classification records (labels unchanged).
pub fn augment_flips_cls(records: &[ClsRecord]) -> Vec<ClsRecord> {
    let mut out = Vec::with_capacity(records.len() * 3);
    for r in records {
        out.push(r.clone());
        out.push(ClsRecord { id: format!("{}/h", r.id), image: r.image.hflip(), label: r.label });
        out.push(ClsRecord { id: format!("{}/v", r.id), image: r.image.vflip(), label: r.label });
    }
    out
}

/// A reproducible train/test partition of record ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

fn seeded_shuffle(ids: &[String], seed: u64) -> Vec<String> {
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    shuffled
}

/// Shuffles ids by seed and takes `round(fraction * total)` for
/// training; the remainder tests. Train and test partition the input.
pub fn split(ids: &[String], train_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::data(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let count = (train_fraction * ids.len() as f64).round() as usize;
    split_with_count(ids, count.min(ids.len()), seed)
}

/// Same as [`split`] with an explicit train count, for corpora whose
/// published split disagrees with the stated fraction.
pub fn split_with_count(ids: &[String], train_count: usize, seed: u64) -> Result<SplitPlan> {
    if train_count > ids.len() {
        return Err(Error::data(format!("train count {train_count} exceeds {} records", ids.len())));
    }
    let shuffled = seeded_shuffle(ids, seed);
    let (train, test) = shuffled.split_at(train_count);
    Ok(SplitPlan { seed, train_ids: train.to_vec(), test_ids: test.to_vec() })
}

/// Mixes the run seed and epoch into the per-epoch shuffle seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn batch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
    order.shuffle(&mut rng);
    order
}

/// Concatenates single-example `1 x C x H x W` tensors along the batch
/// axis.
pub fn stack<E: Scalar>(tensors: &[Tensor<E>]) -> Tensor<E> {
    let s = tensors[0].shape();
    let shape = Shape::new(tensors.len(), s.c(), s.h(), s.w());
    let mut data = Vec::with_capacity(shape.numel());
    for t in tensors {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data).expect("uniform shapes")
}

/// Deterministic per-epoch batches of (image, mask) tensor pairs.
/// Images scale to [0, 1]; masks stay exact zeros and ones; the final
/// short batch is emitted. All records must share one geometry.
pub fn seg_batches<E: Scalar>(
    records: &[SegRecord],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<(Tensor<E>, Tensor<E>)>> {
    if records.is_empty() {
        return Err(Error::data("no records to batch"));
    }
    if batch_size == 0 {
        return Err(Error::data("batch size must be at least 1"));
    }
    let (w, h, c) = (records[0].image.width, records[0].image.height, records[0].image.channels);
    for r in records {
        if r.image.width != w || r.image.height != h || r.image.channels != c {
            return Err(Error::data(format!(
                "record '{}' is {}x{}x{}, batch wants {w}x{h}x{c}; resize first",
                r.id, r.image.width, r.image.height, r.image.channels
            )));
        }
    }
    let order = batch_order(records.len(), seed, epoch);
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let images: Vec<Tensor<E>> = chunk.iter().map(|&i| records[i].image.to_unit_tensor()).collect();
        let masks: Vec<Tensor<E>> = chunk.iter().map(|&i| records[i].mask.to_tensor()).collect();
        out.push((stack(&images), stack(&masks)));
    }
    Ok(out)
}

/// Deterministic per-epoch batches of (image, labels) for classification.
pub fn cls_batches<E: Scalar>(
    records: &[ClsRecord],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<(Tensor<E>, Vec<usize>)>> {
    if records.is_empty() {
        return Err(Error::data("no records to batch"));
    }
    if batch_size == 0 {
        return Err(Error::data("batch size must be at least 1"));
    }
    let (w, h, c) = (records[0].image.width, records[0].image.height, records[0].image.channels);
    for r in records {
        if r.image.width != w || r.image.height != h || r.image.channels != c {
            return Err(Error::data(format!(
                "record '{}' is {}x{}x{}, batch wants {w}x{h}x{c}; resize first",
                r.id, r.image.width, r.image.height, r.image.channels
            )));
        }
    }
    let order = batch_order(records.len(), seed, epoch);
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let images: Vec<Tensor<E>> = chunk.iter().map(|&i| records[i].image.to_unit_tensor()).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| records[i].label).collect();
        out.push((stack(&images), labels));
    }
    Ok(out)
}

/// Resizes every record to `size x size` (bilinear image, nearest mask).
pub fn resize_seg_records(records: &[SegRecord], size: usize) -> Result<Vec<SegRecord>> {
    records
        .iter()
        .map(|r| {
            Ok(SegRecord {
                id: r.id.clone(),
                image: resize(&r.image, size, size, Interp::Bilinear)?,
                mask: r.mask.resize_nearest(size, size)?,
            })
        })
        .collect()
}

/// Resizes every classification record to `size x size` (bilinear).
pub fn resize_cls_records(records: &[ClsRecord], size: usize) -> Result<Vec<ClsRecord>> {
    records
        .iter()
        .map(|r| {
            Ok(ClsRecord {
                id: r.id.clone(),
                image: resize(&r.image, size, size, Interp::Bilinear)?,
                label: r.label,
            })
        })
        .collect()
}

/// Selects the records named by `ids`, in the plan's order.
pub fn select_by_ids<'a, R, F>(records: &'a [R], ids: &[String], id_of: F) -> Result<Vec<R>>
where
    R: Clone,
    F: Fn(&'a R) -> &'a str,
{
    let index: BTreeMap<&str, &R> = records.iter().map(|r| (id_of(r), r)).collect();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&r| r.clone())
                .ok_or_else(|| Error::data(format!("split references unknown id '{id}'")))
        })
        .collect()
}
