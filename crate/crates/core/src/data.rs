//! Dataset ingestion: directory scan, seeded split, PNG decode/resize and
//! training-time augmentation.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::CLASS_NAMES;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 224;
const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("class directory {class:?} not found under {}", root.display())]
    MissingClassDir { root: PathBuf, class: String },
    #[error("no PNG images found under {}", .0.display())]
    Empty(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("need at least 3 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("manifest {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<ImageRecord>,
    pub class_names: Vec<String>,
}

impl DatasetIndex {
    pub fn new(records: Vec<ImageRecord>) -> Self {
        DatasetIndex {
            records,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Per-class record counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }
}

fn has_png_signature(path: &Path) -> bool {
    let mut head = [0u8; 8];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map(|_| head == PNG_SIGNATURE)
        .unwrap_or(false)
}

/// Index `root/Parasitized/*.png` and `root/Uninfected/*.png`.
///
/// Directory names match case-insensitively. Files that are not PNGs (by
/// signature) are skipped, so stray `Thumbs.db` entries do not count.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let entries = fs::read_dir(root).map_err(io_err(root))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(io_err(root))?;
        if entry.file_type().map_err(io_err(root))?.is_dir() {
            dirs.push(entry.path());
        }
    }

    let mut records = Vec::new();
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        let mut matching: Vec<&PathBuf> = dirs
            .iter()
            .filter(|d| {
                d.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.eq_ignore_ascii_case(class))
            })
            .collect();
        matching.sort();
        let dir = matching.first().ok_or_else(|| DataError::MissingClassDir {
            root: root.to_path_buf(),
            class: class.to_string(),
        })?;
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            let is_png = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if is_png && path.is_file() && has_png_signature(&path) {
                records.push(ImageRecord { path, label });
            }
        }
    }
    if records.is_empty() {
        return Err(DataError::Empty(root.to_path_buf()));
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(DatasetIndex::new(records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Percentages keep the floor arithmetic exact in integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_percent: usize,
    pub val_percent: usize,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        SplitSpec {
            seed,
            train_percent: 60,
            val_percent: 20,
        }
    }

    /// `(train, val, test)` sizes for `n` records.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = n * self.train_percent / 100;
        let val = n * self.val_percent / 100;
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndex {
    pub train: DatasetIndex,
    pub val: DatasetIndex,
    pub test: DatasetIndex,
}

impl SplitIndex {
    pub fn parts(&self) -> [(Split, &DatasetIndex); 3] {
        [
            (Split::Train, &self.train),
            (Split::Val, &self.val),
            (Split::Test, &self.test),
        ]
    }

    pub fn get(&self, split: Split) -> &DatasetIndex {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Shuffle the sorted records with a seeded Fisher–Yates pass and cut them
/// into train/val/test by floor arithmetic; the remainder goes to test.
pub fn split_dataset(index: &DatasetIndex, spec: SplitSpec) -> Result<SplitIndex> {
    let n = index.len();
    if n < 3 {
        return Err(DataError::TooFewRecords(n));
    }
    if spec.train_percent + spec.val_percent > 100 {
        return Err(DataError::Config(format!(
            "split percentages {} + {} exceed 100",
            spec.train_percent, spec.val_percent
        )));
    }
    let mut records = index.records.clone();
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (n_train, n_val, _) = spec.sizes(n);
    let test = records.split_off(n_train + n_val);
    let val = records.split_off(n_train);
    let part = |records| DatasetIndex {
        records,
        class_names: index.class_names.clone(),
    };
    Ok(SplitIndex {
        train: part(records),
        val: part(val),
        test: part(test),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    label: usize,
    split: Split,
}

/// Write the `path,label,split` manifest.
pub fn write_manifest(path: impl AsRef<Path>, split: &SplitIndex) -> Result<()> {
    let path = path.as_ref();
    let manifest_err = |e: csv::Error| DataError::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(manifest_err)?;
    for (which, part) in split.parts() {
        for r in &part.records {
            let p = r.path.to_str().ok_or_else(|| DataError::Manifest {
                path: path.to_path_buf(),
                reason: format!("non UTF-8 path {}", r.path.display()),
            })?;
            writer
                .serialize(ManifestRow {
                    path: p.to_string(),
                    label: r.label,
                    split: which,
                })
                .map_err(manifest_err)?;
        }
    }
    writer.flush().map_err(io_err(path))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SplitIndex> {
    let path = path.as_ref();
    let manifest_err = |reason: String| DataError::Manifest {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| manifest_err(e.to_string()))?;
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| manifest_err(e.to_string()))?;
        if row.label >= CLASS_NAMES.len() {
            return Err(manifest_err(format!("label {} out of range", row.label)));
        }
        let slot = match row.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        parts[slot].push(ImageRecord {
            path: PathBuf::from(row.path),
            label: row.label,
        });
    }
    let [train, val, test] = parts;
    Ok(SplitIndex {
        train: DatasetIndex::new(train),
        val: DatasetIndex::new(val),
        test: DatasetIndex::new(test),
    })
}

/// Planar `[C, H, W]` image in `f64`, the working format for resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Planes {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates, zero outside the image.
    fn sample_zero(&self, c: usize, y: f64, x: f64) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let (fy, fx) = (y - y0, x - x0);
        let pixel = |yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                0.0
            } else {
                self.at(c, yy as usize, xx as usize)
            }
        };
        let top = pixel(y0, x0) * (1.0 - fx) + pixel(y0, x0 + 1.0) * fx;
        let bottom = pixel(y0 + 1.0, x0) * (1.0 - fx) + pixel(y0 + 1.0, x0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("planes have positive extents")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 3, "expected [C, H, W]");
        Planes {
            channels: s[0],
            height: s[1],
            width: s[2],
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Source coordinate for destination index `dst` under the half-pixel
/// convention, clamped to the valid range.
fn half_pixel_source(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let s = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    let s = s.clamp(0.0, (src_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Planes, height: usize, width: usize) -> Planes {
    if src.height == height && src.width == width {
        return src.clone();
    }
    let rows: Vec<_> = (0..height)
        .map(|y| half_pixel_source(y, src.height, height))
        .collect();
    let cols: Vec<_> = (0..width)
        .map(|x| half_pixel_source(x, src.width, width))
        .collect();
    let mut out = Planes::zeros(src.channels, height, width);
    for c in 0..src.channels {
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = src.at(c, y0, x0) * (1.0 - fx) + src.at(c, y0, x1) * fx;
                let bottom = src.at(c, y1, x0) * (1.0 - fx) + src.at(c, y1, x1) * fx;
                out.data[(c * height + y) * width + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Decode PNG bytes into `[3, H, W]` planes holding raw 0..=255 values.
/// Alpha is dropped and grayscale is replicated across channels.
pub fn decode_png(bytes: &[u8]) -> Result<Planes> {
    if !bytes.starts_with(&PNG_SIGNATURE) {
        return Err(DataError::Decode("not a PNG file".into()));
    }
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| DataError::Decode(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut planes = Planes::zeros(3, h, w);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            planes.data[(c * h + y as usize) * w + x as usize] = px.0[c] as f64;
        }
    }
    Ok(planes)
}

/// Decode, resize to 224×224 and scale to `[0, 1]`.
pub fn preprocess_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let raw = decode_png(bytes)?;
    let mut planes = resize_bilinear(&raw, IMAGE_SIZE, IMAGE_SIZE);
    for v in &mut planes.data {
        *v /= 255.0;
    }
    Ok(planes.to_tensor())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    preprocess_image(&bytes).map_err(|e| match e {
        DataError::Decode(reason) => DataError::Decode(format!("{}: {reason}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotation angle is drawn from `U(-rotation_deg, rotation_deg)`.
    pub rotation_deg: f64,
    pub zoom_range: [f64; 2],
    pub hflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 15.0,
            zoom_range: [0.9, 1.1],
            hflip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            zoom_range: [1.0, 1.0],
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.zoom_range;
        let bad = |msg: String| Err(DataError::Config(msg));
        if !(self.rotation_deg >= 0.0 && self.rotation_deg.is_finite()) {
            return bad(format!(
                "rotation_deg must be >= 0, got {}",
                self.rotation_deg
            ));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "zoom_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            ));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad(format!(
                "hflip_prob must lie in [0, 1], got {}",
                self.hflip_prob
            ));
        }
        Ok(())
    }

    /// Draw one set of transform parameters. Always consumes three uniforms so
    /// the stream position does not depend on the configuration.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        let (u_angle, u_zoom, u_flip): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let [lo, hi] = self.zoom_range;
        AugmentParams {
            angle_deg: self.rotation_deg * (2.0 * u_angle - 1.0),
            scale: lo + (hi - lo) * u_zoom,
            flip: u_flip < self.hflip_prob,
        }
    }
}

/// Concrete transform for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Counter-clockwise as displayed (rows grow downward).
    pub angle_deg: f64,
    /// Above 1 zooms in (crops), below 1 zooms out (pads with zeros).
    pub scale: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub fn is_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.scale == 1.0 && !self.flip
    }
}

pub fn hflip(src: &Planes) -> Planes {
    let mut out = src.clone();
    for row in out.data.chunks_mut(src.width) {
        row.reverse();
    }
    out
}

/// Flip, then rotate about the center, then center-zoom. Rotation and zoom are
/// composed into one inverse map so each output pixel is resampled once;
/// samples falling outside the source are zero.
pub fn apply_augment(src: &Planes, p: &AugmentParams) -> Planes {
    let flipped = if p.flip { hflip(src) } else { src.clone() };
    if p.angle_deg == 0.0 && p.scale == 1.0 {
        return flipped;
    }
    let (h, w) = (src.height, src.width);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let mut out = Planes::zeros(src.channels, h, w);
    for y in 0..h {
        for x in 0..w {
            // undo zoom, then undo rotation
            let dy = (y as f64 - cy) / p.scale;
            let dx = (x as f64 - cx) / p.scale;
            let sx = cx + dx * cos - dy * sin;
            let sy = cy + dx * sin + dy * cos;
            for c in 0..src.channels {
                let v = flipped.sample_zero(c, sy, sx).clamp(0.0, 1.0);
                out.data[(c * h + y) * w + x] = v;
            }
        }
    }
    out
}

/// Augment a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(t: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut R) -> Tensor<f32> {
    let params = cfg.sample(rng);
    if params.is_identity() {
        return t.clone();
    }
    apply_augment(&Planes::from_tensor(t), &params).to_tensor()
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
}

/// Record order for one epoch.
pub fn epoch_order(n: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * epoch);
        order.shuffle(&mut rng);
    }
    order
}

/// One epoch of batches, decoded lazily from disk in a fixed order.
pub struct Batches<'a> {
    index: &'a DatasetIndex,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    augment: Option<(AugmentConfig, ChaCha8Rng)>,
}

impl<'a> Batches<'a> {
    pub fn new(index: &'a DatasetIndex, cfg: &BatchConfig, epoch: u64) -> Result<Self> {
        if index.is_empty() {
            return Err(DataError::Config("cannot batch an empty index".into()));
        }
        if cfg.batch_size == 0 {
            return Err(DataError::Config("batch_size must be >= 1".into()));
        }
        let augment = match cfg.augment {
            Some(a) => {
                a.validate()?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(2 * epoch + 1);
                Some((a, rng))
            }
            None => None,
        };
        Ok(Batches {
            index,
            order: epoch_order(index.len(), cfg.shuffle, cfg.seed, epoch),
            cursor: 0,
            batch_size: cfg.batch_size,
            augment,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let picks = &self.order[self.cursor..end];
        self.cursor = end;
        let mut images = Vec::with_capacity(picks.len());
        let mut labels = Vec::with_capacity(picks.len());
        for &i in picks {
            let record = &self.index.records[i];
            let mut image = match load_image(&record.path) {
                Ok(t) => t,
                Err(e) => return Some(Err(e)),
            };
            if let Some((cfg, rng)) = self.augment.as_mut() {
                image = augment(&image, cfg, rng);
            }
            images.push(image);
            labels.push(record.label);
        }
        let images = Tensor::stack(&images).expect("all images share one shape");
        Some(Ok(Batch { images, labels }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_use_integer_floor() {
        let spec = SplitSpec::new(0);
        assert_eq!(spec.sizes(10), (6, 2, 2));
        assert_eq!(spec.sizes(3), (1, 0, 2));
        assert_eq!(spec.sizes(27_558), (16_534, 5_511, 5_513));
    }

    #[test]
    fn half_pixel_source_clamps_edges() {
        assert_eq!(half_pixel_source(0, 2, 4), (0, 1, 0.0));
        assert_eq!(half_pixel_source(3, 2, 4), (1, 1, 0.0));
        let (lo, hi, f) = half_pixel_source(1, 2, 4);
        assert_eq!((lo, hi), (0, 1));
        assert!((f - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sample_draws_three_uniforms() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        AugmentConfig::identity().sample(&mut a);
        AugmentConfig::default().sample(&mut b);
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }
}
