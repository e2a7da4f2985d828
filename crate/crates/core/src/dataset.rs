//! Immutable labeled image collections and the IDX binary format.
//!
//! Intensities are normalized to `b / 255` exactly once, at load time.
//! Everything downstream works on `[0, 1]` values.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// A grayscale image, row-major, intensities in `[0, 1]`.
///
/// Pixel storage is shared, so cloning an image is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Arc<[f32]>,
    height: usize,
    width: usize,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::DimensionMismatch(format!("{} pixels for a {height}x{width} image", pixels.len())));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidDataset(format!("pixel {i} has intensity {} outside [0, 1]", pixels[i])));
        }
        Ok(Self { pixels: pixels.into(), height, width })
    }

    /// Build an image from values that may drift marginally outside `[0, 1]`
    /// through interpolation round-off; they are clamped.
    pub fn from_clamped(height: usize, width: usize, pixels: impl IntoIterator<Item = f64>) -> Self {
        let pixels: Vec<f32> = pixels.into_iter().map(|p| p.clamp(0.0, 1.0) as f32).collect();
        assert_eq!(pixels.len(), height * width, "pixel count does not match dimensions");
        Self { pixels: pixels.into(), height, width }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { pixels: vec![0.0; height * width].into(), height, width }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// True if both images share the same pixel buffer.
    pub fn same_storage(&self, other: &Image) -> bool {
        Arc::ptr_eq(&self.pixels, &other.pixels)
    }
}

/// Labeled images with a fixed class count.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    n_classes: usize,
    split_name: String,
}

impl Dataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        n_classes: usize,
        split_name: impl Into<String>,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidDataset("n_classes must be positive".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::LengthMismatch { expected: images.len(), found: labels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(Error::LabelOutOfRange { index, label, n_classes });
        }
        if let Some(first) = images.first() {
            let (h, w) = (first.height, first.width);
            if let Some(i) = images.iter().position(|im| im.height != h || im.width != w) {
                return Err(Error::DimensionMismatch(format!(
                    "image {i} is {}x{}, expected {h}x{w}",
                    images[i].height, images[i].width
                )));
            }
        }
        Ok(Self { images, labels, n_classes, split_name: split_name.into() })
    }

    pub fn empty(n_classes: usize, split_name: impl Into<String>) -> Self {
        Self { images: Vec::new(), labels: Vec::new(), n_classes, split_name: split_name.into() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn split_name(&self) -> &str {
        &self.split_name
    }

    /// `(height, width)` of the images, or `None` for an empty dataset.
    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.images.first().map(|im| (im.height, im.width))
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.split_name = name.into();
        self
    }

    /// Select samples by index (repeats allowed).
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            images.push(self.images[i].clone());
            labels.push(self.labels[i]);
        }
        Ok(Self { images, labels, n_classes: self.n_classes, split_name: name.into() })
    }

    /// Same images, new labels.
    pub fn with_labels(&self, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        Self::new(self.images.clone(), labels, n_classes, self.split_name.clone())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::TruncatedPayload { expected: offset + 4, found: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload { expected: 4, found: bytes.len() });
    }
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::MalformedMagic { expected, found });
    }
    Ok(())
}

/// Parse an IDX3 image file (magic `0x00000803`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Image>> {
    check_magic(bytes, IDX_IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::ZeroDimension { rows, cols });
    }
    let per_image = rows * cols;
    let expected = count
        .checked_mul(per_image)
        .and_then(|n| n.checked_add(16))
        .ok_or(Error::TruncatedPayload { expected: usize::MAX, found: bytes.len() })?;
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload { expected, found: bytes.len() });
    }
    Ok(bytes[16..]
        .chunks_exact(per_image)
        .map(|chunk| Image { pixels: chunk.iter().map(|&b| f32::from(b) / 255.0).collect(), height: rows, width: cols })
        .collect())
}

/// Parse an IDX1 label file (magic `0x00000801`). Labels are not checked
/// against a class count here; [`Dataset::new`] does that.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let expected = count + 8;
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload { expected, found: bytes.len() });
    }
    Ok(bytes[8..].iter().map(|&b| usize::from(b)).collect())
}

fn intensity_to_byte(p: f32) -> u8 {
    (f64::from(p) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Serialize images to IDX3. All images must share dimensions; an empty
/// slice needs explicit dimensions, so it is serialized as 1x1 with count 0.
pub fn serialize_idx_images(images: &[Image]) -> Result<Vec<u8>> {
    let (rows, cols) = images.first().map_or((1, 1), |im| (im.height, im.width));
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for (i, im) in images.iter().enumerate() {
        if im.height != rows || im.width != cols {
            return Err(Error::DimensionMismatch(format!("image {i} differs in size")));
        }
        out.extend(im.pixels.iter().map(|&p| intensity_to_byte(p)));
    }
    Ok(out)
}

pub fn serialize_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for (index, &l) in labels.iter().enumerate() {
        let b = u8::try_from(l).map_err(|_| Error::LabelOutOfRange { index, label: l, n_classes: 256 })?;
        out.push(b);
    }
    Ok(out)
}

/// Read a file, transparently inflating gzip (sniffed by the `1f 8b` magic).
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let unreadable = |e: std::io::Error| Error::DataUnreadable { path: path.to_path_buf(), reason: e.to_string() };
    let raw = fs::read(path).map_err(unreadable)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(unreadable)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Load an image/label IDX pair from disk into a dataset.
pub fn load_idx_pair(images_path: &Path, labels_path: &Path, n_classes: usize, name: &str) -> Result<Dataset> {
    let wrap = |path: &Path, e: Error| match e {
        Error::DataUnreadable { .. } => e,
        other => Error::DataUnreadable { path: path.to_path_buf(), reason: other.to_string() },
    };
    let images = parse_idx_images(&read_maybe_gzip(images_path)?).map_err(|e| wrap(images_path, e))?;
    let labels = parse_idx_labels(&read_maybe_gzip(labels_path)?).map_err(|e| wrap(labels_path, e))?;
    Dataset::new(images, labels, n_classes, name).map_err(|e| wrap(labels_path, e))
}

pub fn write_idx_pair(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    fs::write(images_path, serialize_idx_images(dataset.images())?)?;
    fs::write(labels_path, serialize_idx_labels(dataset.labels())?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// How samples are assigned to splits: positionally in source order, or by a
/// seeded shuffle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSeed {
    Canonical(CanonicalTag),
    Seeded(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanonicalTag {
    Canonical,
}

impl SplitSeed {
    pub const CANONICAL: SplitSeed = SplitSeed::Canonical(CanonicalTag::Canonical);
}

/// Index assignment for [`split`].
pub fn split_indices(n: usize, spec: SplitSpec, seed: SplitSeed) -> Result<[Vec<usize>; 3]> {
    if spec.total() > n {
        return Err(Error::SpecExceedsDataset { requested: spec.total(), available: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let SplitSeed::Seeded(s) = seed {
        order.shuffle(&mut seed::rng(s));
    }
    let (train, rest) = order.split_at(spec.train);
    let (validation, rest) = rest.split_at(spec.validation);
    let test = &rest[..spec.test];
    Ok([train.to_vec(), validation.to_vec(), test.to_vec()])
}

/// Partition a dataset into train / validation / test.
pub fn split(dataset: &Dataset, spec: SplitSpec, seed: SplitSeed) -> Result<(Dataset, Dataset, Dataset)> {
    let [tr, va, te] = split_indices(dataset.len(), spec, seed)?;
    Ok((dataset.subset(&tr, "train")?, dataset.subset(&va, "validation")?, dataset.subset(&te, "test")?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_header(count: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = IDX_IMAGE_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&count.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b
    }

    fn label_header(count: u32) -> Vec<u8> {
        let mut b = IDX_LABEL_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&count.to_be_bytes());
        b
    }

    #[test]
    fn parses_single_image() {
        let mut bytes = image_header(1, 2, 2);
        bytes.extend_from_slice(&[0, 255, 128, 0]);
        let images = parse_idx_images(&bytes).unwrap();
        assert_eq!(images.len(), 1);
        assert_eq!(images[0].pixels(), &[0.0, 1.0, 128.0 / 255.0, 0.0]);
        assert_eq!((images[0].height(), images[0].width()), (2, 2));
    }

    #[test]
    fn empty_image_file() {
        assert!(parse_idx_images(&image_header(0, 28, 28)).unwrap().is_empty());
    }

    #[test]
    fn truncated_images() {
        let mut bytes = image_header(2, 2, 2);
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        assert!(matches!(parse_idx_images(&bytes), Err(Error::TruncatedPayload { expected: 24, found: 20 })));
    }

    #[test]
    fn zero_dimension_header() {
        assert!(matches!(parse_idx_images(&image_header(0, 0, 28)), Err(Error::ZeroDimension { .. })));
    }

    #[test]
    fn parses_labels() {
        let mut bytes = label_header(3);
        bytes.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![7, 0, 9]);
        assert!(parse_idx_labels(&label_header(0)).unwrap().is_empty());
    }

    #[test]
    fn label_magic_mismatch() {
        let mut bytes = IDX_IMAGE_MAGIC.to_be_bytes().to_vec();
        bytes.extend_from_slice(&0u32.to_be_bytes());
        assert!(matches!(
            parse_idx_labels(&bytes),
            Err(Error::MalformedMagic { expected: IDX_LABEL_MAGIC, found: IDX_IMAGE_MAGIC })
        ));
    }

    #[test]
    fn truncated_labels() {
        let mut bytes = label_header(3);
        bytes.push(1);
        assert!(matches!(parse_idx_labels(&bytes), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn dataset_rejects_wide_labels() {
        let ims = vec![Image::zeros(2, 2); 2];
        assert!(matches!(
            Dataset::new(ims, vec![0, 10], 10, "x"),
            Err(Error::LabelOutOfRange { index: 1, label: 10, .. })
        ));
    }

    #[test]
    fn dataset_rejects_mixed_sizes() {
        let ims = vec![Image::zeros(2, 2), Image::zeros(3, 2)];
        assert!(Dataset::new(ims, vec![0, 1], 2, "x").is_err());
    }

    fn toy(n: usize) -> Dataset {
        let ims = (0..n).map(|i| Image::from_clamped(1, 1, [i as f64 / n as f64])).collect();
        Dataset::new(ims, (0..n).map(|i| i % 3).collect(), 3, "toy").unwrap()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let [a, b, c] =
            split_indices(100, SplitSpec { train: 60, validation: 20, test: 20 }, SplitSeed::Seeded(7)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let again =
            split_indices(100, SplitSpec { train: 60, validation: 20, test: 20 }, SplitSeed::Seeded(7)).unwrap();
        assert_eq!([a, b, c], again);
    }

    #[test]
    fn split_rejects_oversized_spec() {
        let d = toy(100);
        assert!(matches!(
            split(&d, SplitSpec { train: 90, validation: 20, test: 20 }, SplitSeed::Seeded(7)),
            Err(Error::SpecExceedsDataset { requested: 130, available: 100 })
        ));
    }

    #[test]
    fn canonical_split_is_positional() {
        let [a, b, c] =
            split_indices(10, SplitSpec { train: 5, validation: 3, test: 2 }, SplitSeed::CANONICAL).unwrap();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert_eq!(b, vec![5, 6, 7]);
        assert_eq!(c, vec![8, 9]);
    }

    #[test]
    fn split_seed_serde() {
        let s: SplitSeed = serde_json::from_str("\"canonical\"").unwrap();
        assert_eq!(s, SplitSeed::CANONICAL);
        let s: SplitSeed = serde_json::from_str("7").unwrap();
        assert_eq!(s, SplitSeed::Seeded(7));
    }
}
