//! MNIST IDX ingestion.
//!
//! Image files: big-endian magic `0x00000803`, then `N`, `rows`, `cols` as
//! big-endian `u32`, then `N·rows·cols` unsigned bytes. Label files: magic
//! `0x00000801`, `N`, then `N` bytes. Pixels are scaled by `1/255` on load
//! and rounded back on reserialization, so the round trip is byte-exact.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_LEN: usize = IMAGE_SIDE * IMAGE_SIDE;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => (TRAIN_IMAGES, TRAIN_LABELS),
            Split::Test => (TEST_IMAGES, TEST_LABELS),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Images `(N, 1, rows, cols)` in `[0, 1]` with labels `0..=9`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<u8>,
    split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[1] != 1 {
            return Err(Error::Idx(format!(
                "images must have shape (N, 1, rows, cols), got {:?}",
                images.shape()
            )));
        }
        if images.batch_size() != labels.len() {
            return Err(Error::Idx(format!(
                "{} images but {} labels",
                images.batch_size(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::LabelOutOfRange(bad));
        }
        if images.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Idx("pixel outside [0, 1]".into()));
        }
        Ok(Self { images, labels, split })
    }

    #[cfg(test)]
    pub(crate) fn from_parts_unchecked(images: Tensor, labels: Vec<u8>, split: Split) -> Self {
        Self { images, labels, split }
    }

    /// Reads the standard pair of IDX files for `split` from `dir`.
    pub fn load_dir(dir: &Path, split: Split) -> Result<Self> {
        let (images, labels) = split.file_names();
        let images = load_idx_images(&read(&dir.join(images))?, true)?;
        let labels = load_idx_labels(&read(&dir.join(labels))?)?;
        Self::new(images, labels, split)
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (or all of them when `n` exceeds the size).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// Images as `(N, rows·cols)`.
    pub fn flat_images(&self) -> Tensor {
        let n = self.len();
        let len = self.images.row_len();
        self.images.clone().reshape(&[n, len]).expect("same element count")
    }

    /// Serializes back to `(image file bytes, label file bytes)`.
    pub fn reserialize_idx(&self) -> (Vec<u8>, Vec<u8>) {
        let shape = self.images.shape();
        (
            write_idx_images(&self.images, shape[2], shape[3]),
            write_idx_labels(&self.labels),
        )
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Idx(format!("{}: {e}", path.display())))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Idx("truncated header".into()))
}

/// Parses an IDX image file into `(N, 1, rows, cols)` scaled to `[0, 1]`.
/// With `strict`, anything but 28×28 images is rejected.
pub fn load_idx_images(bytes: &[u8], strict: bool) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Idx(format!("wrong magic for image file: {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if strict && (rows != IMAGE_SIDE || cols != IMAGE_SIDE) {
        return Err(Error::Idx(format!("expected 28x28 images, got {rows}x{cols}")));
    }
    let len = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Idx("image dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() < len {
        return Err(Error::Idx(format!(
            "truncated payload: expected {len} pixel bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > len {
        return Err(Error::Idx(format!("{} trailing bytes after image payload", payload.len() - len)));
    }
    let data = payload.iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// Parses an IDX label file; every label must be in `0..=9`.
pub fn load_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Idx(format!("wrong magic for label file: {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Idx(format!(
            "truncated payload: expected {n} labels, found {}",
            payload.len()
        )));
    }
    if payload.len() > n {
        return Err(Error::Idx(format!("{} trailing bytes after label payload", payload.len() - n)));
    }
    if let Some(&bad) = payload.iter().find(|&&b| b > 9) {
        return Err(Error::Idx(format!("label out of range: {bad}")));
    }
    Ok(payload.to_vec())
}

pub fn write_idx_images(images: &Tensor, rows: usize, cols: usize) -> Vec<u8> {
    let n = images.batch_size();
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for dim in [n, rows, cols] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_file(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn label_magic_in_image_loader() {
        let mut bytes = image_file(0, 28, 28, &[]);
        bytes[..4].copy_from_slice(&LABEL_MAGIC.to_be_bytes());
        let err = load_idx_images(&bytes, true).unwrap_err();
        assert!(err.to_string().contains("wrong magic for image file"), "{err}");
    }

    #[test]
    fn label_byte_identity_and_range() {
        let mut bytes = write_idx_labels(&[7]);
        assert_eq!(load_idx_labels(&bytes).unwrap(), vec![7]);
        *bytes.last_mut().unwrap() = 0x0B;
        let err = load_idx_labels(&bytes).unwrap_err();
        assert!(err.to_string().contains("label out of range"), "{err}");
    }

    #[test]
    fn truncated_payloads() {
        let bytes = image_file(2, 28, 28, &[0; 784 + 10]);
        assert!(load_idx_images(&bytes, true).unwrap_err().to_string().contains("truncated"));
        let mut labels = write_idx_labels(&[1, 2, 3]);
        labels.pop();
        assert!(load_idx_labels(&labels).unwrap_err().to_string().contains("truncated"));
        assert!(load_idx_labels(&[0, 0]).is_err());
    }

    #[test]
    fn strictness_flag_controls_dimensions() {
        let bytes = image_file(1, 2, 3, &[0, 51, 102, 153, 204, 255]);
        assert!(load_idx_images(&bytes, true).is_err());
        let t = load_idx_images(&bytes, false).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 3]);
        assert_eq!(t.data()[5], 1.0);
        assert_eq!(write_idx_images(&t, 2, 3), bytes);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = LabeledDataset::new(Tensor::zeros(&[0, 1, 28, 28]), vec![], Split::Test).unwrap();
        let (images, labels) = ds.reserialize_idx();
        assert_eq!(images.len(), 16);
        assert_eq!(labels.len(), 8);
        assert_eq!(load_idx_images(&images, true).unwrap().shape(), &[0, 1, 28, 28]);
    }

    #[test]
    fn single_zero_image() {
        let ds = LabeledDataset::new(Tensor::zeros(&[1, 1, 28, 28]), vec![0], Split::Train).unwrap();
        let (images, _) = ds.reserialize_idx();
        assert_eq!(images.len(), 16 + 784);
        assert!(images[16..].iter().all(|&b| b == 0));
        assert_eq!(&images[4..8], &1u32.to_be_bytes());
    }

    #[test]
    fn dataset_rejects_mismatched_lengths() {
        assert!(LabeledDataset::new(Tensor::zeros(&[2, 1, 28, 28]), vec![0], Split::Train).is_err());
        assert!(LabeledDataset::new(Tensor::zeros(&[1, 1, 28, 28]), vec![10], Split::Train).is_err());
    }

    proptest! {
        #[test]
        fn idx_round_trip_is_byte_exact(
            n in 0usize..4,
            pixels in proptest::collection::vec(any::<u8>(), 4 * 784),
            labels in proptest::collection::vec(0u8..10, 4),
        ) {
            let image_bytes = image_file(n as u32, 28, 28, &pixels[..n * 784]);
            let label_bytes = write_idx_labels(&labels[..n]);
            let ds = LabeledDataset::new(
                load_idx_images(&image_bytes, true).unwrap(),
                load_idx_labels(&label_bytes).unwrap(),
                Split::Test,
            ).unwrap();
            prop_assert!(ds.images().data().iter().all(|p| (0.0..=1.0).contains(p)));
            let (img, lab) = ds.reserialize_idx();
            prop_assert_eq!(img, image_bytes);
            prop_assert_eq!(lab, label_bytes);
        }
    }
}
