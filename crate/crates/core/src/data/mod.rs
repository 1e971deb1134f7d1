//! Dataset adapters and batch assembly.

pub mod cityscapes;
pub mod labels;
pub mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::engine::Tensor;

pub use cityscapes::{export_cityscapes, load_cityscapes, resolve_root, CityscapesDataset, Split, DATA_ROOT_ENV};
pub use labels::{LabelMapping, IGNORE_INDEX, NUM_EVAL_CLASSES};
pub use synth::{synth_shapes, SynthShapes};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),
    #[error("image/label mismatch: {0}")]
    PairMismatch(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("cannot decode {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("label table line {line}: {message}")]
    Table { line: usize, message: String },
    #[error("record `{source_id}`: {message}")]
    InvalidRecord { source_id: String, message: String },
    #[error("index {index} out of range for dataset of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("dataset has no labelled pixels")]
    AllIgnored,
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    InvalidArgument(String),
}

/// One image with its per-pixel train ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `(3, H, W)` with values in `[0, 1]`.
    pub image: Tensor,
    /// `H * W` row-major class ids.
    pub label: Vec<u8>,
    pub source_id: String,
}

impl SampleRecord {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self, num_classes: usize, ignore_index: u8) -> Result<(), DataError> {
        let bad = |message: String| DataError::InvalidRecord {
            source_id: self.source_id.clone(),
            message,
        };
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(bad(format!("image shape {s:?} is not (3, H, W)")));
        }
        if self.label.len() != s[1] * s[2] {
            return Err(bad(format!("label has {} pixels, image has {}x{}", self.label.len(), s[1], s[2])));
        }
        if let Some(v) = self.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(bad(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(l) = self.label.iter().find(|&&l| l != ignore_index && l as usize >= num_classes) {
            return Err(bad(format!("label {l} outside 0..{num_classes}")));
        }
        Ok(())
    }
}

/// Read-only random access to labelled images. Implementations are
/// immutable after construction so concurrent readers are safe.
pub trait DatasetAdapter: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Evaluated classes (labels are `0..num_classes` or the ignore id).
    fn num_classes(&self) -> usize;

    fn ignore_index(&self) -> u8;

    /// Fixed output resolution, if the adapter resizes.
    fn resolution(&self) -> Option<(usize, usize)>;

    fn get(&self, index: usize) -> Result<SampleRecord, DataError>;
}

/// Per-pixel label counts over non-ignored pixels.
pub fn class_counts(dataset: &dyn DatasetAdapter) -> Result<Vec<u64>, DataError> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    let k = dataset.num_classes();
    let ignore = dataset.ignore_index();
    let mut counts = vec![0u64; k];
    for i in 0..dataset.len() {
        let r = dataset.get(i)?;
        for &l in &r.label {
            if l != ignore {
                *counts.get_mut(l as usize).ok_or_else(|| DataError::InvalidRecord {
                    source_id: r.source_id.clone(),
                    message: format!("label {l} outside 0..{k}"),
                })? += 1;
            }
        }
    }
    Ok(counts)
}

/// Pixel frequency of each class over non-ignored pixels; sums to 1.
pub fn class_histogram(dataset: &dyn DatasetAdapter) -> Result<Vec<f64>, DataError> {
    let counts = class_counts(dataset)?;
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(DataError::AllIgnored);
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Per-channel mean subtraction applied when batching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
}

impl Default for Normalization {
    /// ImageNet RGB means.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
        }
    }
}

/// Stacked network inputs and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(N, 3, H, W)`, normalised.
    pub images: Tensor,
    /// `N * H * W` class ids.
    pub labels: Vec<u8>,
}

pub fn make_batch(dataset: &dyn DatasetAdapter, indices: &[usize], norm: &Normalization) -> Result<Batch, DataError> {
    let records = indices.iter().map(|&i| dataset.get(i)).collect::<Result<Vec<_>, _>>()?;
    stack_records(&records, norm)
}

pub fn stack_records(records: &[SampleRecord], norm: &Normalization) -> Result<Batch, DataError> {
    let first = records.first().ok_or(DataError::Empty)?;
    let (h, w) = (first.height(), first.width());
    let mut images = Tensor::zeros(&[records.len(), 3, h, w]);
    let mut labels = Vec::with_capacity(records.len() * h * w);
    for (b, r) in records.iter().enumerate() {
        if (r.height(), r.width()) != (h, w) {
            return Err(DataError::InvalidRecord {
                source_id: r.source_id.clone(),
                message: format!("size {}x{} differs from batch size {h}x{w}", r.height(), r.width()),
            });
        }
        let plane = h * w;
        for c in 0..3 {
            let dst = &mut images.data_mut()[(b * 3 + c) * plane..(b * 3 + c + 1) * plane];
            for (d, s) in dst.iter_mut().zip(&r.image.data()[c * plane..(c + 1) * plane]) {
                *d = s - norm.mean[c];
            }
        }
        labels.extend_from_slice(&r.label);
    }
    Ok(Batch { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<SampleRecord>, u8);

    impl DatasetAdapter for Fixed {
        fn len(&self) -> usize {
            self.0.len()
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn ignore_index(&self) -> u8 {
            self.1
        }
        fn resolution(&self) -> Option<(usize, usize)> {
            None
        }
        fn get(&self, i: usize) -> Result<SampleRecord, DataError> {
            Ok(self.0[i].clone())
        }
    }

    fn rec(label: Vec<u8>) -> SampleRecord {
        SampleRecord {
            image: Tensor::filled(&[3, 2, 2], 0.5),
            label,
            source_id: "t".into(),
        }
    }

    #[test]
    fn half_and_half_histogram() {
        let d = Fixed(vec![rec(vec![0, 0, 1, 1])], 9);
        assert_eq!(class_histogram(&d).unwrap(), vec![0.5, 0.5]);
        let ignored = Fixed(vec![rec(vec![9; 4])], 9);
        assert_eq!(class_histogram(&ignored), Err(DataError::AllIgnored));
        assert_eq!(class_histogram(&Fixed(vec![], 9)), Err(DataError::Empty));
    }

    #[test]
    fn record_validation() {
        rec(vec![0, 1, 9, 1]).validate(2, 9).unwrap();
        assert!(rec(vec![0, 2, 0, 0]).validate(2, 9).is_err());
        assert!(rec(vec![0, 1]).validate(2, 9).is_err());
        let mut r = rec(vec![0; 4]);
        r.image.data_mut()[0] = 1.5;
        assert!(r.validate(2, 9).is_err());
    }

    #[test]
    fn batching_subtracts_means_and_concatenates_labels() {
        let d = Fixed(vec![rec(vec![0, 1, 1, 0]), rec(vec![1, 1, 1, 1])], 9);
        let b = make_batch(&d, &[1, 0], &Normalization { mean: [0.5, 0.25, 0.0] }).unwrap();
        assert_eq!(b.images.shape(), &[2, 3, 2, 2]);
        assert_eq!(b.labels, vec![1, 1, 1, 1, 0, 1, 1, 0]);
        assert_eq!(&b.images.data()[..12], &[0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25, 0.5, 0.5, 0.5, 0.5]);
    }
}
