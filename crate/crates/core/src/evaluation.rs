//! Streaming confusion matrices and IoU metrics.
//!
//! A [`ConfusionMatrix`] is accumulated per worker and merged; merging is an
//! elementwise sum, so the order of updates never matters. [`iou_metrics`]
//! turns a matrix into per-class and per-category IoU.

use thiserror::Error;

use crate::data::labels::{cityscapes_categories, cityscapes_class_names, CATEGORY_NAMES};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("{what} id {id} at pixel {pixel} is outside 0..{num_classes}")]
    ClassOutOfRange {
        what: &'static str,
        id: u8,
        pixel: usize,
        num_classes: usize,
    },
    #[error("prediction has {predictions} pixels, label has {labels}")]
    ShapeMismatch { predictions: usize, labels: usize },
    #[error("cannot merge a {left}-class matrix with a {right}-class matrix")]
    SizeMismatch { left: usize, right: usize },
    #[error("invalid category map: {0}")]
    CategoryMap(String),
    #[error("confusion matrix has no counted pixels")]
    Empty,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `counts[g][p]`: pixels of ground-truth class `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Builds a matrix from square rows.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != k) {
            return Err(EvalError::SizeMismatch { left: k, right: r.len() });
        }
        Ok(Self {
            num_classes: k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        if self.num_classes == 0 {
            return Vec::new();
        }
        self.counts.chunks(self.num_classes).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(k, p)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|g| self.get(g, k)).sum()
    }

    /// Counts every pixel whose label is not `ignore_index`. The matrix is
    /// left unchanged on error.
    pub fn update(&mut self, predictions: &[u8], labels: &[u8], ignore_index: u8) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(EvalError::ShapeMismatch {
                predictions: predictions.len(),
                labels: labels.len(),
            });
        }
        let k = self.num_classes;
        let out_of_range = |what, id, pixel| EvalError::ClassOutOfRange {
            what,
            id,
            pixel,
            num_classes: k,
        };
        for (i, (&p, &l)) in predictions.iter().zip(labels).enumerate() {
            if l == ignore_index {
                continue;
            }
            if l as usize >= k {
                return Err(out_of_range("label", l, i));
            }
            if p as usize >= k {
                return Err(out_of_range("prediction", p, i));
            }
        }
        for (&p, &l) in predictions.iter().zip(labels) {
            if l != ignore_index {
                self.counts[l as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(EvalError::SizeMismatch {
                left: self.num_classes,
                right: other.num_classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Sums rows and columns that share a category.
    pub fn collapse(&self, categories: &CategoryMap) -> Result<ConfusionMatrix> {
        if categories.num_classes() != self.num_classes {
            return Err(EvalError::CategoryMap(format!(
                "map covers {} classes, matrix has {}",
                categories.num_classes(),
                self.num_classes
            )));
        }
        let c = categories.num_categories();
        let mut out = ConfusionMatrix::new(c);
        for g in 0..self.num_classes {
            for p in 0..self.num_classes {
                out.counts[categories.category(g) * c + categories.category(p)] += self.get(g, p);
            }
        }
        Ok(out)
    }

    /// Relabels class `k` as `perm[k]` in both truth and prediction.
    pub fn permuted(&self, perm: &[usize]) -> ConfusionMatrix {
        let k = self.num_classes;
        let mut out = ConfusionMatrix::new(k);
        for g in 0..k {
            for p in 0..k {
                out.counts[perm[g] * k + perm[p]] = self.get(g, p);
            }
        }
        out
    }
}

/// Total map from evaluated class to category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMap {
    class_to_category: Vec<usize>,
    category_names: Vec<String>,
}

impl CategoryMap {
    pub fn new(class_to_category: Vec<usize>, category_names: Vec<String>) -> Result<Self> {
        if let Some(&c) = class_to_category.iter().find(|&&c| c >= category_names.len()) {
            return Err(EvalError::CategoryMap(format!(
                "category {c} outside 0..{}",
                category_names.len()
            )));
        }
        Ok(Self {
            class_to_category,
            category_names,
        })
    }

    /// The 19 Cityscapes classes in their 7 categories.
    pub fn cityscapes() -> Self {
        Self::new(cityscapes_categories(), CATEGORY_NAMES.iter().map(|s| s.to_string()).collect())
            .expect("embedded table is consistent")
    }

    /// Every class is its own category.
    pub fn identity(class_names: &[String]) -> Self {
        Self {
            class_to_category: (0..class_names.len()).collect(),
            category_names: class_names.to_vec(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_to_category.len()
    }

    pub fn num_categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn category(&self, class: usize) -> usize {
        self.class_to_category[class]
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }
}

/// `IoU_k = tp / (row + col - tp)`; `None` when class `k` occurs in neither
/// truth nor prediction.
pub fn class_iou(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.num_classes())
        .map(|k| {
            let tp = cm.get(k, k);
            let union = cm.row_sum(k) + cm.col_sum(k) - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect()
}

/// Mean over present classes; `None` if no class is present.
pub fn mean_iou(ious: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Columns listed first in a report, when the classes exist.
pub const REPORT_LEADING_CLASSES: [&str; 9] = [
    "road",
    "sidewalk",
    "building",
    "traffic sign",
    "sky",
    "person",
    "car",
    "bicycle",
    "truck",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub class_names: Vec<String>,
    pub class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub category_names: Vec<String>,
    pub category_iou: Vec<Option<f64>>,
    pub category_miou: f64,
    /// Instance-level metrics are not computed; kept as empty columns.
    pub class_iiou: Option<f64>,
    pub category_iiou: Option<f64>,
}

pub fn iou_metrics(cm: &ConfusionMatrix, categories: &CategoryMap, class_names: &[String]) -> Result<MetricReport> {
    if class_names.len() != cm.num_classes() {
        return Err(EvalError::SizeMismatch {
            left: cm.num_classes(),
            right: class_names.len(),
        });
    }
    let class_iou = class_iou(cm);
    let miou = mean_iou(&class_iou).ok_or(EvalError::Empty)?;
    let category_iou = self::class_iou(&cm.collapse(categories)?);
    let category_miou = mean_iou(&category_iou).ok_or(EvalError::Empty)?;
    Ok(MetricReport {
        class_names: class_names.to_vec(),
        class_iou,
        miou,
        category_names: categories.category_names().to_vec(),
        category_iou,
        category_miou,
        class_iiou: None,
        category_iiou: None,
    })
}

/// Cityscapes metrics over the 19 evaluated classes.
pub fn cityscapes_metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    iou_metrics(cm, &CategoryMap::cityscapes(), &cityscapes_class_names())
}

fn column_name(name: &str) -> String {
    name.replace([' ', ','], "_")
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl MetricReport {
    /// Class indices in column order: the leading classes that exist, then
    /// the rest by id.
    pub fn class_column_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = REPORT_LEADING_CLASSES
            .iter()
            .filter_map(|c| self.class_names.iter().position(|n| n == c))
            .collect();
        let rest: Vec<usize> = (0..self.class_names.len()).filter(|i| !order.contains(i)).collect();
        order.extend(rest);
        order
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["model".to_string(), "miou".to_string()];
        cols.extend(self.class_column_order().iter().map(|&i| column_name(&self.class_names[i])));
        cols.push("category_miou".into());
        cols.extend(self.category_names.iter().map(|n| format!("cat_{}", column_name(n))));
        cols.push("class_iiou".into());
        cols.push("category_iiou".into());
        cols.join(",")
    }

    pub fn csv_row(&self, model: &str) -> String {
        let mut cells = vec![column_name(model), cell(Some(self.miou))];
        cells.extend(self.class_column_order().iter().map(|&i| cell(self.class_iou[i])));
        cells.push(cell(Some(self.category_miou)));
        cells.extend(self.category_iou.iter().map(|&v| cell(v)));
        cells.push(cell(self.class_iiou));
        cells.push(cell(self.category_iiou));
        cells.join(",")
    }

    pub fn to_csv(&self, model: &str) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row(model))
    }
}
