//! Cityscapes directory ingestion and export to the same layout.
//!
//! Layout: `<root>/leftImg8bit/<split>/<city>/<stem>_leftImg8bit.png` with
//! labels at `<root>/gtFine/<split>/<city>/<stem>_gtFine_labelIds.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};

use super::labels::{LabelMapping, IGNORE_INDEX, NUM_EVAL_CLASSES};
use super::{DataError, DatasetAdapter, SampleRecord};
use crate::engine::Tensor;

pub const IMAGE_SUFFIX: &str = "_leftImg8bit.png";
pub const LABEL_SUFFIX: &str = "_gtFine_labelIds.png";
/// Overrides the configured dataset root when set.
pub const DATA_ROOT_ENV: &str = "SEGBENCH_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(DataError::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

/// `SEGBENCH_DATA_ROOT` if set, else `configured`.
pub fn resolve_root(configured: &Path) -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map_or_else(|| configured.to_path_buf(), PathBuf::from)
}

#[derive(Debug, Clone)]
struct Pair {
    stem: String,
    image: PathBuf,
    label: PathBuf,
}

/// Lazily decoded Cityscapes split.
#[derive(Debug, Clone)]
pub struct CityscapesDataset {
    pairs: Vec<Pair>,
    resolution: Option<(usize, usize)>,
    mapping: LabelMapping,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |e| DataError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Files under `dir/<city>/` ending in `suffix`, as `(city/stem, path)`, sorted.
fn list_split(dir: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>, DataError> {
    if !dir.is_dir() {
        return Err(DataError::MissingDirectory(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    let mut cities: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    cities.sort();
    for city in cities {
        let name = city.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for entry in fs::read_dir(&city).map_err(io_err(&city))? {
            let path = entry.map_err(io_err(&city))?.path();
            let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            if let Some(stem) = file.strip_suffix(suffix) {
                out.push((format!("{name}/{stem}"), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_cityscapes(
    root: &Path,
    split: Split,
    resolution: Option<(usize, usize)>,
) -> Result<CityscapesDataset, DataError> {
    let images = list_split(&root.join("leftImg8bit").join(split.as_str()), IMAGE_SUFFIX)?;
    let labels = list_split(&root.join("gtFine").join(split.as_str()), LABEL_SUFFIX)?;
    if images.len() != labels.len() {
        let li: Vec<&String> = images.iter().map(|p| &p.0).collect();
        let ll: Vec<&String> = labels.iter().map(|p| &p.0).collect();
        let odd = li
            .iter()
            .find(|s| !ll.contains(s))
            .or_else(|| ll.iter().find(|s| !li.contains(s)))
            .map_or_else(String::new, |s| s.to_string());
        return Err(DataError::PairMismatch(format!(
            "{} images vs {} labels (first unmatched: `{odd}`)",
            images.len(),
            labels.len()
        )));
    }
    let mut pairs = Vec::with_capacity(images.len());
    for ((si, pi), (sl, pl)) in images.into_iter().zip(labels) {
        if si != sl {
            return Err(DataError::PairMismatch(format!("`{si}` has no label (next label is `{sl}`)")));
        }
        pairs.push(Pair {
            stem: si,
            image: pi,
            label: pl,
        });
    }
    Ok(CityscapesDataset {
        pairs,
        resolution,
        mapping: LabelMapping::cityscapes(),
    })
}

fn image_err(path: &Path, e: image::ImageError) -> DataError {
    DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl CityscapesDataset {
    fn decode(&self, pair: &Pair) -> Result<SampleRecord, DataError> {
        let rgb = image::open(&pair.image).map_err(|e| image_err(&pair.image, e))?.to_rgb8();
        let raw = image::open(&pair.label).map_err(|e| image_err(&pair.label, e))?.to_luma8();
        if rgb.dimensions() != raw.dimensions() {
            return Err(DataError::PairMismatch(format!(
                "`{}`: image {:?} vs label {:?}",
                pair.stem,
                rgb.dimensions(),
                raw.dimensions()
            )));
        }
        let (rgb, raw) = match self.resolution {
            Some((h, w)) if (w as u32, h as u32) != rgb.dimensions() => (
                imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle),
                imageops::resize(&raw, w as u32, h as u32, FilterType::Nearest),
            ),
            _ => (rgb, raw),
        };
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut image = Tensor::zeros(&[3, h, w]);
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                image.data_mut()[c * h * w + i] = px.0[c] as f64 / 255.0;
            }
        }
        Ok(SampleRecord {
            image,
            label: self.mapping.remap(raw.as_raw()),
            source_id: pair.stem.clone(),
        })
    }
}

impl DatasetAdapter for CityscapesDataset {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn num_classes(&self) -> usize {
        NUM_EVAL_CLASSES
    }

    fn ignore_index(&self) -> u8 {
        IGNORE_INDEX
    }

    fn resolution(&self) -> Option<(usize, usize)> {
        self.resolution
    }

    fn get(&self, index: usize) -> Result<SampleRecord, DataError> {
        let pair = self.pairs.get(index).ok_or(DataError::IndexOutOfRange {
            index,
            len: self.pairs.len(),
        })?;
        self.decode(pair)
    }
}

/// Writes every record as an 8-bit PNG pair under `root` for `split`, with
/// train ids mapped back to raw ids (void to raw id 0). Returns the number
/// of pairs written.
pub fn export_cityscapes(dataset: &dyn DatasetAdapter, root: &Path, split: Split) -> Result<usize, DataError> {
    let mapping = LabelMapping::cityscapes();
    let mut inverse = [0u8; 256];
    for t in 0..NUM_EVAL_CLASSES as u8 {
        inverse[t as usize] = mapping.raw_for(t).unwrap_or(0);
    }
    if dataset.num_classes() > NUM_EVAL_CLASSES {
        return Err(DataError::InvalidArgument(format!(
            "cannot export {} classes into a {NUM_EVAL_CLASSES}-class layout",
            dataset.num_classes()
        )));
    }
    let img_dir = root.join("leftImg8bit").join(split.as_str()).join("synth");
    let lbl_dir = root.join("gtFine").join(split.as_str()).join("synth");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    fs::create_dir_all(&lbl_dir).map_err(io_err(&lbl_dir))?;
    for i in 0..dataset.len() {
        let r = dataset.get(i)?;
        let (_, h, w) = (r.image.shape()[0], r.image.shape()[1], r.image.shape()[2]);
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let o = y as usize * w + x as usize;
            image::Rgb(std::array::from_fn(|c| {
                (r.image.data()[c * h * w + o] * 255.0).round().clamp(0.0, 255.0) as u8
            }))
        });
        let raw: Vec<u8> = r.label.iter().map(|&t| inverse[t as usize]).collect();
        let gray = GrayImage::from_raw(w as u32, h as u32, raw).expect("label plane matches image size");
        let stem = format!("synth_{i:06}");
        let ip = img_dir.join(format!("{stem}{IMAGE_SUFFIX}"));
        let lp = lbl_dir.join(format!("{stem}{LABEL_SUFFIX}"));
        rgb.save(&ip).map_err(|e| image_err(&ip, e))?;
        gray.save(&lp).map_err(|e| image_err(&lp, e))?;
    }
    Ok(dataset.len())
}
