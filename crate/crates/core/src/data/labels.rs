//! Cityscapes raw label ids, train ids and categories.

use super::DataError;

/// Train id assigned to void pixels.
pub const IGNORE_INDEX: u8 = 19;
/// Evaluated classes.
pub const NUM_EVAL_CLASSES: usize = 19;

pub const CATEGORY_NAMES: [&str; 7] = ["flat", "construction", "object", "nature", "sky", "human", "vehicle"];

const TABLE: &str = include_str!("../../data/cityscapes_labels.csv");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelEntry {
    pub raw_id: u8,
    pub name: String,
    /// `None` for void.
    pub train_id: Option<u8>,
    /// Index into [`CATEGORY_NAMES`]; `None` for the void category.
    pub category: Option<usize>,
}

/// Parses `raw_id,name,train_id,category` rows. `#` starts a comment.
pub fn parse_label_table(text: &str) -> Result<Vec<LabelEntry>, DataError> {
    let mut out: Vec<LabelEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| DataError::Table { line: i + 1, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [raw, name, train, cat] = fields[..] else {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        };
        let raw_id: u8 = raw.parse().map_err(|_| err(format!("bad raw id `{raw}`")))?;
        let train_id = match train {
            "ignore" => None,
            t => {
                let v: u8 = t.parse().map_err(|_| err(format!("bad train id `{t}`")))?;
                if v as usize >= NUM_EVAL_CLASSES {
                    return Err(err(format!("train id {v} out of range")));
                }
                Some(v)
            }
        };
        let category = match cat {
            "void" => None,
            c => Some(
                CATEGORY_NAMES
                    .iter()
                    .position(|n| *n == c)
                    .ok_or_else(|| err(format!("unknown category `{c}`")))?,
            ),
        };
        if train_id.is_some() && category.is_none() {
            return Err(err(format!("evaluated class `{name}` has no category")));
        }
        if out.iter().any(|e| e.raw_id == raw_id) {
            return Err(err(format!("duplicate raw id {raw_id}")));
        }
        if let Some(t) = train_id {
            if let Some(prev) = out.iter().find(|e| e.train_id == Some(t)) {
                return Err(err(format!("train id {t} already used by `{}`", prev.name)));
            }
        }
        out.push(LabelEntry {
            raw_id,
            name: name.to_string(),
            train_id,
            category,
        });
    }
    Ok(out)
}

/// The embedded Cityscapes table.
pub fn cityscapes_table() -> Vec<LabelEntry> {
    parse_label_table(TABLE).expect("embedded label table parses")
}

/// Raw id to train id lookup, total over `0..=255` (unknown ids are void).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMapping {
    lut: [u8; 256],
}

impl LabelMapping {
    pub fn from_table(entries: &[LabelEntry]) -> Self {
        let mut lut = [IGNORE_INDEX; 256];
        for e in entries {
            if let Some(t) = e.train_id {
                lut[e.raw_id as usize] = t;
            }
        }
        Self { lut }
    }

    pub fn cityscapes() -> Self {
        Self::from_table(&cityscapes_table())
    }

    pub fn map(&self, raw: u8) -> u8 {
        self.lut[raw as usize]
    }

    pub fn remap(&self, raw: &[u8]) -> Vec<u8> {
        raw.iter().map(|&r| self.map(r)).collect()
    }

    /// Smallest raw id mapping to `train_id`.
    pub fn raw_for(&self, train_id: u8) -> Option<u8> {
        (0..=255u8).find(|&r| self.lut[r as usize] == train_id && train_id != IGNORE_INDEX)
    }
}

/// Category of each evaluated class (19 entries).
pub fn cityscapes_categories() -> Vec<usize> {
    let mut cats = vec![0; NUM_EVAL_CLASSES];
    for e in cityscapes_table() {
        if let (Some(t), Some(c)) = (e.train_id, e.category) {
            cats[t as usize] = c;
        }
    }
    cats
}

/// Names of the evaluated classes, by train id.
pub fn cityscapes_class_names() -> Vec<String> {
    let mut names = vec![String::new(); NUM_EVAL_CLASSES];
    for e in cityscapes_table() {
        if let Some(t) = e.train_id {
            names[t as usize] = e.name;
        }
    }
    names
}
