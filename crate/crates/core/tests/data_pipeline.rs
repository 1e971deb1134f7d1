//! Synthetic and Cityscapes adapters: frozen fixtures, validity and parity.
//!
//! `SEGBENCH_BLESS=1` rewrites the frozen histogram.

use std::path::PathBuf;

use proptest::prelude::*;
use segbench_core::data::synth::SYNTH_IGNORE;
use segbench_core::data::{
    class_counts, class_histogram, export_cityscapes, load_cityscapes, synth_shapes, DatasetAdapter, Split,
    DATA_ROOT_ENV, IGNORE_INDEX, NUM_EVAL_CLASSES,
};
use segbench_core::training::{compute_class_weights, DEFAULT_WEIGHT_CONSTANT};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/synth_seed7_n20_k5_64x128.csv")
}

#[test]
fn frozen_synthetic_histogram() {
    let d = synth_shapes(20, (64, 128), 5, 7).unwrap();
    let counts = class_counts(&d).unwrap();
    let text: String = std::iter::once("class,pixels\n".to_string())
        .chain(counts.iter().enumerate().map(|(k, c)| format!("{k},{c}\n")))
        .collect();
    if std::env::var_os("SEGBENCH_BLESS").is_some() {
        std::fs::write(fixture(), &text).unwrap();
    }
    assert_eq!(std::fs::read_to_string(fixture()).unwrap(), text);
    assert_eq!(counts.iter().sum::<u64>(), 20 * 64 * 128);
    let h = class_histogram(&d).unwrap();
    assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn hundred_images_cover_every_class() {
    let d = synth_shapes(100, (64, 128), 5, 7).unwrap();
    let h = class_histogram(&d).unwrap();
    assert!(h.iter().all(|&p| p > 0.0), "{h:?}");
}

/// Reverses the index order of another adapter.
struct Reversed<'a>(&'a dyn DatasetAdapter);

impl DatasetAdapter for Reversed<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }
    fn ignore_index(&self) -> u8 {
        self.0.ignore_index()
    }
    fn resolution(&self) -> Option<(usize, usize)> {
        self.0.resolution()
    }
    fn get(&self, i: usize) -> Result<segbench_core::data::SampleRecord, segbench_core::data::DataError> {
        self.0.get(self.0.len() - 1 - i)
    }
}

#[test]
fn histogram_ignores_iteration_order() {
    let d = synth_shapes(6, (16, 24), 4, 2).unwrap();
    assert_eq!(class_counts(&d).unwrap(), class_counts(&Reversed(&d)).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_records_validate_and_weights_are_finite(
        seed in any::<u64>(),
        k in 2usize..12,
        h in 4usize..40,
        w in 4usize..40,
    ) {
        let d = synth_shapes(3, (h, w), k, seed).unwrap();
        for i in 0..d.len() {
            let r = d.get(i).unwrap();
            prop_assert!(r.validate(k, SYNTH_IGNORE).is_ok());
            prop_assert_eq!(&r, &d.get(i).unwrap());
        }
        let weights = compute_class_weights(&class_histogram(&d).unwrap(), DEFAULT_WEIGHT_CONSTANT).unwrap();
        prop_assert!(weights.iter().all(|w| w.is_finite() && *w > 0.0));
    }
}

#[test]
fn exported_synthetic_data_reloads_through_the_cityscapes_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let synth = synth_shapes(5, (24, 40), 5, 11).unwrap();
    assert_eq!(export_cityscapes(&synth, dir.path(), Split::Val).unwrap(), 5);
    let city = load_cityscapes(dir.path(), Split::Val, None).unwrap();
    assert_eq!(city.len(), 5);
    assert_eq!(city.num_classes(), NUM_EVAL_CLASSES);
    for i in 0..5 {
        let (a, b) = (synth.get(i).unwrap(), city.get(i).unwrap());
        assert_eq!(a.label, b.label);
        b.validate(NUM_EVAL_CLASSES, IGNORE_INDEX).unwrap();
        let max_diff = a
            .image
            .data()
            .iter()
            .zip(b.image.data())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(max_diff <= 0.5 / 255.0 + 1e-12, "8-bit quantisation error {max_diff}");
    }
    let sc = class_counts(&synth).unwrap();
    let cc = class_counts(&city).unwrap();
    assert_eq!(&cc[..5], &sc[..]);
    assert!(cc[5..].iter().all(|&c| c == 0));
    let resized = load_cityscapes(dir.path(), Split::Val, Some((12, 20))).unwrap();
    let r = resized.get(0).unwrap();
    assert_eq!((r.height(), r.width()), (12, 20));
    r.validate(NUM_EVAL_CLASSES, IGNORE_INDEX).unwrap();
}

#[test]
fn full_cityscapes_split_sizes_when_installed() {
    let Some(root) = std::env::var_os(DATA_ROOT_ENV) else {
        eprintln!("{DATA_ROOT_ENV} not set; skipping");
        return;
    };
    let root = PathBuf::from(root);
    if !root.join("leftImg8bit/train").is_dir() {
        eprintln!("no Cityscapes tree at {}; skipping", root.display());
        return;
    }
    assert_eq!(load_cityscapes(&root, Split::Train, None).unwrap().len(), 2975);
    assert_eq!(load_cityscapes(&root, Split::Val, None).unwrap().len(), 500);
}
