//! Deterministic synthetic shapes: class-0 background plus rectangles and
//! circles of classes `1..K`, each with a class colour and pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, DatasetAdapter, SampleRecord};
use crate::engine::Tensor;

/// Standard deviation of the additive colour noise.
pub const NOISE_STD: f64 = 0.04;
/// Label value that never occurs in synthetic data.
pub const SYNTH_IGNORE: u8 = 255;

#[derive(Debug, Clone)]
pub struct SynthShapes {
    num_images: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
}

/// Colour of class `k`: dark grey background, then hues spread round the
/// colour wheel.
pub fn class_colour(k: usize, num_classes: usize) -> [f64; 3] {
    if k == 0 {
        return [0.15, 0.15, 0.15];
    }
    let h = (k - 1) as f64 / (num_classes - 1) as f64 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.2 + 0.7 * r, 0.2 + 0.7 * g, 0.2 + 0.7 * b]
}

pub fn synth_shapes(
    num_images: usize,
    resolution: (usize, usize),
    num_classes: usize,
    seed: u64,
) -> Result<SynthShapes, DataError> {
    if num_classes < 2 || num_classes > SYNTH_IGNORE as usize {
        return Err(DataError::InvalidArgument(format!(
            "synthetic data needs 2..=255 classes, got {num_classes}"
        )));
    }
    if resolution.0 < 4 || resolution.1 < 4 {
        return Err(DataError::InvalidArgument(format!(
            "resolution {}x{} is too small",
            resolution.0, resolution.1
        )));
    }
    Ok(SynthShapes {
        num_images,
        height: resolution.0,
        width: resolution.1,
        num_classes,
        seed,
    })
}

impl SynthShapes {
    fn generate(&self, index: usize) -> SampleRecord {
        let (h, w, k) = (self.height, self.width, self.num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let mut label = vec![0u8; h * w];
        let shapes = rng.random_range(3..=6);
        for _ in 0..shapes {
            let class = rng.random_range(1..k) as u8;
            let sh = rng.random_range(h / 4..=h / 2).max(2);
            let sw = rng.random_range(w / 4..=w / 2).max(2);
            let top = rng.random_range(0..=h - sh);
            let left = rng.random_range(0..=w - sw);
            let circle = rng.random_bool(0.5);
            let (cy, cx) = (top as f64 + sh as f64 / 2.0, left as f64 + sw as f64 / 2.0);
            let r = sh.min(sw) as f64 / 2.0;
            for y in top..top + sh {
                for x in left..left + sw {
                    let inside = !circle || {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        dy * dy + dx * dx <= r * r
                    };
                    if inside {
                        label[y * w + x] = class;
                    }
                }
            }
        }
        let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
        let mut image = Tensor::zeros(&[3, h, w]);
        let palette: Vec<[f64; 3]> = (0..k).map(|c| class_colour(c, k)).collect();
        for c in 0..3 {
            for (i, &l) in label.iter().enumerate() {
                let v = palette[l as usize][c] + noise.sample(&mut rng);
                image.data_mut()[c * h * w + i] = v.clamp(0.0, 1.0);
            }
        }
        SampleRecord {
            image,
            label,
            source_id: format!("synth-{}-{index:05}", self.seed),
        }
    }
}

impl DatasetAdapter for SynthShapes {
    fn len(&self) -> usize {
        self.num_images
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn ignore_index(&self) -> u8 {
        SYNTH_IGNORE
    }

    fn resolution(&self) -> Option<(usize, usize)> {
        Some((self.height, self.width))
    }

    fn get(&self, index: usize) -> Result<SampleRecord, DataError> {
        if index >= self.num_images {
            return Err(DataError::IndexOutOfRange {
                index,
                len: self.num_images,
            });
        }
        Ok(self.generate(index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let d = synth_shapes(4, (32, 48), 5, 11).unwrap();
        for i in 0..4 {
            let a = d.get(i).unwrap();
            assert_eq!(a, d.get(i).unwrap());
            a.validate(5, SYNTH_IGNORE).unwrap();
            assert!(a.label.iter().any(|&l| l != 0));
        }
        assert_ne!(d.get(0).unwrap().label, d.get(1).unwrap().label);
        let other = synth_shapes(4, (32, 48), 5, 12).unwrap();
        assert_ne!(d.get(0).unwrap().label, other.get(0).unwrap().label);
        assert!(d.get(4).is_err());
    }

    #[test]
    fn colours_are_distinct() {
        for k in 2..=20 {
            let p: Vec<[f64; 3]> = (0..k).map(|c| class_colour(c, k)).collect();
            for a in 0..k {
                for b in a + 1..k {
                    let d: f64 = (0..3).map(|i| (p[a][i] - p[b][i]).abs()).sum();
                    assert!(d > 0.05, "k={k}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn rejects_degenerate_arguments() {
        assert!(synth_shapes(1, (8, 8), 1, 0).is_err());
        assert!(synth_shapes(1, (2, 8), 3, 0).is_err());
    }
}
