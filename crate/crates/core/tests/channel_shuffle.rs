//! Channel shuffle: permutation structure and execution round trips.

use proptest::prelude::*;
use segbench_core::engine::{Executor, ModelParams, Tensor};
use segbench_core::graph::{GraphBuilder, LayerSpec};
use segbench_core::zoo::channel_shuffle;

/// Reshape `0..n` into `g` rows, transpose, flatten.
fn reshape_transpose(n: usize, g: usize) -> Vec<usize> {
    let rows: Vec<Vec<usize>> = (0..g).map(|r| (r * n / g..(r + 1) * n / g).collect()).collect();
    (0..n / g).flat_map(|c| rows.iter().map(move |row| row[c])).collect()
}

fn divisor_pairs(max: usize) -> Vec<(usize, usize)> {
    (1..=max)
        .flat_map(|n| (1..=n).filter(move |g| n % g == 0).map(move |g| (n, g)))
        .collect()
}

#[test]
fn worked_examples() {
    assert_eq!(channel_shuffle(6, 3).unwrap(), vec![0, 2, 4, 1, 3, 5]);
    assert_eq!(channel_shuffle(8, 1).unwrap(), (0..8).collect::<Vec<_>>());
    assert!(channel_shuffle(6, 4).is_err());
    assert!(channel_shuffle(6, 0).is_err());
}

#[test]
fn bijective_and_matches_reshape_transpose_up_to_64() {
    for (n, g) in divisor_pairs(64) {
        let p = channel_shuffle(n, g).unwrap();
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>(), "n={n} g={g}");
        assert_eq!(p, reshape_transpose(n, g), "n={n} g={g}");
    }
}

#[test]
fn complementary_shuffles_compose_to_identity() {
    for (n, g) in divisor_pairs(64) {
        let a = channel_shuffle(n, g).unwrap();
        let b = channel_shuffle(n, n / g).unwrap();
        // applying `a` then `b`: output j reads a[b[j]]
        let composed: Vec<usize> = (0..n).map(|j| a[b[j]]).collect();
        assert_eq!(composed, (0..n).collect::<Vec<_>>(), "n={n} g={g}");
    }
}

proptest! {
    #[test]
    fn executed_shuffle_then_inverse_is_bit_exact(
        (n, g) in (1usize..=24).prop_flat_map(|n| {
            let ds: Vec<usize> = (1..=n).filter(|g| n % g == 0).collect();
            (Just(n), proptest::sample::select(ds))
        }),
        h in 1usize..5,
        w in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut b = GraphBuilder::new();
        let x = b.input("x", n);
        let s = b.push("s", LayerSpec::channel_shuffle(g), &[&x]).unwrap();
        let u = b.push("u", LayerSpec::channel_shuffle(n / g), &[&s]).unwrap();
        let graph = b.finish(&[&s, &u]);
        let data: Vec<f64> = (0..2 * n * h * w)
            .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
            .collect();
        let input = Tensor::from_vec(&[2, n, h, w], data);
        let out = Executor::new(&graph).unwrap().infer(&ModelParams::default(), std::slice::from_ref(&input)).unwrap();
        let perm = channel_shuffle(n, g).unwrap();
        let plane = h * w;
        for bi in 0..2 {
            for (j, &src) in perm.iter().enumerate() {
                let o = &out[0].data()[(bi * n + j) * plane..(bi * n + j + 1) * plane];
                let i = &input.data()[(bi * n + src) * plane..(bi * n + src + 1) * plane];
                prop_assert!(o.iter().zip(i).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
        let restored: Vec<u64> = out[1].data().iter().map(|v| v.to_bits()).collect();
        let original: Vec<u64> = input.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(restored, original);
    }
}
