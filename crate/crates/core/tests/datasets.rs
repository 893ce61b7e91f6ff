use std::f64::consts::PI;

use dcd_core::datasets::{encode_idx, load_idx, parse_idx, write_csv, Dataset2D, IdxArray, ImageSet};
use dcd_core::oracles::mean_se;
use dcd_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const N: usize = 200_000;

fn stat(x: &Tensor, f: impl Fn(f64, f64) -> f64) -> (f64, f64) {
    let v: Vec<f64> = (0..x.rows()).map(|r| f(x.row(r)[0], x.row(r)[1])).collect();
    mean_se(&v)
}

fn assert_moment(name: &str, x: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64, want: f64) {
    let (m, se) = stat(x, f);
    assert!((m - want).abs() < 4.0 * se, "{name} {what}: {m} vs {want} (se {se})");
}

/// `E‖(2, 0) + 0.2 z‖` by the trapezoid rule on a 2-D Gaussian grid.
fn eight_gaussians_radius_mean() -> f64 {
    let (n, lim) = (801, 8.0);
    let h = 2.0 * lim / (n - 1) as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let a = -lim + i as f64 * h;
        for j in 0..n {
            let b = -lim + j as f64 * h;
            let w = (-0.5 * (a * a + b * b)).exp() / (2.0 * PI);
            acc += w * ((2.0 + 0.2 * a).powi(2) + (0.2 * b).powi(2)).sqrt();
        }
    }
    acc * h * h
}

#[test]
fn eight_gaussians_radius_exceeds_the_ring() {
    let r = eight_gaussians_radius_mean();
    assert!((r - 2.00999).abs() < 1e-4, "{r}");
}

#[test]
fn generators_match_analytic_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sq = |a: f64, b: f64| a * a + b * b;
    let a = 1.5 * PI;
    let cases: Vec<(Dataset2D, f64)> = vec![
        (Dataset2D::Circles, (1.0 + 4.0) / 2.0 + 2.0 * 0.08 * 0.08),
        (Dataset2D::Rings, (0.25 + 1.0 + 2.25 + 4.0) / 4.0 + 2.0 * 0.05 * 0.05),
        (Dataset2D::EightGaussians, 4.0 + 2.0 * 0.04),
        (Dataset2D::TwoSpirals, 0.5 + 2.0 * 0.05 * 0.05),
        // t = a(1 + 2u): E t² = a² · 13/3
        (Dataset2D::Swissroll, (a * a * 13.0 / 3.0 + 2.0) / 25.0),
        (Dataset2D::Checkerboard, 2.0 * 16.0 / 3.0),
    ];
    for (d, want) in cases {
        let x = d.sample(N, &mut rng);
        assert_eq!(x.shape(), &[N, 2]);
        assert_moment(d.name(), &x, "E‖x‖²", sq, want);
        if d != Dataset2D::Swissroll {
            assert_moment(d.name(), &x, "E x1", |a, _| a, 0.0);
            assert_moment(d.name(), &x, "E x2", |_, b| b, 0.0);
        }
    }
    let x = Dataset2D::EightGaussians.sample(N, &mut rng);
    assert_moment("8gaussians", &x, "E‖x‖", |a, b| sq(a, b).sqrt(), eight_gaussians_radius_mean());
}

#[test]
fn moons_are_centered_with_known_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Dataset2D::Moons.sample(N, &mut rng);
    assert_moment("moons", &x, "E x1", |a, _| a, 0.0);
    assert_moment("moons", &x, "E x2", |_, b| b, 0.0);
    // both arcs: x1 = ±(cos θ − ½), x2 = ±(sin θ − ¼), θ ~ U(0, π)
    let s2 = 0.08 * 0.08;
    let y2 = 0.5 - 0.5 * (2.0 / PI) + 0.0625;
    assert_moment("moons", &x, "E x1²", |a, _| a * a, 0.5 + 0.25 + s2);
    assert_moment("moons", &x, "E x2²", |_, b| b * b, y2 + s2);
}

#[test]
fn checkerboard_fills_even_cells_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Dataset2D::Checkerboard.sample(50_000, &mut rng);
    let mut counts = [[0usize; 8]; 8];
    for r in 0..x.rows() {
        let (a, b) = (x.row(r)[0], x.row(r)[1]);
        assert!((-4.0..4.0).contains(&a) && (-4.0..4.0).contains(&b));
        let (i, j) = ((a + 4.0).floor() as usize, (b + 4.0).floor() as usize);
        assert_eq!((i + j) % 2, 0, "({a}, {b})");
        counts[i][j] += 1;
    }
    for (i, row) in counts.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            if (i + j) % 2 == 0 {
                // 32 live cells, ~1562 points each
                assert!((1300..1850).contains(c), "cell ({i}, {j}) has {c}");
            }
        }
    }
}

#[test]
fn csv_export_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    let x = Dataset2D::Rings.sample(5, &mut ChaCha8Rng::seed_from_u64(4));
    write_csv(&p, &x).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x1,x2");
    assert_eq!(lines.len(), 6);
    let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first, x.row(0));
}

fn images(n: usize, h: usize, w: usize, seed: u8) -> IdxArray {
    IdxArray {
        dims: vec![n, h, w],
        data: (0..n * h * w).map(|k| (k as u8).wrapping_mul(31).wrapping_add(seed)).collect(),
    }
}

#[test]
fn idx_images_scale_to_unit_interval() {
    let arr = IdxArray {
        dims: vec![1, 1, 3],
        data: vec![0, 255, 51],
    };
    let set = ImageSet::from_idx(&parse_idx(&encode_idx(&arr)).unwrap()).unwrap();
    assert_eq!(set.images.data(), &[-1.0, 1.0, 51.0 / 255.0 * 2.0 - 1.0]);
    assert_eq!((set.height, set.width, set.dim()), (1, 3, 3));
}

#[test]
fn idx_preprocessing_adds_the_requested_noise() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("img.idx");
    let arr = images(400, 10, 10, 7);
    std::fs::write(&p, encode_idx(&arr)).unwrap();
    let clean = load_idx(&p, None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let noisy = load_idx(&p, Some(0.3), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(noisy.sigma_pre, 0.3);
    let diff: Vec<f64> = noisy.images.data().iter().zip(clean.images.data()).map(|(a, b)| a - b).collect();
    let sq: Vec<f64> = diff.iter().map(|d| d * d).collect();
    let (v, se) = mean_se(&sq);
    assert!((v - 0.09).abs() < 4.0 * se, "{v}");
}

#[test]
fn malformed_idx_is_rejected() {
    let good = encode_idx(&images(2, 3, 3, 0));
    assert!(parse_idx(&good[..good.len() - 1]).is_err());
    assert!(parse_idx(&good[..10]).is_err());
    assert!(parse_idx(&[0, 0]).is_err());
    let mut bad = good.clone();
    bad[3] = 0x05;
    assert!(parse_idx(&bad).is_err());
    let mut huge = good;
    huge[4..16].copy_from_slice(&[0xff; 12]);
    assert!(parse_idx(&huge).is_err());
}

#[test]
fn truncation_keeps_leading_images() {
    let mut set = ImageSet::from_idx(&images(10, 2, 2, 3)).unwrap();
    let head = set.images.row(0).to_vec();
    set.truncate(4);
    assert_eq!(set.len(), 4);
    assert_eq!(set.images.row(0), &head[..]);
    set.truncate(100);
    assert_eq!(set.len(), 4);
}

proptest! {
    #[test]
    fn idx_round_trips(n in 0usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u8>(), labels in any::<bool>()) {
        let arr = if labels {
            IdxArray { dims: vec![n], data: (0..n).map(|k| k as u8 ^ seed).collect() }
        } else {
            images(n, h, w, seed)
        };
        prop_assert_eq!(parse_idx(&encode_idx(&arr)).unwrap(), arr);
    }

    #[test]
    fn samples_are_reproducible(seed in any::<u64>(), k in 0usize..7) {
        let d = Dataset2D::ALL[k];
        let a = d.sample(20, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = d.sample(20, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&a, &b);
        prop_assert!(a.is_finite());
    }
}
