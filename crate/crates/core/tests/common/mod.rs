#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use ticketforge::{DatasetSplits, RngState, Split};

/// Two well-separated Gaussian blobs in 2D, labels balanced and interleaved.
pub fn blobs(n: usize, sep: f64, std: f64, rng: &mut RngState) -> Split {
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let c = if y == 0 { -sep } else { sep };
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        xs.push(c + std * a);
        xs.push(c * 0.5 + std * b);
        ys.push(y);
    }
    Split::new(vec![2], xs, ys).unwrap()
}

pub fn blob_splits(seed: u64, n_train: usize, n_val: usize, n_test: usize) -> DatasetSplits {
    let mut rng = RngState::new(seed);
    DatasetSplits {
        train: blobs(n_train, 2.0, 0.6, &mut rng),
        val: blobs(n_val, 2.0, 0.6, &mut rng),
        test: blobs(n_test, 2.0, 0.6, &mut rng),
    }
}

pub fn uniform_vec(n: usize, lo: f64, hi: f64, rng: &mut RngState) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
