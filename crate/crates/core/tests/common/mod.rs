#![allow(dead_code)]

pub mod checks;

use psformer::attention::TransParams;
use psformer::pointcloud::GroupedSet;
use psformer::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Rows of a row-major `rows × cols` slice.
pub fn rows(data: &[f64], cols: usize) -> Vec<Vec<f64>> {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn random_trans(rng: &mut ChaCha8Rng, d_in: usize, d: usize) -> TransParams<Tensor> {
    TransParams::zeros(d_in, d).map(|t| uniform(rng, t.shape(), 0.8))
}

pub fn random_groups(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize) -> GroupedSet {
    GroupedSet {
        centroid_indices: (0..n).collect(),
        centroid_features: uniform(rng, &[n, d], 2.0),
        neighbor_features: uniform(rng, &[n, k, d], 2.0),
        neighbor_rel_coords: vec![[0.0; 3]; n * k],
        valid_counts: vec![k; n],
    }
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
