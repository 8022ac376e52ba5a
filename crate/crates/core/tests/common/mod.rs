#![allow(dead_code)]

pub mod grad_suite;

use llpcs::autodiff::{init_model, ArchConfig, Model};
use llpcs::data::Features;
use llpcs::losses::{BagIndex, Batch};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

/// Random features with `cards.len()` categorical columns.
pub fn features(rng: &mut ChaCha8Rng, rows: usize, dim: usize, cards: &[usize]) -> Features {
    Features {
        numeric: uniform_matrix(rng, rows, dim, -1.0, 1.0),
        categorical: cards
            .iter()
            .map(|&c| (0..rows).map(|_| rng.random_range(0..c)).collect())
            .collect(),
    }
}

/// A batch with `m` target bags of size `k` and `n_src` source rows.
pub fn batch(rng: &mut ChaCha8Rng, dim: usize, cards: &[usize], m: usize, k: usize, n_src: usize) -> Batch {
    let source = features(rng, n_src, dim, cards);
    let target = features(rng, m * k, dim, cards);
    let source_labels = (0..n_src).map(|_| rng.random_range(-1.0..1.0)).collect();
    let members: Vec<Vec<usize>> = (0..m).map(|j| (j * k..(j + 1) * k).collect()).collect();
    let labels = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    Batch {
        source,
        source_labels,
        target,
        bags: BagIndex { members, labels },
    }
}

/// A small model whose biases are jittered away from zero, so no ReLU sits
/// exactly on its kink (a row with every unit dead would otherwise feed an
/// exact 0 into the next layer).
pub fn model(dim: usize, hidden: &[usize], cards: &[usize], domain_head: bool, seed: u64) -> Model {
    let arch = ArchConfig {
        input_dim: dim,
        hidden: hidden.to_vec(),
        categorical_cardinalities: cards.to_vec(),
        embedding_dim: 3,
        domain_head,
    };
    let mut m = init_model(&arch, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for p in m.params_mut() {
        p.mapv_inplace(|v| v + r.random_range(-0.1..0.1));
    }
    m
}
