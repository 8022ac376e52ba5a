mod common;

use approx::assert_abs_diff_eq;
use llpcs::autodiff::Tape;
use llpcs::losses::{
    bag_mse, bagcsi, broadcast_labels, build_loss, instance_mse, kappa, projected_labels, pseudo_labels, psi_sq,
    xi_sq, BagIndex, LossSpec, Method,
};
use proptest::prelude::*;
use rand::Rng;

/// Plain-float reference for the bag loss.
fn ref_bag_mse(preds: &[f64], bags: &BagIndex) -> f64 {
    bags.members
        .iter()
        .zip(&bags.labels)
        .map(|(m, y)| {
            let mean = m.iter().map(|&i| preds[i]).sum::<f64>() / m.len() as f64;
            (mean - y).powi(2)
        })
        .sum::<f64>()
        / bags.len() as f64
}

fn ref_instance_mse(preds: &[f64], labels: &[f64]) -> f64 {
    preds.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / preds.len() as f64
}

/// Reference ξ² built from row embeddings with a trailing 1 appended.
fn ref_xi_sq(phi_s: &[Vec<f64>], ls: &[f64], phi_t: &[Vec<f64>], bags: &BagIndex) -> f64 {
    let d = phi_s[0].len() + 1;
    let aug = |r: &Vec<f64>, j: usize| if j < r.len() { r[j] } else { 1.0 };
    let mut diff = vec![0.0; d];
    for (members, y) in bags.members.iter().zip(&bags.labels) {
        for j in 0..d {
            let mean = members.iter().map(|&i| aug(&phi_t[i], j)).sum::<f64>() / members.len() as f64;
            diff[j] += y * mean / bags.len() as f64;
        }
    }
    for (row, l) in phi_s.iter().zip(ls) {
        for (j, dj) in diff.iter_mut().enumerate() {
            *dj -= l * aug(row, j) / ls.len() as f64;
        }
    }
    4.0 * diff.iter().map(|v| v * v).sum::<f64>()
}

fn rows(a: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[test]
fn xi_matches_reference() {
    for seed in 0..5 {
        let mut rng = common::rng(seed);
        let b = common::batch(&mut rng, 3, &[2], 4, 3, 7);
        let model = common::model(3, &[5, 4], &[2], false, seed);
        let ps = model.predict(&b.source).unwrap().embeddings;
        let pt = model.predict(&b.target).unwrap().embeddings;
        let want = ref_xi_sq(&rows(&ps), &b.source_labels, &rows(&pt), &b.bags);

        let mut t = Tape::new();
        let s = t.constant(ps);
        let g = t.constant(pt);
        let xi = xi_sq(&mut t, s, &b.source_labels, g, &b.bags).unwrap();
        assert_abs_diff_eq!(t.scalar(xi), want, epsilon = 1e-12);
    }
}

#[test]
fn broadcast_psi_is_half_of_xi() {
    let mut rng = common::rng(3);
    let b = common::batch(&mut rng, 3, &[], 5, 4, 9);
    let model = common::model(3, &[6], &[], false, 3);
    let mut t = Tape::new();
    let pv = model.register(&mut t);
    let s = model.forward(&mut t, &pv, &b.source).unwrap();
    let g = model.forward(&mut t, &pv, &b.target).unwrap();
    let xi = xi_sq(&mut t, s.phi, &b.source_labels, g.phi, &b.bags).unwrap();
    let pseudo = broadcast_labels(&b.bags, b.bags.member_count());
    let psi = psi_sq(&mut t, s.phi, &b.source_labels, g.phi, &b.bags, &pseudo).unwrap();
    assert_abs_diff_eq!(t.scalar(psi).sqrt(), t.scalar(xi).sqrt() / 2.0, epsilon = 1e-12);
}

#[test]
fn adaptive_kappa_rescales_alignment_to_bag_loss() {
    let mut rng = common::rng(4);
    let b = common::batch(&mut rng, 3, &[], 4, 2, 6);
    let model = common::model(3, &[4], &[], false, 4);
    let spec = LossSpec {
        lambda1: 0.0,
        lambda2: 0.0,
        ..LossSpec::for_method(Method::BlWfa)
    };
    let mut t = Tape::new();
    let pv = model.register(&mut t);
    let eval = build_loss(&mut t, &model, &pv, &b, &spec).unwrap();
    let xi = eval.parts["xi_sq"];
    assert_abs_diff_eq!(eval.kappa * xi, eval.bag_loss, epsilon = 1e-12);
    assert_abs_diff_eq!(t.scalar(eval.total), eval.bag_loss, epsilon = 1e-12);
    assert_eq!(kappa(2.0, 0.0), 0.0);
}

#[test]
fn af_equals_lr_for_a_linear_model() {
    let mut rng = common::rng(8);
    let b = common::batch(&mut rng, 4, &[3], 3, 5, 6);
    let model = common::model(4, &[], &[3], false, 8);
    let value = |method| {
        let mut t = Tape::new();
        let pv = model.register(&mut t);
        let e = build_loss(&mut t, &model, &pv, &b, &LossSpec::for_method(method)).unwrap();
        t.scalar(e.total)
    };
    assert_abs_diff_eq!(value(Method::Af), value(Method::Lr), epsilon = 1e-12);
}

#[test]
fn reduction_identities_on_random_inputs() {
    let mut rng = common::rng(21);
    for _ in 0..50 {
        let k = rng.random_range(1..6);
        let m = rng.random_range(1..6);
        let preds: Vec<f64> = (0..m * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<f64> = (0..m * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let bags = BagIndex {
            members: (0..m).map(|j| (j * k..(j + 1) * k).collect()).collect(),
            labels: (0..m)
                .map(|j| labels[j * k..(j + 1) * k].iter().sum::<f64>() / k as f64)
                .collect(),
        };
        let eps_bar = ref_bag_mse(&preds, &bags);
        let eps_hat = ref_instance_mse(&preds, &labels);

        let mut t = Tape::new();
        let p = t.column(&preds);
        let bag = bag_mse(&mut t, p, &bags).unwrap();
        let inst = instance_mse(&mut t, p, &labels).unwrap();
        let align = t.constant_scalar(rng.random_range(0.0..5.0));
        let at = |t: &mut Tape, l1, l2, l3| {
            let spec = LossSpec {
                lambda1: l1,
                lambda2: l2,
                lambda3: l3,
                ..LossSpec::default()
            };
            let v = bagcsi(t, bag, inst, align, &spec, 1.7).unwrap();
            t.scalar(v)
        };
        assert_abs_diff_eq!(at(&mut t, 1.0, 0.0, 0.0), eps_bar, epsilon = 1e-12);
        assert_abs_diff_eq!(at(&mut t, 0.0, 1.0, 0.0), eps_hat, epsilon = 1e-12);
        assert_abs_diff_eq!(at(&mut t, 1.0, 1.0, 0.0), eps_bar + eps_hat, epsilon = 1e-12);
        if k == 1 {
            assert_abs_diff_eq!(eps_bar, eps_hat, epsilon = 1e-12);
        }
    }
}

#[test]
fn projected_labels_respect_bag_means() {
    let bags = BagIndex {
        members: vec![vec![0, 2], vec![1, 3, 4]],
        labels: vec![1.0, -2.0],
    };
    let preds = [0.0, 1.0, 4.0, 2.0, 3.0];
    let out = projected_labels(&bags, &preds).unwrap();
    assert_eq!(out, vec![-1.0, -3.0, 3.0, -2.0, -1.0]);
}

/// Every point of a `step`-grid over `[c − 1, c + 1]^{k−1}` whose last
/// coordinate is fixed by the mean constraint.
fn best_grid_distance(preds: &[f64], y: f64, step: f64) -> f64 {
    let k = preds.len();
    let n = (2.0 / step).round() as i64;
    let mut best = f64::INFINITY;
    let mut idx = vec![-n; k - 1];
    loop {
        let mut v: Vec<f64> = idx.iter().zip(preds).map(|(&i, p)| p + y - mean(preds) + i as f64 * step).collect();
        v.push(k as f64 * y - v.iter().sum::<f64>());
        let d: f64 = v.iter().zip(preds).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        best = best.min(d);
        let mut j = 0;
        loop {
            if j == idx.len() {
                return best;
            }
            idx[j] += 1;
            if idx[j] <= n {
                break;
            }
            idx[j] = -n;
            j += 1;
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn projection_beats_brute_force_grid() {
    let mut rng = common::rng(99);
    for _ in 0..40 {
        let k = rng.random_range(2..=3);
        let preds: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = rng.random_range(-1.0..1.0);
        let out = pseudo_labels(&preds, y).unwrap();
        let d: f64 = out.iter().zip(&preds).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(d <= best_grid_distance(&preds, y, 1e-2) + 1e-12);
        assert!((mean(&out) - y).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn projection_is_idempotent(preds in prop::collection::vec(-1e3f64..1e3, 1..12), y in -1e3f64..1e3) {
        let once = pseudo_labels(&preds, y).unwrap();
        let twice = pseudo_labels(&once, y).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        prop_assert!((mean(&once) - y).abs() <= 1e-9);
    }

    #[test]
    fn bag_loss_never_exceeds_instance_loss(
        preds in prop::collection::vec(-5f64..5.0, 12),
        labels in prop::collection::vec(-5f64..5.0, 12),
        k in prop::sample::select(vec![1usize, 2, 3, 4, 6, 12]),
    ) {
        let bags = BagIndex {
            members: (0..12 / k).map(|j| (j * k..(j + 1) * k).collect()).collect(),
            labels: (0..12 / k).map(|j| mean(&labels[j * k..(j + 1) * k])).collect(),
        };
        prop_assert!(ref_bag_mse(&preds, &bags) <= ref_instance_mse(&preds, &labels) + 1e-12);
    }
}
