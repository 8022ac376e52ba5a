//! Monte Carlo checks of the bag-loss inequalities.
//!
//! Three experiments are provided: the source-to-bag transfer inequality
//! `ε̄(B,h) − ε̂(S,h) ≤ ξ‖r_h‖₂ + λ′ + R` on random small networks, the
//! concentration step for two-stage bags, and the uniform-label example
//! whose bag loss is `1/(12k)` against an instance loss of `1/12`.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{init_model, ArchConfig, Model};
use crate::bagging::two_stage_members;
use crate::data::Features;
use crate::error::{Error, Result};
use crate::losses::lemma1_terms;

/// Relative slack below which a violation is attributed to rounding.
const ROUNDING: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub p05: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

impl Quantiles {
    /// Nearest-rank quantiles; all NaN for an empty input.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                min: f64::NAN,
                p05: f64::NAN,
                median: f64::NAN,
                p95: f64::NAN,
                max: f64::NAN,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
        Self {
            min: v[0],
            p05: at(0.05),
            median: at(0.5),
            p95: at(0.95),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kind: String,
    pub trials: usize,
    pub violations: usize,
    pub skipped: usize,
    /// Quantiles of rhs − lhs over the evaluated trials.
    pub slack: Quantiles,
    pub params: BTreeMap<String, f64>,
    pub passed: bool,
}

impl BoundReport {
    pub fn summary_line(&self) -> String {
        format!(
            "{}: {} trials, violations: {}, skipped: {}, {}",
            self.kind,
            self.trials,
            self.violations,
            self.skipped,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_unit_interval(labels: &[f64], what: &str) -> Result<()> {
    match labels.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        Some(y) => Err(Error::Contract(format!("{what} label {y} lies outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Both sides of the transfer inequality for a linear head `r` (bias last)
/// over embeddings of aligned samples `S` and `T`, with `bags` partitioning
/// the rows of `T`. Returns `(lhs, rhs)`.
pub fn lemma1_sides(
    src_labels: &[f64],
    src_phi: &Array2<f64>,
    tgt_labels: &[f64],
    tgt_phi: &Array2<f64>,
    bags: &[Vec<usize>],
    r: &[f64],
) -> Result<(f64, f64)> {
    let n = src_labels.len();
    let d = src_phi.ncols();
    if tgt_labels.len() != n || src_phi.nrows() != n || tgt_phi.dim() != (n, d) || r.len() != d + 1 {
        return Err(Error::Shape("aligned samples and a head of width d + 1 are required".into()));
    }
    if bags.is_empty() || bags.iter().any(Vec::is_empty) {
        return Err(Error::Empty("bags must be nonempty".into()));
    }
    let head = |phi: &Array2<f64>| -> Vec<f64> {
        phi.rows()
            .into_iter()
            .map(|row| row.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + r[d])
            .collect()
    };
    let hs = head(src_phi);
    let ht = head(tgt_phi);
    let nf = n as f64;
    let m = bags.len() as f64;

    let bag_loss = bags
        .iter()
        .map(|b| {
            let y = b.iter().map(|&i| tgt_labels[i]).sum::<f64>() / b.len() as f64;
            let h = b.iter().map(|&i| ht[i]).sum::<f64>() / b.len() as f64;
            (y - h).powi(2)
        })
        .sum::<f64>()
        / m;
    let inst_loss = src_labels.iter().zip(&hs).map(|(l, h)| (l - h).powi(2)).sum::<f64>() / nf;

    let mut diff = vec![0.0; d + 1];
    for b in bags {
        let y = b.iter().map(|&i| tgt_labels[i]).sum::<f64>() / b.len() as f64;
        for &i in b {
            for (c, v) in diff.iter_mut().take(d).enumerate() {
                *v += y * tgt_phi[[i, c]] / (b.len() as f64 * m);
            }
        }
        diff[d] += y / m;
    }
    for (i, &l) in src_labels.iter().enumerate() {
        for (c, v) in diff.iter_mut().take(d).enumerate() {
            *v -= l * src_phi[[i, c]] / nf;
        }
        diff[d] -= l / nf;
    }
    let xi = 2.0 * diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (lambda, rr) = lemma1_terms(src_labels, tgt_labels, &hs, &ht)?;
    Ok((bag_loss - inst_loss, xi * r_norm + lambda + rr))
}

/// Rescales the output layer so predictions on `x` span a random
/// sub-interval of `[0, 1]`. The map is affine in the head, so the
/// prediction stays an exact linear function of the embedding.
pub fn fit_head_to_unit_interval<R: Rng>(model: &mut Model, x: &Features, rng: &mut R) -> Result<()> {
    let preds = model.predict(x)?.preds;
    let lo = preds.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = preds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width: f64 = rng.random_range(0.05..=1.0);
    let start: f64 = rng.random_range(0.0..=1.0 - width);
    let scale = if hi > lo { width / (hi - lo) } else { 0.0 };
    let (w, b) = model.head_slots();
    let params = model.params_mut();
    params[w].mapv_inplace(|v| v * scale);
    let bias = params[b][[0, 0]];
    params[b][[0, 0]] = if hi > lo { start + scale * (bias - lo) } else { start };
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lemma1Config {
    pub trials: usize,
    pub max_m: usize,
    pub max_k: usize,
    pub max_dim: usize,
    pub max_width: usize,
    pub seed: u64,
}

impl Default for Lemma1Config {
    fn default() -> Self {
        Self {
            trials: 1000,
            max_m: 50,
            max_k: 8,
            max_dim: 6,
            max_width: 8,
            seed: 0,
        }
    }
}

fn gaussian_rows<R: Rng>(n: usize, d: usize, shift: f64, spread: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(shift, spread).expect("positive spread");
    Array2::from_shape_fn((n, d), |_| normal.sample(rng))
}

/// Random theory-mode trials: a fresh small network, shifted Gaussian
/// samples `S` and `T` of size `mk`, labels in `[0, 1]`, random `k`-bags.
pub fn check_lemma1(cfg: &Lemma1Config) -> Result<BoundReport> {
    if cfg.trials == 0 || cfg.max_m == 0 || cfg.max_k == 0 || cfg.max_dim == 0 || cfg.max_width == 0 {
        return Err(Error::Config("all lemma-check limits must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut slacks = Vec::with_capacity(cfg.trials);
    let mut violations = 0;
    for _ in 0..cfg.trials {
        let m = rng.random_range(1..=cfg.max_m);
        let k = rng.random_range(1..=cfg.max_k);
        let d = rng.random_range(1..=cfg.max_dim);
        let depth = rng.random_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=cfg.max_width)).collect();
        let n = m * k;
        let shift: f64 = rng.random_range(-3.0..3.0);
        let xs = gaussian_rows(n, d, 0.0, 1.0, &mut rng);
        let xt = gaussian_rows(n, d, shift, rng.random_range(0.5..2.0), &mut rng);
        let labeler = init_model(&ArchConfig::dense(d, &[4]), rng.random())?;
        let mut label = |x: &Array2<f64>| -> Result<Vec<f64>> {
            let raw = labeler.predict(&Features::from_numeric(x.clone()))?.preds;
            let noise: f64 = rng.random_range(0.0..0.3);
            Ok(raw
                .iter()
                .map(|v| (1.0 / (1.0 + (-v).exp()) + noise * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0))
                .collect())
        };
        let ls = label(&xs)?;
        let yt = label(&xt)?;
        check_unit_interval(&ls, "source")?;
        check_unit_interval(&yt, "target")?;

        let mut model = init_model(&ArchConfig::dense(d, &hidden), rng.random())?;
        let both = ndarray::concatenate(ndarray::Axis(0), &[xs.view(), xt.view()]).expect("same width");
        fit_head_to_unit_interval(&mut model, &Features::from_numeric(both), &mut rng)?;
        let phi_s = model.predict(&Features::from_numeric(xs))?.embeddings;
        let phi_t = model.predict(&Features::from_numeric(xt))?.embeddings;

        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let bags: Vec<Vec<usize>> = order.chunks(k).map(<[usize]>::to_vec).collect();
        let (lhs, rhs) = lemma1_sides(&ls, &phi_s, &yt, &phi_t, &bags, &model.head_vector())?;
        if lhs > rhs + ROUNDING * rhs.abs().max(1.0) {
            violations += 1;
        }
        slacks.push(rhs - lhs);
    }
    let params = BTreeMap::from([
        ("max_m".to_string(), cfg.max_m as f64),
        ("max_k".to_string(), cfg.max_k as f64),
        ("seed".to_string(), cfg.seed as f64),
    ]);
    Ok(BoundReport {
        kind: "lemma1".into(),
        trials: cfg.trials,
        violations,
        skipped: 0,
        slack: Quantiles::of(&slacks),
        params,
        passed: violations == 0,
    })
}

/// `2·exp(−ε̂·m/(32k²))`.
pub fn theorem1_failure_bound(eps_hat: f64, m: usize, k: usize) -> f64 {
    2.0 * (-eps_hat * m as f64 / (32.0 * (k * k) as f64)).exp()
}

/// Mean over bags of the squared mean residual.
fn bag_loss_of(residuals: &[f64], bags: &[Vec<usize>]) -> f64 {
    bags.iter()
        .map(|b| (b.iter().map(|&i| residuals[i]).sum::<f64>() / b.len() as f64).powi(2))
        .sum::<f64>()
        / bags.len() as f64
}

/// Estimates `Pr[ε̄(B,h) ≤ ε̂(Z,h)/(4k)]` over two-stage bag draws from a
/// fixed sample of `2mk` residuals `y − h(x)` and compares it with the
/// analytic bound plus three binomial standard errors.
pub fn check_theorem1_step(residuals: &[f64], k: usize, resamples: usize, seed: u64) -> Result<BoundReport> {
    if k == 0 || residuals.is_empty() || residuals.len() % (2 * k) != 0 {
        return Err(Error::Config(format!(
            "sample size {} is not a positive multiple of 2k = {}",
            residuals.len(),
            2 * k
        )));
    }
    if resamples == 0 {
        return Err(Error::Config("at least one resample is required".into()));
    }
    let m = residuals.len() / (2 * k);
    let eps_hat = residuals.iter().map(|e| e * e).sum::<f64>() / residuals.len() as f64;
    let mut params = BTreeMap::from([
        ("m".to_string(), m as f64),
        ("k".to_string(), k as f64),
        ("eps_hat".to_string(), eps_hat),
    ]);
    if eps_hat == 0.0 {
        return Ok(BoundReport {
            kind: "theorem1-step".into(),
            trials: resamples,
            violations: 0,
            skipped: resamples,
            slack: Quantiles::of(&[]),
            params,
            passed: true,
        });
    }
    let threshold = eps_hat / (4.0 * k as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut slacks = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let bags = two_stage_members(residuals.len(), k, &mut rng)?;
        let loss = bag_loss_of(residuals, &bags);
        if loss <= threshold {
            failures += 1;
        }
        slacks.push(loss - threshold);
    }
    let p = failures as f64 / resamples as f64;
    let se = (p * (1.0 - p) / resamples as f64).sqrt();
    let bound = theorem1_failure_bound(eps_hat, m, k);
    params.insert("failure_rate".into(), p);
    params.insert("bound".into(), bound);
    params.insert("binomial_se".into(), se);
    Ok(BoundReport {
        kind: "theorem1-step".into(),
        trials: resamples,
        violations: failures,
        skipped: 0,
        slack: Quantiles::of(&slacks),
        params,
        passed: p <= bound + 3.0 * se,
    })
}

/// Bag loss and instance loss of `h ≡ 1/2` on iid uniform labels, over `m`
/// bags of size `k`.
pub fn appendix_c_experiment(k: usize, m: usize, seed: u64) -> Result<(f64, f64)> {
    if k == 0 || m == 0 {
        return Err(Error::Config("k and m must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bag = 0.0;
    let mut inst = 0.0;
    for _ in 0..m {
        let mut s = 0.0;
        for _ in 0..k {
            let e = rng.random::<f64>() - 0.5;
            inst += e * e;
            s += e;
        }
        bag += (s / k as f64).powi(2);
    }
    Ok((bag / m as f64, inst / (m * k) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppendixCRow {
    pub k: usize,
    pub m: usize,
    pub bag_loss: f64,
    pub instance_loss: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppendixCReport {
    pub rows: Vec<AppendixCRow>,
    /// Least-squares slope of ln(instance/bag) against ln k.
    pub slope: f64,
}

pub fn appendix_c_sweep(ks: &[usize], m: usize, seed: u64) -> Result<AppendixCReport> {
    if ks.len() < 2 {
        return Err(Error::Config("need at least two bag sizes for a slope".into()));
    }
    let rows = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let (bag_loss, instance_loss) = appendix_c_experiment(k, m, seed.wrapping_add(i as u64))?;
            Ok(AppendixCRow {
                k,
                m,
                bag_loss,
                instance_loss,
                ratio: instance_loss / bag_loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| (r.k as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.ratio.ln()).collect();
    Ok(AppendixCReport {
        slope: ols_slope(&xs, &ys),
        rows,
    })
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bound_value_by_hand() {
        let b = theorem1_failure_bound(0.1, 3200, 2);
        assert!((b - 2.0 * (-2.5f64).exp()).abs() < 1e-15);
        assert!((b - 0.1642).abs() < 1e-4);
    }

    #[test]
    fn constant_model_two_points() {
        // h ≡ 0.5; S labels (0, 1), T labels (1, 1) in one bag.
        // lhs = (1 − 0.5)² − (0.25 + 0.25)/2 = 0
        // ξ = 2·|1 − 0.5| = 1 on the bias coordinate, ‖r‖ = 0.5
        // rhs = 1·0.5 + |(1 + 1)/2 − (0 + 1)/2| + 0 = 1
        let phi = array![[0.0], [0.0]];
        let (lhs, rhs) = lemma1_sides(&[0.0, 1.0], &phi, &[1.0, 1.0], &phi, &[vec![0, 1]], &[0.0, 0.5]).unwrap();
        assert!(lhs.abs() < 1e-15);
        assert!((rhs - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_samples_give_nonpositive_lhs() {
        let phi = array![[0.3, 1.0], [0.0, 2.0], [1.5, 0.2], [0.7, 0.7]];
        let y = [0.1, 0.9, 0.4, 0.6];
        let (lhs, rhs) = lemma1_sides(&y, &phi, &y, &phi, &[vec![0, 2], vec![1, 3]], &[0.2, -0.1, 0.3]).unwrap();
        assert!(lhs <= 1e-15 && rhs >= 0.0);
    }

    #[test]
    fn small_lemma_run() {
        let rep = check_lemma1(&Lemma1Config {
            trials: 50,
            ..Lemma1Config::default()
        })
        .unwrap();
        assert_eq!(rep.violations, 0);
        assert!(rep.slack.min >= -1e-12);
    }

    #[test]
    fn appendix_c_single_k() {
        let (bag, inst) = appendix_c_experiment(16, 10_000, 3).unwrap();
        assert!((inst - 1.0 / 12.0).abs() / (1.0 / 12.0) < 0.02);
        assert!((bag - 1.0 / 192.0).abs() / (1.0 / 192.0) < 0.05);
    }

    #[test]
    fn degenerate_residuals_are_skipped() {
        let rep = check_theorem1_step(&[0.0; 8], 2, 10, 0).unwrap();
        assert_eq!(rep.skipped, 10);
        assert!(check_theorem1_step(&[0.1; 7], 2, 10, 0).is_err());
    }

    #[test]
    fn quantiles_nearest_rank() {
        let q = Quantiles::of(&[3.0, 1.0, 2.0]);
        assert_eq!((q.min, q.median, q.max), (1.0, 2.0, 3.0));
    }
}
