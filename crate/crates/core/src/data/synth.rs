//! Gaussian covariate-shift generators. Both domains are labelled by one
//! fixed randomly initialized network, so p(y|x) is shared.
//!
//! `N(a, b)` parameters are (mean, variance).

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, FeatureSchema, Features};
use crate::autodiff::{init_model, ArchConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian {
    pub const fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean + self.variance.sqrt() * z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CovarianceMode {
    /// Diagonal entries `|draw|` from the configured Gaussian.
    Diagonal,
    /// `A·Aᵀ/dim + D` with `A` standard normal and `D` drawn as in
    /// `Diagonal`; positive definite by construction.
    RandomFull,
    /// The same explicit matrix for both domains; rejected unless PSD.
    Explicit { matrix: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub dim: usize,
    pub source_mean: Gaussian,
    pub target_mean: Gaussian,
    pub covariance_entries: Gaussian,
    pub covariance: CovarianceMode,
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    pub label_seed: u64,
    pub label_hidden: Vec<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            source_mean: Gaussian::new(0.0, 16.0),
            target_mean: Gaussian::new(50.0, 16.0),
            covariance_entries: Gaussian::new(10.0, 16.0),
            covariance: CovarianceMode::Diagonal,
            n_source: 20_000,
            n_target: 20_000,
            n_test: 5_000,
            label_seed: 1_234,
            label_hidden: vec![128, 128],
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("synthetic dim must be at least 1".into()));
        }
        for g in [self.source_mean, self.target_mean, self.covariance_entries] {
            if !(g.variance >= 0.0) || !g.mean.is_finite() {
                return Err(Error::Config(format!("invalid Gaussian {g:?}")));
            }
        }
        Ok(())
    }
}

/// Distribution parameters of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub source: Dataset,
    pub target: Dataset,
    pub test: Dataset,
    pub source_params: DomainParams,
    pub target_params: DomainParams,
    /// Mean perturbation direction, for perturbed generation.
    pub shift_direction: Option<Vec<f64>>,
}

/// Lower Cholesky factor of a symmetric positive semidefinite matrix.
/// Tiny negative pivots within rounding of zero are treated as zero.
pub fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    if a.iter().any(|r| r.len() != n) {
        return Err(Error::Generation("covariance matrix is not square".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if (a[i][j] - a[j][i]).abs() > 1e-9 * (1.0 + a[i][j].abs()) {
                return Err(Error::Generation("covariance matrix is not symmetric".into()));
            }
        }
    }
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[i][p] * l[j][p]).sum();
            if i == j {
                let pivot = a[i][i] - s;
                let tol = 1e-10 * (1.0 + a[i][i].abs());
                if pivot < -tol {
                    return Err(Error::Generation(format!(
                        "covariance matrix is not positive semidefinite (pivot {pivot} at {i})"
                    )));
                }
                l[i][i] = pivot.max(0.0).sqrt();
            } else if l[j][j] > 0.0 {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

fn diagonal(entries: &[f64]) -> Vec<Vec<f64>> {
    let n = entries.len();
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { entries[i] } else { 0.0 }).collect())
        .collect()
}

fn draw_covariance(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = spec.dim;
    match &spec.covariance {
        CovarianceMode::Diagonal => {
            let e: Vec<f64> = (0..d).map(|_| spec.covariance_entries.draw(rng).abs()).collect();
            diagonal(&e)
        }
        CovarianceMode::RandomFull => {
            let a: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
                .collect();
            let mut c = vec![vec![0.0; d]; d];
            for i in 0..d {
                for j in 0..d {
                    c[i][j] = (0..d).map(|p| a[i][p] * a[j][p]).sum::<f64>() / d as f64;
                }
                c[i][i] += spec.covariance_entries.draw(rng).abs();
            }
            c
        }
        CovarianceMode::Explicit { matrix } => matrix.clone(),
    }
}

fn sample_rows(params: &DomainParams, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let d = params.mean.len();
    let is_diag = params
        .covariance
        .iter()
        .enumerate()
        .all(|(i, r)| r.iter().enumerate().all(|(j, &v)| i == j || v == 0.0));
    let mut x = Array2::zeros((n, d));
    if is_diag {
        let sd: Vec<f64> = (0..d).map(|i| params.covariance[i][i].max(0.0).sqrt()).collect();
        for mut row in x.rows_mut() {
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                row[j] = params.mean[j] + sd[j] * z;
            }
        }
    } else {
        let l = cholesky(&params.covariance)?;
        let mut z = vec![0.0; d];
        for mut row in x.rows_mut() {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(rng);
            }
            for i in 0..d {
                row[i] = params.mean[i] + (0..=i).map(|p| l[i][p] * z[p]).sum::<f64>();
            }
        }
    }
    Ok(x)
}

fn label_rows(spec: &SynthSpec, x: Array2<f64>, domain: Domain) -> Result<Dataset> {
    let net = init_model(&ArchConfig::dense(spec.dim, &spec.label_hidden), spec.label_seed)?;
    let features = Features::from_numeric(x);
    let labels = net.predict(&features)?.preds.to_vec();
    Dataset::new(features, labels, domain, FeatureSchema::numeric_only(spec.dim))
}

fn assemble(
    spec: &SynthSpec,
    source_params: DomainParams,
    target_params: DomainParams,
    shift_direction: Option<Vec<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<SynthOutput> {
    let xs = sample_rows(&source_params, spec.n_source, rng)?;
    let xt = sample_rows(&target_params, spec.n_target, rng)?;
    let xtest = sample_rows(&target_params, spec.n_test, rng)?;
    Ok(SynthOutput {
        source: label_rows(spec, xs, Domain::Source)?,
        target: label_rows(spec, xt, Domain::Target)?,
        test: label_rows(spec, xtest, Domain::Target)?,
        source_params,
        target_params,
        shift_direction,
    })
}

/// Source, target-train and target-test sets with independently drawn
/// domain means and covariances.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source_mean: Vec<f64> = (0..spec.dim).map(|_| spec.source_mean.draw(&mut rng)).collect();
    let target_mean: Vec<f64> = (0..spec.dim).map(|_| spec.target_mean.draw(&mut rng)).collect();
    let source_cov = draw_covariance(spec, &mut rng);
    let target_cov = draw_covariance(spec, &mut rng);
    for c in [&source_cov, &target_cov] {
        if c.len() != spec.dim {
            return Err(Error::Generation(format!(
                "covariance is {}×{} for dim {}",
                c.len(),
                c.len(),
                spec.dim
            )));
        }
        cholesky(c)?;
    }
    assemble(
        spec,
        DomainParams {
            mean: source_mean,
            covariance: source_cov,
        },
        DomainParams {
            mean: target_mean,
            covariance: target_cov,
        },
        None,
        &mut rng,
    )
}

/// Controlled-shift generator. Target: mean entries `N(50, 8)`, diagonal
/// covariance `|N(10, 8)|`. Source: `μ' = μ − εΔ` with `Δ` entries `N(50, 8)`,
/// and each diagonal entry increased by `|N(0, 8δ²)|`.
pub fn generate_perturbed(spec: &SynthSpec, epsilon: f64, delta: f64, seed: u64) -> Result<SynthOutput> {
    spec.validate()?;
    if !(epsilon >= 0.0) || !(delta >= 0.0) {
        return Err(Error::Config(format!(
            "perturbations must be nonnegative, got ε={epsilon}, δ={delta}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entry = Gaussian::new(50.0, 8.0);
    let var_entry = Gaussian::new(10.0, 8.0);
    let d = spec.dim;
    let mu: Vec<f64> = (0..d).map(|_| entry.draw(&mut rng)).collect();
    let sigma: Vec<f64> = (0..d).map(|_| var_entry.draw(&mut rng).abs()).collect();
    let shift: Vec<f64> = (0..d).map(|_| entry.draw(&mut rng)).collect();
    let extra: Vec<f64> = (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (8f64.sqrt() * delta * z).abs()
        })
        .collect();

    let source_mean = mu.iter().zip(&shift).map(|(m, s)| m - epsilon * s).collect();
    let source_var: Vec<f64> = sigma.iter().zip(&extra).map(|(s, e)| s + e).collect();
    assemble(
        spec,
        DomainParams {
            mean: source_mean,
            covariance: diagonal(&source_var),
        },
        DomainParams {
            mean: mu,
            covariance: diagonal(&sigma),
        },
        Some(shift),
        &mut rng,
    )
}
