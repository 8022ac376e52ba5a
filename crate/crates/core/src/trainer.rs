//! Mini-batch training, evaluation, grid search and seeded multi-trial runs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{init_model, ArchConfig, Model, OptimizerKind, OptimizerState, Tape};
use crate::bagging::{build_bags, BagCollection, Regime};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{build_domain_loss, build_loss, BagIndex, Batch, LossSpec, Method};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub model: u64,
    pub bagging: u64,
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model: 0,
            bagging: 1,
            shuffle: 2,
        }
    }
}

impl Seeds {
    /// Seeds for trial `t` of a multi-run: every stream shifted by `t`.
    pub fn for_trial(self, t: u64) -> Self {
        Self {
            model: self.model.wrapping_add(t),
            bagging: self.bagging.wrapping_add(t),
            shuffle: self.shuffle.wrapping_add(t),
        }
    }
}

/// How many source rows accompany the target bags of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceRows {
    /// One source row per bag.
    PerBag,
    /// One source row per target member.
    PerMember,
}

impl SourceRows {
    pub fn for_method(method: Method) -> Option<Self> {
        match method {
            Method::BaggedTarget => None,
            Method::BlWfa => Some(SourceRows::PerBag),
            _ => Some(SourceRows::PerMember),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub loss: LossSpec,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub bags_per_batch: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Overrides the method's source sampling rule.
    pub source_rows: Option<SourceRows>,
    /// Stop once the epoch loss has not improved for this many epochs.
    pub early_stop_patience: Option<usize>,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::default(),
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            epochs: 30,
            bags_per_batch: 8,
            hidden: vec![128, 128],
            embedding_dim: 8,
            source_rows: None,
            early_stop_patience: None,
            seeds: Seeds::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            loss: LossSpec::for_method(method),
            ..Self::default()
        }
    }

    pub fn method(&self) -> Method {
        self.loss.method
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.bags_per_batch == 0 {
            return Err(Error::Config("bags_per_batch must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.loss.validate()
    }

    fn source_rows(&self) -> Option<SourceRows> {
        if self.method() == Method::BaggedTarget {
            return None;
        }
        self.source_rows.or(SourceRows::for_method(self.method()))
    }

    pub fn arch(&self, schema_dim: usize, cardinalities: Vec<usize>) -> ArchConfig {
        ArchConfig {
            input_dim: schema_dim,
            hidden: self.hidden.clone(),
            categorical_cardinalities: cardinalities,
            embedding_dim: self.embedding_dim,
            domain_head: self.method().is_dann(),
        }
    }
}

/// Row indices of one mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub bag_ids: Vec<usize>,
    pub source_rows: Vec<usize>,
}

impl BatchPlan {
    pub fn materialize(&self, source: &Dataset, target: &Dataset, bags: &BagCollection) -> Batch {
        let mut rows = Vec::new();
        let mut members = Vec::with_capacity(self.bag_ids.len());
        let mut labels = Vec::with_capacity(self.bag_ids.len());
        for &b in &self.bag_ids {
            let bag = &bags.bags[b];
            let start = rows.len();
            rows.extend_from_slice(&bag.members);
            members.push((start..rows.len()).collect());
            labels.push(bag.label);
        }
        Batch {
            source: source.features.select(&self.source_rows),
            source_labels: self.source_rows.iter().map(|&i| source.labels[i]).collect(),
            target: target.features.select(&rows),
            bags: BagIndex { members, labels },
        }
    }
}

/// Seeded batch planner. Bags are reshuffled every epoch; source rows are
/// drawn without replacement from a running permutation that is reshuffled
/// when exhausted.
#[derive(Clone, Debug)]
pub struct MinibatchStream {
    n_source: usize,
    bag_sizes: Vec<usize>,
    bags_per_batch: usize,
    rule: Option<SourceRows>,
    rng: ChaCha8Rng,
    pool: Vec<usize>,
    cursor: usize,
}

pub fn make_minibatches(
    source: &Dataset,
    bags: &BagCollection,
    rule: Option<SourceRows>,
    bags_per_batch: usize,
    seed: u64,
) -> Result<MinibatchStream> {
    if bags.is_empty() {
        return Err(Error::Empty("no target bags to train on".into()));
    }
    if bags_per_batch == 0 {
        return Err(Error::Config("bags_per_batch must be at least 1".into()));
    }
    if rule.is_some() && source.is_empty() {
        return Err(Error::Empty("method needs source rows but the source set is empty".into()));
    }
    Ok(MinibatchStream {
        n_source: source.len(),
        bag_sizes: bags.bags.iter().map(|b| b.len()).collect(),
        bags_per_batch,
        rule,
        rng: ChaCha8Rng::seed_from_u64(seed),
        pool: Vec::new(),
        cursor: 0,
    })
}

impl MinibatchStream {
    fn draw_source(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor == self.pool.len() {
                self.pool = (0..self.n_source).collect();
                self.pool.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (count - out.len()).min(self.pool.len() - self.cursor);
            out.extend_from_slice(&self.pool[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }

    /// Plans for one pass over every bag.
    pub fn epoch(&mut self) -> Vec<BatchPlan> {
        let mut order: Vec<usize> = (0..self.bag_sizes.len()).collect();
        order.shuffle(&mut self.rng);
        let chunks: Vec<Vec<usize>> = order.chunks(self.bags_per_batch).map(<[usize]>::to_vec).collect();
        chunks
            .into_iter()
            .map(|bag_ids| {
                let count = match self.rule {
                    None => 0,
                    Some(SourceRows::PerBag) => bag_ids.len(),
                    Some(SourceRows::PerMember) => bag_ids.iter().map(|&b| self.bag_sizes[b]).sum(),
                };
                let source_rows = self.draw_source(count);
                BatchPlan { bag_ids, source_rows }
            })
            .collect()
    }
}

/// Model and loss history of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

fn step_error(epoch: usize, step: usize, value: f64, last_good: Option<f64>) -> Error {
    Error::NonFinite(format!(
        "loss became {value} at epoch {epoch}, step {step}; last finite loss {}",
        last_good.map_or_else(|| "none".to_string(), |v| v.to_string())
    ))
}

/// One two-phase adversarial update. Phase one moves every parameter except
/// the domain head along the task loss minus the weighted domain loss; phase
/// two re-runs the forward pass and moves only the domain head down the
/// domain loss. Returns the phase-one objective value.
pub fn dann_step(
    model: &mut Model,
    batch: &Batch,
    spec: &LossSpec,
    body_opt: &mut OptimizerState,
    domain_opt: &mut OptimizerState,
) -> Result<f64> {
    if !model.has_domain_head() {
        return Err(Error::Config("adversarial step needs a model with a domain head".into()));
    }
    let mut t = Tape::new();
    let pv = model.register(&mut t);
    let eval = build_loss(&mut t, model, &pv, batch, spec)?;
    let value = t.scalar(eval.total);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("adversarial task loss is {value}")));
    }
    let grads = t.backward(eval.total)?;
    body_opt.step(model, &grads)?;

    let mut t = Tape::new();
    let pv = model.register(&mut t);
    let ld = build_domain_loss(&mut t, model, &pv, batch)?;
    let grads = t.backward(ld)?;
    domain_opt.step(model, &grads)?;
    Ok(value)
}

/// Trains a fresh model on the source set and the bagged target set.
pub fn train(source: &Dataset, target: &Dataset, bags: &BagCollection, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = cfg.arch(target.dim(), target.schema.cardinalities());
    let mut model = init_model(&arch, cfg.seeds.model)?;
    let method = cfg.method();
    let mut stream = make_minibatches(source, bags, cfg.source_rows(), cfg.bags_per_batch, cfg.seeds.shuffle)?;

    let (mut body_opt, mut domain_opt) = if method.is_dann() {
        (
            OptimizerState::for_slots(cfg.optimizer, cfg.lr, &model, model.body_slots()),
            Some(OptimizerState::for_slots(cfg.optimizer, cfg.lr, &model, model.domain_slots())),
        )
    } else {
        (OptimizerState::new(cfg.optimizer, cfg.lr, &model), None)
    };

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let plans = stream.epoch();
        let mut sum = 0.0;
        for (step, plan) in plans.iter().enumerate() {
            let batch = plan.materialize(source, target, bags);
            let value = match domain_opt.as_mut() {
                Some(dopt) => dann_step(&mut model, &batch, &cfg.loss, &mut body_opt, dopt)
                    .map_err(|_| step_error(epoch, step, f64::NAN, step_losses.last().copied()))?,
                None => {
                    let mut t = Tape::new();
                    let pv = model.register(&mut t);
                    let eval = build_loss(&mut t, &model, &pv, &batch, &cfg.loss)?;
                    let value = t.scalar(eval.total);
                    if !value.is_finite() {
                        return Err(step_error(epoch, step, value, step_losses.last().copied()));
                    }
                    let grads = t.backward(eval.total)?;
                    body_opt
                        .step(&mut model, &grads)
                        .map_err(|_| step_error(epoch, step, value, step_losses.last().copied()))?;
                    value
                }
            };
            step_losses.push(value);
            sum += value;
        }
        let mean = sum / plans.len() as f64;
        log::debug!("{method} epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
        if let Some(patience) = cfg.early_stop_patience {
            if mean < best {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
        step_losses,
    })
}

/// Plain instance MSE of the model on a labelled set.
pub fn evaluate(model: &Model, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let preds = model.predict(&test.features)?.preds;
    Ok(preds
        .iter()
        .zip(&test.labels)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / test.len() as f64)
}

/// Bag-level MSE: mean over bags of (mean member prediction − bag label)².
pub fn evaluate_bags(model: &Model, target: &Dataset, bags: &BagCollection) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::Empty("no bags to evaluate".into()));
    }
    let rows: Vec<usize> = bags.bags.iter().flat_map(|b| b.members.iter().copied()).collect();
    let preds = model.predict(&target.features.select(&rows))?.preds;
    let mut offset = 0;
    let mut total = 0.0;
    for bag in &bags.bags {
        let mean = preds.slice(ndarray::s![offset..offset + bag.len()]).sum() / bag.len() as f64;
        total += (mean - bag.label).powi(2);
        offset += bag.len();
    }
    Ok(total / bags.len() as f64)
}

/// A held-out test split that counts how often it is read.
#[derive(Debug)]
pub struct HeldOut {
    data: Dataset,
    reads: AtomicUsize,
}

impl HeldOut {
    pub fn new(data: Dataset) -> Self {
        Self {
            data,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn read(&self) -> &Dataset {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.data
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

/// Source set, target training set and the held-out target test set.
#[derive(Debug)]
pub struct Experiment {
    pub source: Dataset,
    pub target: Dataset,
    pub test: HeldOut,
}

impl Experiment {
    pub fn new(source: Dataset, target: Dataset, test: Dataset) -> Self {
        Self {
            source,
            target,
            test: HeldOut::new(test),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub regime: String,
    pub k: Option<usize>,
    pub epoch_losses: Vec<f64>,
    pub test_mse: f64,
    pub wall_ms: u64,
    pub config: TrainConfig,
}

/// Bags the target set with the bagging seed, trains, and scores on the test
/// split.
pub fn run_once(exp: &Experiment, regime: &Regime, cfg: &TrainConfig) -> Result<RunResult> {
    let start = Instant::now();
    let bags = build_bags(&exp.target, regime, cfg.seeds.bagging)?;
    let out = train(&exp.source, &exp.target, &bags, cfg)?;
    let test_mse = evaluate(&out.model, exp.test.read())?;
    Ok(RunResult {
        method: cfg.method(),
        regime: regime.tag(),
        k: regime.k(),
        epoch_losses: out.epoch_losses,
        test_mse,
        wall_ms: start.elapsed().as_millis() as u64,
        config: cfg.clone(),
    })
}

/// Runs `f(0..n)` across the current worker pool, returning results in index
/// order.
pub fn fan_out<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Runs `f` on a pool of `jobs` workers (0 means one per core).
pub fn with_jobs<R, F>(jobs: usize, f: F) -> Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(pool.install(f))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        Ok(f())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lrs: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Fraction of bags held out for selection.
    pub validation_fraction: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lrs: vec![1e-4, 1e-3, 1e-2, 1e-1],
            lambdas: vec![1e-2, 1e-1, 1.0, 10.0],
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lr: f64,
    pub lambda: Option<f64>,
    /// Bag-level MSE on the validation bags; infinite when training diverged.
    pub validation_mse: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: TrainConfig,
}

/// Exhaustive sweep over learning rate × method weight, selecting on the
/// bag-level MSE of held-out training bags. Methods without a tunable weight
/// sweep the learning rate only.
pub fn grid_search(exp: &Experiment, regime: &Regime, base: &TrainConfig, grid: &GridSpec) -> Result<GridResult> {
    if grid.lrs.is_empty() || grid.lambdas.is_empty() {
        return Err(Error::Config("grids must be nonempty".into()));
    }
    let bags = build_bags(&exp.target, regime, base.seeds.bagging)?;
    let (train_bags, val_bags) = bags.split_validation(grid.validation_fraction);
    let lambdas: Vec<Option<f64>> = if base.method().has_lambda() {
        grid.lambdas.iter().map(|&l| Some(l)).collect()
    } else {
        vec![None]
    };
    let points: Vec<(f64, Option<f64>)> = grid
        .lrs
        .iter()
        .flat_map(|&lr| lambdas.iter().map(move |&l| (lr, l)))
        .collect();
    let configs: Vec<TrainConfig> = points
        .iter()
        .map(|&(lr, lambda)| {
            let mut c = base.clone();
            c.lr = lr;
            if let Some(l) = lambda {
                c.loss.set_lambda(l);
            }
            c
        })
        .collect();
    let scores = fan_out(configs.len(), |i| -> Result<f64> {
        match train(&exp.source, &exp.target, &train_bags, &configs[i]) {
            Ok(out) => {
                let v = evaluate_bags(&out.model, &exp.target, &val_bags)?;
                Ok(if v.is_finite() { v } else { f64::INFINITY })
            }
            Err(Error::NonFinite(msg)) => {
                log::warn!("grid point lr={} diverged: {msg}", configs[i].lr);
                Ok(f64::INFINITY)
            }
            Err(e) => Err(e),
        }
    });
    let scores: Vec<f64> = scores.into_iter().collect::<Result<_>>()?;
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("nonempty grid");
    let rows = points
        .iter()
        .zip(&scores)
        .enumerate()
        .map(|(i, (&(lr, lambda), &validation_mse))| GridRow {
            lr,
            lambda,
            validation_mse,
            best: i == best,
        })
        .collect();
    Ok(GridResult {
        rows,
        best: configs[best].clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRun {
    pub runs: Vec<RunResult>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

/// `n_trials` independent runs; trial `t` re-bags the target set and
/// re-initializes the model with every seed shifted by `t`.
pub fn multi_run(exp: &Experiment, regime: &Regime, cfg: &TrainConfig, n_trials: usize) -> Result<MultiRun> {
    if n_trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    let runs = fan_out(n_trials, |t| {
        let mut c = cfg.clone();
        c.seeds = cfg.seeds.for_trial(t as u64);
        run_once(exp, regime, &c)
    });
    let runs: Vec<RunResult> = runs.into_iter().collect::<Result<_>>()?;
    let mses: Vec<f64> = runs.iter().map(|r| r.test_mse).collect();
    let (mean, std) = mean_std(&mses);
    Ok(MultiRun { runs, mean, std })
}

const RESULT_HEADER: [&str; 12] = [
    "method",
    "k",
    "regime",
    "lr",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda_d",
    "seed_model",
    "seed_bagging",
    "seed_shuffle",
    "test_mse",
];

/// One CSV row per run. Wall times are only included when asked for, so
/// the default output is reproducible byte for byte.
pub fn write_results_csv<W: Write>(out: W, runs: &[RunResult], with_wall_ms: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = RESULT_HEADER.to_vec();
    if with_wall_ms {
        header.push("wall_ms");
    }
    w.write_record(&header)?;
    for r in runs {
        let c = &r.config;
        let mut rec = vec![
            r.method.tag().to_string(),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.regime.clone(),
            c.lr.to_string(),
            c.loss.lambda1.to_string(),
            c.loss.lambda2.to_string(),
            c.loss.lambda3.to_string(),
            c.loss.lambda_d.to_string(),
            c.seeds.model.to_string(),
            c.seeds.bagging.to_string(),
            c.seeds.shuffle.to_string(),
            r.test_mse.to_string(),
        ];
        if with_wall_ms {
            rec.push(r.wall_ms.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_results_csv(path: &Path, runs: &[RunResult], with_wall_ms: bool) -> Result<()> {
    write_results_csv(std::fs::File::create(path)?, runs, with_wall_ms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub k: Option<usize>,
    pub regime: String,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
    pub display: String,
}

/// Mean ± std of test MSE per (method, k, regime), in sorted key order.
pub fn summarize(runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, Option<usize>, String), Vec<f64>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.method, r.k, r.regime.clone()))
            .or_default()
            .push(r.test_mse);
    }
    groups
        .into_iter()
        .map(|((method, k, regime), v)| {
            let (mean, std) = mean_std(&v);
            SummaryRow {
                method,
                k,
                regime,
                trials: v.len(),
                mean,
                std,
                display: format_mean_std(mean, std),
            }
        })
        .collect()
}

pub fn summary_json(runs: &[RunResult]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&summarize(runs))?)
}

/// Wall times, kept apart from the reproducible result files.
pub fn write_timing_log<W: Write>(mut out: W, runs: &[RunResult]) -> Result<()> {
    for r in runs {
        writeln!(
            out,
            "{} k={} seeds={}/{}/{} wall_ms={}",
            r.method,
            r.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
            r.config.seeds.model,
            r.config.seeds.bagging,
            r.config.seeds.shuffle,
            r.wall_ms
        )?;
    }
    Ok(())
}
