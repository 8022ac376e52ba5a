use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use llpcs::bagging::Regime;
use llpcs::data::{
    generate_perturbed, generate_synthetic, load_csv, split_train_test, standardize_labels, CsvSchema, Domain, SynthSpec,
};
use llpcs::losses::Method;
use llpcs::trainer::{Experiment, GridSpec, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Reads TOML, or JSON when the file ends in `.json`.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: SynthSpec,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        perturb: Option<Perturbation>,
    },
    Csv {
        source: PathBuf,
        target: PathBuf,
        /// Pre-split target test file; when absent the target file is split.
        #[serde(default)]
        test: Option<PathBuf>,
        schema: PathBuf,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: SynthSpec::default(),
            seed: 0,
            perturb: None,
        }
    }
}

/// Per-method replacements for the shared training settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodOverride {
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub standardize_labels: bool,
    pub bagging: Regime,
    /// Bag sizes to iterate over for uniform regimes; replaces the regime's own k.
    pub ks: Vec<usize>,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub train: TrainConfig,
    pub grid: GridSpec,
    pub overrides: BTreeMap<String, MethodOverride>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            standardize_labels: false,
            bagging: Regime::Random { k: 8 },
            ks: Vec::new(),
            methods: vec![Method::BlWfa],
            trials: 10,
            train: TrainConfig::default(),
            grid: GridSpec::default(),
            overrides: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_config(path)?;
        if let DataSource::Csv { source, target, test, schema, .. } = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [source, target, schema].into_iter().chain(test.as_mut()) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("no methods configured");
        }
        for key in self.overrides.keys() {
            key.parse::<Method>()?;
        }
        if let DataSource::Csv { source, target, test, schema, .. } = &self.data {
            for p in [source, target, schema].into_iter().chain(test.as_ref()) {
                if !p.exists() {
                    bail!("referenced file {} does not exist", p.display());
                }
            }
        }
        if !self.ks.is_empty() && matches!(self.bagging, Regime::Mixed { .. }) {
            bail!("`ks` cannot be combined with mixed bag sizes");
        }
        self.train.validate()?;
        Ok(())
    }

    /// Replaces every named seed.
    pub fn override_seed(&mut self, seed: u64) {
        if let DataSource::Synthetic { seed: s, .. } = &mut self.data {
            *s = seed;
        }
        if let DataSource::Csv { split_seed, .. } = &mut self.data {
            *split_seed = seed;
        }
        self.train.seeds.model = seed;
        self.train.seeds.bagging = seed;
        self.train.seeds.shuffle = seed;
    }

    /// The configured regimes, one per entry of `ks` when given.
    pub fn regimes(&self) -> Vec<Regime> {
        if self.ks.is_empty() {
            return vec![self.bagging.clone()];
        }
        self.ks
            .iter()
            .map(|&k| match &self.bagging {
                Regime::Random { .. } => Regime::Random { k },
                Regime::Correlated { feature, .. } => Regime::Correlated {
                    feature: feature.clone(),
                    k,
                },
                Regime::TwoStage { .. } => Regime::TwoStage { k },
                Regime::Mixed { .. } => unreachable!("rejected by validate"),
            })
            .collect()
    }

    pub fn train_config(&self, method: Method) -> TrainConfig {
        let mut c = self.train.clone();
        c.loss.method = method;
        if let Some(o) = self.overrides.get(method.tag()) {
            if let Some(lr) = o.lr {
                c.lr = lr;
            }
            if let Some(l) = o.lambda {
                c.loss.set_lambda(l);
            }
            if let Some(e) = o.epochs {
                c.epochs = e;
            }
        }
        c
    }

    pub fn load_experiment(&self) -> Result<Experiment> {
        let (mut source, mut target, mut test) = match &self.data {
            DataSource::Synthetic { spec, seed, perturb } => {
                let out = match perturb {
                    None => generate_synthetic(spec, *seed)?,
                    Some(p) => generate_perturbed(spec, p.epsilon, p.delta, *seed)?,
                };
                (out.source, out.target, out.test)
            }
            DataSource::Csv {
                source,
                target,
                test,
                schema,
                test_fraction,
                split_seed,
            } => {
                let schema: CsvSchema = read_config(schema)?;
                let src = load_csv(source, &schema, Domain::Source)?;
                let tgt = load_csv(target, &schema, Domain::Target)?;
                match test {
                    Some(t) => (src, tgt, load_csv(t, &schema, Domain::Target)?),
                    None => {
                        let (train, test) = split_train_test(&tgt, *test_fraction, *split_seed)?;
                        (src, train, test)
                    }
                }
            }
        };
        if self.standardize_labels {
            let s = standardize_labels(&mut source, &mut target, &mut test)?;
            log::info!("labels standardized with mean {} and std {}", s.mean, s.std);
        }
        Ok(Experiment::new(source, target, test))
    }
}
