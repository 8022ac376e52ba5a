//! Partitioning target training sets into labelled bags.
//!
//! A bag's label is always the arithmetic mean of its members' labels.
//! Instances that do not fill a complete bag are dropped and recorded.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub members: Vec<usize>,
    pub label: f64,
}

impl Bag {
    pub fn from_members(members: Vec<usize>, labels: &[f64]) -> Self {
        let label = members.iter().map(|&i| labels[i]).sum::<f64>() / members.len() as f64;
        Self { members, label }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixedMode {
    /// Equal instance counts per size class.
    Sbb,
    /// Equal bag counts per size class.
    Bbb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    Random { k: usize },
    Correlated { feature: String, k: usize },
    Mixed { sizes: Vec<usize>, mode: MixedMode },
    TwoStage { k: usize },
}

impl Regime {
    /// Short label used in result tables.
    pub fn tag(&self) -> String {
        match self {
            Regime::Random { .. } => "random".into(),
            Regime::Correlated { feature, .. } => format!("correlated:{feature}"),
            Regime::Mixed { mode, .. } => format!("mixed-{}", if *mode == MixedMode::Sbb { "sbb" } else { "bbb" }),
            Regime::TwoStage { .. } => "two-stage".into(),
        }
    }

    /// Bag size for uniform regimes.
    pub fn k(&self) -> Option<usize> {
        match self {
            Regime::Random { k } | Regime::Correlated { k, .. } | Regime::TwoStage { k } => Some(*k),
            Regime::Mixed { .. } => None,
        }
    }
}

/// Builds bags over `dataset` under `regime`.
pub fn build_bags(dataset: &Dataset, regime: &Regime, seed: u64) -> Result<BagCollection> {
    match regime {
        Regime::Random { k } => random_bags(dataset, *k, seed),
        Regime::Correlated { feature, k } => correlated_bags(dataset, feature, *k, seed),
        Regime::Mixed { sizes, mode } => mixed_bags(dataset, sizes, *mode, seed),
        Regime::TwoStage { k } => two_stage_bags(dataset, *k, seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagCollection {
    pub bags: Vec<Bag>,
    pub regime: Regime,
    pub seed: u64,
    /// Dataset rows not assigned to any bag.
    pub dropped: Vec<usize>,
}

impl BagCollection {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn member_count(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    /// Common bag size, if every bag has the same size.
    pub fn uniform_size(&self) -> Option<usize> {
        let k = self.bags.first()?.len();
        self.bags.iter().all(|b| b.len() == k).then_some(k)
    }

    /// Checks disjointness, coverage accounting and label exactness against
    /// the dataset the bags were built from.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let n = dataset.len();
        let mut seen = vec![false; n];
        for (j, bag) in self.bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::Bagging(format!("bag {j} is empty")));
            }
            for &i in &bag.members {
                if i >= n || seen[i] {
                    return Err(Error::Bagging(format!("row {i} repeated or out of range in bag {j}")));
                }
                seen[i] = true;
            }
            let mean = bag.members.iter().map(|&i| dataset.labels[i]).sum::<f64>() / bag.len() as f64;
            if (mean - bag.label).abs() > 1e-12 {
                return Err(Error::Bagging(format!("bag {j} label {} != member mean {mean}", bag.label)));
            }
        }
        for &i in &self.dropped {
            if i >= n || seen[i] {
                return Err(Error::Bagging(format!("dropped row {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Bagging("bags and dropped rows do not cover the dataset".into()));
        }
        Ok(())
    }

    /// Splits off the last `fraction` of bags (at least one, when more than one
    /// bag exists) as a validation collection.
    pub fn split_validation(&self, fraction: f64) -> (BagCollection, BagCollection) {
        let n_val = ((self.bags.len() as f64 * fraction).round() as usize)
            .max(usize::from(self.bags.len() > 1))
            .min(self.bags.len().saturating_sub(1));
        let cut = self.bags.len() - n_val;
        let part = |bags: &[Bag]| BagCollection {
            bags: bags.to_vec(),
            regime: self.regime.clone(),
            seed: self.seed,
            dropped: Vec::new(),
        };
        (part(&self.bags[..cut]), part(&self.bags[cut..]))
    }
}

fn chunk_bags(order: &[usize], k: usize, labels: &[f64], bags: &mut Vec<Bag>, dropped: &mut Vec<usize>) {
    let mut chunks = order.chunks_exact(k);
    for c in &mut chunks {
        bags.push(Bag::from_members(c.to_vec(), labels));
    }
    dropped.extend_from_slice(chunks.remainder());
}

/// Seeded shuffle followed by consecutive `k`-blocks; `n mod k` rows dropped.
pub fn random_bags(dataset: &Dataset, k: usize, seed: u64) -> Result<BagCollection> {
    let n = dataset.len();
    if k == 0 {
        return Err(Error::Bagging("bag size must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Bagging(format!("bag size {k} exceeds {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut bags = Vec::with_capacity(n / k);
    let mut dropped = Vec::new();
    chunk_bags(&order, k, &dataset.labels, &mut bags, &mut dropped);
    Ok(BagCollection {
        bags,
        regime: Regime::Random { k },
        seed,
        dropped,
    })
}

/// Bags that are homogeneous in one feature. Categorical: rows grouped by
/// value (ascending id), shuffled within each group, cut into `k`-blocks with
/// per-group leftovers dropped. Numeric: stable sort by value (ties keep row
/// order), consecutive `k`-blocks.
pub fn correlated_bags(dataset: &Dataset, feature: &str, k: usize, seed: u64) -> Result<BagCollection> {
    if k == 0 {
        return Err(Error::Bagging("bag size must be at least 1".into()));
    }
    let (is_numeric, col) = dataset
        .feature_index(feature)
        .ok_or_else(|| Error::Bagging(format!("unknown feature `{feature}`")))?;
    let n = dataset.len();
    let mut bags = Vec::new();
    let mut dropped = Vec::new();
    if is_numeric {
        let values = dataset.features.numeric.column(col);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        chunk_bags(&order, k, &dataset.labels, &mut bags, &mut dropped);
    } else {
        let ids = &dataset.features.categorical[col];
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &id) in ids.iter().enumerate() {
            groups.entry(id).or_default().push(row);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, mut rows) in groups {
            rows.shuffle(&mut rng);
            chunk_bags(&rows, k, &dataset.labels, &mut bags, &mut dropped);
        }
    }
    Ok(BagCollection {
        bags,
        regime: Regime::Correlated {
            feature: feature.to_owned(),
            k,
        },
        seed,
        dropped,
    })
}

/// Number of bags per size class. Counts are floored independently per class.
pub fn mixed_class_counts(n: usize, sizes: &[usize], mode: MixedMode) -> Vec<usize> {
    match mode {
        MixedMode::Sbb => {
            let per_class = n / sizes.len();
            sizes.iter().map(|&k| per_class / k).collect()
        }
        MixedMode::Bbb => {
            let total: usize = sizes.iter().sum();
            vec![n / total; sizes.len()]
        }
    }
}

pub const DEFAULT_MIXED_SIZES: [usize; 4] = [8, 32, 128, 256];

/// Mixed-size bags: size classes filled in the given order from one seeded
/// shuffle, with class counts from [`mixed_class_counts`].
pub fn mixed_bags(dataset: &Dataset, sizes: &[usize], mode: MixedMode, seed: u64) -> Result<BagCollection> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Bagging("mixed sizes must be nonempty and positive".into()));
    }
    let n = dataset.len();
    let largest = *sizes.iter().max().unwrap();
    if n < largest {
        return Err(Error::Bagging(format!(
            "{n} rows cannot fill one bag of size {largest}"
        )));
    }
    let counts = mixed_class_counts(n, sizes, mode);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut bags = Vec::new();
    let mut cursor = 0;
    for (&k, &count) in sizes.iter().zip(&counts) {
        for _ in 0..count {
            bags.push(Bag::from_members(order[cursor..cursor + k].to_vec(), &dataset.labels));
            cursor += k;
        }
    }
    Ok(BagCollection {
        bags,
        regime: Regime::Mixed {
            sizes: sizes.to_vec(),
            mode,
        },
        seed,
        dropped: order[cursor..].to_vec(),
    })
}

/// Member index sets of two-stage sampling over `n = 2mk` rows: row blocks
/// `[2kj, 2k(j+1))`, each contributing a uniformly random `k`-subset.
pub fn two_stage_members<R: Rng>(n: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n == 0 || n % (2 * k) != 0 {
        return Err(Error::Bagging(format!(
            "two-stage bagging needs a positive multiple of 2k = {} rows, got {n}",
            2 * k
        )));
    }
    let mut block: Vec<usize> = Vec::with_capacity(2 * k);
    Ok((0..n / (2 * k))
        .map(|j| {
            block.clear();
            block.extend(2 * k * j..2 * k * (j + 1));
            let (chosen, _) = block.partial_shuffle(rng, k);
            chosen.to_vec()
        })
        .collect())
}

pub fn two_stage_bags(dataset: &Dataset, k: usize, seed: u64) -> Result<BagCollection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members = two_stage_members(dataset.len(), k, &mut rng)?;
    let mut seen = vec![false; dataset.len()];
    let bags: Vec<Bag> = members
        .into_iter()
        .map(|m| {
            for &i in &m {
                seen[i] = true;
            }
            Bag::from_members(m, &dataset.labels)
        })
        .collect();
    let dropped = (0..dataset.len()).filter(|&i| !seen[i]).collect();
    Ok(BagCollection {
        bags,
        regime: Regime::TwoStage { k },
        seed,
        dropped,
    })
}

#[derive(Serialize, Deserialize)]
struct BagFileMeta {
    #[serde(flatten)]
    regime: Regime,
    seed: u64,
    dropped: Vec<usize>,
    bag_labels: Vec<f64>,
}

/// Writes `bag_id,row_index` rows after a `#`-prefixed JSON header line that
/// carries the regime, seed, dropped rows and the bag-label table.
pub fn write_bags(collection: &BagCollection, path: &Path) -> Result<()> {
    let meta = BagFileMeta {
        regime: collection.regime.clone(),
        seed: collection.seed,
        dropped: collection.dropped.clone(),
        bag_labels: collection.bags.iter().map(|b| b.label).collect(),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# {}", serde_json::to_string(&meta)?)?;
    writeln!(out, "bag_id,row_index")?;
    for (j, bag) in collection.bags.iter().enumerate() {
        for &i in &bag.members {
            writeln!(out, "{j},{i}")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_bags(path: &Path) -> Result<BagCollection> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut meta: Option<BagFileMeta> = None;
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        let load_err = |message: String| Error::Load {
            row: n + 1,
            column: String::new(),
            message,
        };
        if let Some(rest) = line.strip_prefix('#') {
            meta = Some(serde_json::from_str(rest.trim()).map_err(|e| load_err(e.to_string()))?);
            continue;
        }
        if line.trim().is_empty() || line.starts_with("bag_id") {
            continue;
        }
        let (b, r) = line
            .split_once(',')
            .ok_or_else(|| load_err(format!("malformed row `{line}`")))?;
        let b: usize = b.trim().parse().map_err(|_| load_err(format!("bad bag id `{b}`")))?;
        let r: usize = r.trim().parse().map_err(|_| load_err(format!("bad row index `{r}`")))?;
        if b >= members.len() {
            members.resize(b + 1, Vec::new());
        }
        members[b].push(r);
    }
    let meta = meta.ok_or_else(|| Error::Load {
        row: 1,
        column: String::new(),
        message: "missing `#` metadata header".into(),
    })?;
    if meta.bag_labels.len() != members.len() {
        return Err(Error::Bagging(format!(
            "{} bag labels for {} bags",
            meta.bag_labels.len(),
            members.len()
        )));
    }
    Ok(BagCollection {
        bags: members
            .into_iter()
            .zip(meta.bag_labels)
            .map(|(members, label)| Bag { members, label })
            .collect(),
        regime: meta.regime,
        seed: meta.seed,
        dropped: meta.dropped,
    })
}
