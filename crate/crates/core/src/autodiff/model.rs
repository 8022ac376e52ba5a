//! The fixed regressor family: optional categorical embeddings, ReLU hidden
//! layers, a single linear output node and an optional sigmoid domain head
//! fed from the penultimate layer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{sigmoid, Tape, Var};
use crate::data::Features;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Number of numeric input columns.
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub categorical_cardinalities: Vec<usize>,
    pub embedding_dim: usize,
    pub domain_head: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden: vec![128, 128],
            categorical_cardinalities: Vec::new(),
            embedding_dim: 8,
            domain_head: false,
        }
    }
}

impl ArchConfig {
    pub fn dense(input_dim: usize, hidden: &[usize]) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            ..Self::default()
        }
    }

    pub fn with_domain_head(mut self, on: bool) -> Self {
        self.domain_head = on;
        self
    }

    /// Width of the layer fed into the first dense layer.
    pub fn first_layer_width(&self) -> usize {
        self.input_dim + self.categorical_cardinalities.len() * self.embedding_dim
    }

    /// Width of φ(x).
    pub fn embedding_width(&self) -> usize {
        self.hidden.last().copied().unwrap_or_else(|| self.first_layer_width())
    }

    fn validate(&self) -> Result<()> {
        if self.first_layer_width() == 0 {
            return Err(Error::Config("model input width must be at least 1".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be at least 1".into()));
        }
        if !self.categorical_cardinalities.is_empty() {
            if self.embedding_dim == 0 {
                return Err(Error::Config("embedding_dim must be at least 1".into()));
            }
            if self.categorical_cardinalities.iter().any(|&c| c == 0) {
                return Err(Error::Config("categorical cardinality of 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embeddings: Vec<usize>,
    hidden: Vec<(usize, usize)>,
    head: (usize, usize),
    domain: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: ArchConfig,
    params: Vec<Array2<f64>>,
    layout: Layout,
}

/// Parameter leaves of one model registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Outputs of one differentiable forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `n×1` predictions h(x).
    pub pred: Var,
    /// `n×d` penultimate activations φ(x).
    pub phi: Var,
}

/// Plain (tape-free) forward results.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub preds: Array1<f64>,
    pub embeddings: Array2<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..=limit))
}

/// Builds a model with He-uniform hidden layers and embeddings and
/// Xavier-uniform output and domain heads. Biases start at zero.
pub fn init_model(arch: &ArchConfig, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut push = |p: Array2<f64>| {
        params.push(p);
        params.len() - 1
    };

    let emb_limit = (6.0 / arch.embedding_dim.max(1) as f64).sqrt();
    let embeddings = arch
        .categorical_cardinalities
        .iter()
        .map(|&card| push(uniform(&mut rng, card, arch.embedding_dim, emb_limit)))
        .collect();

    let mut fan_in = arch.first_layer_width();
    let mut hidden = Vec::with_capacity(arch.hidden.len());
    for &width in &arch.hidden {
        let limit = (6.0 / fan_in as f64).sqrt();
        let w = push(uniform(&mut rng, fan_in, width, limit));
        let b = push(Array2::zeros((1, width)));
        hidden.push((w, b));
        fan_in = width;
    }

    let xavier = (6.0 / (fan_in + 1) as f64).sqrt();
    let head = (
        push(uniform(&mut rng, fan_in, 1, xavier)),
        push(Array2::zeros((1, 1))),
    );
    let domain = arch.domain_head.then(|| {
        (
            push(uniform(&mut rng, fan_in, 1, xavier)),
            push(Array2::zeros((1, 1))),
        )
    });

    Ok(Model {
        arch: arch.clone(),
        params,
        layout: Layout {
            embeddings,
            hidden,
            head,
            domain,
        },
    })
}

impl Model {
    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn has_domain_head(&self) -> bool {
        self.layout.domain.is_some()
    }

    /// Slots of the domain head (weights, bias), if present.
    pub fn domain_slots(&self) -> Vec<usize> {
        self.layout
            .domain
            .map(|(w, b)| vec![w, b])
            .unwrap_or_default()
    }

    /// Every slot except the domain head.
    pub fn body_slots(&self) -> Vec<usize> {
        let domain = self.domain_slots();
        (0..self.params.len()).filter(|s| !domain.contains(s)).collect()
    }

    pub fn head_slots(&self) -> (usize, usize) {
        self.layout.head
    }

    /// r_h with the output bias appended, so h(x) = r_h · [φ(x), 1].
    pub fn head_vector(&self) -> Vec<f64> {
        let (w, b) = self.layout.head;
        let mut r: Vec<f64> = self.params[w].iter().copied().collect();
        r.push(self.params[b][[0, 0]]);
        r
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .enumerate()
                .map(|(slot, p)| tape.param(slot, p.clone()))
                .collect(),
        )
    }

    fn check_features(&self, x: &Features) -> Result<()> {
        if x.numeric.ncols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} numeric columns, got {}",
                self.arch.input_dim,
                x.numeric.ncols()
            )));
        }
        if x.categorical.len() != self.arch.categorical_cardinalities.len() {
            return Err(Error::Shape(format!(
                "model expects {} categorical columns, got {}",
                self.arch.categorical_cardinalities.len(),
                x.categorical.len()
            )));
        }
        Ok(())
    }

    /// First-layer input: numeric columns followed by each categorical embedding.
    pub fn input_layer(&self, tape: &mut Tape, pv: &ParamVars, x: &Features) -> Result<Var> {
        self.check_features(x)?;
        let mut parts = vec![tape.constant(x.numeric.clone())];
        for (c, &slot) in self.layout.embeddings.iter().enumerate() {
            parts.push(tape.gather(pv.0[slot], x.categorical[c].clone())?);
        }
        if parts.len() > 1 && x.numeric.ncols() == 0 {
            parts.remove(0);
        }
        tape.concat_cols(parts)
    }

    /// Dense stack applied to an already-built input layer.
    pub fn forward_from_input(&self, tape: &mut Tape, pv: &ParamVars, input: Var) -> Result<Forward> {
        let mut h = input;
        for &(w, b) in &self.layout.hidden {
            let z = tape.matmul(h, pv.0[w])?;
            let z = tape.add_row(z, pv.0[b])?;
            h = tape.relu(z);
        }
        let (w, b) = self.layout.head;
        let out = tape.matmul(h, pv.0[w])?;
        let pred = tape.add_row(out, pv.0[b])?;
        Ok(Forward { pred, phi: h })
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: &Features) -> Result<Forward> {
        let input = self.input_layer(tape, pv, x)?;
        self.forward_from_input(tape, pv, input)
    }

    /// Sigmoid domain probabilities from φ.
    pub fn domain_forward(&self, tape: &mut Tape, pv: &ParamVars, phi: Var) -> Result<Var> {
        let (w, b) = self
            .layout
            .domain
            .ok_or_else(|| Error::Config("model has no domain head".into()))?;
        let z = tape.matmul(phi, pv.0[w])?;
        let z = tape.add_row(z, pv.0[b])?;
        Ok(tape.sigmoid(z))
    }

    fn input_array(&self, x: &Features) -> Result<Array2<f64>> {
        self.check_features(x)?;
        let mut parts = vec![x.numeric.clone()];
        for (c, &slot) in self.layout.embeddings.iter().enumerate() {
            let table = &self.params[slot];
            let ids = &x.categorical[c];
            if let Some(&bad) = ids.iter().find(|&&id| id >= table.nrows()) {
                return Err(Error::Shape(format!("categorical id {bad} out of range")));
            }
            parts.push(table.select(Axis(0), ids));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
    }

    /// Tape-free forward pass.
    pub fn predict(&self, x: &Features) -> Result<Prediction> {
        let mut h = self.input_array(x)?;
        for &(w, b) in &self.layout.hidden {
            let mut z = h.dot(&self.params[w]);
            z += &self.params[b];
            z.mapv_inplace(|v| v.max(0.0));
            h = z;
        }
        let (w, b) = self.layout.head;
        let out = h.dot(&self.params[w]) + &self.params[b];
        Ok(Prediction {
            preds: out.column(0).to_owned(),
            embeddings: h,
        })
    }

    pub fn predict_domain(&self, x: &Features) -> Result<Array1<f64>> {
        let (w, b) = self
            .layout
            .domain
            .ok_or_else(|| Error::Config("model has no domain head".into()))?;
        let phi = self.predict(x)?.embeddings;
        let z = phi.dot(&self.params[w]) + &self.params[b];
        Ok(z.column(0).mapv(sigmoid))
    }
}
