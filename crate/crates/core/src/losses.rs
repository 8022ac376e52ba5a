//! Scalar objectives over one mini-batch, recorded on a [`Tape`] so every
//! term is differentiable end to end.
//!
//! Where a term uses `r_hᵀφ(x)`, φ is extended with a constant-1 coordinate so
//! the output bias is part of `r_h`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Model, ParamVars, Tape, Var};
use crate::data::Features;
use crate::error::{Error, Result};

/// Clamp applied to domain probabilities before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "BL-WFA")]
    BlWfa,
    #[serde(rename = "PL-WFA")]
    PlWfa,
    #[serde(rename = "AF")]
    Af,
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "AF-DANN")]
    AfDann,
    #[serde(rename = "LR-DANN")]
    LrDann,
    #[serde(rename = "DMFA")]
    Dmfa,
    #[serde(rename = "Bagged-Target")]
    BaggedTarget,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::BaggedTarget,
        Method::Af,
        Method::Lr,
        Method::AfDann,
        Method::LrDann,
        Method::Dmfa,
        Method::PlWfa,
        Method::BlWfa,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::BlWfa => "BL-WFA",
            Method::PlWfa => "PL-WFA",
            Method::Af => "AF",
            Method::Lr => "LR",
            Method::AfDann => "AF-DANN",
            Method::LrDann => "LR-DANN",
            Method::Dmfa => "DMFA",
            Method::BaggedTarget => "Bagged-Target",
        }
    }

    pub fn is_dann(self) -> bool {
        matches!(self, Method::AfDann | Method::LrDann)
    }

    pub fn uses_source(self) -> bool {
        self != Method::BaggedTarget
    }

    /// Whether the method has a tunable alignment/adversarial weight.
    pub fn has_lambda(self) -> bool {
        matches!(
            self,
            Method::BlWfa | Method::PlWfa | Method::AfDann | Method::LrDann | Method::Dmfa
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.tag().to_ascii_uppercase() == norm)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub method: Method,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Weight of the DANN domain loss or the DMFA mean-alignment penalty.
    pub lambda_d: f64,
    /// Weight of the prediction-energy gap R(h, S, T); 0 disables it.
    pub w_r: f64,
    /// Rescale the weighted term by κ = (bag loss)/(term), recomputed per
    /// batch with no gradient through κ.
    pub adaptive_kappa: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            method: Method::BlWfa,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda_d: 1.0,
            w_r: 0.0,
            adaptive_kappa: true,
        }
    }
}

impl LossSpec {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda_d", self.lambda_d),
            ("w_r", self.w_r),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {w}")));
            }
        }
        Ok(())
    }

    /// The method's tunable weight: λ₃ for the alignment methods, λ_D otherwise.
    pub fn lambda(&self) -> f64 {
        match self.method {
            Method::BlWfa | Method::PlWfa => self.lambda3,
            _ => self.lambda_d,
        }
    }

    pub fn set_lambda(&mut self, value: f64) {
        match self.method {
            Method::BlWfa | Method::PlWfa => self.lambda3 = value,
            _ => self.lambda_d = value,
        }
    }
}

/// Bags over the target rows of a batch (local row indices).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BagIndex {
    pub members: Vec<Vec<usize>>,
    pub labels: Vec<f64>,
}

impl BagIndex {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member_count(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    fn check(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Empty("no bags".into()));
        }
        if self.members.len() != self.labels.len() {
            return Err(Error::Shape("bag labels and members differ in length".into()));
        }
        Ok(())
    }
}

/// One mini-batch: labelled source rows and whole target bags.
#[derive(Clone, Debug)]
pub struct Batch {
    pub source: Features,
    pub source_labels: Vec<f64>,
    pub target: Features,
    pub bags: BagIndex,
}

/// Mean squared error between an `n×1` prediction block and labels.
pub fn instance_mse(t: &mut Tape, pred: Var, labels: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Empty("instance loss over zero rows".into()));
    }
    if t.value(pred).dim() != (labels.len(), 1) {
        return Err(Error::Shape(format!(
            "{:?} predictions for {} labels",
            t.value(pred).dim(),
            labels.len()
        )));
    }
    let y = t.column(labels);
    let d = t.sub(pred, y)?;
    let sq = t.square(d);
    t.mean(sq)
}

/// Mean over bags of (mean member prediction − bag label)².
pub fn bag_mse(t: &mut Tape, pred: Var, bags: &BagIndex) -> Result<Var> {
    bags.check()?;
    let means = t.segment_mean(pred, bags.members.clone())?;
    let y = t.column(&bags.labels);
    let d = t.sub(means, y)?;
    let sq = t.square(d);
    t.mean(sq)
}

/// `wᵀ·[φ, 1]` as a `1×(d+1)` row.
fn weighted_embedding_sum(t: &mut Tape, phi: Var, weights: &[f64]) -> Result<Var> {
    let aug = t.append_ones(phi);
    let w = t.column(weights);
    let wt = t.transpose(w);
    t.matmul(wt, aug)
}

/// `(1/n_s)·Σ ℓ_i [φ(z_i), 1]`.
fn source_moment(t: &mut Tape, phi_src: Var, src_labels: &[f64]) -> Result<Var> {
    if src_labels.is_empty() {
        return Err(Error::Empty("no source rows".into()));
    }
    let n = src_labels.len() as f64;
    let w: Vec<f64> = src_labels.iter().map(|l| l / n).collect();
    weighted_embedding_sum(t, phi_src, &w)
}

/// ξ²: four times the squared distance between the bag-label weighted mean
/// target embedding `(1/m)Σ_j y_j·mean_{x∈B_j}φ(x)` and the label-weighted mean
/// source embedding `(1/n_s)Σ_i ℓ_i φ(z_i)`.
pub fn xi_sq(t: &mut Tape, phi_src: Var, src_labels: &[f64], phi_tgt: Var, bags: &BagIndex) -> Result<Var> {
    bags.check()?;
    let aug = t.append_ones(phi_tgt);
    let bag_means = t.segment_mean(aug, bags.members.clone())?;
    let m = bags.len() as f64;
    let w: Vec<f64> = bags.labels.iter().map(|y| y / m).collect();
    let w = t.column(&w);
    let wt = t.transpose(w);
    let tgt = t.matmul(wt, bag_means)?;
    let src = source_moment(t, phi_src, src_labels)?;
    let d = t.sub(tgt, src)?;
    let sq = t.square(d);
    let s = t.sum(sq);
    Ok(t.scale(s, 4.0))
}

/// ψ²: squared distance between `(1/N)Σ ŷ_x φ(x)` over bag members and the
/// label-weighted mean source embedding. `pseudo` has one entry per target
/// row; rows outside every bag are ignored.
pub fn psi_sq(
    t: &mut Tape,
    phi_src: Var,
    src_labels: &[f64],
    phi_tgt: Var,
    bags: &BagIndex,
    pseudo: &[f64],
) -> Result<Var> {
    bags.check()?;
    let n_rows = t.value(phi_tgt).nrows();
    if pseudo.len() != n_rows {
        return Err(Error::Shape(format!("{} pseudo-labels for {n_rows} rows", pseudo.len())));
    }
    let total = bags.member_count() as f64;
    let mut w = vec![0.0; n_rows];
    for members in &bags.members {
        for &i in members {
            w[i] = pseudo[i] / total;
        }
    }
    let tgt = weighted_embedding_sum(t, phi_tgt, &w)?;
    let src = source_moment(t, phi_src, src_labels)?;
    let d = t.sub(tgt, src)?;
    let sq = t.square(d);
    Ok(t.sum(sq))
}

/// Per-row pseudo-labels that broadcast each bag label to its members.
pub fn broadcast_labels(bags: &BagIndex, n_rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_rows];
    for (members, &y) in bags.members.iter().zip(&bags.labels) {
        for &i in members {
            out[i] = y;
        }
    }
    out
}

/// Shifts every prediction in a bag by the same offset so the mean matches
/// the bag label: the Euclidean projection onto `{v : mean(v) = y_B}`.
pub fn pseudo_labels(preds: &[f64], bag_label: f64) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(Error::Empty("pseudo-labels for an empty bag".into()));
    }
    let offset = bag_label - preds.iter().sum::<f64>() / preds.len() as f64;
    Ok(preds.iter().map(|p| p + offset).collect())
}

/// Projected pseudo-labels for every bag member (per target row).
pub fn projected_labels(bags: &BagIndex, preds: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; preds.len()];
    for (members, &y) in bags.members.iter().zip(&bags.labels) {
        let p: Vec<f64> = members.iter().map(|&i| preds[i]).collect();
        for (&i, v) in members.iter().zip(pseudo_labels(&p, y)?) {
            out[i] = v;
        }
    }
    Ok(out)
}

/// κ = bag loss / term, or 0 when the term vanishes.
pub fn kappa(bag_mse_value: f64, term_value: f64) -> f64 {
    if term_value > 0.0 {
        bag_mse_value / term_value
    } else {
        0.0
    }
}

/// `λ₁·ε̄ + λ₂·ε̂ + (κ·λ₃)·term` with κ supplied as a constant.
pub fn bagcsi(
    t: &mut Tape,
    bag_loss: Var,
    source_loss: Var,
    alignment: Var,
    spec: &LossSpec,
    kappa: f64,
) -> Result<Var> {
    let a = t.scale(bag_loss, spec.lambda1);
    let b = t.scale(source_loss, spec.lambda2);
    let c = t.scale(alignment, kappa * spec.lambda3);
    let ab = t.add(a, b)?;
    t.add(ab, c)
}

/// `(λ′, R)` for aligned samples: `λ′ = |mean(y² − ℓ²)|`,
/// `R = |mean(h(x)² − h(z)²)|`.
pub fn lemma1_terms(
    source_labels: &[f64],
    target_labels: &[f64],
    source_preds: &[f64],
    target_preds: &[f64],
) -> Result<(f64, f64)> {
    let n = source_labels.len();
    if n == 0 || target_labels.len() != n || source_preds.len() != n || target_preds.len() != n {
        return Err(Error::Shape(format!(
            "aligned samples required: |S|={n}, |T|={}, preds {}/{}",
            target_labels.len(),
            source_preds.len(),
            target_preds.len()
        )));
    }
    let nf = n as f64;
    let lambda = (target_labels
        .iter()
        .zip(source_labels)
        .map(|(y, l)| y * y - l * l)
        .sum::<f64>()
        / nf)
        .abs();
    let r = (target_preds
        .iter()
        .zip(source_preds)
        .map(|(hx, hz)| hx * hx - hz * hz)
        .sum::<f64>()
        / nf)
        .abs();
    Ok((lambda, r))
}

/// Differentiable R(h, S, T) with the same per-domain normalization as the
/// other batch terms.
pub fn prediction_energy_gap(t: &mut Tape, pred_src: Var, pred_tgt: Var, bags: &BagIndex) -> Result<Var> {
    let all: Vec<usize> = bags.members.iter().flatten().copied().collect();
    let sq_t = t.square(pred_tgt);
    let mt = t.segment_mean(sq_t, vec![all])?;
    let sq_s = t.square(pred_src);
    let ms = t.mean(sq_s)?;
    let d = t.sub(mt, ms)?;
    Ok(t.abs(d))
}

/// AF target term: mean over bags of `(y_B − h(x̄_B))²`, where `x̄_B` is the
/// bag average of the first-layer input (categorical embeddings included).
pub fn af_bag_loss(t: &mut Tape, model: &Model, pv: &ParamVars, target_input: Var, bags: &BagIndex) -> Result<Var> {
    bags.check()?;
    let xbar = t.segment_mean(target_input, bags.members.clone())?;
    let fw = model.forward_from_input(t, pv, xbar)?;
    let y = t.column(&bags.labels);
    let d = t.sub(fw.pred, y)?;
    let sq = t.square(d);
    t.mean(sq)
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[BCE_CLAMP, 1 − BCE_CLAMP]`.
pub fn domain_bce(t: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
    let s = domain_bce_sum(t, probs, labels)?;
    Ok(t.scale(s, 1.0 / labels.len() as f64))
}

fn domain_bce_sum(t: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Empty("cross-entropy over zero rows".into()));
    }
    if t.value(probs).dim() != (labels.len(), 1) {
        return Err(Error::Shape("domain predictions and labels differ".into()));
    }
    let p = t.clamp(probs, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let ln_p = t.ln(p);
    let neg = t.scale(p, -1.0);
    let one_minus = t.add_scalar(neg, 1.0);
    let ln_q = t.ln(one_minus);
    let y = t.column(labels);
    let y_neg: Vec<f64> = labels.iter().map(|v| 1.0 - v).collect();
    let ny = t.column(&y_neg);
    let a = t.mul(y, ln_p)?;
    let b = t.mul(ny, ln_q)?;
    let ab = t.add(a, b)?;
    let s = t.sum(ab);
    Ok(t.scale(s, -1.0))
}

/// Domain loss L_D over a batch: source rows labelled 1, target members 0,
/// averaged over all rows.
pub fn domain_loss(t: &mut Tape, src_probs: Var, tgt_probs: Var) -> Result<Var> {
    let ns = t.value(src_probs).nrows();
    let nt = t.value(tgt_probs).nrows();
    let a = domain_bce_sum(t, src_probs, &vec![1.0; ns])?;
    let b = domain_bce_sum(t, tgt_probs, &vec![0.0; nt])?;
    let s = t.add(a, b)?;
    Ok(t.scale(s, 1.0 / (ns + nt) as f64))
}

/// `‖mean φ(target members) − mean φ(source)‖²`.
pub fn mean_alignment_sq(t: &mut Tape, phi_src: Var, phi_tgt: Var, bags: &BagIndex) -> Result<Var> {
    let all: Vec<usize> = bags.members.iter().flatten().copied().collect();
    let mt = t.segment_mean(phi_tgt, vec![all])?;
    let ms = t.col_mean(phi_src)?;
    let d = t.sub(mt, ms)?;
    let sq = t.square(d);
    Ok(t.sum(sq))
}

/// A recorded batch objective.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub total: Var,
    /// Bag-level loss of the method's target term.
    pub bag_loss: f64,
    pub kappa: f64,
    /// Named component values, for logging.
    pub parts: BTreeMap<&'static str, f64>,
    /// Domain probabilities (source, target) for adversarial methods.
    pub domain_probs: Option<(Var, Var)>,
}

/// Records the full objective of `spec.method` on `batch`. For the DANN
/// methods this is the phase-one objective `task − κλ_D·L_D`.
pub fn build_loss(t: &mut Tape, model: &Model, pv: &ParamVars, batch: &Batch, spec: &LossSpec) -> Result<LossEval> {
    spec.validate()?;
    let method = spec.method;
    let mut parts = BTreeMap::new();
    let bags = &batch.bags;

    let tgt_input = model.input_layer(t, pv, &batch.target)?;
    let needs_rows = !matches!(method, Method::Af);
    let tgt = if needs_rows {
        Some(model.forward_from_input(t, pv, tgt_input)?)
    } else {
        None
    };
    let src = if method.uses_source() {
        Some(model.forward(t, pv, &batch.source)?)
    } else {
        None
    };

    let bag_loss = match method {
        Method::Af | Method::AfDann => af_bag_loss(t, model, pv, tgt_input, bags)?,
        _ => bag_mse(t, tgt.expect("row forward").pred, bags)?,
    };
    let bag_value = t.scalar(bag_loss);
    parts.insert("bag", bag_value);

    if method == Method::BaggedTarget {
        let total = t.scale(bag_loss, spec.lambda1);
        return Ok(LossEval {
            total,
            bag_loss: bag_value,
            kappa: 0.0,
            parts,
            domain_probs: None,
        });
    }

    let src = src.expect("source forward");
    let src_loss = instance_mse(t, src.pred, &batch.source_labels)?;
    parts.insert("source", t.scalar(src_loss));
    let scale_for = |term: f64| if spec.adaptive_kappa { kappa(bag_value, term) } else { 1.0 };

    let mut domain_probs = None;
    let mut kappa_used = 0.0;
    let total = match method {
        Method::BaggedTarget => unreachable!(),
        Method::Lr | Method::Af => t.add(bag_loss, src_loss)?,
        Method::BlWfa | Method::PlWfa => {
            let tgt = tgt.expect("row forward");
            let align = if method == Method::BlWfa {
                xi_sq(t, src.phi, &batch.source_labels, tgt.phi, bags)?
            } else {
                let preds: Vec<f64> = t.value(tgt.pred).column(0).to_vec();
                let pseudo = projected_labels(bags, &preds)?;
                psi_sq(t, src.phi, &batch.source_labels, tgt.phi, bags, &pseudo)?
            };
            let av = t.scalar(align);
            parts.insert(if method == Method::BlWfa { "xi_sq" } else { "psi_sq" }, av);
            kappa_used = scale_for(av);
            let mut total = bagcsi(t, bag_loss, src_loss, align, spec, kappa_used)?;
            if spec.w_r > 0.0 {
                let r = prediction_energy_gap(t, src.pred, tgt.pred, bags)?;
                parts.insert("r", t.scalar(r));
                let wr = t.scale(r, spec.w_r);
                total = t.add(total, wr)?;
            }
            total
        }
        Method::Dmfa => {
            let tgt = tgt.expect("row forward");
            let pen = mean_alignment_sq(t, src.phi, tgt.phi, bags)?;
            let pv_ = t.scalar(pen);
            parts.insert("mean_align", pv_);
            kappa_used = scale_for(pv_);
            let base = t.add(bag_loss, src_loss)?;
            let w = t.scale(pen, kappa_used * spec.lambda_d);
            t.add(base, w)?
        }
        Method::AfDann | Method::LrDann => {
            let tgt = tgt.expect("row forward");
            let ps = model.domain_forward(t, pv, src.phi)?;
            let pt = model.domain_forward(t, pv, tgt.phi)?;
            let ld = domain_loss(t, ps, pt)?;
            let ldv = t.scalar(ld);
            parts.insert("domain", ldv);
            kappa_used = scale_for(ldv);
            domain_probs = Some((ps, pt));
            let base = t.add(bag_loss, src_loss)?;
            let w = t.scale(ld, kappa_used * spec.lambda_d);
            t.sub(base, w)?
        }
    };
    Ok(LossEval {
        total,
        bag_loss: bag_value,
        kappa: kappa_used,
        parts,
        domain_probs,
    })
}

/// Phase-two DANN objective: the domain loss alone.
pub fn build_domain_loss(t: &mut Tape, model: &Model, pv: &ParamVars, batch: &Batch) -> Result<Var> {
    let src = model.forward(t, pv, &batch.source)?;
    let tgt = model.forward(t, pv, &batch.target)?;
    let ps = model.domain_forward(t, pv, src.phi)?;
    let pt = model.domain_forward(t, pv, tgt.phi)?;
    domain_loss(t, ps, pt)
}
