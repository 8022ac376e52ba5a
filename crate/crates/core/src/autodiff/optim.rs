use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::tape::Gradients;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer over a fixed subset of a model's parameter slots.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    adam: AdamParams,
    slots: Vec<usize>,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

impl OptimizerState {
    /// Optimizer over every parameter of `model`.
    pub fn new(kind: OptimizerKind, lr: f64, model: &Model) -> Self {
        let slots = (0..model.params().len()).collect();
        Self::for_slots(kind, lr, model, slots)
    }

    pub fn for_slots(kind: OptimizerKind, lr: f64, model: &Model, slots: Vec<usize>) -> Self {
        let zeros = |s: &usize| Array2::zeros(model.params()[*s].dim());
        let (m, v) = match kind {
            OptimizerKind::Adam => (
                slots.iter().map(zeros).collect(),
                slots.iter().map(zeros).collect(),
            ),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            lr,
            adam: AdamParams::default(),
            slots,
            m,
            v,
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// Applies one update to the optimizer's slots. Slots without a gradient
    /// are treated as zero-gradient.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        for &s in &self.slots {
            if let Some(g) = grads.get(s) {
                if g.dim() != model.params()[s].dim() {
                    return Err(Error::Shape(format!(
                        "gradient {:?} for parameter {:?}",
                        g.dim(),
                        model.params()[s].dim()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter slot {s} at step {}",
                        self.step + 1
                    )));
                }
            }
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for &s in &self.slots {
                    if let Some(g) = grads.get(s) {
                        model.params_mut()[s].scaled_add(-lr, g);
                    }
                }
            }
            OptimizerKind::Adam => {
                let AdamParams { beta1, beta2, eps } = self.adam;
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, &s) in self.slots.iter().enumerate() {
                    let zero;
                    let g = match grads.get(s) {
                        Some(g) => g,
                        None => {
                            zero = Array2::zeros(model.params()[s].dim());
                            &zero
                        }
                    };
                    Zip::from(&mut model.params_mut()[s])
                        .and(&mut self.m[i])
                        .and(&mut self.v[i])
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            let mhat = *m / c1;
                            let vhat = *v / c2;
                            *p -= lr * mhat / (vhat.sqrt() + eps);
                        });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::model::{init_model, ArchConfig};
    use ndarray::array;

    fn scalar_model(theta: f64) -> Model {
        // linear 1→1 model: slots are [w, b]
        let mut m = init_model(&ArchConfig::dense(1, &[]), 0).unwrap();
        m.params_mut()[0] = array![[theta]];
        m.params_mut()[1] = array![[0.0]];
        m
    }

    fn grads(w: f64) -> Gradients {
        Gradients {
            grads: vec![Some(array![[w]]), None],
        }
    }

    #[test]
    fn sgd_step() {
        let mut m = scalar_model(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, &m);
        opt.step(&mut m, &grads(2.0)).unwrap();
        assert!((m.params()[0][[0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step() {
        let mut m = scalar_model(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 1e-3, &m);
        opt.step(&mut m, &grads(1.0)).unwrap();
        // t=1: m̂ = g, v̂ = g², update = lr·g/(|g|+ε)
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((m.params()[0][[0, 0]] - expected).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = scalar_model(0.5);
        let mut sgd = OptimizerState::new(OptimizerKind::Sgd, 0.1, &m);
        sgd.step(&mut m, &grads(0.0)).unwrap();
        assert_eq!(m.params()[0][[0, 0]], 0.5);
        let mut adam = OptimizerState::new(OptimizerKind::Adam, 0.1, &m);
        adam.step(&mut m, &grads(0.0)).unwrap();
        assert!((m.params()[0][[0, 0]] - 0.5).abs() <= 0.1 * 1e-8);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut m = scalar_model(0.5);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.1, &m);
        let r = opt.step(&mut m, &grads(f64::NAN));
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(m.params()[0][[0, 0]], 0.5);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn slot_subset_isolates_updates() {
        let mut m = scalar_model(1.0);
        let mut opt = OptimizerState::for_slots(OptimizerKind::Sgd, 1.0, &m, vec![1]);
        let g = Gradients {
            grads: vec![Some(array![[1.0]]), Some(array![[1.0]])],
        };
        opt.step(&mut m, &g).unwrap();
        assert_eq!(m.params()[0][[0, 0]], 1.0);
        assert_eq!(m.params()[1][[0, 0]], -1.0);
    }
}
