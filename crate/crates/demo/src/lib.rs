//! WebAssembly bindings behind `www/index.html`.
//!
//! Each export takes plain numbers and returns either a flat `f64` array or a
//! JSON string, so the page needs no extra glue beyond the generated module.

use llpcs::bound_lab::appendix_c_experiment;
use llpcs::data::{generate_perturbed, SynthSpec};
use llpcs::losses::pseudo_labels;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize, Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub k: usize,
    pub bag_loss: f64,
    pub instance_loss: f64,
    pub ratio: f64,
}

/// Bag and instance loss of the constant predictor ½ on uniform labels for
/// `k = 1, 2, 4, …, 2^max_log2_k`.
pub fn appendix_c_points(max_log2_k: u32, bags: usize, seed: u64) -> Result<Vec<CurvePoint>, String> {
    if max_log2_k > 12 {
        return Err("bag sizes above 4096 are not supported".into());
    }
    (0..=max_log2_k)
        .map(|p| {
            let k = 1usize << p;
            let (bag_loss, instance_loss) =
                appendix_c_experiment(k, bags, seed.wrapping_add(p as u64)).map_err(|e| e.to_string())?;
            Ok(CurvePoint {
                k,
                bag_loss,
                instance_loss,
                ratio: instance_loss / bag_loss,
            })
        })
        .collect()
}

#[wasm_bindgen]
pub fn appendix_c_curve(max_log2_k: u32, bags: u32, seed: u32) -> Result<String, JsError> {
    let pts = appendix_c_points(max_log2_k, bags as usize, seed as u64).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&pts).map_err(|e| JsError::new(&e.to_string()))
}

/// Projects predictions of one bag onto the set whose mean equals the bag
/// label.
#[wasm_bindgen]
pub fn project_bag(predictions: &[f64], bag_label: f64) -> Result<Vec<f64>, JsError> {
    pseudo_labels(predictions, bag_label).map_err(|e| JsError::new(&e.to_string()))
}

/// First two feature coordinates of a perturbed source/target pair, packed as
/// `[sx…, sy…, tx…, ty…]` with `n` points per domain.
pub fn shift_points(epsilon: f64, delta: f64, n: usize, seed: u64) -> Result<Vec<f64>, String> {
    let spec = SynthSpec {
        dim: 2,
        n_source: n,
        n_target: n,
        n_test: 1,
        label_hidden: vec![8],
        ..SynthSpec::default()
    };
    let out = generate_perturbed(&spec, epsilon, delta, seed).map_err(|e| e.to_string())?;
    let mut v = Vec::with_capacity(4 * n);
    for ds in [&out.source, &out.target] {
        v.extend(ds.features.numeric.column(0).iter());
        v.extend(ds.features.numeric.column(1).iter());
    }
    Ok(v)
}

#[wasm_bindgen]
pub fn perturbed_scatter(epsilon: f64, delta: f64, n: u32, seed: u32) -> Result<Vec<f64>, JsError> {
    shift_points(epsilon, delta, n as usize, seed as u64).map_err(|e| JsError::new(&e))
}
