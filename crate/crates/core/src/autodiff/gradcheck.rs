use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{Model, ParamVars};
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Nets with more coordinates than this are checked on a random subsample
    /// of this many coordinates (never fewer than 200).
    pub max_coords: usize,
    /// Denominator floor of the relative error, so coordinates with a
    /// vanishing gradient are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 2_000,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of `build` against central finite
/// differences. The relative error at a coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn grad_check<F>(model: &Model, build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Model, &mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let pv = model.register(&mut tape);
    let root = build(model, &mut tape, &pv)?;
    let grads = tape.backward(root)?;

    let coords: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(s, p)| (0..p.len()).map(move |i| (s, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= opts.max_coords.max(200) {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, coords.len(), opts.max_coords.max(200)).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let eval = |m: &Model| -> Result<f64> {
        let mut t = Tape::new();
        let pv = m.register(&mut t);
        let root = build(m, &mut t, &pv)?;
        Ok(t.scalar(root))
    };

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for &(slot, i) in &chosen {
        let at = (i / probe.params()[slot].ncols(), i % probe.params()[slot].ncols());
        let orig = probe.params()[slot][at];
        probe.params_mut()[slot][at] = orig + opts.step;
        let up = eval(&probe)?;
        probe.params_mut()[slot][at] = orig - opts.step;
        let down = eval(&probe)?;
        probe.params_mut()[slot][at] = orig;

        let numeric = (up - down) / (2.0 * opts.step);
        let analytic = grads
            .get(slot)
            .map(|g| g[at])
            .unwrap_or(0.0);
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coords_checked: chosen.len(),
    })
}
