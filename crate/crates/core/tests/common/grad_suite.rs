//! Finite-difference checks of every training objective on nets no larger
//! than `[8, 8, 1]`. Each case reports its maximum relative error.

use llpcs::autodiff::{grad_check, GradCheckOptions, Model, ParamVars, Tape, Var};
use llpcs::losses::{
    af_bag_loss, bag_mse, bagcsi, build_domain_loss, build_loss, domain_loss, instance_mse, mean_alignment_sq,
    prediction_energy_gap, projected_labels, psi_sq, xi_sq, Batch, LossSpec, Method,
};
use llpcs::Result;

pub const TOL: f64 = 1e-4;

fn check<F>(model: &Model, f: F) -> f64
where
    F: Fn(&Model, &mut Tape, &ParamVars) -> Result<Var>,
{
    grad_check(model, f, GradCheckOptions::default()).unwrap().max_rel_error
}

pub struct Case {
    pub model: Model,
    pub batch: Batch,
}

pub fn case(seed: u64, hidden: &[usize], cards: &[usize], domain_head: bool) -> Case {
    let mut rng = super::rng(seed);
    Case {
        model: super::model(4, hidden, cards, domain_head, seed + 100),
        batch: super::batch(&mut rng, 4, cards, 2, 2, 4),
    }
}

pub fn instance_and_bag(seed: u64) -> Vec<(String, f64)> {
    let c = case(seed, &[8, 8], &[3], false);
    let inst = check(&c.model, |m, t, pv| {
        let f = m.forward(t, pv, &c.batch.source)?;
        instance_mse(t, f.pred, &c.batch.source_labels)
    });
    let bag = check(&c.model, |m, t, pv| {
        let f = m.forward(t, pv, &c.batch.target)?;
        bag_mse(t, f.pred, &c.batch.bags)
    });
    vec![("instance loss".into(), inst), ("bag loss".into(), bag)]
}

pub fn alignment(seed: u64) -> Vec<(String, f64)> {
    let c = case(seed, &[4, 3], &[], false);
    let b = &c.batch;
    let xi = check(&c.model, |m, t, pv| {
        let s = m.forward(t, pv, &b.source)?;
        let g = m.forward(t, pv, &b.target)?;
        xi_sq(t, s.phi, &b.source_labels, g.phi, &b.bags)
    });
    let preds: Vec<f64> = c.model.predict(&b.target).unwrap().preds.to_vec();
    let pseudo = projected_labels(&b.bags, &preds).unwrap();
    let psi = check(&c.model, |m, t, pv| {
        let s = m.forward(t, pv, &b.source)?;
        let g = m.forward(t, pv, &b.target)?;
        psi_sq(t, s.phi, &b.source_labels, g.phi, &b.bags, &pseudo)
    });
    let mean = check(&c.model, |m, t, pv| {
        let s = m.forward(t, pv, &b.source)?;
        let g = m.forward(t, pv, &b.target)?;
        mean_alignment_sq(t, s.phi, g.phi, &b.bags)
    });
    let r = check(&c.model, |m, t, pv| {
        let s = m.forward(t, pv, &b.source)?;
        let g = m.forward(t, pv, &b.target)?;
        prediction_energy_gap(t, s.pred, g.pred, &b.bags)
    });
    vec![
        ("xi²".into(), xi),
        ("psi² (fixed pseudo-labels)".into(), psi),
        ("mean alignment".into(), mean),
        ("R term".into(), r),
    ]
}

pub fn bagcsi_fixed_kappa() -> f64 {
    let c = case(7, &[4, 3], &[2], false);
    let spec = LossSpec::default();
    check(&c.model, |m, t, pv| {
        let s = m.forward(t, pv, &c.batch.source)?;
        let g = m.forward(t, pv, &c.batch.target)?;
        let bag = bag_mse(t, g.pred, &c.batch.bags)?;
        let inst = instance_mse(t, s.pred, &c.batch.source_labels)?;
        let xi = xi_sq(t, s.phi, &c.batch.source_labels, g.phi, &c.batch.bags)?;
        bagcsi(t, bag, inst, xi, &spec, 0.37)
    })
}

pub fn af_target_term() -> f64 {
    let c = case(3, &[8, 8], &[3, 2], false);
    check(&c.model, |m, t, pv| {
        let input = m.input_layer(t, pv, &c.batch.target)?;
        af_bag_loss(t, m, pv, input, &c.batch.bags)
    })
}

/// Full objectives with κ held fixed. PL-WFA is left out: its pseudo-labels
/// are stop-gradient targets recomputed from the live model, so finite
/// differences of the whole objective see them move. [`alignment`] checks ψ²
/// with the targets held fixed.
pub fn method_objectives() -> Vec<(String, f64)> {
    Method::ALL
        .into_iter()
        .filter(|&m| m != Method::PlWfa)
        .map(|method| {
            let c = case(11, &[4, 4], &[2], method.is_dann());
            let spec = LossSpec {
                method,
                adaptive_kappa: false,
                lambda_d: 0.5,
                lambda3: 0.3,
                w_r: 0.2,
                ..LossSpec::default()
            };
            let e = check(&c.model, |m, t, pv| Ok(build_loss(t, m, pv, &c.batch, &spec)?.total));
            (format!("{method} objective"), e)
        })
        .collect()
}

pub fn adversarial_phases() -> Vec<(String, f64)> {
    let c = case(5, &[4, 3], &[], true);
    let phase2 = check(&c.model, |m, t, pv| build_domain_loss(t, m, pv, &c.batch));
    let explicit = check(&c.model, |m, t, pv| {
        let s = m.forward(t, pv, &c.batch.source)?;
        let g = m.forward(t, pv, &c.batch.target)?;
        let ps = m.domain_forward(t, pv, s.phi)?;
        let pt = m.domain_forward(t, pv, g.phi)?;
        domain_loss(t, ps, pt)
    });
    vec![("domain loss (phase two)".into(), phase2), ("domain loss".into(), explicit)]
}

/// Every case above, for reporting.
pub fn all() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for seed in 0..3 {
        out.extend(instance_and_bag(seed));
        out.extend(alignment(seed));
    }
    out.push(("BagCSI".into(), bagcsi_fixed_kappa()));
    out.push(("AF target term".into(), af_target_term()));
    out.extend(method_objectives());
    out.extend(adversarial_phases());
    out
}
