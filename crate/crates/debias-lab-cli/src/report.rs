use serde::Serialize;

use debias_lab::adversary::{
    closed_form_chi2_h0, direction_pair, ds_mixed_reference, lod_curvature_reference, lod_mixed_reference,
    mixed_partial, mixture_density, plm_cross_reference, sampled_mixture_density, second_derivative_fd,
    uncertainty_membership, verify_invariance, wad_mixed_reference, AlternativeFamily, DirectionPair, Nuisance,
    DEFAULT_STEP, MAX_ENUMERATED_PAIRS,
};
use debias_lab::measure::{feasible_radius, sup_distance, Density, GridValues, SignedDensity};
use debias_lab::models::{alpha_values, functional_value, gamma_values, linear_part_value, EstimandKind, EstimandSpec};
use debias_lab::Result;

/// The first direction pair a kind supports.
pub fn default_pair(spec: &EstimandSpec, p: &Density) -> Result<DirectionPair> {
    let variant = if spec.kind() == EstimandKind::Ape {
        Nuisance::Alpha
    } else {
        Nuisance::Gamma
    };
    direction_pair(spec, p, variant)
}

/// Sign-flip family for a kind. Treatment-effect families take the
/// propensity shift from `eps_alpha` and the outcome shift from `eps_gamma`;
/// partially linear families pick `(u, v)` so the declared radii equal the
/// requested ones. Every other kind steps along its direction pair by the
/// given fractions of the pair's feasible radius.
pub fn build_family(
    spec: &EstimandSpec,
    p: &Density,
    eps_gamma: f64,
    eps_alpha: f64,
    pairs: usize,
) -> Result<AlternativeFamily> {
    match spec.kind() {
        EstimandKind::Ate => AlternativeFamily::ate(p, eps_alpha, eps_gamma, pairs),
        EstimandKind::EccPlm => {
            // declared radii are linear in (u, v)
            let unit = AlternativeFamily::plm(p, 0.1, 0.1, pairs)?;
            let scale = unit.eps_gamma / 0.1;
            AlternativeFamily::plm(p, eps_gamma / scale, eps_alpha / scale, pairs)
        }
        _ => {
            let pair = default_pair(spec, p)?;
            let r = feasible_radius(p, &pair.invariant).min(feasible_radius(p, &pair.companion));
            AlternativeFamily::directional(p, spec, &pair, eps_gamma * r, eps_alpha * r, pairs)
        }
    }
}

#[derive(Debug, Serialize)]
pub struct MembershipSummary {
    pub declared_eps_gamma: f64,
    pub declared_eps_alpha: f64,
    pub max_gamma_distance: f64,
    pub max_alpha_distance: f64,
    pub all_members: bool,
}

#[derive(Debug, Serialize)]
pub struct Separation {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Serialize)]
pub struct Invariance {
    pub fixed: Nuisance,
    pub steps: Vec<f64>,
    pub deviation: f64,
}

#[derive(Debug, Serialize)]
pub struct Derivative {
    pub name: String,
    pub value: f64,
    pub reference: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct AdversaryReport {
    pub kind: EstimandKind,
    pub pairs: usize,
    pub alternatives: usize,
    pub membership: MembershipSummary,
    pub separation: Separation,
    pub mixture_deviation: f64,
    pub invariance: Vec<Invariance>,
    pub derivatives: Vec<Derivative>,
}

/// Second derivative with a step that stays inside the feasible region.
fn fd(p: &Density, a: &SignedDensity, b: &SignedDensity, spec: &EstimandSpec) -> Result<f64> {
    let r = feasible_radius(p, &a.plus(1.0, b)?).min(feasible_radius(p, &a.plus(-1.0, b)?));
    second_derivative_fd(p, a, b, spec, DEFAULT_STEP.min(0.25 * r))
}

pub fn adversary_report(
    spec: &EstimandSpec,
    p: &Density,
    eps_gamma: f64,
    eps_alpha: f64,
    pairs: usize,
) -> Result<AdversaryReport> {
    let fam = build_family(spec, p, eps_gamma, eps_alpha, pairs)?;
    let base = functional_value(p, spec)?;
    let lambdas = fam.probe_lambdas();
    let (mut gd, mut ad, mut all) = (0.0_f64, 0.0_f64, true);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for lambda in &lambdas {
        let q = fam.member(lambda)?;
        let m = uncertainty_membership(&q, p, spec, fam.eps_gamma, fam.eps_alpha)?;
        gd = gd.max(m.gamma_distance);
        ad = ad.max(m.alpha_distance);
        all &= m.member;
        let shift = functional_value(&q, spec)? - base;
        lo = lo.min(shift);
        hi = hi.max(shift);
    }
    let mix = if fam.pairs() <= MAX_ENUMERATED_PAIRS {
        mixture_density(&fam)?
    } else {
        sampled_mixture_density(&fam, 256, 0)?
    };

    let mut invariance = Vec::new();
    let mut derivatives = Vec::new();
    for variant in [Nuisance::Gamma, Nuisance::Alpha] {
        if spec.kind() == EstimandKind::Ape && variant == Nuisance::Gamma {
            continue;
        }
        let pair = direction_pair(spec, p, variant)?;
        let r = feasible_radius(p, &pair.invariant);
        let steps: Vec<f64> = [-0.05, -0.01, 0.01, 0.05].iter().map(|t| t * r).collect();
        invariance.push(Invariance {
            fixed: variant,
            deviation: verify_invariance(p, &pair.invariant, spec, variant, &steps)?,
            steps,
        });
        let reference = match spec.kind() {
            EstimandKind::Ate => Some(-1.0),
            EstimandKind::Lod => Some(lod_mixed_reference(p)?),
            EstimandKind::Ds => Some(ds_mixed_reference(p, spec)?),
            EstimandKind::Wad => Some(wad_mixed_reference(p, spec)?),
            EstimandKind::EccPlm => Some(-plm_cross_reference(p)?),
            EstimandKind::Ape => None,
        };
        let name = match variant {
            Nuisance::Gamma => "mixed_gamma_invariant",
            Nuisance::Alpha => "mixed_alpha_invariant",
        };
        derivatives.push(Derivative {
            name: name.into(),
            value: fd(p, &pair.invariant, &pair.companion, spec)?,
            reference,
        });
        if variant == Nuisance::Alpha {
            let curvature_ref = if spec.kind() == EstimandKind::Lod {
                Some(lod_curvature_reference(p)?)
            } else {
                Some(0.0)
            };
            derivatives.push(Derivative {
                name: "curvature_alpha_invariant".into(),
                value: fd(p, &pair.invariant, &pair.invariant, spec)?,
                reference: curvature_ref,
            });
            derivatives.push(Derivative {
                name: "closed_form_curvature_alpha_invariant".into(),
                value: closed_form_chi2_h0(p, &pair.invariant, spec)?,
                reference: curvature_ref,
            });
        }
    }
    if spec.kind() == EstimandKind::EccPlm {
        let lambda = lambdas[0].clone();
        let value = mixed_partial(
            |u, v| {
                let f = AlternativeFamily::plm(p, u, v, fam.pairs())?;
                linear_part_value(&f.member(&lambda)?, spec)
            },
            DEFAULT_STEP,
        )?;
        derivatives.push(Derivative {
            name: "cross_uv".into(),
            value,
            reference: Some(plm_cross_reference(p)?),
        });
    }
    // the nuisances must exist at the anchor for any of this to mean much
    let _ = (gamma_values(p, spec)?, alpha_values(p, spec)?);
    Ok(AdversaryReport {
        kind: spec.kind(),
        pairs: fam.pairs(),
        alternatives: lambdas.len(),
        membership: MembershipSummary {
            declared_eps_gamma: fam.eps_gamma,
            declared_eps_alpha: fam.eps_alpha,
            max_gamma_distance: gd,
            max_alpha_distance: ad,
            all_members: all,
        },
        separation: Separation { min: lo, max: hi },
        mixture_deviation: sup_distance(mix.values(), p.values()),
        invariance,
        derivatives,
    })
}
