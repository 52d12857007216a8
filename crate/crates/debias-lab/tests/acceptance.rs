//! Acceptance checks. Prints one line per criterion and exits non-zero if any fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use debias_lab::adversary::{
    ate_overlap, closed_form_chi2_h0, direction_pair, ds_mixed_reference, gram_schmidt_direction,
    gram_schmidt_invariant_direction, lod_curvature_reference, mixed_partial, mixture_density, plm_cross_reference,
    ratio_nuisance, second_derivative_fd, uncertainty_membership, verify_invariance, wad_mixed_reference,
    AlternativeFamily, Nuisance, DEFAULT_STEP,
};
use debias_lab::anchors::{self, AnchorSpec, Profile};
use debias_lab::bounds::{
    chunk_bound, fano_risk, minimax_demo, optimal_test_error, product_mixture_hellinger, TestingInstance, DEFAULT_XI,
};
use debias_lab::estimators::{
    bias_product_integral, corrupt_nuisance, curvature_aligned_direction, dr_ate_estimate, nuisance_law,
    population_dml, population_dr_ate, propensity_field, true_nuisances, CorruptionDirection, CorruptionSpec,
};
use debias_lab::harness::{run_rate_scan, EstimatorKind, ExperimentConfig, Sweep};
use debias_lab::measure::{
    add_scaled, feasible_radius, sample, sup_distance, Axis, AxisKind, Density, GridSpace, GridValues, Role,
};
use debias_lab::models::{alpha_values, functional_value, gamma_values, linear_part_value, EstimandKind, EstimandSpec};
use debias_lab::partition::{bump, iterated_partition, lambda_from_index};

type Outcome = Result<String, String>;

/// Name, check and runtime budget in seconds.
type Criterion = (&'static str, fn() -> Outcome, u64);

fn fail<T>(msg: impl Into<String>) -> Result<T, String> {
    Err(msg.into())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: debias_lab::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn smooth(kind: EstimandKind, x_cells: usize) -> Result<(EstimandSpec, Density), String> {
    lib(AnchorSpec {
        kind,
        x_cells,
        d_cells: 16,
        profile: Profile::Smooth,
    }
    .build())
}

/// Uniform covariates and a flat propensity, so the pairing is exact.
fn flat_propensity(cells: usize) -> Result<Density, String> {
    lib(anchors::ate(
        cells,
        |_| 1.0,
        |_| 0.5,
        |x| 0.5 + 0.2 * x,
        |x| 0.3 + 0.2 * x,
    ))
}

const TS: [f64; 4] = [-0.05, -0.01, 0.01, 0.05];

fn mixture_equality() -> Outcome {
    // propensity and outcomes stay in [0.25, 0.75]; the lower edge is hit exactly
    let p = lib(anchors::ate(
        32,
        |x| 1.0 + 0.5 * x,
        |x| 0.4 + 0.2 * x,
        |x| 0.6 + 0.15 * (6.0 * x).sin(),
        |x| if x < 0.5 { 0.25 } else { 0.25 + 0.3 * (x - 0.5) },
    ))?;
    let c = lib(ate_overlap(&p))?;
    ensure((c - 0.25).abs() < 1e-15, || format!("overlap {c}"))?;
    let fam = lib(AlternativeFamily::ate(&p, 0.2, 0.2, 4))?;
    let dev = sup_distance(lib(mixture_density(&fam))?.values(), p.values());
    ensure(dev <= 1e-12, || format!("deviation {dev:e}"))?;
    Ok(format!("max atom deviation {dev:.1e}"))
}

fn uncertainty_membership_check() -> Outcome {
    let p = flat_propensity(16)?;
    let (em, eg) = (0.1, 0.2);
    let fam = lib(AlternativeFamily::ate(&p, em, eg, 4))?;
    let mut worst_m = 0.0_f64;
    let mut worst_g = 0.0_f64;
    for k in 0..16 {
        let q = lib(fam.member(&lambda_from_index(k, 4)))?;
        let m = lib(uncertainty_membership(&q, &p, &EstimandSpec::Ate, eg, em))?;
        ensure(m.member, || format!("λ #{k} is outside the set"))?;
        worst_m = worst_m.max((m.alpha_distance - em).abs());
        worst_g = worst_g.max(m.gamma_distance);
    }
    ensure(worst_m <= 1e-12, || format!("|‖m_λ − m̂‖ − ε_m| = {worst_m:e}"))?;
    ensure(worst_g <= eg, || format!("‖g_λ − ĝ‖ = {worst_g}"))?;
    Ok(format!(
        "16 λ: |‖m_λ−m̂‖−ε_m| ≤ {worst_m:.1e}, max ‖g_λ−ĝ‖ = {worst_g:.4}"
    ))
}

fn separation() -> Outcome {
    let p = flat_propensity(16)?;
    let fam = lib(AlternativeFamily::ate(&p, 0.1, 0.2, 4))?;
    let base = lib(functional_value(&p, &EstimandSpec::Ate))?;
    let mut worst = 0.0_f64;
    for k in 0..16 {
        let q = lib(fam.member(&lambda_from_index(k, 4)))?;
        let shift = lib(functional_value(&q, &EstimandSpec::Ate))? - base;
        worst = worst.max((shift + 0.04).abs());
    }
    ensure(worst <= 1e-10, || format!("|shift + 0.04| = {worst:e}"))?;
    Ok(format!("θ(P_λ) − θ(P̂) = −0.04 within {worst:.1e}"))
}

fn invariances() -> Outcome {
    let mut worst = 0.0_f64;
    let mut probe = |kind: EstimandKind, variant: Nuisance, companion: bool, held: Nuisance| -> Result<(), String> {
        let (spec, p) = smooth(kind, 32)?;
        let d = lib(direction_pair(&spec, &p, variant))?;
        let dir = if companion { &d.companion } else { &d.invariant };
        worst = worst.max(lib(verify_invariance(&p, dir, &spec, held, &TS))?);
        Ok(())
    };
    probe(EstimandKind::Ate, Nuisance::Gamma, false, Nuisance::Gamma)?;
    probe(EstimandKind::Ate, Nuisance::Alpha, false, Nuisance::Alpha)?;
    probe(EstimandKind::Lod, Nuisance::Gamma, false, Nuisance::Gamma)?;
    probe(EstimandKind::Lod, Nuisance::Alpha, false, Nuisance::Alpha)?;
    probe(EstimandKind::Ds, Nuisance::Gamma, false, Nuisance::Gamma)?;
    probe(EstimandKind::Ds, Nuisance::Gamma, true, Nuisance::Alpha)?;

    // partially linear lines u = 0 and v = 0
    let (spec, p) = smooth(EstimandKind::EccPlm, 32)?;
    let (g0, a0) = (lib(gamma_values(&p, &spec))?, lib(alpha_values(&p, &spec))?);
    for t in TS {
        for (u, v, base, held) in [(0.0, t, &g0, Nuisance::Gamma), (t, 0.0, &a0, Nuisance::Alpha)] {
            let fam = lib(AlternativeFamily::plm(&p, u, v, 2))?;
            for k in 0..4 {
                let q = lib(fam.member(&lambda_from_index(k, 2)))?;
                let now = match held {
                    Nuisance::Gamma => lib(gamma_values(&q, &spec))?,
                    Nuisance::Alpha => lib(alpha_values(&q, &spec))?,
                };
                worst = worst.max(sup_distance(base, &now));
            }
        }
    }
    ensure(worst <= 1e-10, || format!("max deviation {worst:e}"))?;
    Ok(format!("ATE, LOD, DS, PLM: max nuisance deviation {worst:.1e}"))
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn second_derivatives() -> Outcome {
    let mut notes = Vec::new();
    let (spec, p) = smooth(EstimandKind::Ate, 32)?;
    for variant in [Nuisance::Gamma, Nuisance::Alpha] {
        let d = lib(direction_pair(&spec, &p, variant))?;
        let v = lib(second_derivative_fd(
            &p,
            &d.invariant,
            &d.companion,
            &spec,
            DEFAULT_STEP,
        ))?;
        ensure((v + 1.0).abs() <= 1e-4, || format!("ATE {variant:?}: {v}"))?;
    }
    notes.push("ATE −1".to_string());

    let (spec, p) = smooth(EstimandKind::EccPlm, 32)?;
    let r = lib(plm_cross_reference(&p))?;
    let lambda = [1i8, -1];
    let v = lib(mixed_partial(
        |u, v| linear_part_value(&AlternativeFamily::plm(&p, u, v, 2)?.member(&lambda)?, &spec),
        DEFAULT_STEP,
    ))?;
    ensure((v - r).abs() <= 1e-4, || format!("PLM {v} vs {r}"))?;
    notes.push(format!("PLM {v:.6} vs {r:.6}"));

    for kind in [EstimandKind::Ds, EstimandKind::Wad] {
        let (spec, p) = smooth(kind, 64)?;
        let d = lib(direction_pair(&spec, &p, Nuisance::Gamma))?;
        let v = lib(second_derivative_fd(
            &p,
            &d.invariant,
            &d.companion,
            &spec,
            DEFAULT_STEP,
        ))?;
        let r = lib(if kind == EstimandKind::Ds {
            ds_mixed_reference(&p, &spec)
        } else {
            wad_mixed_reference(&p, &spec)
        })?;
        ensure(rel(v, r) <= 1e-4, || format!("{kind}: {v} vs {r}"))?;
        notes.push(format!("{kind} rel {:.1e}", rel(v, r)));
    }

    let (spec, p) = smooth(EstimandKind::Lod, 32)?;
    let d = lib(direction_pair(&spec, &p, Nuisance::Alpha))?;
    let v = lib(second_derivative_fd(
        &p,
        &d.invariant,
        &d.invariant,
        &spec,
        DEFAULT_STEP,
    ))?;
    let r = lib(lod_curvature_reference(&p))?;
    ensure(r != 0.0 && rel(v, r) <= 1e-4, || format!("LOD curvature {v} vs {r}"))?;
    notes.push(format!("LOD curvature {v:.3e} rel {:.1e}", rel(v, r)));
    Ok(notes.join(", "))
}

fn affine_curvature() -> Outcome {
    let mut worst = 0.0_f64;
    for kind in EstimandKind::ALL.into_iter().filter(|k| k.is_affine()) {
        let (spec, p) = smooth(kind, 16)?;
        let d = lib(direction_pair(&spec, &p, Nuisance::Alpha))?;
        let closed = lib(closed_form_chi2_h0(&p, &d.invariant, &spec))?;
        ensure(closed == 0.0, || format!("{kind}: closed form {closed}"))?;
        let fd = lib(second_derivative_fd(
            &p,
            &d.invariant,
            &d.invariant,
            &spec,
            DEFAULT_STEP,
        ))?;
        worst = worst.max(fd.abs());
    }
    ensure(worst <= 1e-5, || format!("fd curvature {worst:e}"))?;
    Ok(format!("closed form 0 for every affine kind, |fd| ≤ {worst:.1e}"))
}

fn log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.abs().ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn double_robustness() -> Outcome {
    let eps = [0.05, 0.1, 0.2, 0.4];
    let mut exact = 0.0_f64;
    let mut factor = 0.0_f64;
    let mut slopes = Vec::new();
    for kind in EstimandKind::ALL.into_iter().filter(|k| k.is_affine()) {
        let (spec, p) = smooth(kind, 32)?;
        let (g, a) = lib(true_nuisances(&p, &spec))?;
        let law = lib(nuisance_law(&p, &g))?;
        let truth = lib(functional_value(&p, &spec))?;
        let part = lib(iterated_partition(&[vec![1.0; p.space().z1_count()]], 4))?;
        let field = lib(bump(&part, &[1, -1, -1, 1]))?;
        let corrupt = |f, e: f64| {
            corrupt_nuisance(
                f,
                &CorruptionSpec::new(e, CorruptionDirection::Bump(field.clone())),
                &law,
            )
        };
        let mut biases = Vec::new();
        for &e in &eps {
            let (gh, ah) = (lib(corrupt(&g, e))?, lib(corrupt(&a, e))?);
            exact = exact.max((lib(population_dml(&p, &g, &ah, &spec))? - truth).abs());
            exact = exact.max((lib(population_dml(&p, &gh, &a, &spec))? - truth).abs());
            let bias = lib(population_dml(&p, &gh, &ah, &spec))? - truth;
            factor = factor.max((bias - lib(bias_product_integral(&p, &gh, &ah, &spec))?).abs());
            biases.push(bias);
        }
        let s = log_slope(&eps, &biases);
        ensure((s - 2.0).abs() <= 0.05, || format!("{kind}: slope {s}"))?;
        slopes.push(format!("{kind} {s:.3}"));
    }

    // doubly robust score with one exact nuisance
    let (spec, p) = smooth(EstimandKind::Ate, 32)?;
    let truth = lib(functional_value(&p, &spec))?;
    let (g, _) = lib(true_nuisances(&p, &spec))?;
    let m = lib(propensity_field(&p).and_then(|m| m.with_overlap(0.05)))?;
    let dir_g: Vec<f64> = (0..g.values.len()).map(|i| (1.3 * i as f64).sin()).collect();
    let dir_m: Vec<f64> = (0..m.values.len()).map(|i| (0.7 * i as f64 + 1.0).cos()).collect();
    let gh = lib(corrupt_nuisance(
        &g,
        &CorruptionSpec::new(0.1, CorruptionDirection::Field(dir_g)),
        &lib(nuisance_law(&p, &g))?,
    ))?;
    let mh = lib(corrupt_nuisance(
        &m,
        &CorruptionSpec::new(0.1, CorruptionDirection::Field(dir_m)),
        &lib(nuisance_law(&p, &m))?,
    ))?;
    exact = exact.max((lib(population_dr_ate(&p, &g, &mh, 0.05))? - truth).abs());
    exact = exact.max((lib(population_dr_ate(&p, &gh, &m, 0.05))? - truth).abs());
    ensure(exact <= 1e-10, || format!("one exact nuisance leaves bias {exact:e}"))?;
    ensure(factor <= 1e-10, || format!("bias − product integral = {factor:e}"))?;

    // log odds, weight exact: the squared regression error shows
    let (spec, p) = smooth(EstimandKind::Lod, 32)?;
    let (g, a) = lib(true_nuisances(&p, &spec))?;
    let law = lib(nuisance_law(&p, &g))?;
    let truth = lib(functional_value(&p, &spec))?;
    let dir = lib(curvature_aligned_direction(&p, &spec))?;
    let lod_eps = [0.01, 0.02, 0.04, 0.08];
    let mut biases = Vec::new();
    for &e in &lod_eps {
        let gh = lib(corrupt_nuisance(
            &g,
            &CorruptionSpec::new(e, CorruptionDirection::Field(dir.clone())),
            &law,
        ))?;
        biases.push(lib(population_dml(&p, &gh, &a, &spec))? - truth);
    }
    let s = log_slope(&lod_eps, &biases);
    ensure((s - 2.0).abs() <= 0.1, || format!("LOD slope {s}"))?;
    Ok(format!(
        "one-exact bias ≤ {exact:.1e}, |bias − product| ≤ {factor:.1e}, slopes {}, LOD {s:.3}",
        slopes.join(" ")
    ))
}

fn sampling_rate() -> Outcome {
    let mut cfg = ExperimentConfig::new(EstimandKind::Ate, Sweep::NSweep(vec![1_000, 10_000, 100_000]));
    cfg.x_cells = 32;
    cfg.estimator = EstimatorKind::Dr;
    cfg.replications = 64;
    cfg.seed = 2024;
    let r = lib(run_rate_scan(&cfg))?;
    ensure(r.failures == 0, || format!("{} failed replications", r.failures))?;
    let s = r.fit.slope;
    ensure((s + 0.5).abs() <= 0.07, || format!("slope {s}"))?;
    Ok(format!("slope of median |error| vs n: {s:.3}"))
}

fn hellinger_machinery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let anchor = |a: f64| anchors::ate(12, |x| 1.0 + a * x, |x| 0.4 + 0.2 * x, |x| 0.55 + 0.2 * a * x, |_| 0.45);
    let mut b_worst = 0.0_f64;
    for n in [2, 3] {
        let p = lib(anchor(0.5))?;
        let c = lib(ate_overlap(&p))?;
        let mut h = Vec::new();
        for m in [2, 4, 8] {
            let fam = lib(AlternativeFamily::ate(&p, 0.2, 0.2, m))?;
            let b = lib(chunk_bound(&fam, n, 1.0))?.b;
            ensure(b <= c.powi(-2), || format!("b = {b} above c⁻² = {}", c.powi(-2)))?;
            b_worst = b_worst.max(b * c * c);
            let inst = lib(TestingInstance::new(fam, n))?;
            ensure(inst.enumerated && p.space().n_atoms() <= 48, || {
                "instance not enumerated".into()
            })?;
            h.push(lib(product_mixture_hellinger(&inst))?);
        }
        ensure(h[0] >= h[1] && h[1] >= h[2], || format!("n = {n}: H² {h:?}"))?;
    }
    for i in 0..20 {
        let p = lib(anchor(rng.random_range(0.0..1.0)))?;
        let e = rng.random_range(0.05..0.25);
        let m = 1 << rng.random_range(1..4);
        let n = rng.random_range(1..=3);
        let inst = lib(TestingInstance::new(lib(AlternativeFamily::ate(&p, e, e, m))?, n))?;
        let h2 = lib(product_mixture_hellinger(&inst))?;
        let (bayes, fano) = (lib(optimal_test_error(&inst))?, lib(fano_risk(h2))?);
        ensure(bayes >= fano, || format!("instance {i}: Bayes {bayes} < Fano {fano}"))?;
    }
    ensure(lib(fano_risk(0.0))? == 0.5, || "fano_risk(0) ≠ 0.5".into())?;
    Ok(format!(
        "H² non-increasing in M at n = 2, 3; max b·c² = {b_worst:.3}; Fano ≤ Bayes on 20 instances"
    ))
}

fn partition_quality() -> Outcome {
    let cells = 64;
    let z: Vec<f64> = (0..cells).map(|c| (c as f64 + 0.5) / cells as f64).collect();
    let weights = vec![vec![1.0; cells], z];
    let part = lib(iterated_partition(&weights, 4))?;
    let worst = part.residuals.iter().flatten().fold(0.0_f64, |m, r| m.max(r.abs()));
    ensure(worst <= 1e-6, || format!("residual {worst:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut bump_worst = 0.0_f64;
    for _ in 0..50 {
        let lambda: Vec<i8> = (0..4).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
        let field = lib(bump(&part, &lambda))?;
        for w in &weights {
            let integral: f64 = field.values.iter().zip(w).map(|(d, w)| d * w).sum::<f64>() / cells as f64;
            bump_worst = bump_worst.max(integral.abs());
        }
    }
    ensure(bump_worst <= 2e-6, || format!("|∫Δ·w| = {bump_worst:e}"))?;
    Ok(format!("residuals ≤ {worst:.1e}, |∫Δ·w| ≤ {bump_worst:.1e} over 50 λ"))
}

fn gram_schmidt() -> Outcome {
    let s = Arc::new(lib(GridSpace::new(vec![
        Axis::new("x", AxisKind::Continuous { cells: 6 }, Role::Z1),
        Axis::new("w", AxisKind::Categorical { levels: 3 }, Role::W),
    ]))?);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = lib(Density::normalized(
        s.clone(),
        (0..18).map(|_| rng.random_range(0.2..1.0)).collect(),
    ))?;
    let f0: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f1: Vec<f64> = (0..18).map(|_| rng.random_range(0.5..1.5)).collect();
    let alpha = lib(ratio_nuisance(&p, &f0, &f1))?;
    let mut ortho = 0.0_f64;
    for z in 0..6 {
        let g = lib(gram_schmidt_invariant_direction(&p, &f0, &f1, z, &[0.3, -0.7, 0.1], 5))?;
        let ft: Vec<f64> = (0..3).map(|w| f0[3 * z + w] - alpha[z] * f1[3 * z + w]).collect();
        let mean = g.iter().sum::<f64>() / 3.0;
        let dot = g.iter().zip(&ft).map(|(a, b)| a * b).sum::<f64>() / 3.0;
        ortho = ortho.max(mean.abs()).max(dot.abs());
    }
    ensure(ortho <= 1e-12, || format!("orthogonality residual {ortho:e}"))?;
    let h = lib(gram_schmidt_direction(&p, &f0, &f1, 5))?;
    let r = feasible_radius(&p, &h);
    let mut moved = 0.0_f64;
    for t in [1e-4, 1e-3, 1e-2].map(|t: f64| t.min(0.5 * r)) {
        let up = lib(ratio_nuisance(&lib(add_scaled(&p, t, &h))?, &f0, &f1))?;
        let down = lib(ratio_nuisance(&lib(add_scaled(&p, -t, &h))?, &f0, &f1))?;
        let deriv: Vec<f64> = up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * t)).collect();
        moved = moved
            .max(sup_distance(&up, &alpha))
            .max(deriv.iter().fold(0.0, |m, d| m.max(d.abs())));
    }
    ensure(moved <= 1e-8, || format!("α moved by {moved:e}"))?;
    Ok(format!(
        "orthogonality ≤ {ortho:.1e}, α change and derivative ≤ {moved:.1e}"
    ))
}

fn minimax() -> Outcome {
    let (em, eg) = (0.1, 0.2);
    let p = flat_propensity(16)?;
    let fam = lib(AlternativeFamily::ate(&p, em, eg, 2))?;
    let base = lib(functional_value(&p, &EstimandSpec::Ate))?;
    let constant = lib(minimax_demo(&fam, |_, _| Ok(base), em * eg, DEFAULT_XI, 4, 0))?;
    ensure((constant.risk - 2.0 * em * eg).abs() <= 1e-10, || {
        format!("constant risk {}", constant.risk)
    })?;

    let (g, _) = lib(true_nuisances(&p, &EstimandSpec::Ate))?;
    let m = lib(propensity_field(&p))?;
    let dr = lib(minimax_demo(
        &fam,
        |q, seed| dr_ate_estimate(&sample(q, 100_000, seed)?, &g, &m, 0.05),
        em * eg,
        DEFAULT_XI,
        32,
        1,
    ))?;
    let ratio = dr.risk / (em * eg);
    ensure((0.25..=4.0).contains(&ratio), || {
        format!("DR risk {} = {ratio:.3}·ε_mε_g", dr.risk)
    })?;
    Ok(format!(
        "constant risk {:.12} = 2ε_mε_g, DR risk {:.4} = {ratio:.2}·ε_mε_g",
        constant.risk, dr.risk
    ))
}

fn main() {
    let checks: [Criterion; 12] = [
        ("mixture equality", mixture_equality, 1),
        ("uncertainty membership", uncertainty_membership_check, 1),
        ("separation", separation, 1),
        ("invariances", invariances, 5),
        ("second derivatives", second_derivatives, 30),
        ("affine curvature vanishes", affine_curvature, 10),
        ("double robustness and bias factorization", double_robustness, 60),
        ("sampling rate", sampling_rate, 180),
        ("hellinger machinery", hellinger_machinery, 120),
        ("partition quality", partition_quality, 30),
        ("gram-schmidt invariant direction", gram_schmidt, 5),
        ("minimax demo", minimax, 300),
    ];
    // `cargo test -- <filter>` passes the filter through; run only matching criteria
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check, budget)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let mut outcome = check();
        let took = start.elapsed();
        if outcome.is_ok() && took > Duration::from_secs(*budget) {
            outcome = fail(format!("took {took:.1?}, budget {budget} s"));
        }
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {:>2} {tag} {name}: {detail} [{took:.2?}]", i + 1);
        failed += outcome.is_err() as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
