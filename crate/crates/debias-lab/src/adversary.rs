//! Hard instances: sign-flip families of alternatives around an anchor,
//! nuisance-invariant perturbation directions, and derivative probes.
//!
//! Every family member has the form `p̂ + Δ(λ, z₁)·K` for a fixed kernel `K`,
//! so averaging over all sign vectors returns the anchor exactly. For the
//! binary-treatment and partially linear families `K` is read off the
//! closed-form alternatives with `Δ = ±1`; on cells that the partition splits
//! the member is the membership-weighted average of the two signs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{add_scaled, l2_nuisance_distance, sup_distance, Density, GridSpace, GridValues, SignedDensity};
use crate::models::{
    alpha_values, functional_value, gamma_values, nu_upsilon_rho, propensity, EstimandKind, EstimandSpec,
};
use crate::partition::{bump, iterated_partition, lambda_from_index, BumpField, BumpPartition};

/// Largest `M` for which the mixture is enumerated exactly.
pub const MAX_ENUMERATED_PAIRS: usize = 16;
/// Default finite-difference step for second derivatives.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Smallest admissible conditional second moment in the Gram–Schmidt check.
pub const NONDEGENERACY_FLOOR: f64 = 1e-6;
const GS_RETRIES: usize = 8;
const NUISANCE_STEP: f64 = 1e-4;

/// Which nuisance a direction leaves unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nuisance {
    Gamma,
    Alpha,
}

impl std::str::FromStr for Nuisance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(Nuisance::Gamma),
            "alpha" => Ok(Nuisance::Alpha),
            _ => Err(Error::InvalidSpec(format!("unknown nuisance `{s}`"))),
        }
    }
}

fn nuisance(p: &Density, spec: &EstimandSpec, which: Nuisance) -> Result<Vec<f64>> {
    match which {
        Nuisance::Gamma => gamma_values(p, spec),
        Nuisance::Alpha => alpha_values(p, spec),
    }
}

fn expect_kind(spec: &EstimandSpec, p: &Density, kinds: &[EstimandKind]) -> Result<()> {
    spec.validate(p.space())?;
    if kinds.contains(&spec.kind()) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!(
            "construction is not defined for kind `{}`",
            spec.kind()
        )))
    }
}

/// Density of `X` with respect to its base measure.
fn covariate_density(p: &Density) -> Vec<f64> {
    p.z1_marginal()
}

fn signed(space: &Arc<GridSpace>, values: Vec<f64>) -> Result<SignedDensity> {
    SignedDensity::new(space.clone(), values)
}

/// Drops weights that vanish or are linear combinations of earlier ones.
fn independent(weights: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for w in weights {
        let scale = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut r = w.clone();
        for b in &basis {
            let c: f64 = r.iter().zip(b).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(b).for_each(|(a, b)| *a -= c * b);
        }
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-10 * scale.max(1e-300) && scale > 1e-14 {
            basis.push(r.into_iter().map(|v| v / n).collect());
            kept.push(w);
        }
    }
    kept
}

/// Extra scale parameters that identify how a family was built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum FamilyScales {
    /// Propensity and outcome shifts of the binary-treatment construction.
    Ate { eps_m: f64, eps_g: f64 },
    /// Slope and regression shifts of the partially linear construction.
    Plm { u: f64, v: f64, theta_hat: f64 },
    /// Log-odds construction: direction constants and step sizes.
    Lod {
        delta0: f64,
        delta1: f64,
        eta: f64,
        t: f64,
        s: f64,
    },
    /// Any direction pair with step sizes `t` (first) and `s` (second).
    Directional { t: f64, s: f64 },
}

/// Alternatives `P_λ = p̂ + Δ(λ, ·)·K` indexed by sign vectors.
#[derive(Clone, Debug)]
pub struct AlternativeFamily {
    pub anchor: Density,
    pub spec: EstimandSpec,
    pub partition: BumpPartition,
    /// Declared nuisance radii `(ε_γ, ε_α)`.
    pub eps_gamma: f64,
    pub eps_alpha: f64,
    pub scales: FamilyScales,
    /// When set, `member_selected` returns this alternative.
    pub lambda_index: Option<Vec<i8>>,
    kernel: SignedDensity,
}

impl AlternativeFamily {
    pub fn pairs(&self) -> usize {
        self.partition.pairs()
    }

    /// Per-atom kernel `K` multiplied by the sign field.
    pub fn kernel(&self) -> &SignedDensity {
        &self.kernel
    }

    /// The alternative for one sign vector.
    pub fn member(&self, lambda: &[i8]) -> Result<Density> {
        let field = bump(&self.partition, lambda)?;
        let h = bumped_direction(&self.kernel, &field)?;
        add_scaled(&self.anchor, 1.0, &h)
    }

    pub fn member_selected(&self) -> Result<Density> {
        let lambda = self
            .lambda_index
            .as_ref()
            .ok_or_else(|| Error::Precondition("family has no selected λ".into()))?;
        self.member(lambda)
    }

    /// Every sign vector when `M ≤ 12`, otherwise 256 seeded draws.
    pub fn probe_lambdas(&self) -> Vec<Vec<i8>> {
        let m = self.pairs();
        if m <= 12 {
            (0..1usize << m).map(|k| lambda_from_index(k, m)).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x1a3b);
            (0..256)
                .map(|_| (0..m).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
                .collect()
        }
    }

    /// The binary-treatment alternatives with propensity shift `eps_m` and
    /// outcome shift `eps_g`, on a fresh `2M`-block partition.
    pub fn ate(anchor: &Density, eps_m: f64, eps_g: f64, pairs: usize) -> Result<Self> {
        let partition = ate_partition(anchor, pairs)?;
        Self::ate_on(anchor, eps_m, eps_g, partition)
    }

    /// As [`AlternativeFamily::ate`] on a given partition.
    pub fn ate_on(anchor: &Density, eps_m: f64, eps_g: f64, partition: BumpPartition) -> Result<Self> {
        let spec = EstimandSpec::Ate;
        expect_kind(&spec, anchor, &[EstimandKind::Ate, EstimandKind::Lod])?;
        let c = ate_overlap(anchor)?;
        if eps_m < 0.0 || eps_g < 0.0 || eps_m > c || eps_g > c {
            return Err(Error::UncertaintyViolation(format!(
                "ε_m = {eps_m}, ε_g = {eps_g} must lie in [0, c] with overlap c = {c}"
            )));
        }
        let s = anchor.space();
        let px = covariate_density(anchor);
        let pi = propensity(anchor)?;
        let g = gamma_values(anchor, &spec)?;
        let mut k = vec![0.0; s.n_atoms()];
        for x in 0..s.z1_count() {
            let component = |sign: f64| -> [f64; 4] {
                let m = pi[x] + sign * eps_m;
                let g0 = g[2 * x] + sign * eps_g * (1.0 - pi[x] + sign * eps_m);
                let g1 = g[2 * x + 1] + sign * eps_g * (pi[x] - sign * eps_m);
                [(1.0 - m) * (1.0 - g0), (1.0 - m) * g0, m * (1.0 - g1), m * g1]
            };
            let (plus, minus) = (component(1.0), component(-1.0));
            for j in 0..4 {
                k[4 * x + j] = 0.5 * px[x] * (plus[j] - minus[j]);
            }
        }
        Ok(AlternativeFamily {
            anchor: anchor.clone(),
            spec,
            partition,
            eps_gamma: eps_g,
            eps_alpha: eps_m,
            scales: FamilyScales::Ate { eps_m, eps_g },
            lambda_index: None,
            kernel: signed(s, k)?,
        })
    }

    /// The partially linear `(u, v)` alternatives. The anchor must have a
    /// constant slope.
    pub fn plm(anchor: &Density, u: f64, v: f64, pairs: usize) -> Result<Self> {
        let spec = EstimandSpec::EccPlm;
        expect_kind(&spec, anchor, &[EstimandKind::EccPlm])?;
        if !(u.abs() < 1.0) {
            return Err(Error::Domain {
                name: "u",
                value: u,
                domain: "(-1, 1)",
            });
        }
        let parts = PlmParts::of(anchor)?;
        let theta_hat = parts.constant_slope()?;
        let theta = (theta_hat + u * v) / (1.0 - u * u);
        let s = anchor.space();
        let mut k = vec![0.0; s.n_atoms()];
        for x in 0..s.z1_count() {
            let (g, q, sd, px) = (parts.g[x], parts.q[x], parts.sd[x], parts.px[x]);
            let tilt = theta * u * (1.0 - 2.0 * g);
            let c = [
                u * (q - 1.0) + v * (1.0 - g) + tilt,
                -(u * q + v * (1.0 - g) + tilt),
                u * (1.0 - q) + v * g - tilt,
                u * q - v * g + tilt,
            ];
            for j in 0..4 {
                k[4 * x + j] = px * sd * c[j];
            }
        }
        let partition = iterated_partition(&[covariate_density(anchor)], pairs)?;
        let spread = parts.mean_variance();
        Ok(AlternativeFamily {
            anchor: anchor.clone(),
            spec,
            partition,
            eps_gamma: u.abs() * spread.sqrt(),
            eps_alpha: v.abs() * spread.sqrt(),
            scales: FamilyScales::Plm { u, v, theta_hat },
            lambda_index: None,
            kernel: signed(s, k)?,
        })
    }

    /// Alternatives `p̂ + Δ·(t·first + s·second)` for a direction pair. The
    /// partition balances the covariate law and the `Z1` marginals of both
    /// directions; the declared radii are the largest distances over the
    /// probed sign vectors.
    pub fn directional(
        anchor: &Density,
        spec: &EstimandSpec,
        pair: &DirectionPair,
        t: f64,
        s: f64,
        pairs: usize,
    ) -> Result<Self> {
        spec.validate(anchor.space())?;
        let mut weights = vec![covariate_density(anchor)];
        weights.push(pair.invariant.z1_marginal());
        weights.push(pair.companion.z1_marginal());
        let partition = iterated_partition(&independent(weights), pairs)?;
        let kernel = pair.invariant.scaled(t).plus(s, &pair.companion)?;
        let scales = if spec.kind() == EstimandKind::Lod {
            let l = lod_scales(anchor)?;
            FamilyScales::Lod {
                delta0: l.delta0,
                delta1: l.delta1,
                eta: l.eta,
                t,
                s,
            }
        } else {
            FamilyScales::Directional { t, s }
        };
        let mut fam = AlternativeFamily {
            anchor: anchor.clone(),
            spec: spec.clone(),
            partition,
            eps_gamma: 0.0,
            eps_alpha: 0.0,
            scales,
            lambda_index: None,
            kernel,
        };
        let (mut eg, mut ea) = (0.0_f64, 0.0_f64);
        for lambda in fam.probe_lambdas() {
            let m = uncertainty_membership(&fam.member(&lambda)?, anchor, spec, 0.0, 0.0)?;
            eg = eg.max(m.gamma_distance);
            ea = ea.max(m.alpha_distance);
        }
        fam.eps_gamma = eg;
        fam.eps_alpha = ea;
        Ok(fam)
    }
}

/// Partition of the covariate grid balancing `p̂_X` and `(2m̂ − 1)·p̂_X`.
pub fn ate_partition(anchor: &Density, pairs: usize) -> Result<BumpPartition> {
    let px = covariate_density(anchor);
    let pi = propensity(anchor)?;
    let tilt: Vec<f64> = pi.iter().zip(&px).map(|(m, p)| (2.0 * m - 1.0) * p).collect();
    iterated_partition(&independent(vec![px, tilt]), pairs)
}

/// Overlap constant `c` of a binary-treatment anchor: the smallest distance
/// of any propensity or outcome probability from `{0, 1}`.
pub fn ate_overlap(anchor: &Density) -> Result<f64> {
    let pi = propensity(anchor)?;
    let g = gamma_values(anchor, &EstimandSpec::Ate)?;
    Ok(pi
        .iter()
        .chain(&g)
        .map(|v| v.min(1.0 - v))
        .fold(f64::INFINITY, f64::min))
}

/// One alternative of the binary-treatment construction.
pub fn ate_alternative(
    anchor: &Density,
    eps_m: f64,
    eps_g: f64,
    partition: &BumpPartition,
    lambda: &[i8],
) -> Result<Density> {
    AlternativeFamily::ate_on(anchor, eps_m, eps_g, partition.clone())?.member(lambda)
}

/// Uniform average of the members over all `2^M` sign vectors.
pub fn mixture_density(family: &AlternativeFamily) -> Result<Density> {
    let m = family.pairs();
    if m > MAX_ENUMERATED_PAIRS {
        return Err(Error::SizeLimit(format!(
            "M = {m} exceeds {MAX_ENUMERATED_PAIRS}; use the sampled mixture"
        )));
    }
    let lambdas = (0..1usize << m).map(|k| lambda_from_index(k, m));
    average_members(family, lambdas)
}

/// Approximate mixture from `draws` seeded sign vectors.
pub fn sampled_mixture_density(family: &AlternativeFamily, draws: usize, seed: u64) -> Result<Density> {
    if draws == 0 {
        return Err(Error::Precondition("need at least one draw".into()));
    }
    let m = family.pairs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambdas: Vec<Vec<i8>> = (0..draws)
        .map(|_| (0..m).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
        .collect();
    average_members(family, lambdas.into_iter())
}

fn average_members(family: &AlternativeFamily, lambdas: impl Iterator<Item = Vec<i8>>) -> Result<Density> {
    let mut acc = vec![0.0; family.anchor.space().n_atoms()];
    let mut count = 0usize;
    for lambda in lambdas {
        let p = family.member(&lambda)?;
        acc.iter_mut().zip(p.values()).for_each(|(a, v)| *a += v);
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Density::new(family.anchor.space().clone(), acc)
}

/// A perturbation that leaves one nuisance fixed, and a companion with a
/// nonzero mixed second derivative against it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionPair {
    pub invariant: SignedDensity,
    pub companion: SignedDensity,
    /// The nuisance held fixed along `invariant`.
    pub fixed: Nuisance,
    pub kind: EstimandKind,
}

/// `+1` on the lower half of the covariate cells and `−1` on the upper half.
fn half_sign(cells: usize) -> Vec<f64> {
    (0..cells).map(|x| if 2 * x < cells { 1.0 } else { -1.0 }).collect()
}

/// Scales each `(z, w)` slice mass `p(z, ·)` into the outcome split of `p`.
fn slice_mass(p: &Density, z: usize) -> f64 {
    let s = p.space();
    (0..s.w_count()).map(|w| p.values()[s.atom(z, w)]).sum()
}

/// Direction reweighting the covariate slices by `psi(z)` while keeping every
/// conditional law of `W` given `Z`: `psi(z)·p̂(z, w)/p̂(z, ·)`.
fn slice_reweighting(p: &Density, psi: &[f64]) -> Vec<f64> {
    let s = p.space();
    (0..s.n_atoms())
        .map(|a| {
            let z = s.z_of(a);
            psi[z] * p.values()[a] / slice_mass(p, z)
        })
        .collect()
}

/// Direction moving mass between the two outcome levels of each slice by
/// `psi(z)`, keeping `p̂(z, ·)`.
fn label_flip(psi: &[f64], w_count: usize) -> Vec<f64> {
    psi.iter()
        .flat_map(|v| {
            let mut row = vec![0.0; w_count];
            row[0] = -v;
            row[w_count - 1] = *v;
            row
        })
        .collect()
}

/// The constructions for each estimand. `variant` selects which nuisance the
/// first direction holds fixed.
pub fn direction_pair(spec: &EstimandSpec, anchor: &Density, variant: Nuisance) -> Result<DirectionPair> {
    spec.validate(anchor.space())?;
    let s = anchor.space();
    let nx = s.z1_count();
    let v = anchor.values();
    let (g_dir, a_dir): (Vec<f64>, Vec<f64>) = match spec {
        EstimandSpec::Ate => {
            let phi = half_sign(nx);
            let mut g0 = vec![0.0; s.n_atoms()];
            let mut g1 = vec![0.0; s.n_atoms()];
            for x in 0..nx {
                let p0 = v[4 * x] + v[4 * x + 1];
                let p1 = v[4 * x + 2] + v[4 * x + 3];
                g0[4 * x] = -phi[x] * p1 * v[4 * x] / p0;
                g0[4 * x + 1] = -phi[x] * p1 * v[4 * x + 1] / p0;
                g0[4 * x + 2] = phi[x] * v[4 * x + 2];
                g0[4 * x + 3] = phi[x] * v[4 * x + 3];
                g1[4 * x + 2] = -phi[x] * p1;
                g1[4 * x + 3] = phi[x] * p1;
            }
            // G₀ keeps γ and moves α; G₁ keeps the (x, d) marginal
            (g0, g1)
        }
        EstimandSpec::Lod => {
            let l = lod_scales(anchor)?;
            let mut phi0 = vec![0.0; s.n_atoms()];
            let mut phi1 = vec![0.0; s.n_atoms()];
            for x in 0..nx {
                let p0 = v[4 * x] + v[4 * x + 1];
                let p1 = v[4 * x + 2] + v[4 * x + 3];
                phi0[4 * x] = -l.delta0 * p1 / p0 * v[4 * x];
                phi0[4 * x + 1] = -l.delta0 * p1 / p0 * v[4 * x + 1];
                phi0[4 * x + 2] = l.delta0 * v[4 * x + 2];
                phi0[4 * x + 3] = l.delta0 * v[4 * x + 3];
                if l.region[x] {
                    phi1[4 * x + 2] = -l.delta1 * v[4 * x + 2];
                    phi1[4 * x + 3] = l.delta1 * v[4 * x + 2];
                }
            }
            (phi0, phi1)
        }
        EstimandSpec::Wad { .. } => {
            let phi = wad_profile(spec)?;
            let nd = s.z2_count();
            let psi: Vec<f64> = (0..s.z_count()).map(|z| phi[z % nd]).collect();
            let masses: Vec<f64> = (0..s.z_count()).map(|z| slice_mass(anchor, z)).collect();
            let flip: Vec<f64> = psi.iter().zip(&masses).map(|(a, b)| a * b).collect();
            (slice_reweighting(anchor, &psi), label_flip(&flip, 2))
        }
        EstimandSpec::Ds { .. } => {
            let zeta = ds_profile(anchor, spec)?;
            let g0: Vec<f64> = (0..s.n_atoms()).map(|a| zeta[s.z_of(a)] * v[a]).collect();
            (g0, label_flip(&zeta, 2).into_iter().map(|x| -x).collect())
        }
        EstimandSpec::EccPlm => {
            let parts = PlmParts::of(anchor)?;
            let mut dv = vec![0.0; s.n_atoms()];
            let mut du = vec![0.0; s.n_atoms()];
            for x in 0..nx {
                let (g, q, sd, px) = (parts.g[x], parts.q[x], parts.sd[x], parts.px[x]);
                let tilt = parts.theta[x] * (1.0 - 2.0 * g);
                let cv = [1.0 - g, -(1.0 - g), g, -g];
                let cu = [q - 1.0 + tilt, -(q + tilt), 1.0 - q - tilt, q + tilt];
                for j in 0..4 {
                    dv[4 * x + j] = px * sd * cv[j];
                    du[4 * x + j] = px * sd * cu[j];
                }
            }
            (dv, du)
        }
        EstimandSpec::Ape { .. } => {
            if variant == Nuisance::Gamma {
                return Err(Error::InvalidSpec(
                    "only the α-invariant label flip is provided for the policy effect".into(),
                ));
            }
            let nd = s.z2_count();
            let phi = half_sign(nx);
            let flip: Vec<f64> = (0..s.z_count()).map(|z| phi[z / nd] * slice_mass(anchor, z)).collect();
            let psi: Vec<f64> = (0..s.z_count())
                .map(|z| if 2 * (z % nd) < nd { 1.0 } else { -1.0 })
                .collect();
            let a0 = label_flip(&flip, 2);
            let reweight = slice_reweighting(anchor, &psi);
            return Ok(DirectionPair {
                invariant: signed(s, a0)?,
                companion: signed(s, reweight)?,
                fixed: Nuisance::Alpha,
                kind: EstimandKind::Ape,
            });
        }
    };
    let (g_dir, a_dir) = (signed(s, g_dir)?, signed(s, a_dir)?);
    Ok(match variant {
        Nuisance::Gamma => DirectionPair {
            invariant: g_dir,
            companion: a_dir,
            fixed: Nuisance::Gamma,
            kind: spec.kind(),
        },
        Nuisance::Alpha => DirectionPair {
            invariant: a_dir,
            companion: g_dir,
            fixed: Nuisance::Alpha,
            kind: spec.kind(),
        },
    })
}

/// Largest atom-wise change of a nuisance along `anchor + t·direction` over
/// the given steps.
pub fn verify_invariance(
    anchor: &Density,
    direction: &SignedDensity,
    spec: &EstimandSpec,
    which: Nuisance,
    t_grid: &[f64],
) -> Result<f64> {
    let base = nuisance(anchor, spec, which)?;
    let mut worst = 0.0_f64;
    for &t in t_grid {
        let p = add_scaled(anchor, t, direction)?;
        worst = worst.max(sup_distance(&base, &nuisance(&p, spec, which)?));
    }
    Ok(worst)
}

/// `Δ(λ, z₁)·direction`, after checking that the sign field integrates the
/// direction to zero.
pub fn bumped_direction(direction: &SignedDensity, field: &BumpField) -> Result<SignedDensity> {
    let s = direction.space();
    if field.values.len() != s.z1_count() {
        return Err(Error::DimensionMismatch {
            expected: s.z1_count(),
            got: field.values.len(),
        });
    }
    let out = direction.times_z1(&field.values);
    let mass = out.total_mass();
    let size: f64 = direction.values().iter().map(|v| v.abs()).sum::<f64>() * s.atom_weight();
    if mass.abs() > 1e-10 * (1.0 + size) {
        return Err(Error::Pairing { mass });
    }
    Ok(out)
}

/// Central mixed difference of `f` at the origin, with one Richardson step.
pub fn mixed_partial(f: impl Fn(f64, f64) -> Result<f64>, h: f64) -> Result<f64> {
    let d = |h: f64| -> Result<f64> { Ok((f(h, h)? - f(h, -h)? - f(-h, h)? + f(-h, -h)?) / (4.0 * h * h)) };
    let (coarse, fine) = (d(h)?, d(0.5 * h)?);
    Ok((4.0 * fine - coarse) / 3.0)
}

/// `∂²/∂s∂t χ(anchor + s·a + t·b)` at the origin.
pub fn second_derivative_fd(
    anchor: &Density,
    a: &SignedDensity,
    b: &SignedDensity,
    spec: &EstimandSpec,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Domain {
            name: "step",
            value: h,
            domain: "(0, ∞)",
        });
    }
    let corner = a.plus(1.0, b)?;
    let skew = a.plus(-1.0, b)?;
    for dir in [&corner, &skew] {
        let r = crate::measure::feasible_radius(anchor, dir);
        if h >= r {
            return Err(Error::InfeasibleRadius { t: h, radius: r });
        }
    }
    mixed_partial(
        |s, t| {
            let dir = a.scaled(s).plus(t, b)?;
            functional_value(&add_scaled(anchor, 1.0, &dir)?, spec)
        },
        h,
    )
}

/// `−∫ α υ_ρ (γ′[H₀])² dP̂_Z`, with `γ′` by central differences.
pub fn closed_form_chi2_h0(anchor: &Density, h0: &SignedDensity, spec: &EstimandSpec) -> Result<f64> {
    let (_, upsilon) = nu_upsilon_rho(spec, anchor)?;
    if upsilon.iter().all(|u| *u == 0.0) {
        return Ok(0.0);
    }
    let step = NUISANCE_STEP.min(0.25 * crate::measure::feasible_radius(anchor, h0));
    let up = gamma_values(&add_scaled(anchor, step, h0)?, spec)?;
    let down = gamma_values(&add_scaled(anchor, -step, h0)?, spec)?;
    let alpha = alpha_values(anchor, spec)?;
    let pz = anchor.z_probabilities();
    Ok(-(0..pz.len())
        .map(|z| {
            let d = (up[z] - down[z]) / (2.0 * step);
            pz[z] * alpha[z] * upsilon[z] * d * d
        })
        .sum::<f64>())
}

/// Constants of the log-odds construction.
#[derive(Clone, Debug, PartialEq)]
pub struct LodScales {
    /// Smallest propensity distance from `{0, 1}`.
    pub eta: f64,
    pub delta0: f64,
    pub delta1: f64,
    /// Covariate cells where the treated outcome probability sits on the
    /// chosen side of `1/2`.
    pub region: Vec<bool>,
    /// True when the region is `{g(1, ·) > 1/2}`.
    pub upper: bool,
}

pub fn lod_scales(anchor: &Density) -> Result<LodScales> {
    expect_kind(&EstimandSpec::Lod, anchor, &[EstimandKind::Lod])?;
    let pi = propensity(anchor)?;
    let g = gamma_values(anchor, &EstimandSpec::Ate)?;
    let eta = pi.iter().map(|p| p.min(1.0 - p)).fold(f64::INFINITY, f64::min);
    let px = covariate_density(anchor);
    let upper: Vec<bool> = (0..px.len()).map(|x| g[2 * x + 1] > 0.5).collect();
    let lower: Vec<bool> = (0..px.len()).map(|x| g[2 * x + 1] < 0.5).collect();
    let mass = |r: &[bool]| r.iter().zip(&px).filter(|(b, _)| **b).map(|(_, p)| p).sum::<f64>();
    let (region, is_upper) = if mass(&upper) > 0.0 {
        (upper, true)
    } else if mass(&lower) > 0.0 {
        (lower, false)
    } else {
        return Err(Error::Precondition(
            "treated outcome probability is 1/2 almost everywhere".into(),
        ));
    };
    Ok(LodScales {
        eta,
        delta0: eta / (8.0 * (1.0 - eta)),
        delta1: 0.125,
        region,
        upper: is_upper,
    })
}

/// `−δ₀δ₁ E[b(X)/g(1, X)]`, the mixed derivative along the log-odds pair.
pub fn lod_mixed_reference(anchor: &Density) -> Result<f64> {
    let l = lod_scales(anchor)?;
    let g = gamma_values(anchor, &EstimandSpec::Ate)?;
    let px = covariate_density(anchor);
    let n = px.len() as f64;
    Ok(-l.delta0
        * l.delta1
        * (0..px.len())
            .filter(|x| l.region[*x])
            .map(|x| px[x] / g[2 * x + 1])
            .sum::<f64>()
        / n)
}

/// `δ₁² E[b(X)(2g(1, X) − 1)/g(1, X)²]`, the curvature along the α-invariant
/// log-odds direction.
pub fn lod_curvature_reference(anchor: &Density) -> Result<f64> {
    let l = lod_scales(anchor)?;
    let g = gamma_values(anchor, &EstimandSpec::Ate)?;
    let px = covariate_density(anchor);
    let n = px.len() as f64;
    Ok(l.delta1
        * l.delta1
        * (0..px.len())
            .filter(|x| l.region[*x])
            .map(|x| {
                let g1 = g[2 * x + 1];
                px[x] * (2.0 * g1 - 1.0) / (g1 * g1)
            })
            .sum::<f64>()
        / n)
}

/// Mean-zero treatment profile: cell averages of `b′` for the cubic bump
/// `b = 140 v³(1 − v)³` stretched over the first run of cells where `ω′`
/// keeps one sign.
pub fn wad_profile(spec: &EstimandSpec) -> Result<Vec<f64>> {
    let EstimandSpec::Wad { omega_prime, .. } = spec else {
        return Err(Error::InvalidSpec("profile needs a weighted average derivative".into()));
    };
    let nd = omega_prime.len();
    let start = omega_prime
        .iter()
        .position(|w| *w != 0.0)
        .ok_or_else(|| Error::Precondition("ω′ vanishes identically".into()))?;
    let sign = omega_prime[start].signum();
    let end = (start..nd).find(|&i| omega_prime[i].signum() != sign).unwrap_or(nd);
    if end - start < 2 {
        return Err(Error::Precondition("ω′ keeps its sign on fewer than two cells".into()));
    }
    let (a, len) = (start as f64 / nd as f64, (end - start) as f64 / nd as f64);
    let b = |d: f64| {
        let v = ((d - a) / len).clamp(0.0, 1.0);
        140.0 * (v * (1.0 - v)).powi(3)
    };
    Ok((0..nd)
        .map(|i| {
            let (l, r) = (i as f64 / nd as f64, (i + 1) as f64 / nd as f64);
            nd as f64 * (b(r) - b(l))
        })
        .collect())
}

/// `∫∫ ω′(d) φ(d)²/p̂(x, d, ·) dd dP̂_X`, the mixed derivative along the
/// treatment-profile pair.
pub fn wad_mixed_reference(anchor: &Density, spec: &EstimandSpec) -> Result<f64> {
    let EstimandSpec::Wad { omega_prime, .. } = spec else {
        return Err(Error::InvalidSpec(
            "reference needs a weighted average derivative".into(),
        ));
    };
    spec.validate(anchor.space())?;
    let phi = wad_profile(spec)?;
    let s = anchor.space();
    let (nx, nd) = (s.z1_count(), s.z2_count());
    let px = covariate_density(anchor);
    let mut total = 0.0;
    for (x, px) in px.iter().enumerate().take(nx) {
        let inner: f64 = (0..nd)
            .map(|d| omega_prime[d] * phi[d] * phi[d] / slice_mass(anchor, x * nd + d))
            .sum::<f64>()
            / nd as f64;
        total += px * inner / nx as f64;
    }
    Ok(total)
}

/// `ζ = 1_A − c·1_B` with `A`, `B` the two halves of the first run of cells
/// where `f₂ − f₁` keeps one sign (negative runs preferred), and `c` making
/// `∫ ζ p̂(x, ·) = 0`.
pub fn ds_profile(anchor: &Density, spec: &EstimandSpec) -> Result<Vec<f64>> {
    let EstimandSpec::Ds { f1, f2 } = spec else {
        return Err(Error::InvalidSpec("profile needs a distribution shift".into()));
    };
    spec.validate(anchor.space())?;
    let diff: Vec<f64> = f2.iter().zip(f1).map(|(b, a)| b - a).collect();
    let run = |neg: bool| -> Option<(usize, usize)> {
        let hit = |v: f64| if neg { v < 0.0 } else { v > 0.0 };
        let start = diff.iter().position(|v| hit(*v))?;
        let end = (start..diff.len()).find(|&i| !hit(diff[i])).unwrap_or(diff.len());
        (end - start >= 2).then_some((start, end))
    };
    let (start, end) = run(true)
        .or_else(|| run(false))
        .ok_or_else(|| Error::Precondition("f₂ − f₁ keeps one sign on fewer than two cells".into()))?;
    let mid = start + (end - start) / 2;
    let px = covariate_density(anchor);
    let mass_a: f64 = px[start..mid].iter().sum();
    let mass_b: f64 = px[mid..end].iter().sum();
    if !(mass_a > 0.0 && mass_b > 0.0) {
        return Err(Error::Precondition(
            "covariate law puts no mass on the shift region".into(),
        ));
    }
    let c = mass_a / mass_b;
    Ok((0..diff.len())
        .map(|x| {
            if (start..mid).contains(&x) {
                1.0
            } else if (mid..end).contains(&x) {
                -c
            } else {
                0.0
            }
        })
        .collect())
}

/// `∫ ζ²/p̂(x, ·) d(F₂ − F₁)`: the mixed derivative of the distribution
/// shift along its pair. On a uniform covariate law `p̂(x, ·) ≡ 1`.
pub fn ds_mixed_reference(anchor: &Density, spec: &EstimandSpec) -> Result<f64> {
    let EstimandSpec::Ds { f1, f2 } = spec else {
        return Err(Error::InvalidSpec("reference needs a distribution shift".into()));
    };
    let zeta = ds_profile(anchor, spec)?;
    let px = covariate_density(anchor);
    let n = px.len() as f64;
    Ok((0..px.len())
        .map(|x| zeta[x] * zeta[x] / px[x] * (f2[x] - f1[x]))
        .sum::<f64>()
        / n)
}

/// Conditional pieces of a partially linear anchor, per covariate cell.
struct PlmParts {
    px: Vec<f64>,
    g: Vec<f64>,
    q: Vec<f64>,
    sd: Vec<f64>,
    theta: Vec<f64>,
}

impl PlmParts {
    fn of(p: &Density) -> Result<Self> {
        let spec = EstimandSpec::EccPlm;
        let g = gamma_values(p, &spec)?;
        let q = alpha_values(p, &spec)?;
        let px = covariate_density(p);
        let v = p.values();
        let mut theta = Vec::with_capacity(g.len());
        for x in 0..g.len() {
            if !(g[x] > 0.0 && g[x] < 1.0) {
                return Err(Error::DegenerateNuisance {
                    atom: 4 * x,
                    reason: format!("treatment probability {}", g[x]),
                });
            }
            let p11 = v[4 * x + 3] / px[x];
            theta.push((p11 / g[x] - q[x]) / (1.0 - g[x]));
        }
        let sd = g.iter().map(|g| (g * (1.0 - g)).sqrt()).collect();
        Ok(PlmParts { px, g, q, sd, theta })
    }

    fn constant_slope(&self) -> Result<f64> {
        let t0 = self.theta[0];
        if self.theta.iter().any(|t| (t - t0).abs() > 1e-9) {
            return Err(Error::Precondition("anchor slope is not constant in x".into()));
        }
        Ok(t0)
    }

    /// `E_{P_X}[ĝ(1 − ĝ)]`.
    fn mean_variance(&self) -> f64 {
        let n = self.px.len() as f64;
        self.px.iter().zip(&self.sd).map(|(p, s)| p * s * s).sum::<f64>() / n
    }
}

/// `−E_{P_X}[ĝ(1 − ĝ)]`, the cross derivative of `E[Y g(X)]` in `(u, v)`.
pub fn plm_cross_reference(anchor: &Density) -> Result<f64> {
    Ok(-PlmParts::of(anchor)?.mean_variance())
}

/// Largest gap between `p(x, 1, 1)/p_X(x)` and `g(q + θ(1 − g))`, which is
/// zero exactly when `p` is partially linear with slope `theta`.
pub fn plm_factorization_residual(p: &Density, theta: f64) -> Result<f64> {
    let parts = PlmParts::of(p)?;
    let v = p.values();
    Ok((0..parts.g.len())
        .map(|x| {
            let (g, q) = (parts.g[x], parts.q[x]);
            (v[4 * x + 3] / parts.px[x] - g * (q + theta * (1.0 - g))).abs()
        })
        .fold(0.0, f64::max))
}

/// Distances of a candidate law's nuisances from the anchor's.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub member: bool,
    pub gamma_distance: f64,
    pub alpha_distance: f64,
}

/// Whether `p` lies in the structure-agnostic uncertainty set around `anchor`.
/// Distances are in `L²` of the candidate's covariate law; for the binary
/// treatment kinds the weight distance is the propensity distance.
pub fn uncertainty_membership(
    p: &Density,
    anchor: &Density,
    spec: &EstimandSpec,
    eps_gamma: f64,
    eps_alpha: f64,
) -> Result<Membership> {
    spec.validate(p.space())?;
    let s = p.space();
    let pz = p.z_marginal();
    let gd = l2_nuisance_distance(&gamma_values(anchor, spec)?, &gamma_values(p, spec)?, &pz, s.z_weight())?;
    let ad = match spec.kind() {
        EstimandKind::Ate | EstimandKind::Lod => {
            l2_nuisance_distance(&propensity(anchor)?, &propensity(p)?, &p.z1_marginal(), s.z1_weight())?
        }
        _ => l2_nuisance_distance(&alpha_values(anchor, spec)?, &alpha_values(p, spec)?, &pz, s.z_weight())?,
    };
    let within = |d: f64, eps: f64| d <= eps * (1.0 + 1e-9) + 1e-12;
    Ok(Membership {
        member: within(gd, eps_gamma) && within(ad, eps_alpha),
        gamma_distance: gd,
        alpha_distance: ad,
    })
}

/// `E_P[F₀ | z]/E_P[F₁ | z]` for every covariate atom.
pub fn ratio_nuisance(p: &Density, f0: &[f64], f1: &[f64]) -> Result<Vec<f64>> {
    let s = p.space();
    for f in [f0, f1] {
        if f.len() != s.n_atoms() {
            return Err(Error::DimensionMismatch {
                expected: s.n_atoms(),
                got: f.len(),
            });
        }
    }
    (0..s.z_count())
        .map(|z| {
            let (mut num, mut den) = (0.0, 0.0);
            for w in 0..s.w_count() {
                let a = s.atom(z, w);
                num += f0[a] * p.values()[a];
                den += f1[a] * p.values()[a];
            }
            if den == 0.0 {
                Err(Error::DegenerateNuisance {
                    atom: s.atom(z, 0),
                    reason: "ratio denominator vanishes".into(),
                })
            } else {
                Ok(num / den)
            }
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

/// `min_{a,b} E_μ[(F₀ − aF₁ − b)² | z]` over the `W` levels of one slice.
fn affine_residual(f0: &[f64], f1: &[f64]) -> f64 {
    let c1: Vec<f64> = f1.iter().map(|v| v - mean(f1)).collect();
    let c0: Vec<f64> = f0.iter().map(|v| v - mean(f0)).collect();
    let var1 = dot(&c1, &c1);
    let a = if var1 > 1e-300 { dot(&c0, &c1) / var1 } else { 0.0 };
    let r: Vec<f64> = c0.iter().zip(&c1).map(|(x, y)| x - a * y).collect();
    dot(&r, &r)
}

/// Gram–Schmidt direction for one covariate atom: `seed_field` projected off
/// `1` and `F̃ = F₀ − α̂F₁` in the conditional base measure. When the
/// projection vanishes, up to eight seeded random fields are tried instead.
pub fn gram_schmidt_invariant_direction(
    anchor: &Density,
    f0: &[f64],
    f1: &[f64],
    z: usize,
    seed_field: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    let s = anchor.space();
    let nw = s.w_count();
    if seed_field.len() != nw {
        return Err(Error::DimensionMismatch {
            expected: nw,
            got: seed_field.len(),
        });
    }
    if z >= s.z_count() {
        return Err(Error::Precondition(format!("covariate atom {z} out of range")));
    }
    let alpha = ratio_nuisance(anchor, f0, f1)?[z];
    let slice = |f: &[f64]| -> Vec<f64> { (0..nw).map(|w| f[s.atom(z, w)]).collect() };
    let (a0, a1) = (slice(f0), slice(f1));
    let spread = affine_residual(&a0, &a1);
    if !(spread > NONDEGENERACY_FLOOR) {
        return Err(Error::Precondition(format!(
            "F₀ is affine in F₁ on slice {z} (residual second moment {spread:e})"
        )));
    }
    let ft: Vec<f64> = a0.iter().zip(&a1).map(|(x, y)| x - alpha * y).collect();
    let c = mean(&ft);
    let d: Vec<f64> = ft.iter().map(|v| v - c).collect();
    let dd = dot(&d, &d);
    let project = |g: &[f64]| -> Vec<f64> {
        let k = dot(g, &d) / dd;
        let m = mean(g);
        g.iter().zip(&d).map(|(g, d)| g - k * d - m).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = seed_field.to_vec();
    for _ in 0..=GS_RETRIES {
        let out = project(&field);
        let norm = dot(&out, &out).sqrt();
        let size = 1.0 + dot(&field, &field).sqrt();
        if norm > 1e-6 * size {
            return Ok(out);
        }
        field = (0..nw).map(|_| rng.random_range(-1.0..1.0)).collect();
    }
    Err(Error::Nondegenerate(format!(
        "the W space of slice {z} is spanned by 1 and F̃; it needs three linearly independent functions"
    )))
}

/// A perturbation of the whole law built slice by slice from Gram–Schmidt
/// directions: `h(z, w) = p̂_Z(z)·g₀(w | z)` with each slice scaled to unit
/// sup norm. It leaves `E[F₀ | Z]/E[F₁ | Z]` unchanged.
pub fn gram_schmidt_direction(anchor: &Density, f0: &[f64], f1: &[f64], seed: u64) -> Result<SignedDensity> {
    let s = anchor.space();
    let nw = s.w_count();
    let pz = anchor.z_marginal();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; s.n_atoms()];
    for z in 0..s.z_count() {
        let seed_field: Vec<f64> = (0..nw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = gram_schmidt_invariant_direction(anchor, f0, f1, z, &seed_field, seed.wrapping_add(z as u64))?;
        let top = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for w in 0..nw {
            values[s.atom(z, w)] = pz[z] * g[w] / top;
        }
    }
    SignedDensity::new(s.clone(), values)
}
