//! Plug-in, doubly robust and cross-fitted debiased estimators, in sampled
//! and exact-expectation form, plus corruption of nuisance fields with a
//! prescribed `L²` error.
//!
//! Scores are tabulated once per atom, so an estimate over `n` rows costs
//! `O(atoms + n)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{AxisKind, Dataset, Density, GridSpace, GridValues, Role};
use crate::models::{
    alpha_values, gamma_values, ipw_weights, nu_upsilon_rho, propensity, score_rho, EstimandSpec, NuisanceField,
    NuisanceRole, DEFAULT_OVERLAP,
};
use crate::partition::BumpField;

pub const DEFAULT_FOLDS: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Use the direction as given.
    #[default]
    Adversarial,
    /// Flip the direction by an independent sign on every covariate atom.
    Random,
}

impl std::str::FromStr for Alignment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adversarial" => Ok(Alignment::Adversarial),
            "random" => Ok(Alignment::Random),
            _ => Err(Error::InvalidSpec(format!("unknown alignment `{s}`"))),
        }
    }
}

impl std::fmt::Display for Alignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Alignment::Adversarial => "adversarial",
            Alignment::Random => "random",
        })
    }
}

/// Shape of a corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionDirection {
    /// A sign field over the `Z1` cells, spread over any other covariate axes.
    Bump(BumpField),
    /// One value per atom of the nuisance grid.
    Field(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Target `L²(P_Z)` error.
    pub eps: f64,
    pub direction: CorruptionDirection,
    #[serde(default)]
    pub alignment: Alignment,
    /// Stream for random alignment.
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(eps: f64, direction: CorruptionDirection) -> Self {
        CorruptionSpec {
            eps,
            direction,
            alignment: Alignment::Adversarial,
            seed: 0,
        }
    }

    pub fn random(mut self, seed: u64) -> Self {
        self.alignment = Alignment::Random;
        self.seed = seed;
        self
    }
}

/// Law of the covariates that a nuisance grid indexes, as a density on that
/// grid: the `Z` marginal for fields over `Z`, the `Z1` marginal for fields
/// over `Z1` alone.
pub fn nuisance_law(p: &Density, field: &NuisanceField) -> Result<Density> {
    let s = p.space();
    let n = field.values.len();
    let values = if n == s.z_count() {
        p.z_marginal()
    } else if n == s.z1_count() {
        p.z1_marginal()
    } else {
        return Err(Error::DimensionMismatch {
            expected: s.z_count(),
            got: n,
        });
    };
    Density::new(field.space.clone(), values)
}

/// `‖f − g‖` in `L²` of a law over the nuisance grid.
pub fn field_distance(f: &NuisanceField, g: &NuisanceField, law: &Density) -> Result<f64> {
    crate::measure::l2_nuisance_distance(&f.values, &g.values, law.values(), law.space().atom_weight())
}

fn expand(direction: &CorruptionDirection, space: &GridSpace) -> Result<Vec<f64>> {
    let n = space.n_atoms();
    match direction {
        CorruptionDirection::Field(v) => {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
            Ok(v.clone())
        }
        CorruptionDirection::Bump(b) => {
            if b.values.len() != space.z1_count() {
                return Err(Error::DimensionMismatch {
                    expected: space.z1_count(),
                    got: b.values.len(),
                });
            }
            let inner = n / space.z1_count();
            Ok((0..n).map(|i| b.values[i / inner]).collect())
        }
    }
}

/// `truth + eps·d/‖d‖` with `‖·‖` the `L²(law)` norm, so the result sits at
/// distance exactly `eps` from the truth. Overlap-constrained fields must
/// stay inside `[c, 1 − c]`; otherwise the largest admissible `eps` is
/// reported.
pub fn corrupt_nuisance(truth: &NuisanceField, spec: &CorruptionSpec, law: &Density) -> Result<NuisanceField> {
    if !(spec.eps >= 0.0) {
        return Err(Error::Domain {
            name: "eps",
            value: spec.eps,
            domain: "[0, ∞)",
        });
    }
    if law.values().len() != truth.values.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.values.len(),
            got: law.values().len(),
        });
    }
    if spec.eps == 0.0 {
        return Ok(truth.clone());
    }
    let mut d = expand(&spec.direction, &truth.space)?;
    if spec.alignment == Alignment::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        d.iter_mut().for_each(|v| {
            if rng.random::<bool>() {
                *v = -*v
            }
        });
    }
    let w = law.space().atom_weight();
    let norm = d.iter().zip(law.values()).map(|(d, p)| p * d * d).sum::<f64>().sqrt() * w.sqrt();
    if !(norm > 0.0) {
        return Err(Error::InvalidDirection);
    }
    d.iter_mut().for_each(|v| *v /= norm);
    if let Some(c) = truth.overlap {
        let achievable = truth
            .values
            .iter()
            .zip(&d)
            .map(|(t, d)| {
                if *d > 0.0 {
                    (1.0 - c - t) / d
                } else if *d < 0.0 {
                    (t - c) / -d
                } else {
                    f64::INFINITY
                }
            })
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
        if spec.eps > achievable {
            return Err(Error::ClippedCorruption { achievable });
        }
    }
    let mut out = truth.clone();
    out.values.iter_mut().zip(&d).for_each(|(v, d)| *v += spec.eps * d);
    Ok(out)
}

/// Sign of `α·υ_ρ` on every covariate atom: corrupting `γ` along this field
/// makes every second-order contribution of a non-affine score add up.
pub fn curvature_aligned_direction(p: &Density, spec: &EstimandSpec) -> Result<Vec<f64>> {
    let alpha = alpha_values(p, spec)?;
    let (_, upsilon) = nu_upsilon_rho(spec, p)?;
    Ok(alpha
        .iter()
        .zip(&upsilon)
        .map(|(a, u)| if a * u < 0.0 { -1.0 } else { 1.0 })
        .collect())
}

/// The propensity of a binary-treatment law as a field over `x`.
pub fn propensity_field(p: &Density) -> Result<NuisanceField> {
    let space = Arc::new(covariate_space(p.space())?);
    NuisanceField::new(space, propensity(p)?, NuisanceRole::Propensity)
}

/// The grid of the `Z1` axes alone.
pub fn covariate_space(space: &GridSpace) -> Result<GridSpace> {
    GridSpace::new(space.axes().iter().filter(|a| a.role == Role::Z1).cloned().collect())
}

/// `(γ, α)` of a law as fields over its covariate grid.
pub fn true_nuisances(p: &Density, spec: &EstimandSpec) -> Result<(NuisanceField, NuisanceField)> {
    crate::models::nuisances_of(p, spec)
}

fn check_field(space: &GridSpace, f: &NuisanceField, per: usize) -> Result<()> {
    if f.values.len() != per {
        return Err(Error::DimensionMismatch {
            expected: per,
            got: f.values.len(),
        });
    }
    let _ = space;
    Ok(())
}

/// Plug-in score `m₀(o) + σ m₁(o, γ̂)` for every atom.
pub fn plugin_table(space: &GridSpace, gamma_hat: &NuisanceField, spec: &EstimandSpec) -> Result<Vec<f64>> {
    spec.validate(space)?;
    check_field(space, gamma_hat, space.z_count())?;
    let m0 = spec.m0_all(space);
    let m1 = spec.m1_all(space, &gamma_hat.values);
    Ok(m0.iter().zip(&m1).map(|(a, b)| a + spec.sigma() * b).collect())
}

/// Debiased score `m₀(o) + σ[m₁(o, γ̂) + α̂(z) ρ(o, γ̂(z))]` for every atom.
pub fn dml_table(
    space: &GridSpace,
    gamma_hat: &NuisanceField,
    alpha_hat: &NuisanceField,
    spec: &EstimandSpec,
) -> Result<Vec<f64>> {
    check_field(space, alpha_hat, space.z_count())?;
    let mut t = plugin_table(space, gamma_hat, spec)?;
    for (a, v) in t.iter_mut().enumerate() {
        let z = space.z_of(a);
        *v += spec.sigma() * alpha_hat.values[z] * score_rho(spec, space, a, gamma_hat.values[z]);
    }
    Ok(t)
}

/// Clips a propensity into `[c, 1 − c]`.
pub fn clip_propensity(m_hat: &NuisanceField, c: f64) -> Result<Vec<f64>> {
    if !(0.0..0.5).contains(&c) {
        return Err(Error::Domain {
            name: "clip",
            value: c,
            domain: "[0, 1/2)",
        });
    }
    Ok(m_hat.values.iter().map(|m| m.clamp(c, 1.0 - c)).collect())
}

/// Doubly robust score for the treatment effect, with `m̂` clipped to
/// `[c, 1 − c]`.
pub fn dr_ate_table(space: &GridSpace, g_hat: &NuisanceField, m_hat: &NuisanceField, clip: f64) -> Result<Vec<f64>> {
    EstimandSpec::Ate.validate(space)?;
    check_field(space, g_hat, space.z_count())?;
    check_field(space, m_hat, space.z1_count())?;
    let m = clip_propensity(m_hat, clip)?;
    let g = &g_hat.values;
    Ok((0..space.n_atoms())
        .map(|a| {
            let (x, d, y) = (a / 4, (a >> 1) & 1, (a & 1) as f64);
            let (g0, g1) = (g[2 * x], g[2 * x + 1]);
            let weight = if d == 1 { 1.0 / m[x] } else { -1.0 / (1.0 - m[x]) };
            g1 - g0 + weight * (y - g[2 * x + d])
        })
        .collect())
}

fn sample_mean(data: &Dataset, table: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(data.rows.iter().map(|&a| table[a]).sum::<f64>() / data.len() as f64)
}

fn expectation(p: &Density, table: &[f64]) -> f64 {
    p.values().iter().zip(table).map(|(a, b)| a * b).sum::<f64>() * p.space().atom_weight()
}

/// Sample average of the plug-in score.
pub fn plugin_estimate(data: &Dataset, gamma_hat: &NuisanceField, spec: &EstimandSpec) -> Result<f64> {
    let t = plugin_table(&data.space, gamma_hat, spec)?;
    sample_mean(data, &t)
}

/// Sample average of the doubly robust score.
pub fn dr_ate_estimate(data: &Dataset, g_hat: &NuisanceField, m_hat: &NuisanceField, clip: f64) -> Result<f64> {
    let t = dr_ate_table(&data.space, g_hat, m_hat, clip)?;
    sample_mean(data, &t)
}

/// Cross-fitted debiased estimate. The rows are split into `folds`
/// contiguous folds and the fold means are averaged with weights
/// proportional to fold size; with fixed fields this equals the full-sample
/// mean up to summation order.
pub fn dml_estimate(
    data: &Dataset,
    gamma_hat: &NuisanceField,
    alpha_hat: &NuisanceField,
    spec: &EstimandSpec,
    folds: usize,
) -> Result<f64> {
    if folds == 0 {
        return Err(Error::Domain {
            name: "folds",
            value: 0.0,
            domain: "[1, n]",
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if folds > data.len() {
        return Err(Error::Precondition(format!(
            "{folds} folds leave some empty with {} rows",
            data.len()
        )));
    }
    let t = dml_table(&data.space, gamma_hat, alpha_hat, spec)?;
    let n = data.len();
    let mut total = 0.0;
    for k in 0..folds {
        let (lo, hi) = (k * n / folds, (k + 1) * n / folds);
        let mean = data.rows[lo..hi].iter().map(|&a| t[a]).sum::<f64>() / (hi - lo) as f64;
        total += mean * (hi - lo) as f64 / n as f64;
    }
    Ok(total)
}

/// Exact expectation of the plug-in score under `p`.
pub fn population_plugin(p: &Density, gamma_hat: &NuisanceField, spec: &EstimandSpec) -> Result<f64> {
    Ok(expectation(p, &plugin_table(p.space(), gamma_hat, spec)?))
}

/// Exact expectation of the debiased score under `p`.
pub fn population_dml(
    p: &Density,
    gamma_hat: &NuisanceField,
    alpha_hat: &NuisanceField,
    spec: &EstimandSpec,
) -> Result<f64> {
    Ok(expectation(p, &dml_table(p.space(), gamma_hat, alpha_hat, spec)?))
}

/// Exact expectation of the doubly robust score under `p`.
pub fn population_dr_ate(p: &Density, g_hat: &NuisanceField, m_hat: &NuisanceField, clip: f64) -> Result<f64> {
    Ok(expectation(p, &dr_ate_table(p.space(), g_hat, m_hat, clip)?))
}

/// `σ E_P[(α̂ − α)(γ − γ̂)]`, the exact bias of the debiased score for an
/// affine kind.
pub fn bias_product_integral(
    p: &Density,
    gamma_hat: &NuisanceField,
    alpha_hat: &NuisanceField,
    spec: &EstimandSpec,
) -> Result<f64> {
    let g = gamma_values(p, spec)?;
    let a = alpha_values(p, spec)?;
    let pz = p.z_probabilities();
    Ok(spec.sigma()
        * (0..pz.len())
            .map(|z| pz[z] * (alpha_hat.values[z] - a[z]) * (g[z] - gamma_hat.values[z]))
            .sum::<f64>())
}

/// Inverse-propensity weights of a clipped propensity, as an `α` field.
pub fn alpha_from_propensity(space: &GridSpace, m_hat: &NuisanceField, clip: f64) -> Result<NuisanceField> {
    let z = Arc::new(space.z_space()?);
    NuisanceField::new(z, ipw_weights(&clip_propensity(m_hat, clip)?), NuisanceRole::Alpha)
}

/// Estimate with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub point: f64,
    pub n: usize,
    pub clip_constant: f64,
    pub folds: usize,
    pub seed: u64,
}

impl EstimateReport {
    pub fn new(point: f64, n: usize, folds: usize, seed: u64) -> Self {
        EstimateReport {
            point,
            n,
            clip_constant: DEFAULT_OVERLAP,
            folds,
            seed,
        }
    }
}

/// Histogram regression of a binary axis on the covariates, with the first
/// covariate axis coarsened into `bins` blocks. The fitted field lives on
/// the covariate axes other than the target (all `Z1`/`Z2` axes for an
/// outcome, the `Z1` axes for a treatment). Empty cells take the global
/// mean.
pub fn binned_learner(data: &Dataset, target: &str, bins: usize) -> Result<NuisanceField> {
    let s = &data.space;
    let k = s
        .axes()
        .iter()
        .position(|a| a.name == target)
        .ok_or_else(|| Error::InvalidSpace(format!("no axis named `{target}`")))?;
    if s.axes()[k].kind != AxisKind::Binary {
        return Err(Error::InvalidSpec(format!("target axis `{target}` is not binary")));
    }
    let target_role = s.axes()[k].role;
    let keep: Vec<usize> = (0..s.axes().len())
        .filter(|&i| match target_role {
            Role::W => s.axes()[i].role != Role::W,
            _ => s.axes()[i].role == Role::Z1,
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::InvalidSpace("no covariate axes to regress on".into()));
    }
    let out = GridSpace::new(keep.iter().map(|&i| s.axes()[i].clone()).collect())?;
    let first = out.sizes()[0];
    if bins == 0 || first % bins != 0 {
        return Err(Error::Precondition(format!("{bins} bins do not divide {first} cells")));
    }
    let width = first / bins;
    // row-major index into the coarsened covariate grid
    let coarse = |mut c: Vec<usize>| -> usize {
        c[0] /= width;
        c.iter()
            .zip(out.sizes())
            .enumerate()
            .fold(0, |acc, (j, (c, size))| acc * if j == 0 { bins } else { *size } + c)
    };
    let cells = out.n_atoms() / width;
    let (mut hits, mut counts) = (vec![0.0; cells], vec![0usize; cells]);
    let mut total = 0.0;
    for &atom in &data.rows {
        let coords = s.coords(atom);
        let y = coords[k] as f64;
        let c = coarse(keep.iter().map(|&i| coords[i]).collect());
        hits[c] += y;
        counts[c] += 1;
        total += y;
    }
    let global = if data.is_empty() {
        0.5
    } else {
        total / data.len() as f64
    };
    let values = (0..out.n_atoms())
        .map(|i| {
            let c = coarse(out.coords(i));
            if counts[c] == 0 {
                global
            } else {
                hits[c] / counts[c] as f64
            }
        })
        .collect();
    let role = if target_role == Role::W {
        NuisanceRole::OutcomeRegression
    } else {
        NuisanceRole::Propensity
    };
    NuisanceField::new(Arc::new(out), values, role)
}
