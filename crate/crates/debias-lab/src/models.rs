//! Estimand specifications and exact evaluation of their nuisances and values.
//!
//! Every estimand is written as `χ(P) = E[m₀(O)] + σ·E[m₁(O, γ(Z; P))]`,
//! where `m₁` is linear in its second argument and `γ` solves a generalized
//! regression with score `ρ`. For all kinds except the residual covariance
//! `m₀ = 0` and `σ = 1`. The residual covariance `E[(T − g)(Y − q)]` is
//! `E[TY] − E[Y·g(X)]`, so it uses `m₀ = ty`, `σ = −1` and `m₁(o, h) = y·h(x)`.
//!
//! Grid layouts by kind (axes in role order):
//!
//! | kind        | axes                                  | `Z`      |
//! |-------------|---------------------------------------|----------|
//! | `ate`,`lod` | `x` (cont) · `d` (binary) · `y`       | `(x, d)` |
//! | `wad`,`ape` | `x` (cont) · `d` (cont) · `y`         | `(x, d)` |
//! | `ecc_plm`   | `x` (cont) · `t` (binary, W) · `y`    | `x`      |
//! | `ds`        | `x` (cont) · `y`                      | `x`      |

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{AxisKind, Density, GridSpace, GridValues, Role};

/// Default overlap constant for propensities and outcome regressions.
pub const DEFAULT_OVERLAP: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimandKind {
    Ate,
    EccPlm,
    Ds,
    Wad,
    Ape,
    Lod,
}

impl EstimandKind {
    pub const ALL: [EstimandKind; 6] = [
        EstimandKind::Ate,
        EstimandKind::EccPlm,
        EstimandKind::Ds,
        EstimandKind::Wad,
        EstimandKind::Ape,
        EstimandKind::Lod,
    ];

    /// Kinds whose score is affine in the nuisance.
    pub fn is_affine(self) -> bool {
        self != EstimandKind::Lod
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimandKind::Ate => "ate",
            EstimandKind::EccPlm => "ecc_plm",
            EstimandKind::Ds => "ds",
            EstimandKind::Wad => "wad",
            EstimandKind::Ape => "ape",
            EstimandKind::Lod => "lod",
        }
    }
}

impl std::str::FromStr for EstimandKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EstimandKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown kind `{s}`")))
    }
}

impl std::fmt::Display for EstimandKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One supported functional together with its kind-specific parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum EstimandSpec {
    /// Average treatment effect `E[g(1,X) − g(0,X)]`.
    Ate,
    /// Numerator of the partially linear slope, `E[(T − g(X))(Y − q(X))]`.
    EccPlm,
    /// Distribution shift `∫ g d(F₂ − F₁)`; `f1`, `f2` are densities over `x`.
    Ds { f1: Vec<f64>, f2: Vec<f64> },
    /// Weighted average derivative `E[∫ ∂_d g(X, d) ω(d) dd]`.
    Wad { omega: Vec<f64>, omega_prime: Vec<f64> },
    /// Average policy effect `E[g(X, τ(D)) − g(X, D)]` for a cell map `τ`.
    Ape {
        tau: Vec<usize>,
        tau_prime: Vec<f64>,
        tau_lower: f64,
        tau_upper: f64,
    },
    /// Log-odds ratio `E[γ(X,1) − γ(X,0)]` with `γ` the conditional log-odds.
    Lod,
}

impl EstimandSpec {
    pub fn kind(&self) -> EstimandKind {
        match self {
            EstimandSpec::Ate => EstimandKind::Ate,
            EstimandSpec::EccPlm => EstimandKind::EccPlm,
            EstimandSpec::Ds { .. } => EstimandKind::Ds,
            EstimandSpec::Wad { .. } => EstimandKind::Wad,
            EstimandSpec::Ape { .. } => EstimandKind::Ape,
            EstimandSpec::Lod => EstimandKind::Lod,
        }
    }

    /// Distribution shift between two densities over `x` (normalized here).
    pub fn ds(x_cells: usize, f1: impl Fn(f64) -> f64, f2: impl Fn(f64) -> f64) -> Result<Self> {
        let norm = |f: &dyn Fn(f64) -> f64| -> Result<Vec<f64>> {
            let v: Vec<f64> = (0..x_cells).map(|i| f((i as f64 + 0.5) / x_cells as f64)).collect();
            let mass = v.iter().sum::<f64>() / x_cells as f64;
            if !(mass > 0.0) || v.iter().any(|x| *x < 0.0) {
                return Err(Error::InvalidSpec("reference density must be nonnegative".into()));
            }
            Ok(v.into_iter().map(|x| x / mass).collect())
        };
        Ok(EstimandSpec::Ds {
            f1: norm(&f1)?,
            f2: norm(&f2)?,
        })
    }

    /// Weighted average derivative with a smooth weight supported inside
    /// `[1/8, 7/8]`, normalized to unit mass on the treatment grid.
    pub fn wad(d_cells: usize) -> Self {
        let (a, len) = (0.125, 0.75);
        let mut omega = Vec::with_capacity(d_cells);
        let mut omega_prime = Vec::with_capacity(d_cells);
        for i in 0..d_cells {
            let u = ((i as f64 + 0.5) / d_cells as f64 - a) / len;
            if (0.0..=1.0).contains(&u) {
                let v = u * (1.0 - u);
                omega.push(140.0 * v.powi(3) / len);
                omega_prime.push(420.0 * v * v * (1.0 - 2.0 * u) / (len * len));
            } else {
                omega.push(0.0);
                omega_prime.push(0.0);
            }
        }
        let mass = omega.iter().sum::<f64>() / d_cells as f64;
        omega.iter_mut().for_each(|w| *w /= mass);
        omega_prime.iter_mut().for_each(|w| *w /= mass);
        EstimandSpec::Wad { omega, omega_prime }
    }

    /// Average policy effect of the reflection `d ↦ 1 − d` on the treatment grid.
    pub fn ape_reflection(d_cells: usize) -> Self {
        EstimandSpec::Ape {
            tau: (0..d_cells).rev().collect(),
            tau_prime: vec![1.0; d_cells],
            tau_lower: 0.5,
            tau_upper: 2.0,
        }
    }

    /// Checks parameters and that `space` has the layout the kind expects.
    pub fn validate(&self, space: &GridSpace) -> Result<()> {
        let axes = space.axes();
        let is_cont = |k: usize| matches!(axes[k].kind, AxisKind::Continuous { .. });
        let is_bin = |k: usize| axes[k].kind == AxisKind::Binary;
        let layout_ok = match self.kind() {
            EstimandKind::Ate | EstimandKind::Lod => {
                axes.len() == 3
                    && is_cont(0)
                    && is_bin(1)
                    && axes[1].role == Role::Z2
                    && is_bin(2)
                    && axes[2].role == Role::W
            }
            EstimandKind::Wad | EstimandKind::Ape => {
                axes.len() == 3
                    && is_cont(0)
                    && is_cont(1)
                    && axes[1].role == Role::Z2
                    && is_bin(2)
                    && axes[2].role == Role::W
            }
            EstimandKind::EccPlm => {
                axes.len() == 3
                    && is_cont(0)
                    && axes[0].role == Role::Z1
                    && is_bin(1)
                    && is_bin(2)
                    && axes[1].role == Role::W
            }
            EstimandKind::Ds => axes.len() == 2 && is_cont(0) && is_bin(1) && axes[1].role == Role::W,
        };
        if !layout_ok {
            return Err(Error::InvalidSpec(format!(
                "grid layout does not match kind `{}`",
                self.kind()
            )));
        }
        match self {
            EstimandSpec::Ds { f1, f2 } => {
                let n = space.z1_count();
                for f in [f1, f2] {
                    if f.len() != n {
                        return Err(Error::DimensionMismatch {
                            expected: n,
                            got: f.len(),
                        });
                    }
                    let mass = f.iter().sum::<f64>() / n as f64;
                    if f.iter().any(|v| *v < 0.0) || (mass - 1.0).abs() > 1e-10 {
                        return Err(Error::InvalidSpec(
                            "distribution-shift references must be densities".into(),
                        ));
                    }
                }
            }
            EstimandSpec::Wad { omega, omega_prime } => {
                let n = space.z2_count();
                if omega.len() != n || omega_prime.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: omega.len(),
                    });
                }
                let mass = omega.iter().sum::<f64>() / n as f64;
                if omega.iter().any(|v| *v < 0.0) || (mass - 1.0).abs() > 1e-10 {
                    return Err(Error::InvalidSpec("ω must be a density on the treatment grid".into()));
                }
                if omega[0].abs() > 1e-8 || omega[n - 1].abs() > 1e-8 {
                    return Err(Error::InvalidSpec(
                        "ω must vanish at the first and last treatment cell".into(),
                    ));
                }
            }
            EstimandSpec::Ape {
                tau,
                tau_prime,
                tau_lower,
                tau_upper,
            } => {
                let n = space.z2_count();
                if tau.len() != n || tau_prime.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: tau.len(),
                    });
                }
                let up = tau.windows(2).all(|w| w[0] < w[1]);
                let down = tau.windows(2).all(|w| w[0] > w[1]);
                if !(up || down) || tau.iter().any(|&t| t >= n) {
                    return Err(Error::InvalidSpec(
                        "τ must be a strictly monotone bijection of the treatment cells".into(),
                    ));
                }
                if !(*tau_lower > 0.0) || tau_prime.iter().any(|v| v.abs() < *tau_lower || v.abs() > *tau_upper) {
                    return Err(Error::InvalidSpec("|τ′| outside its declared bounds".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// `σ` in `χ = E[m₀] + σ E[m₁]`.
    pub fn sigma(&self) -> f64 {
        if self.kind() == EstimandKind::EccPlm {
            -1.0
        } else {
            1.0
        }
    }

    /// `m₀(o)` for every atom.
    pub fn m0_all(&self, space: &GridSpace) -> Vec<f64> {
        match self {
            EstimandSpec::EccPlm => (0..space.n_atoms())
                .map(|a| if space.w_of(a) == 3 { 1.0 } else { 0.0 })
                .collect(),
            _ => vec![0.0; space.n_atoms()],
        }
    }

    /// `m₁(o, h)` for every atom, with `h` a field over the covariate grid.
    pub fn m1_all(&self, space: &GridSpace, h: &[f64]) -> Vec<f64> {
        let n = space.n_atoms();
        match self {
            EstimandSpec::Ate | EstimandSpec::Lod => (0..n)
                .map(|a| {
                    let x = space.z1_of(a);
                    h[2 * x + 1] - h[2 * x]
                })
                .collect(),
            EstimandSpec::EccPlm => (0..n).map(|a| (space.w_of(a) & 1) as f64 * h[space.z_of(a)]).collect(),
            EstimandSpec::Ds { f1, f2 } => {
                let c = h
                    .iter()
                    .zip(f1.iter().zip(f2))
                    .map(|(h, (a, b))| h * (b - a))
                    .sum::<f64>()
                    * space.z_weight();
                vec![c; n]
            }
            EstimandSpec::Wad { omega_prime, .. } => {
                let nd = space.z2_count();
                let wd = 1.0 / nd as f64;
                let per_x: Vec<f64> = h
                    .chunks(nd)
                    .map(|row| -row.iter().zip(omega_prime).map(|(h, w)| h * w).sum::<f64>() * wd)
                    .collect();
                (0..n).map(|a| per_x[space.z1_of(a)]).collect()
            }
            EstimandSpec::Ape { tau, .. } => {
                let nd = space.z2_count();
                (0..n)
                    .map(|a| {
                        let z = space.z_of(a);
                        let (x, d) = (z / nd, z % nd);
                        h[x * nd + tau[d]] - h[z]
                    })
                    .collect()
            }
        }
    }

    /// The part of `ρ` that does not involve the nuisance: `ρ = ρ₀ − γ` for
    /// affine kinds.
    pub fn rho0(&self, space: &GridSpace, atom: usize) -> f64 {
        match self {
            EstimandSpec::EccPlm => (space.w_of(atom) >> 1) as f64,
            _ => (space.w_of(atom) & 1) as f64,
        }
    }
}

/// Logistic function `Λ`.
pub fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// The generalized-regression score `ρ(o, γ)` at one atom.
pub fn score_rho(spec: &EstimandSpec, space: &GridSpace, atom: usize, gamma_val: f64) -> f64 {
    let r0 = spec.rho0(space, atom);
    match spec {
        EstimandSpec::Lod => {
            let l = logistic(gamma_val);
            (r0 - l) / (l * (1.0 - l))
        }
        _ => r0 - gamma_val,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceRole {
    Gamma,
    Alpha,
    Propensity,
    OutcomeRegression,
}

/// A function on the covariate grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceField {
    pub space: Arc<GridSpace>,
    pub values: Vec<f64>,
    pub role: NuisanceRole,
    /// When set, every value must lie in `[c, 1 − c]`.
    pub overlap: Option<f64>,
}

impl NuisanceField {
    pub fn new(space: Arc<GridSpace>, values: Vec<f64>, role: NuisanceRole) -> Result<Self> {
        if values.len() != space.n_atoms() {
            return Err(Error::DimensionMismatch {
                expected: space.n_atoms(),
                got: values.len(),
            });
        }
        Ok(NuisanceField {
            space,
            values,
            role,
            overlap: None,
        })
    }

    /// Declares the field overlap-constrained and checks the range.
    pub fn with_overlap(mut self, c: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&c) {
            return Err(Error::Domain {
                name: "overlap",
                value: c,
                domain: "[0, 1/2)",
            });
        }
        if let Some(i) = self.values.iter().position(|v| *v < c - 1e-12 || *v > 1.0 - c + 1e-12) {
            return Err(Error::DegenerateNuisance {
                atom: i,
                reason: format!("value {} outside [{c}, {}]", self.values[i], 1.0 - c),
            });
        }
        self.overlap = Some(c);
        Ok(self)
    }
}

fn slice_masses(p: &Density) -> Result<Vec<f64>> {
    let s = p.space();
    let m = p.z_marginal();
    if let Some(z) = m.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::DegenerateNuisance {
            atom: s.atom(z, 0),
            reason: "covariate slice has zero mass".into(),
        });
    }
    Ok(m)
}

/// `P(Y = 1 | Z)` on layouts where `y` is the last binary axis and alone in `W`.
fn outcome_regression(p: &Density) -> Result<Vec<f64>> {
    let m = slice_masses(p)?;
    let v = p.values();
    Ok((0..m.len()).map(|z| v[2 * z + 1] / m[z]).collect())
}

/// `P(D = 1 | X)` on the binary-treatment layout, as a field over `x`.
pub fn propensity(p: &Density) -> Result<Vec<f64>> {
    let m = slice_masses(p)?;
    let s = p.space();
    (0..s.z1_count())
        .map(|x| {
            let pi = m[2 * x + 1] / (m[2 * x] + m[2 * x + 1]);
            if pi > 0.0 && pi < 1.0 {
                Ok(pi)
            } else {
                Err(Error::DegenerateNuisance {
                    atom: s.atom(2 * x, 0),
                    reason: format!("propensity {pi}"),
                })
            }
        })
        .collect()
}

/// Inverse-propensity weight `d/π − (1 − d)/(1 − π)` as a field over `(x, d)`.
pub fn ipw_weights(pi: &[f64]) -> Vec<f64> {
    pi.iter().flat_map(|&p| [-1.0 / (1.0 - p), 1.0 / p]).collect()
}

/// Conditional density of the continuous treatment, `p(d | x)`, over `(x, d)`.
fn treatment_conditional(p: &Density) -> Result<Vec<f64>> {
    let m = slice_masses(p)?;
    let nd = p.space().z2_count();
    let wd = 1.0 / nd as f64;
    let mut out = Vec::with_capacity(m.len());
    for row in m.chunks(nd) {
        let px: f64 = row.iter().sum::<f64>() * wd;
        out.extend(row.iter().map(|v| v / px));
    }
    Ok(out)
}

/// `γ(·; P)` over the covariate grid.
pub fn gamma_values(p: &Density, spec: &EstimandSpec) -> Result<Vec<f64>> {
    let s = p.space();
    match spec {
        EstimandSpec::EccPlm => {
            let m = slice_masses(p)?;
            let v = p.values();
            Ok((0..m.len()).map(|x| (v[4 * x + 2] + v[4 * x + 3]) / m[x]).collect())
        }
        EstimandSpec::Lod => {
            let v = p.values();
            (0..s.z_count())
                .map(|z| {
                    let (p0, p1) = (v[2 * z], v[2 * z + 1]);
                    if p0 > 0.0 && p1 > 0.0 {
                        Ok((p1 / p0).ln())
                    } else {
                        Err(Error::DegenerateNuisance {
                            atom: s.atom(z, 0),
                            reason: "outcome probability is 0 or 1".into(),
                        })
                    }
                })
                .collect()
        }
        _ => outcome_regression(p),
    }
}

/// `α(·; P)` over the covariate grid.
pub fn alpha_values(p: &Density, spec: &EstimandSpec) -> Result<Vec<f64>> {
    match spec {
        EstimandSpec::Ate | EstimandSpec::Lod => Ok(ipw_weights(&propensity(p)?)),
        EstimandSpec::EccPlm => {
            let m = slice_masses(p)?;
            let v = p.values();
            Ok((0..m.len()).map(|x| (v[4 * x + 1] + v[4 * x + 3]) / m[x]).collect())
        }
        EstimandSpec::Ds { f1, f2 } => {
            let m = slice_masses(p)?;
            Ok(m.iter().zip(f1.iter().zip(f2)).map(|(f, (a, b))| (b - a) / f).collect())
        }
        EstimandSpec::Wad { omega_prime, .. } => {
            let cond = treatment_conditional(p)?;
            let nd = omega_prime.len();
            Ok(cond.iter().enumerate().map(|(z, c)| -omega_prime[z % nd] / c).collect())
        }
        EstimandSpec::Ape { tau, .. } => {
            let m = slice_masses(p)?;
            let nd = tau.len();
            let mut pushed = vec![0.0; m.len()];
            for (z, mass) in m.iter().enumerate() {
                let (x, d) = (z / nd, z % nd);
                pushed[x * nd + tau[d]] += mass;
            }
            Ok(pushed.iter().zip(&m).map(|(a, b)| a / b - 1.0).collect())
        }
    }
}

/// `(γ, α)` as typed fields over the covariate grid.
pub fn nuisances_of(p: &Density, spec: &EstimandSpec) -> Result<(NuisanceField, NuisanceField)> {
    spec.validate(p.space())?;
    let z = Arc::new(p.space().z_space()?);
    let g = NuisanceField::new(z.clone(), gamma_values(p, spec)?, NuisanceRole::Gamma)?;
    let a = NuisanceField::new(z, alpha_values(p, spec)?, NuisanceRole::Alpha)?;
    Ok((g, a))
}

fn expectation(p: &Density, f: &[f64]) -> f64 {
    p.values().iter().zip(f).map(|(a, b)| a * b).sum::<f64>() * p.space().atom_weight()
}

/// `E_P[m₁(O, h)]` for a field `h` over the covariate grid.
pub fn linear_part(p: &Density, spec: &EstimandSpec, h: &[f64]) -> f64 {
    expectation(p, &spec.m1_all(p.space(), h))
}

/// `E_P[m₁(O, γ(Z; P))]`, the part of `χ` carried by the nuisance.
pub fn linear_part_value(p: &Density, spec: &EstimandSpec) -> Result<f64> {
    Ok(linear_part(p, spec, &gamma_values(p, spec)?))
}

/// Exact grid value of `χ(P)`.
pub fn functional_value(p: &Density, spec: &EstimandSpec) -> Result<f64> {
    let lin = linear_part_value(p, spec)?;
    Ok(expectation(p, &spec.m0_all(p.space())) + spec.sigma() * lin)
}

/// `(ν_ρ, υ_ρ)`: first and second derivatives of `a ↦ E[ρ(O, γ + a) | Z]` at 0.
pub fn nu_upsilon_rho(spec: &EstimandSpec, p: &Density) -> Result<(Vec<f64>, Vec<f64>)> {
    let nz = p.space().z_count();
    let nu = vec![-1.0; nz];
    let upsilon = match spec {
        EstimandSpec::Lod => gamma_values(p, spec)?
            .iter()
            .map(|g| 1.0 - 2.0 * logistic(*g))
            .collect(),
        _ => vec![0.0; nz],
    };
    Ok((nu, upsilon))
}

/// `E[ρ(O, γ_z + a) | Z = z]` for every covariate atom.
pub fn conditional_score(p: &Density, spec: &EstimandSpec, gamma: &[f64], a: f64) -> Result<Vec<f64>> {
    let s = p.space();
    let m = slice_masses(p)?;
    let ww = s.w_weight();
    let mut out = vec![0.0; s.z_count()];
    for (atom, v) in p.values().iter().enumerate() {
        let z = s.z_of(atom);
        out[z] += v * ww * score_rho(spec, s, atom, gamma[z] + a);
    }
    Ok(out.into_iter().zip(m).map(|(a, b)| a / b).collect())
}

/// `E_P[m₁(O, h)] − E_P[h · ν_m]` with `ν_m = −α ν_ρ = α`.
pub fn riesz_identity_residual(p: &Density, spec: &EstimandSpec, h: &[f64]) -> Result<f64> {
    let alpha = alpha_values(p, spec)?;
    let pz = p.z_probabilities();
    let rhs: f64 = h.iter().zip(&alpha).zip(&pz).map(|((h, a), w)| h * a * w).sum();
    Ok(linear_part(p, spec, h) - rhs)
}

/// `E_P[ρ₀(O) α(Z; P)]`; equals the linear part of `χ` for affine kinds.
pub fn mixed_bias_value(p: &Density, spec: &EstimandSpec) -> Result<f64> {
    let alpha = alpha_values(p, spec)?;
    let s = p.space();
    let f: Vec<f64> = (0..s.n_atoms()).map(|a| spec.rho0(s, a) * alpha[s.z_of(a)]).collect();
    Ok(expectation(p, &f))
}
