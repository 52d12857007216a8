//! Builders for reference densities ("anchors") on each estimand's grid.
//!
//! Each builder takes the covariate density and the conditional laws as plain
//! functions of the cell midpoints and assembles the joint density exactly.
//! The covariate density is renormalized on the grid, so it only needs to be
//! positive.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{Density, GridSpace};
use crate::models::{EstimandKind, EstimandSpec};

fn midpoints(cells: usize) -> Vec<f64> {
    (0..cells).map(|i| (i as f64 + 0.5) / cells as f64).collect()
}

fn covariate_density(cells: usize, p_x: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let v: Vec<f64> = midpoints(cells).into_iter().map(p_x).collect();
    if v.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::Precondition("covariate density must be positive".into()));
    }
    let mass = v.iter().sum::<f64>() / cells as f64;
    Ok(v.into_iter().map(|p| p / mass).collect())
}

fn bernoulli(p: f64, k: usize) -> f64 {
    if k == 1 {
        p
    } else {
        1.0 - p
    }
}

fn check_prob(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{name} = {v} is not a probability")))
    }
}

/// Binary treatment `d ~ Bernoulli(m(x))` and outcome `y ~ Bernoulli(g_d(x))`.
pub fn ate(
    x_cells: usize,
    p_x: impl Fn(f64) -> f64,
    m: impl Fn(f64) -> f64,
    g1: impl Fn(f64) -> f64,
    g0: impl Fn(f64) -> f64,
) -> Result<Density> {
    let space = Arc::new(GridSpace::binary_treatment(x_cells)?);
    let px = covariate_density(x_cells, p_x)?;
    let xs = midpoints(x_cells);
    let mut values = Vec::with_capacity(space.n_atoms());
    for (i, &x) in xs.iter().enumerate() {
        let (mx, g) = (m(x), [g0(x), g1(x)]);
        check_prob("m", mx)?;
        for (d, &gd) in g.iter().enumerate() {
            check_prob("g", gd)?;
            for y in 0..2 {
                values.push(px[i] * bernoulli(mx, d) * bernoulli(gd, y));
            }
        }
    }
    Density::new(space, values)
}

/// Partially linear law: `T ~ Bernoulli(g(x))`, `E[Y | x] = q(x)` and
/// `Cov(T, Y | x) = θ g(x)(1 − g(x))`.
pub fn partially_linear(
    x_cells: usize,
    p_x: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
    q: impl Fn(f64) -> f64,
    theta: f64,
) -> Result<Density> {
    let space = Arc::new(GridSpace::partially_linear(x_cells)?);
    let px = covariate_density(x_cells, p_x)?;
    let mut values = Vec::with_capacity(space.n_atoms());
    for (i, x) in midpoints(x_cells).into_iter().enumerate() {
        let (gx, qx) = (g(x), q(x));
        let p11 = gx * (qx + theta * (1.0 - gx));
        let cells = [1.0 - gx - qx + p11, qx - p11, gx - p11, p11];
        if cells.iter().any(|c| *c < 0.0) {
            return Err(Error::Precondition(format!(
                "partially linear cell probabilities {cells:?} at x = {x}"
            )));
        }
        values.extend(cells.iter().map(|c| px[i] * c));
    }
    Density::new(space, values)
}

/// Covariate and binary label with `P(Y = 1 | x) = g(x)`.
pub fn labelled(x_cells: usize, p_x: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64) -> Result<Density> {
    let space = Arc::new(GridSpace::covariate_label(x_cells)?);
    let px = covariate_density(x_cells, p_x)?;
    let mut values = Vec::with_capacity(space.n_atoms());
    for (i, x) in midpoints(x_cells).into_iter().enumerate() {
        check_prob("g", g(x))?;
        values.push(px[i] * (1.0 - g(x)));
        values.push(px[i] * g(x));
    }
    Density::new(space, values)
}

/// Continuous treatment with conditional density proportional to `p_d(x, d)`
/// and `P(Y = 1 | x, d) = g(x, d)`.
pub fn continuous_treatment(
    x_cells: usize,
    d_cells: usize,
    p_x: impl Fn(f64) -> f64,
    p_d: impl Fn(f64, f64) -> f64,
    g: impl Fn(f64, f64) -> f64,
) -> Result<Density> {
    let space = Arc::new(GridSpace::continuous_treatment(x_cells, d_cells)?);
    let px = covariate_density(x_cells, p_x)?;
    let ds = midpoints(d_cells);
    let mut values = Vec::with_capacity(space.n_atoms());
    for (i, x) in midpoints(x_cells).into_iter().enumerate() {
        let cond = covariate_density(d_cells, |d| p_d(x, d))?;
        for (j, &d) in ds.iter().enumerate() {
            let gv = g(x, d);
            check_prob("g", gv)?;
            values.push(px[i] * cond[j] * (1.0 - gv));
            values.push(px[i] * cond[j] * gv);
        }
    }
    Density::new(space, values)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Flat nuisances and a uniform covariate law.
    Constant,
    /// Smooth, non-constant nuisances with overlap bounded away from zero.
    #[default]
    Smooth,
}

fn default_x_cells() -> usize {
    256
}

fn default_d_cells() -> usize {
    64
}

/// A named reference law for one estimand kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub kind: EstimandKind,
    #[serde(default = "default_x_cells")]
    pub x_cells: usize,
    #[serde(default = "default_d_cells")]
    pub d_cells: usize,
    #[serde(default)]
    pub profile: Profile,
}

impl AnchorSpec {
    pub fn new(kind: EstimandKind) -> Self {
        AnchorSpec {
            kind,
            x_cells: default_x_cells(),
            d_cells: default_d_cells(),
            profile: Profile::Smooth,
        }
    }

    pub fn build(&self) -> Result<(EstimandSpec, Density)> {
        let (nx, nd) = (self.x_cells, self.d_cells);
        let smooth = self.profile == Profile::Smooth;
        let tau = std::f64::consts::TAU;
        Ok(match self.kind {
            EstimandKind::Ate | EstimandKind::Lod => {
                let spec = if self.kind == EstimandKind::Ate {
                    EstimandSpec::Ate
                } else {
                    EstimandSpec::Lod
                };
                let p = if smooth {
                    ate(
                        nx,
                        |_| 1.0,
                        |x| 0.5 + 0.2 * (tau * x).sin(),
                        |x| 0.65 + 0.2 * (tau * x).cos(),
                        |x| 0.25 + 0.3 * x,
                    )?
                } else {
                    ate(nx, |_| 1.0, |_| 0.5, |_| 0.7, |_| 0.3)?
                };
                (spec, p)
            }
            EstimandKind::EccPlm => {
                let p = if smooth {
                    partially_linear(nx, |_| 1.0, |x| 0.3 + 0.4 * x, |x| 0.4 + 0.2 * (tau * x).sin(), 0.25)?
                } else {
                    partially_linear(nx, |_| 1.0, |_| 0.5, |_| 0.5, 0.25)?
                };
                (EstimandSpec::EccPlm, p)
            }
            EstimandKind::Ds => {
                let spec = EstimandSpec::ds(nx, |_| 1.0, |x| 1.0 + 0.6 * (tau * x).cos())?;
                let p = if smooth {
                    labelled(nx, |_| 1.0, |x| 0.3 + 0.4 * x * x)?
                } else {
                    labelled(nx, |_| 1.0, |_| 0.5)?
                };
                (spec, p)
            }
            EstimandKind::Wad | EstimandKind::Ape => {
                let spec = if self.kind == EstimandKind::Wad {
                    EstimandSpec::wad(nd)
                } else {
                    EstimandSpec::ape_reflection(nd)
                };
                let p = if smooth {
                    continuous_treatment(
                        nx,
                        nd,
                        |_| 1.0,
                        |x, d| 1.0 + 0.4 * x * (tau * d).sin(),
                        |x, d| 0.2 + 0.5 * d * (1.0 - 0.5 * x),
                    )?
                } else {
                    continuous_treatment(nx, nd, |_| 1.0, |_, _| 1.0, |_, d| 0.25 + 0.5 * d)?
                };
                (spec, p)
            }
        })
    }
}

/// One smooth anchor per kind, on small grids.
pub fn smooth_examples(x_cells: usize, d_cells: usize) -> Result<Vec<(EstimandSpec, Density)>> {
    EstimandKind::ALL
        .iter()
        .map(|&kind| {
            AnchorSpec {
                kind,
                x_cells,
                d_cells,
                profile: Profile::Smooth,
            }
            .build()
        })
        .collect()
}
