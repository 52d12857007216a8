//! Finite grid measure spaces and the densities that live on them.
//!
//! An observation `o = (z1, z2, w)` is one atom of a product grid. Binary and
//! categorical axes carry counting measure; a continuous axis on the unit
//! interval is cut into equal cells and carries weight `1/cells` per cell, so
//! integrals against it are midpoint quadrature. Axes are stored in role
//! order (all `Z1` axes, then `Z2`, then `W`), which makes the covariate part
//! of an atom index a plain quotient: `z = atom / w_count`.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the total mass of densities and perturbations.
pub const MASS_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum AxisKind {
    Binary,
    /// The unit interval cut into `cells` equal cells.
    Continuous {
        cells: usize,
    },
    /// A finite set of `levels` points, each with counting weight one.
    Categorical {
        levels: usize,
    },
}

impl AxisKind {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        match *self {
            AxisKind::Binary => 2,
            AxisKind::Continuous { cells } => cells,
            AxisKind::Categorical { levels } => levels,
        }
    }

    pub fn weight(&self) -> f64 {
        match *self {
            AxisKind::Continuous { cells } => 1.0 / cells as f64,
            _ => 1.0,
        }
    }

    /// Coordinate of the `i`-th grid point: the cell midpoint for continuous
    /// axes and the level index otherwise.
    pub fn point(&self, i: usize) -> f64 {
        match *self {
            AxisKind::Continuous { cells } => (i as f64 + 0.5) / cells as f64,
            _ => i as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Z1,
    Z2,
    W,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub kind: AxisKind,
    pub role: Role,
}

impl Axis {
    pub fn new(name: &str, kind: AxisKind, role: Role) -> Self {
        Axis {
            name: name.to_string(),
            kind,
            role,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SpaceDoc {
    axes: Vec<Axis>,
}

/// A product grid with a uniform-product base measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceDoc", into = "SpaceDoc")]
pub struct GridSpace {
    axes: Vec<Axis>,
    sizes: Vec<usize>,
    n_atoms: usize,
    atom_weight: f64,
    z1_count: usize,
    z2_count: usize,
    w_count: usize,
    z_weight: f64,
    w_weight: f64,
}

impl TryFrom<SpaceDoc> for GridSpace {
    type Error = Error;
    fn try_from(doc: SpaceDoc) -> Result<Self> {
        GridSpace::new(doc.axes)
    }
}

impl From<GridSpace> for SpaceDoc {
    fn from(s: GridSpace) -> Self {
        SpaceDoc { axes: s.axes }
    }
}

impl GridSpace {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidSpace("no axes".into()));
        }
        for a in &axes {
            match a.kind {
                AxisKind::Continuous { cells } if cells < 2 => {
                    return Err(Error::InvalidSpace(format!(
                        "continuous axis `{}` needs at least 2 cells",
                        a.name
                    )))
                }
                AxisKind::Categorical { levels } if levels < 2 => {
                    return Err(Error::InvalidSpace(format!(
                        "categorical axis `{}` needs at least 2 levels",
                        a.name
                    )))
                }
                _ => {}
            }
        }
        if axes.windows(2).any(|w| w[0].role > w[1].role) {
            return Err(Error::InvalidSpace("axes must be ordered Z1, then Z2, then W".into()));
        }
        let sizes: Vec<usize> = axes.iter().map(|a| a.kind.len()).collect();
        let count = |r: Role| -> usize { axes.iter().filter(|a| a.role == r).map(|a| a.kind.len()).product() };
        let weight = |r: Role| -> f64 { axes.iter().filter(|a| a.role == r).map(|a| a.kind.weight()).product() };
        let n_atoms = sizes.iter().product();
        Ok(GridSpace {
            n_atoms,
            atom_weight: axes.iter().map(|a| a.kind.weight()).product(),
            z1_count: count(Role::Z1),
            z2_count: count(Role::Z2),
            w_count: count(Role::W),
            z_weight: weight(Role::Z1) * weight(Role::Z2),
            w_weight: weight(Role::W),
            sizes,
            axes,
        })
    }

    /// `x` (continuous, `Z1`) × `d` (binary, `Z2`) × `y` (binary, `W`).
    pub fn binary_treatment(x_cells: usize) -> Result<Self> {
        GridSpace::new(vec![
            Axis::new("x", AxisKind::Continuous { cells: x_cells }, Role::Z1),
            Axis::new("d", AxisKind::Binary, Role::Z2),
            Axis::new("y", AxisKind::Binary, Role::W),
        ])
    }

    /// `x` × continuous treatment `d` × binary outcome `y`.
    pub fn continuous_treatment(x_cells: usize, d_cells: usize) -> Result<Self> {
        GridSpace::new(vec![
            Axis::new("x", AxisKind::Continuous { cells: x_cells }, Role::Z1),
            Axis::new("d", AxisKind::Continuous { cells: d_cells }, Role::Z2),
            Axis::new("y", AxisKind::Binary, Role::W),
        ])
    }

    /// `x` × binary treatment `t` × binary outcome `y`, with `(t, y)` unobserved
    /// by the nuisances.
    pub fn partially_linear(x_cells: usize) -> Result<Self> {
        GridSpace::new(vec![
            Axis::new("x", AxisKind::Continuous { cells: x_cells }, Role::Z1),
            Axis::new("t", AxisKind::Binary, Role::W),
            Axis::new("y", AxisKind::Binary, Role::W),
        ])
    }

    /// `x` × binary label `y`.
    pub fn covariate_label(x_cells: usize) -> Result<Self> {
        GridSpace::new(vec![
            Axis::new("x", AxisKind::Continuous { cells: x_cells }, Role::Z1),
            Axis::new("y", AxisKind::Binary, Role::W),
        ])
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    /// Base-measure mass of every atom (the measure is a uniform product).
    pub fn atom_weight(&self) -> f64 {
        self.atom_weight
    }

    pub fn z1_count(&self) -> usize {
        self.z1_count
    }

    pub fn z2_count(&self) -> usize {
        self.z2_count
    }

    pub fn z_count(&self) -> usize {
        self.z1_count * self.z2_count
    }

    pub fn w_count(&self) -> usize {
        self.w_count
    }

    /// Base-measure mass of one covariate atom `z`.
    pub fn z_weight(&self) -> f64 {
        self.z_weight
    }

    /// Base-measure mass of one `W` atom.
    pub fn w_weight(&self) -> f64 {
        self.w_weight
    }

    /// Base-measure mass of one `Z1` atom.
    pub fn z1_weight(&self) -> f64 {
        self.axes
            .iter()
            .filter(|a| a.role == Role::Z1)
            .map(|a| a.kind.weight())
            .product()
    }

    pub fn z_of(&self, atom: usize) -> usize {
        atom / self.w_count
    }

    pub fn w_of(&self, atom: usize) -> usize {
        atom % self.w_count
    }

    pub fn z1_of(&self, atom: usize) -> usize {
        atom / (self.z2_count * self.w_count)
    }

    pub fn atom(&self, z: usize, w: usize) -> usize {
        z * self.w_count + w
    }

    /// Row-major coordinates of an atom.
    pub fn coords(&self, mut atom: usize) -> Vec<usize> {
        let mut c = vec![0; self.sizes.len()];
        for (k, &s) in self.sizes.iter().enumerate().rev() {
            c[k] = atom % s;
            atom /= s;
        }
        c
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.sizes).fold(0, |acc, (&c, &s)| acc * s + c)
    }

    /// The sub-grid spanned by the covariate axes.
    pub fn z_space(&self) -> Result<GridSpace> {
        GridSpace::new(self.axes.iter().filter(|a| a.role != Role::W).cloned().collect())
    }

    fn axis_positions(&self, names: &[&str]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.axes
                    .iter()
                    .position(|a| a.name == *n)
                    .ok_or_else(|| Error::InvalidSpace(format!("no axis named `{n}`")))
            })
            .collect()
    }
}

/// Read access shared by densities and perturbations.
pub trait GridValues {
    fn space(&self) -> &Arc<GridSpace>;
    fn values(&self) -> &[f64];

    fn total_mass(&self) -> f64 {
        self.values().iter().sum::<f64>() * self.space().atom_weight()
    }
}

/// Per-atom density of a probability measure with respect to the base measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Density {
    space: Arc<GridSpace>,
    values: Vec<f64>,
}

/// Per-atom density of a zero-mass signed measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedDensity {
    space: Arc<GridSpace>,
    values: Vec<f64>,
}

impl GridValues for Density {
    fn space(&self) -> &Arc<GridSpace> {
        &self.space
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
}

impl GridValues for SignedDensity {
    fn space(&self) -> &Arc<GridSpace> {
        &self.space
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
}

fn check_len(space: &GridSpace, len: usize) -> Result<()> {
    if len != space.n_atoms() {
        return Err(Error::DimensionMismatch {
            expected: space.n_atoms(),
            got: len,
        });
    }
    Ok(())
}

impl Density {
    pub fn new(space: Arc<GridSpace>, values: Vec<f64>) -> Result<Self> {
        check_len(&space, values.len())?;
        if let Some(i) = values.iter().position(|v| !(*v >= -MASS_TOL)) {
            return Err(Error::InvalidDensity(format!("atom {i} has value {}", values[i])));
        }
        let d = Density { space, values };
        let mass = d.total_mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidDensity(format!("total mass {mass}")));
        }
        Ok(d)
    }

    /// Scales nonnegative weights so they integrate to one.
    pub fn normalized(space: Arc<GridSpace>, mut values: Vec<f64>) -> Result<Self> {
        check_len(&space, values.len())?;
        let mass: f64 = values.iter().sum::<f64>() * space.atom_weight();
        if !(mass > 0.0) {
            return Err(Error::InvalidDensity(format!("total mass {mass}")));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Density::new(space, values)
    }

    pub fn uniform(space: Arc<GridSpace>) -> Self {
        let total = space.n_atoms() as f64 * space.atom_weight();
        let values = vec![1.0 / total; space.n_atoms()];
        Density { space, values }
    }

    /// Probability of each atom (density times base-measure mass).
    pub fn probabilities(&self) -> Vec<f64> {
        let w = self.space.atom_weight();
        self.values.iter().map(|v| v * w).collect()
    }

    /// Density of the covariate marginal `P_Z` with respect to its base measure.
    pub fn z_marginal(&self) -> Vec<f64> {
        let s = &self.space;
        let ww = s.w_weight();
        self.values
            .chunks(s.w_count())
            .map(|c| c.iter().sum::<f64>() * ww)
            .collect()
    }

    /// Probability of each covariate atom under `P_Z`.
    pub fn z_probabilities(&self) -> Vec<f64> {
        let zw = self.space.z_weight();
        self.z_marginal().into_iter().map(|v| v * zw).collect()
    }

    /// Density of the `Z1` marginal with respect to its base measure.
    pub fn z1_marginal(&self) -> Vec<f64> {
        let s = &self.space;
        let zm = self.z_marginal();
        let z2w = s.z_weight() / s.z1_weight();
        zm.chunks(s.z2_count()).map(|c| c.iter().sum::<f64>() * z2w).collect()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl SignedDensity {
    pub fn new(space: Arc<GridSpace>, values: Vec<f64>) -> Result<Self> {
        check_len(&space, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDensity("non-finite perturbation value".into()));
        }
        let h = SignedDensity { space, values };
        let mass = h.total_mass();
        if mass.abs() > MASS_TOL {
            return Err(Error::InvalidDensity(format!("perturbation has total mass {mass:e}")));
        }
        Ok(h)
    }

    pub fn zero(space: Arc<GridSpace>) -> Self {
        let values = vec![0.0; space.n_atoms()];
        SignedDensity { space, values }
    }

    /// `q - p` for two densities on the same space.
    pub fn difference(q: &Density, p: &Density) -> Result<Self> {
        same_space(q.space(), p.space())?;
        let values = q.values.iter().zip(&p.values).map(|(a, b)| a - b).collect();
        SignedDensity::new(q.space.clone(), values)
    }

    pub fn scaled(&self, c: f64) -> Self {
        SignedDensity {
            space: self.space.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    /// `self + c * other`.
    pub fn plus(&self, c: f64, other: &SignedDensity) -> Result<Self> {
        same_space(&self.space, &other.space)?;
        Ok(SignedDensity {
            space: self.space.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect(),
        })
    }

    /// Multiplies every atom by a function of its `Z1` coordinate.
    pub(crate) fn times_z1(&self, psi: &[f64]) -> Self {
        let s = &self.space;
        SignedDensity {
            space: self.space.clone(),
            values: self
                .values
                .iter()
                .enumerate()
                .map(|(a, v)| v * psi[s.z1_of(a)])
                .collect(),
        }
    }

    /// `Z1` marginal of the perturbation, as a density over the `Z1` cells.
    pub fn z1_marginal(&self) -> Vec<f64> {
        let s = &self.space;
        let per = s.z2_count() * s.w_count();
        let w = s.atom_weight() / s.z1_weight();
        self.values.chunks(per).map(|c| c.iter().sum::<f64>() * w).collect()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

fn same_space(a: &Arc<GridSpace>, b: &Arc<GridSpace>) -> Result<()> {
    if Arc::ptr_eq(a, b) || a == b {
        Ok(())
    } else {
        Err(Error::InvalidSpace("operands live on different grids".into()))
    }
}

/// `Σ values · w · atom_weight`.
pub fn integrate<D: GridValues + ?Sized>(d: &D, w: &[f64]) -> Result<f64> {
    check_len(d.space(), w.len())?;
    Ok(d.values().iter().zip(w).map(|(v, w)| v * w).sum::<f64>() * d.space().atom_weight())
}

/// Largest `r` with `p + t h >= 0` for all `|t| <= r`; infinite when `h` is zero.
pub fn feasible_radius(p: &Density, h: &SignedDensity) -> f64 {
    p.values
        .iter()
        .zip(&h.values)
        .filter(|(_, h)| **h != 0.0)
        .map(|(p, h)| p.max(0.0) / h.abs())
        .fold(f64::INFINITY, f64::min)
}

/// `p + t h`, rejecting any `t` that would push an atom below zero.
pub fn add_scaled(p: &Density, t: f64, h: &SignedDensity) -> Result<Density> {
    same_space(&p.space, &h.space)?;
    if t == 0.0 {
        return Ok(p.clone());
    }
    let values: Vec<f64> = p.values.iter().zip(&h.values).map(|(p, h)| p + t * h).collect();
    if values.iter().any(|v| *v < -MASS_TOL) {
        return Err(Error::InfeasibleRadius {
            t,
            radius: feasible_radius(p, h),
        });
    }
    Ok(Density {
        space: p.space.clone(),
        values,
    })
}

/// Sums out every axis not named in `keep`, preserving axis order.
pub fn marginal(p: &Density, keep: &[&str]) -> Result<Density> {
    let s = p.space();
    let keep_pos = s.axis_positions(keep)?;
    let mut kept: Vec<usize> = keep_pos.clone();
    kept.sort_unstable();
    kept.dedup();
    let sub = GridSpace::new(kept.iter().map(|&k| s.axes[k].clone()).collect())?;
    let out_weight: f64 = s
        .axes
        .iter()
        .enumerate()
        .filter(|(k, _)| !kept.contains(k))
        .map(|(_, a)| a.kind.weight())
        .product();
    let mut values = vec![0.0; sub.n_atoms()];
    let mut sub_c = vec![0; kept.len()];
    for (atom, v) in p.values.iter().enumerate() {
        let c = s.coords(atom);
        for (j, &k) in kept.iter().enumerate() {
            sub_c[j] = c[k];
        }
        values[sub.index(&sub_c)] += v * out_weight;
    }
    Density::new(Arc::new(sub), values)
}

/// Conditional density of the remaining axes given `fixed = [(axis, index)]`.
pub fn conditional(p: &Density, fixed: &[(&str, usize)]) -> Result<Density> {
    let s = p.space();
    let names: Vec<&str> = fixed.iter().map(|f| f.0).collect();
    let pos = s.axis_positions(&names)?;
    for (&k, f) in pos.iter().zip(fixed) {
        if f.1 >= s.sizes[k] {
            return Err(Error::InvalidSpace(format!(
                "index {} out of range on axis `{}`",
                f.1, f.0
            )));
        }
    }
    let rest: Vec<usize> = (0..s.axes.len()).filter(|k| !pos.contains(k)).collect();
    if rest.is_empty() {
        return Err(Error::InvalidSpace("conditioning fixes every axis".into()));
    }
    let sub = GridSpace::new(rest.iter().map(|&k| s.axes[k].clone()).collect())?;
    let mut values = vec![0.0; sub.n_atoms()];
    let mut sub_c = vec![0; rest.len()];
    for (atom, v) in p.values.iter().enumerate() {
        let c = s.coords(atom);
        if pos.iter().zip(fixed).any(|(&k, f)| c[k] != f.1) {
            continue;
        }
        for (j, &k) in rest.iter().enumerate() {
            sub_c[j] = c[k];
        }
        values[sub.index(&sub_c)] = *v;
    }
    let mass = values.iter().sum::<f64>() * sub.atom_weight();
    if !(mass > 0.0) {
        let mut c = vec![0; s.axes.len()];
        for (&k, f) in pos.iter().zip(fixed) {
            c[k] = f.1;
        }
        return Err(Error::DegenerateSlice { slice: s.index(&c) });
    }
    values.iter_mut().for_each(|v| *v /= mass);
    Density::new(Arc::new(sub), values)
}

/// `Σ (√p − √q)² · atom_weight`, in `[0, 2]`.
pub fn hellinger_sq(p: &Density, q: &Density) -> Result<f64> {
    same_space(&p.space, &q.space)?;
    let w = p.space.atom_weight();
    let s: f64 = p
        .values
        .iter()
        .zip(&q.values)
        .map(|(a, b)| {
            let d = a.max(0.0).sqrt() - b.max(0.0).sqrt();
            d * d
        })
        .sum();
    Ok((s * w).clamp(0.0, 2.0))
}

/// `‖f − g‖` in `L²(P_Z)`, with `p_z` a density over the covariate grid.
pub fn l2_nuisance_distance(f: &[f64], g: &[f64], p_z: &[f64], z_weight: f64) -> Result<f64> {
    if f.len() != g.len() || f.len() != p_z.len() {
        return Err(Error::DimensionMismatch {
            expected: p_z.len(),
            got: if f.len() != p_z.len() { f.len() } else { g.len() },
        });
    }
    let s: f64 = f.iter().zip(g).zip(p_z).map(|((a, b), p)| (a - b) * (a - b) * p).sum();
    Ok((s * z_weight).sqrt())
}

/// Essential supremum of `|f − g|` over the grid (a plain maximum).
pub fn sup_distance(f: &[f64], g: &[f64]) -> f64 {
    f.iter().zip(g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Independent draws from a density, stored as atom indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub space: Arc<GridSpace>,
    pub rows: Vec<usize>,
    pub seed: u64,
}

/// `n` i.i.d. atoms from `p`; identical seeds give identical datasets.
pub fn sample(p: &Density, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = if n == 0 {
        Vec::new()
    } else {
        let probs: Vec<f64> = p.values.iter().map(|v| v.max(0.0)).collect();
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::InvalidDensity(format!("cannot sample: {e}")))?;
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    };
    Ok(Dataset {
        space: p.space.clone(),
        rows,
        seed,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// CSV with a `row` column followed by one coordinate column per axis.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string()];
        header.extend(self.space.axes.iter().map(|a| a.name.clone()));
        w.write_record(&header)?;
        for (i, &atom) in self.rows.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.space.coords(atom).iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(space: Arc<GridSpace>, seed: u64, input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let coords: Vec<usize> = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.parse::<usize>()
                        .map_err(|e| Error::InvalidSpace(format!("bad coordinate `{f}`: {e}")))
                })
                .collect::<Result<_>>()?;
            if coords.len() != space.sizes.len() || coords.iter().zip(&space.sizes).any(|(c, s)| c >= s) {
                return Err(Error::InvalidSpace(format!(
                    "row {:?} is not an atom of the grid",
                    coords
                )));
            }
            rows.push(space.index(&coords));
        }
        Ok(Dataset { space, rows, seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bits(n: usize) -> Arc<GridSpace> {
        let axes = (0..n)
            .map(|i| {
                let role = if i + 1 == n { Role::W } else { Role::Z1 };
                Axis::new(&format!("b{i}"), AxisKind::Binary, role)
            })
            .collect();
        Arc::new(GridSpace::new(axes).unwrap())
    }

    fn unit(cells: usize) -> Arc<GridSpace> {
        Arc::new(GridSpace::new(vec![Axis::new("x", AxisKind::Continuous { cells }, Role::Z1)]).unwrap())
    }

    #[test]
    fn weights_follow_axis_kinds() {
        let s = GridSpace::binary_treatment(8).unwrap();
        assert_eq!(s.n_atoms(), 32);
        assert_abs_diff_eq!(s.atom_weight(), 0.125);
        assert_abs_diff_eq!(s.atom_weight() * s.n_atoms() as f64, 4.0);
        assert_eq!(s.z_count(), 16);
        assert_eq!(s.coords(s.index(&[5, 1, 0])), vec![5, 1, 0]);
        assert_eq!(s.z1_of(s.index(&[5, 1, 0])), 5);
        let u = unit(16);
        assert_abs_diff_eq!(u.atom_weight() * 16.0, 1.0);
    }

    #[test]
    fn rejects_bad_axes() {
        assert!(GridSpace::new(vec![Axis::new("x", AxisKind::Continuous { cells: 1 }, Role::Z1)]).is_err());
        assert!(GridSpace::new(vec![
            Axis::new("y", AxisKind::Binary, Role::W),
            Axis::new("x", AxisKind::Binary, Role::Z1),
        ])
        .is_err());
    }

    #[test]
    fn integrate_examples() {
        let s = bits(2);
        let p = Density::uniform(s.clone());
        assert_abs_diff_eq!(integrate(&p, &[1.0; 4]).unwrap(), 1.0);
        let s1 = bits(1);
        let h = SignedDensity::new(s1, vec![1.0, -1.0]).unwrap();
        assert_eq!(integrate(&h, &[1.0, 1.0]).unwrap(), 0.0);
        let u = unit(4);
        let p = Density::uniform(u.clone());
        let w: Vec<f64> = (0..4).map(|i| u.axes()[0].kind.point(i)).collect();
        assert_abs_diff_eq!(integrate(&p, &w).unwrap(), 0.5, epsilon = 1e-15);
        assert!(matches!(integrate(&p, &[1.0; 3]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn add_scaled_examples() {
        let s = bits(1);
        let p = Density::uniform(s.clone());
        let h = SignedDensity::new(s, vec![0.5, -0.5]).unwrap();
        let q = add_scaled(&p, 0.5, &h).unwrap();
        assert_eq!(q.values(), &[0.75, 0.25]);
        match add_scaled(&p, 2.0, &h) {
            Err(Error::InfeasibleRadius { radius, .. }) => assert_eq!(radius, 1.0),
            other => panic!("{other:?}"),
        }
        assert_eq!(add_scaled(&p, 0.0, &h).unwrap(), p);
    }

    #[test]
    fn feasible_radius_examples() {
        let s = bits(1);
        let p = Density::uniform(s.clone());
        let h = SignedDensity::new(s.clone(), vec![0.5, -0.5]).unwrap();
        assert_eq!(feasible_radius(&p, &h), 1.0);
        assert_eq!(feasible_radius(&p, &SignedDensity::zero(s.clone())), f64::INFINITY);
        let p0 = Density::new(s.clone(), vec![1.0, 0.0]).unwrap();
        let h = SignedDensity::new(s, vec![1.0, -1.0]).unwrap();
        assert_eq!(feasible_radius(&p0, &h), 0.0);
    }

    #[test]
    fn marginal_examples() {
        let s = Arc::new(GridSpace::binary_treatment(4).unwrap());
        let q = [0.1, 0.2, 0.3, 0.4];
        let r = [0.7, 0.3];
        let v: Vec<f64> = (0..s.n_atoms())
            .map(|a| {
                let c = s.coords(a);
                q[c[0]] * 4.0 * r[c[1]] * 0.5
            })
            .collect();
        let p = Density::new(s.clone(), v).unwrap();
        let px = marginal(&p, &["x"]).unwrap();
        for (i, qi) in q.iter().enumerate() {
            assert_abs_diff_eq!(px.values()[i], qi * 4.0, epsilon = 1e-14);
        }
        let pd = marginal(&p, &["d"]).unwrap();
        assert_abs_diff_eq!(pd.values()[0], 0.7, epsilon = 1e-14);
        assert_abs_diff_eq!(pd.values()[1], 0.3, epsilon = 1e-14);
        let u = Density::uniform(s);
        let c = conditional(&u, &[("x", 2)]).unwrap();
        assert!(c.values().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_mass_slice_is_an_error() {
        let s = bits(2);
        let p = Density::new(s, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!(matches!(
            conditional(&p, &[("b0", 1)]),
            Err(Error::DegenerateSlice { .. })
        ));
    }

    #[test]
    fn sampling_examples() {
        let s = bits(2);
        let point = Density::new(s.clone(), vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let d = sample(&point, 50, 3).unwrap();
        assert!(d.rows.iter().all(|&r| r == 2));
        let b = bits(1);
        let u = Density::uniform(b);
        let d = sample(&u, 1_000_000, 11).unwrap();
        let f = d.rows.iter().filter(|&&r| r == 0).count() as f64 / 1e6;
        assert!((0.498..=0.502).contains(&f), "{f}");
        assert_eq!(sample(&u, 100, 5).unwrap(), sample(&u, 100, 5).unwrap());
        assert!(sample(&u, 0, 5).unwrap().is_empty());
    }

    #[test]
    fn hellinger_examples() {
        let s = bits(1);
        let a = Density::uniform(s.clone());
        let b = Density::new(s.clone(), vec![0.0, 1.0]).unwrap();
        let c = Density::new(s, vec![1.0, 0.0]).unwrap();
        assert_eq!(hellinger_sq(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(hellinger_sq(&a, &b).unwrap(), 2.0 - 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(hellinger_sq(&b, &c).unwrap(), 2.0);
    }

    #[test]
    fn l2_distance_examples() {
        let pz = [0.5, 1.5, 1.0, 1.0];
        let f = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(l2_nuisance_distance(&f, &f, &pz, 0.25).unwrap(), 0.0);
        let g: Vec<f64> = f.iter().map(|v| v + 0.3).collect();
        assert_abs_diff_eq!(l2_nuisance_distance(&f, &g, &pz, 0.25).unwrap(), 0.3, epsilon = 1e-15);
        let delta = [1.0, -1.0, -1.0, 1.0];
        let g: Vec<f64> = f.iter().zip(delta).map(|(v, d)| v + 0.05 * d).collect();
        assert_abs_diff_eq!(l2_nuisance_distance(&f, &g, &pz, 0.25).unwrap(), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let s = Arc::new(GridSpace::binary_treatment(8).unwrap());
        let d = sample(&Density::uniform(s.clone()), 40, 9).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(s, 9, buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn json_round_trip() {
        let s = Arc::new(GridSpace::continuous_treatment(4, 3).unwrap());
        let p = Density::uniform(s);
        let j = serde_json::to_string(&p).unwrap();
        assert!(j.starts_with("{\"space\":{\"axes\""));
        let back: Density = serde_json::from_str(&j).unwrap();
        assert_eq!(back, p);
    }

    fn random_density(s: &Arc<GridSpace>, raw: &[f64]) -> Density {
        Density::normalized(s.clone(), raw.to_vec()).unwrap()
    }

    proptest! {
        #[test]
        fn hellinger_is_symmetric_and_bounded(
            a in prop::collection::vec(0.0f64..1.0, 16),
            b in prop::collection::vec(0.0f64..1.0, 16),
        ) {
            prop_assume!(a.iter().sum::<f64>() > 0.1 && b.iter().sum::<f64>() > 0.1);
            let s = Arc::new(GridSpace::binary_treatment(4).unwrap());
            let p = random_density(&s, &a);
            let q = random_density(&s, &b);
            let h = hellinger_sq(&p, &q).unwrap();
            prop_assert!((0.0..=2.0).contains(&h));
            prop_assert_eq!(h, hellinger_sq(&q, &p).unwrap());
            prop_assert_eq!(hellinger_sq(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn add_scaled_round_trip(
            a in prop::collection::vec(0.1f64..1.0, 16),
            h in prop::collection::vec(-1.0f64..1.0, 16),
            frac in -0.9f64..0.9,
        ) {
            let s = Arc::new(GridSpace::binary_treatment(4).unwrap());
            let p = random_density(&s, &a);
            let mean = h.iter().sum::<f64>() / 16.0;
            let h = SignedDensity::new(s, h.iter().map(|v| v - mean).collect()).unwrap();
            let r = feasible_radius(&p, &h);
            let t = frac * r.min(10.0);
            let q = add_scaled(&p, t, &h).unwrap();
            prop_assert!((q.total_mass() - 1.0).abs() < MASS_TOL);
            let back = add_scaled(&q, -t, &h).unwrap();
            for (x, y) in back.values().iter().zip(p.values()) {
                prop_assert!((x - y).abs() <= 1e-14);
            }
        }

        #[test]
        fn marginal_times_conditional_reconstructs(
            a in prop::collection::vec(0.05f64..1.0, 16),
        ) {
            let s = Arc::new(GridSpace::binary_treatment(4).unwrap());
            let p = random_density(&s, &a);
            let pz = marginal(&p, &["x", "d"]).unwrap();
            for atom in 0..s.n_atoms() {
                let c = s.coords(atom);
                let cond = conditional(&p, &[("x", c[0]), ("d", c[1])]).unwrap();
                let rebuilt = cond.values()[c[2]] * pz.values()[s.z_of(atom)];
                prop_assert!((rebuilt - p.values()[atom]).abs() <= 1e-12);
            }
        }
    }
}
