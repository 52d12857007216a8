//! Balanced partitions of the `Z1` grid and the sign-flip fields built on them.
//!
//! A bisection looks for a polynomial `h_α(z) = Σ αᵢ zⁱ` whose nonnegative set
//! carries exactly half of every listed weight. The sign map
//! `Φ_j(α) = ∫ sgn(h_α) w_j dμ` is continuous and odd on the coefficient
//! sphere, so it has a zero. Searching over coefficients is awkward because
//! the map goes flat whenever a root leaves `[0, 1]`, so the search runs over
//! the roots themselves: `h = ±Π (tᵢ − z)` with `tᵢ ∈ [0, 1]`. Newton steps
//! from equal-mass quantiles, then from seeded random roots, until the
//! weights balance.
//!
//! Cells holding a root are split at the exact root position, so block
//! membership is fractional. Membership within `1e-9` of 0 or 1 is snapped,
//! which keeps partitions of flat weights on whole cells.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{AxisKind, GridSpace, Role};

/// Balance tolerance, relative to `1 + ∫|w| dμ`.
pub const BALANCE_TOL: f64 = 1e-6;
/// Evaluation budget for one bisection.
pub const EVAL_BUDGET: usize = 10_000;
/// Largest number of simultaneously balanced weights.
pub const MAX_WEIGHTS: usize = 6;
const SNAP: f64 = 1e-9;
const RUN_BUDGET: usize = 300;

/// Number of `Z1` cells when the space has a single continuous `Z1` axis.
pub fn z1_cells(space: &GridSpace) -> Result<usize> {
    let z1: Vec<_> = space.axes().iter().filter(|a| a.role == Role::Z1).collect();
    match z1.as_slice() {
        [a] => match a.kind {
            AxisKind::Continuous { cells } => Ok(cells),
            _ => Err(Error::Precondition("Z1 axis must be continuous".into())),
        },
        _ => Err(Error::Precondition("partitions need exactly one Z1 axis".into())),
    }
}

fn poly(alpha: &[f64], z: f64) -> f64 {
    alpha.iter().rev().fold(0.0, |acc, a| acc * z + a)
}

/// Fraction of each cell where `h_α ≥ 0`, interpolating linearly between edges.
fn positive_fractions(alpha: &[f64], cells: usize) -> Vec<f64> {
    let edges: Vec<f64> = (0..=cells).map(|i| poly(alpha, i as f64 / cells as f64)).collect();
    edges
        .windows(2)
        .map(|e| {
            let (l, r) = (e[0], e[1]);
            match (l >= 0.0, r >= 0.0) {
                (true, true) => 1.0,
                (false, false) => 0.0,
                (true, false) => l / (l - r),
                (false, true) => 1.0 - l / (l - r),
            }
        })
        .collect()
}

fn snap(f: f64) -> f64 {
    if f < SNAP {
        0.0
    } else if f > 1.0 - SNAP {
        1.0
    } else {
        f
    }
}

/// `Φ(α)` restricted to a block with per-cell membership.
fn sign_map_on(alpha: &[f64], weights: &[Vec<f64>], membership: &[f64]) -> Vec<f64> {
    let cells = membership.len();
    let frac = positive_fractions(alpha, cells);
    weights
        .iter()
        .map(|w| {
            frac.iter()
                .zip(membership)
                .zip(w)
                .map(|((f, m), w)| m * w * (2.0 * f - 1.0))
                .sum::<f64>()
                / cells as f64
        })
        .collect()
}

/// `Φ_j(α) = ∫ sgn(h_α) w_j dμ` over the unit interval.
pub fn sign_map(alpha: &[f64], weights: &[Vec<f64>]) -> Result<Vec<f64>> {
    if alpha.iter().all(|a| *a == 0.0) {
        return Err(Error::InvalidDirection);
    }
    let cells = weights.first().map_or(0, |w| w.len());
    if weights.iter().any(|w| w.len() != cells) || cells < 2 {
        return Err(Error::DimensionMismatch {
            expected: cells,
            got: weights.iter().map(|w| w.len()).min().unwrap_or(0),
        });
    }
    Ok(sign_map_on(alpha, weights, &vec![1.0; cells]))
}

/// Share of each cell where `sign · Π (tᵢ − z) ≥ 0`, for sorted `roots` in `[0, 1]`.
fn root_fractions(sign: f64, roots: &[f64], cells: usize) -> Vec<f64> {
    let mut bounds = Vec::with_capacity(roots.len() + 2);
    bounds.push(0.0);
    bounds.extend_from_slice(roots);
    bounds.push(1.0);
    let n = cells as f64;
    let mut out = vec![0.0; cells];
    for (k, seg) in bounds.windows(2).enumerate() {
        let positive = (sign > 0.0) == (k % 2 == 0);
        if !positive || seg[1] <= seg[0] {
            continue;
        }
        let lo = ((seg[0] * n).floor() as usize).min(cells - 1);
        let hi = ((seg[1] * n).ceil() as usize).min(cells);
        for (c, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
            let (l, r) = (c as f64 / n, (c + 1) as f64 / n);
            *o += ((seg[1].min(r) - seg[0].max(l)) * n).max(0.0);
        }
    }
    out.iter_mut().for_each(|f| *f = f.min(1.0));
    out
}

/// Coefficients, lowest degree first, of `sign · Π (tᵢ − z)` scaled to unit norm.
fn root_polynomial(sign: f64, roots: &[f64]) -> Vec<f64> {
    let mut c = vec![sign];
    for &t in roots {
        let mut next = vec![0.0; c.len() + 1];
        for (i, v) in c.iter().enumerate() {
            next[i] += t * v;
            next[i + 1] -= v;
        }
        c = next;
    }
    normalize(&mut c);
    c
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
}

/// Balance equations in sign-change coordinates. With the roots as unknowns
/// the residual is piecewise linear and its Jacobian is read off the weights
/// at the roots, so Newton steps converge in a handful of iterations.
struct Problem<'a> {
    weights: &'a [Vec<f64>],
    membership: &'a [f64],
    scale: Vec<f64>,
    sign: f64,
    evals: usize,
}

impl Problem<'_> {
    fn residual(&mut self, roots: &[f64]) -> Vec<f64> {
        self.evals += 1;
        let frac = root_fractions(self.sign, roots, self.membership.len());
        let phi = self.weights.iter().map(|w| {
            frac.iter()
                .zip(self.membership)
                .zip(w)
                .map(|((f, m), w)| m * w * (2.0 * f - 1.0))
                .sum::<f64>()
                / self.membership.len() as f64
        });
        phi.zip(&self.scale).map(|(r, s)| 0.5 * r / s).collect()
    }

    fn norm(r: &[f64]) -> f64 {
        r.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Weighted density at `t`, averaged over the two cells when `t` is an edge.
    fn weight_at(&self, j: usize, t: f64) -> f64 {
        let cells = self.membership.len();
        let x = t * cells as f64;
        let v = |c: usize| self.weights[j][c] * self.membership[c];
        let c = (x.floor() as usize).min(cells - 1);
        if x == x.floor() && c > 0 && c < cells {
            0.5 * (v(c - 1) + v(c))
        } else {
            v(c)
        }
    }

    fn jacobian(&self, roots: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.weights.len(), roots.len(), |j, k| {
            // segment k lies just left of root k
            let left = if (self.sign > 0.0) == (k % 2 == 0) { 1.0 } else { -1.0 };
            left * self.weight_at(j, roots[k]) / self.scale[j]
        })
    }

    fn newton(&mut self, start: Vec<f64>, target: f64) -> (Vec<f64>, f64) {
        let mut t = start;
        let mut r = self.residual(&t);
        let mut f = Self::norm(&r);
        // a run that has not converged after this many evaluations is
        // creeping along a kink; a fresh start is cheaper
        let stop = (self.evals + RUN_BUDGET).min(EVAL_BUDGET);
        while f > target && self.evals < stop {
            let Ok(pinv) = self.jacobian(&t).pseudo_inverse(1e-12) else {
                break;
            };
            let step = pinv * DVector::from_column_slice(&r);
            let mut improved = false;
            let mut damp = 1.0;
            while damp > 1e-4 {
                let mut cand: Vec<f64> = t
                    .iter()
                    .zip(step.iter())
                    .map(|(a, s)| (a - damp * s).clamp(0.0, 1.0))
                    .collect();
                cand.sort_by(f64::total_cmp);
                let rc = self.residual(&cand);
                let fc = Self::norm(&rc);
                if fc < f {
                    (t, r, f) = (cand, rc, fc);
                    improved = true;
                    break;
                }
                damp *= 0.5;
            }
            if !improved {
                break;
            }
        }
        (t, f)
    }
}

/// Point where the cumulative membership mass reaches `share` of the total.
fn quantile(membership: &[f64], share: f64) -> f64 {
    let total: f64 = membership.iter().sum();
    let goal = share * total;
    let mut cum = 0.0;
    for (c, m) in membership.iter().enumerate() {
        if *m > 0.0 && cum + m >= goal {
            return (c as f64 + (goal - cum) / m) / membership.len() as f64;
        }
        cum += m;
    }
    1.0
}

/// Result of one bisection: the share of each cell on the nonnegative side of
/// `h_α`. The caller multiplies it into the parent block's membership.
#[derive(Clone, Debug)]
pub struct Bisection {
    pub alpha: Vec<f64>,
    pub fractions: Vec<f64>,
    pub residuals: Vec<f64>,
    pub evaluations: usize,
}

/// Splits the block with the given membership so each weight is halved.
pub fn bisect_block(weights: &[Vec<f64>], membership: &[f64]) -> Result<Bisection> {
    let q = weights.len();
    if q == 0 || q > MAX_WEIGHTS {
        return Err(Error::Precondition(format!(
            "bisection balances between 1 and {MAX_WEIGHTS} weights, got {q}"
        )));
    }
    let cells = membership.len();
    if weights.iter().any(|w| w.len() != cells) {
        return Err(Error::DimensionMismatch {
            expected: cells,
            got: weights.iter().map(|w| w.len()).find(|l| *l != cells).unwrap_or(0),
        });
    }
    if cells == 0 || !membership.iter().any(|m| *m > 0.0) {
        return Err(Error::Precondition("cannot bisect an empty block".into()));
    }
    let scale: Vec<f64> = weights
        .iter()
        .map(|w| 1.0 + w.iter().zip(membership).map(|(w, m)| (w * m).abs()).sum::<f64>() / cells as f64)
        .collect();
    let mut p = Problem {
        weights,
        membership,
        scale,
        sign: 1.0,
        evals: 0,
    };
    let target = BALANCE_TOL * 1e-4;
    // equal-mass quantiles first, then random sorted roots over the block
    let first = membership.iter().position(|m| *m > 0.0).unwrap_or(0) as f64 / cells as f64;
    let last = (membership.iter().rposition(|m| *m > 0.0).unwrap_or(cells - 1) + 1) as f64 / cells as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for attempt in 0.. {
        if p.evals >= EVAL_BUDGET || best.as_ref().is_some_and(|b| b.2 <= target) {
            break;
        }
        let mut start: Vec<f64> = if attempt < 2 {
            (1..=q)
                .map(|i| quantile(membership, i as f64 / (q + 1) as f64))
                .collect()
        } else {
            (0..q).map(|_| rng.random_range(first..=last)).collect()
        };
        start.sort_by(f64::total_cmp);
        p.sign = if attempt % 2 == 0 { 1.0 } else { -1.0 };
        // polish well past the acceptance target: bumped directions need
        // their masses to cancel to rounding
        let (t, f) = p.newton(start, 1e-15);
        if best.as_ref().is_none_or(|b| f < b.2) {
            best = Some((p.sign, t, f));
        }
    }
    let (sign, roots, fx) = best.expect("at least one start is tried");
    let fractions: Vec<f64> = root_fractions(sign, &roots, cells).into_iter().map(snap).collect();
    let residuals: Vec<f64> = weights
        .iter()
        .map(|w| {
            let half: f64 = w.iter().zip(membership).map(|(w, m)| w * m).sum::<f64>() * 0.5;
            let pos: f64 = w
                .iter()
                .zip(membership)
                .zip(&fractions)
                .map(|((w, m), f)| w * m * f)
                .sum();
            (pos - half) / cells as f64
        })
        .collect();
    let worst = residuals
        .iter()
        .zip(&p.scale)
        .map(|(r, s)| r.abs() / s)
        .fold(0.0, f64::max);
    if worst > BALANCE_TOL {
        return Err(Error::NoConvergence {
            evaluations: p.evals,
            residual: worst.max(fx),
        });
    }
    Ok(Bisection {
        alpha: root_polynomial(sign, &roots),
        fractions,
        residuals,
        evaluations: p.evals,
    })
}

/// Half-space bisection of the whole unit interval.
pub fn bisect(weights: &[Vec<f64>]) -> Result<Bisection> {
    let cells = weights.first().map_or(0, |w| w.len());
    bisect_block(weights, &vec![1.0; cells])
}

/// `2M` blocks of `Z1` cells with fractional membership, paired as
/// `(B₁, B₂), (B₃, B₄), …`.
#[derive(Clone, Debug, PartialEq)]
pub struct BumpPartition {
    pub cells: usize,
    /// `membership[j][c]`: share of cell `c` in block `j`.
    pub membership: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    /// `residuals[i][j] = ∫_{B_j} w_i dμ − (1/2M) ∫ w_i dμ`.
    pub residuals: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PartitionDoc {
    cells: usize,
    blocks: Vec<Vec<(usize, f64)>>,
    pairing: Vec<(usize, usize)>,
    weights: Vec<Vec<f64>>,
    residuals: Vec<Vec<f64>>,
}

impl Serialize for BumpPartition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PartitionDoc {
            cells: self.cells,
            blocks: self
                .membership
                .iter()
                .map(|m| {
                    m.iter()
                        .enumerate()
                        .filter(|(_, v)| **v > 0.0)
                        .map(|(c, v)| (c, *v))
                        .collect()
                })
                .collect(),
            pairing: (0..self.pairs()).map(|i| (2 * i, 2 * i + 1)).collect(),
            weights: self.weights.clone(),
            residuals: self.residuals.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BumpPartition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = PartitionDoc::deserialize(d)?;
        let mut membership = vec![vec![0.0; doc.cells]; doc.blocks.len()];
        for (j, b) in doc.blocks.iter().enumerate() {
            for &(c, v) in b {
                if c >= doc.cells {
                    return Err(serde::de::Error::custom(format!("cell {c} out of range")));
                }
                membership[j][c] = v;
            }
        }
        Ok(BumpPartition {
            cells: doc.cells,
            membership,
            weights: doc.weights,
            residuals: doc.residuals,
        })
    }
}

impl BumpPartition {
    /// Number of block pairs `M`.
    pub fn pairs(&self) -> usize {
        self.membership.len() / 2
    }

    pub fn blocks(&self) -> usize {
        self.membership.len()
    }

    /// Largest balance residual relative to `1 + ∫|w| dμ`.
    pub fn max_relative_residual(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.residuals)
            .map(|(w, r)| {
                let s = 1.0 + w.iter().map(|v| v.abs()).sum::<f64>() / self.cells as f64;
                r.iter().map(|x| x.abs()).fold(0.0, f64::max) / s
            })
            .fold(0.0, f64::max)
    }

    /// True when no cell is shared between blocks.
    pub fn is_unsplit(&self) -> bool {
        self.membership.iter().all(|m| m.iter().all(|v| *v == 0.0 || *v == 1.0))
    }

    /// Pair `k` (0-based) covers `(B_{2k}, B_{2k+1})` in 0-based block numbers.
    pub fn pair_support(&self, k: usize) -> Vec<f64> {
        self.membership[2 * k]
            .iter()
            .zip(&self.membership[2 * k + 1])
            .map(|(a, b)| a + b)
            .collect()
    }
}

fn block_residuals(weights: &[Vec<f64>], membership: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cells = membership[0].len() as f64;
    let nb = membership.len() as f64;
    weights
        .iter()
        .map(|w| {
            let total: f64 = w.iter().sum::<f64>() / cells;
            membership
                .iter()
                .map(|m| w.iter().zip(m).map(|(w, m)| w * m).sum::<f64>() / cells - total / nb)
                .collect()
        })
        .collect()
}

/// Recursively bisects until there are `2M` blocks, each carrying `1/(2M)` of
/// every weight.
pub fn iterated_partition(weights: &[Vec<f64>], pairs: usize) -> Result<BumpPartition> {
    let blocks = 2 * pairs;
    if pairs == 0 || !blocks.is_power_of_two() {
        return Err(Error::Precondition(format!("2M must be a power of two, got {blocks}")));
    }
    let cells = weights.first().map_or(0, |w| w.len());
    if cells < 2 {
        return Err(Error::Precondition("need at least two Z1 cells".into()));
    }
    let mut membership = vec![vec![1.0; cells]];
    while membership.len() < blocks {
        let mut next = Vec::with_capacity(2 * membership.len());
        for m in &membership {
            let b = bisect_block(weights, m)?;
            next.push(m.iter().zip(&b.fractions).map(|(m, f)| m * f).collect());
            next.push(m.iter().zip(&b.fractions).map(|(m, f)| m * (1.0 - f)).collect());
        }
        membership = next;
    }
    let residuals = block_residuals(weights, &membership);
    Ok(BumpPartition {
        cells,
        membership,
        weights: weights.to_vec(),
        residuals,
    })
}

/// `Δ(λ, ·) = Σᵢ λᵢ (1{B₂ᵢ₋₁} − 1{B₂ᵢ})` on the `Z1` cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpField {
    pub lambda: Vec<i8>,
    pub values: Vec<f64>,
}

/// The sign-flip field for one sign vector.
pub fn bump(partition: &BumpPartition, lambda: &[i8]) -> Result<BumpField> {
    if lambda.len() != partition.pairs() || lambda.iter().any(|l| l.abs() != 1) {
        return Err(Error::Precondition(format!(
            "λ must be a ±1 vector of length {}",
            partition.pairs()
        )));
    }
    let mut values = vec![0.0; partition.cells];
    for (i, &l) in lambda.iter().enumerate() {
        let (a, b) = (&partition.membership[2 * i], &partition.membership[2 * i + 1]);
        for c in 0..partition.cells {
            values[c] += l as f64 * (a[c] - b[c]);
        }
    }
    Ok(BumpField {
        lambda: lambda.to_vec(),
        values,
    })
}

/// Sign vector number `k` of `2^M`, reading bit `i` as `λᵢ = −1`.
pub fn lambda_from_index(k: usize, pairs: usize) -> Vec<i8> {
    (0..pairs).map(|i| if (k >> i) & 1 == 1 { -1 } else { 1 }).collect()
}
