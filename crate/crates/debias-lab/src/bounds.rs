//! Lower-bound machinery on enumerable instances: exact Hellinger distance
//! between an `n`-fold product and a mixture of products, the chunked
//! `χ²`-type constant `b`, the fuzzy-hypothesis risk bound, and the exact
//! Bayes error of the underlying test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::AlternativeFamily;
use crate::error::{Error, Result};
use crate::measure::{Density, GridValues};
use crate::models::functional_value;
use crate::partition::lambda_from_index;

pub const MAX_SAMPLE_SIZE: usize = 4;
pub const MAX_OUTCOMES: usize = 64;
pub const MAX_TUPLES: usize = 1_000_000;
pub const MAX_HYPOTHESES: usize = 4096;
/// Default `ξ` of the `(1 − ξ)`-quantile risk.
pub const DEFAULT_XI: f64 = 0.1;

/// Anchor against the uniform mixture of a family, observed `n` times.
#[derive(Clone, Debug)]
pub struct TestingInstance {
    pub anchor: Density,
    pub family: AlternativeFamily,
    pub n: usize,
    /// Whether every outcome tuple is small enough to enumerate.
    pub enumerated: bool,
}

impl TestingInstance {
    pub fn new(family: AlternativeFamily, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Precondition("need at least one observation".into()));
        }
        let atoms = family.anchor.space().n_atoms();
        let enumerated =
            n <= MAX_SAMPLE_SIZE && atoms <= MAX_OUTCOMES && (atoms as f64).powi(n as i32) <= MAX_TUPLES as f64;
        Ok(TestingInstance {
            anchor: family.anchor.clone(),
            family,
            n,
            enumerated,
        })
    }

    fn require_enumerated(&self) -> Result<()> {
        if !self.enumerated {
            return Err(Error::SizeLimit(format!(
                "{} outcomes observed {} times cannot be enumerated (|O| ≤ {MAX_OUTCOMES}, n ≤ {MAX_SAMPLE_SIZE}, |O|^n ≤ {MAX_TUPLES})",
                self.anchor.space().n_atoms(),
                self.n
            )));
        }
        let m = self.family.pairs();
        if m >= 64 || (1usize << m) > MAX_HYPOTHESES {
            return Err(Error::SizeLimit(format!("2^{m} alternatives exceed {MAX_HYPOTHESES}")));
        }
        Ok(())
    }

    /// Per-atom probabilities of the anchor and of every alternative.
    fn tables(&self) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.require_enumerated()?;
        let m = self.family.pairs();
        let members = (0..1usize << m)
            .map(|k| Ok(self.family.member(&lambda_from_index(k, m))?.probabilities()))
            .collect::<Result<Vec<_>>>()?;
        Ok((self.anchor.probabilities(), members))
    }

    /// Calls `f(P(o), Q(o))` for every tuple `o ∈ Oⁿ` and sums the results,
    /// in a fixed order.
    fn fold_tuples(&self, f: impl Fn(f64, f64) -> f64 + Sync) -> Result<f64> {
        let (p, members) = self.tables()?;
        let a = p.len();
        let n = self.n;
        let rest = a.pow((n - 1) as u32);
        let partials: Vec<f64> = (0..a)
            .into_par_iter()
            .map(|first| {
                let mut total = 0.0;
                let mut digits = vec![0usize; n];
                digits[0] = first;
                for k in 0..rest {
                    let mut r = k;
                    for d in digits.iter_mut().skip(1) {
                        *d = r % a;
                        r /= a;
                    }
                    let pp: f64 = digits.iter().map(|&i| p[i]).product();
                    let qq: f64 = members
                        .iter()
                        .map(|q| digits.iter().map(|&i| q[i]).product::<f64>())
                        .sum::<f64>()
                        / members.len() as f64;
                    total += f(pp, qq);
                }
                total
            })
            .collect();
        Ok(partials.iter().sum())
    }
}

/// Squared Hellinger distance `Σ (√P − √Q)²` (range `[0, 2]`) between the
/// anchor's `n`-fold product and the uniform mixture of the alternatives'.
pub fn product_mixture_hellinger(instance: &TestingInstance) -> Result<f64> {
    let h2 = instance.fold_tuples(|p, q| {
        let s = p.sqrt() + q.sqrt();
        if s > 0.0 {
            (p - q) * (p - q) / (s * s)
        } else {
            0.0
        }
    })?;
    Ok(h2.clamp(0.0, 2.0))
}

/// Total variation between the two hypotheses of the instance.
pub fn product_mixture_tv(instance: &TestingInstance) -> Result<f64> {
    Ok((0.5 * instance.fold_tuples(|p, q| (p - q).abs())?).clamp(0.0, 1.0))
}

/// Smallest average error of any test between the two hypotheses,
/// `(1 − TV)/2`.
pub fn optimal_test_error(instance: &TestingInstance) -> Result<f64> {
    Ok(0.5 * (1.0 - product_mixture_tv(instance)?))
}

/// `(1 − √(δ(1 − δ/4)))/2`, the testing risk floor when the squared
/// Hellinger distance is at most `δ`.
pub fn fano_risk(delta: f64) -> Result<f64> {
    if !(0.0..2.0).contains(&delta) {
        return Err(Error::Domain {
            name: "delta",
            value: delta,
            domain: "[0, 2)",
        });
    }
    Ok(0.5 * (1.0 - (delta * (1.0 - 0.25 * delta)).sqrt()))
}

/// The chunk constant `b` and the bound it implies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkBound {
    /// `max_j p_j⁻¹ sup_λ ∫_{X_j} (q_λ − p)²/p dμ`.
    pub b: f64,
    /// `C n² (max_j p_j) b²`.
    pub bound: f64,
    /// Largest chunk probability `max_j p_j`.
    pub max_chunk_mass: f64,
    /// `p_j⁻¹ sup_λ ∫_{X_j} …` per chunk.
    pub per_chunk: Vec<f64>,
}

/// Chunk `j` collects the `Z1` cells whose largest share lies in pair `j`.
pub fn chunks(family: &AlternativeFamily) -> Vec<usize> {
    let part = &family.partition;
    let supports: Vec<Vec<f64>> = (0..part.pairs()).map(|k| part.pair_support(k)).collect();
    (0..part.cells)
        .map(|c| {
            (0..supports.len())
                .max_by(|&a, &b| supports[a][c].total_cmp(&supports[b][c]))
                .unwrap_or(0)
        })
        .collect()
}

/// `∫_{X_j} (q − p)²/p dμ` for the cells mapped to `chunk`.
pub fn chunk_divergence(anchor: &Density, q: &Density, chunk_of: &[usize], chunk: usize) -> f64 {
    let s = anchor.space();
    let w = s.atom_weight();
    anchor
        .values()
        .iter()
        .zip(q.values())
        .enumerate()
        .filter(|(a, _)| chunk_of[s.z1_of(*a)] == chunk)
        .map(|(_, (p, q))| if *p > 0.0 { (q - p) * (q - p) / p } else { 0.0 })
        .sum::<f64>()
        * w
}

/// Computes `b` from two sign vectors per chunk (`λ_j = ±1`, all other
/// coordinates `+1`) and the bound with the supplied constant.
pub fn chunk_bound(family: &AlternativeFamily, n: usize, constant: f64) -> Result<ChunkBound> {
    let anchor = &family.anchor;
    let m = family.pairs();
    let chunk_of = chunks(family);
    let px = anchor.z1_marginal();
    let cells = px.len() as f64;
    let mut per_chunk = Vec::with_capacity(m);
    let mut max_mass = 0.0_f64;
    for j in 0..m {
        let mass: f64 = (0..px.len()).filter(|&c| chunk_of[c] == j).map(|c| px[c]).sum::<f64>() / cells;
        max_mass = max_mass.max(mass);
        let mut sup = 0.0_f64;
        for sign in [1i8, -1] {
            let mut lambda = vec![1i8; m];
            lambda[j] = sign;
            let q = family.member(&lambda)?;
            sup = sup.max(chunk_divergence(anchor, &q, &chunk_of, j));
        }
        per_chunk.push(if mass > 0.0 { sup / mass } else { 0.0 });
    }
    let b = per_chunk.iter().copied().fold(0.0, f64::max);
    Ok(ChunkBound {
        b,
        bound: constant * (n * n) as f64 * max_mass * b * b,
        max_chunk_mass: max_mass,
        per_chunk,
    })
}

/// Smallest `C` with `H² ≤ C n² (max_j p_j) b²` over calibration points
/// `(h2, n, max_chunk_mass, b)`.
pub fn fit_hellinger_constant(points: &[(f64, usize, f64, f64)]) -> Result<f64> {
    let ratios: Vec<f64> = points
        .iter()
        .filter(|(_, n, p, b)| *n > 0 && *p > 0.0 && *b > 0.0)
        .map(|(h, n, p, b)| h / ((n * n) as f64 * p * b * b))
        .collect();
    if ratios.is_empty() {
        return Err(Error::Precondition("no calibration point with b > 0".into()));
    }
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

/// Outcome of a worst-case risk run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimaxReport {
    /// Largest `(1 − ξ)`-quantile of `|estimate − χ(P)|` over the hypotheses.
    pub risk: f64,
    /// Quantile risk under the anchor, then under each alternative.
    pub per_hypothesis: Vec<f64>,
    /// `min_λ |χ(P_λ) − χ(P̂)|`.
    pub separation: f64,
    pub xi: f64,
    pub replications: usize,
}

/// Upper `(1 − ξ)` empirical quantile.
pub fn upper_quantile(values: &mut [f64], xi: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = ((1.0 - xi) * values.len() as f64).ceil() as usize;
    values[k.clamp(1, values.len()) - 1]
}

/// Runs `estimator(P, seed)` `replications` times under the anchor and under
/// every alternative and reports the worst quantile risk. Every alternative
/// must sit at least `2s` away from the anchor in the target functional.
pub fn minimax_demo<F>(
    family: &AlternativeFamily,
    estimator: F,
    s: f64,
    xi: f64,
    replications: usize,
    seed: u64,
) -> Result<MinimaxReport>
where
    F: Fn(&Density, u64) -> Result<f64> + Sync,
{
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::Domain {
            name: "xi",
            value: xi,
            domain: "(0, 1)",
        });
    }
    if replications == 0 {
        return Err(Error::Precondition("need at least one replication".into()));
    }
    let spec = &family.spec;
    let base = functional_value(&family.anchor, spec)?;
    let mut hypotheses = vec![family.anchor.clone()];
    for lambda in family.probe_lambdas() {
        hypotheses.push(family.member(&lambda)?);
    }
    let targets = hypotheses
        .iter()
        .map(|p| functional_value(p, spec))
        .collect::<Result<Vec<_>>>()?;
    let separation = targets[1..]
        .iter()
        .map(|t| (t - base).abs())
        .fold(f64::INFINITY, f64::min);
    if separation < 2.0 * s - 1e-12 {
        return Err(Error::Precondition(format!(
            "alternatives are only {separation} from the anchor; need 2s = {}",
            2.0 * s
        )));
    }
    let per_hypothesis = hypotheses
        .par_iter()
        .zip(&targets)
        .enumerate()
        .map(|(h, (p, target))| {
            let mut errors = (0..replications)
                .map(|r| {
                    let derived = seed.wrapping_add((h * replications + r) as u64);
                    Ok((estimator(p, derived)? - target).abs())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(upper_quantile(&mut errors, xi))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MinimaxReport {
        risk: per_hypothesis.iter().copied().fold(0.0, f64::max),
        per_hypothesis,
        separation,
        xi,
        replications,
    })
}
