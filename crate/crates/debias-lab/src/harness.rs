//! Seeded Monte Carlo sweeps with log-log slope fits.
//!
//! Replication `r` of a run with seed `s` draws from the stream seeded with
//! `s + r`, so any single record can be reproduced on its own. Records come
//! back ordered by sweep point and then replication, whatever order the
//! worker threads finish in.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::AlternativeFamily;
use crate::anchors::{AnchorSpec, Profile};
use crate::bounds::{product_mixture_hellinger, TestingInstance};
use crate::error::{Error, Result};
use crate::estimators::{
    alpha_from_propensity, corrupt_nuisance, dml_estimate, dr_ate_estimate, nuisance_law, plugin_estimate,
    population_dml, population_dr_ate, population_plugin, propensity_field, true_nuisances, Alignment,
    CorruptionDirection, CorruptionSpec, DEFAULT_FOLDS,
};
use crate::measure::{sample, Density, GridValues};
use crate::models::{alpha_values, functional_value, EstimandKind, EstimandSpec, NuisanceField, DEFAULT_OVERLAP};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "DEBIAS_LAB_THREADS";
/// Fewest replications accepted for a slope fit.
pub const MIN_REPLICATIONS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Plugin,
    Dr,
    Dml,
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plugin" => Ok(EstimatorKind::Plugin),
            "dr" => Ok(EstimatorKind::Dr),
            "dml" => Ok(EstimatorKind::Dml),
            _ => Err(Error::InvalidSpec(format!("unknown estimator `{s}`"))),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::Plugin => "plugin",
            EstimatorKind::Dr => "dr",
            EstimatorKind::Dml => "dml",
        })
    }
}

/// What varies across sweep points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Sample sizes, with the configured nuisance errors.
    NSweep(Vec<usize>),
    /// `(ε_γ, ε_α)` pairs, at the configured sample size.
    EpsSweep(Vec<(f64, f64)>),
    /// Pair counts `M` of a treatment-effect family observed `n ≤ 4` times;
    /// the recorded error is the exact squared Hellinger distance.
    MSweep(Vec<usize>),
}

impl Sweep {
    fn len(&self) -> usize {
        match self {
            Sweep::NSweep(v) => v.len(),
            Sweep::EpsSweep(v) => v.len(),
            Sweep::MSweep(v) => v.len(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Sweep::NSweep(_) => "n",
            Sweep::EpsSweep(_) => "eps",
            Sweep::MSweep(_) => "pairs",
        }
    }
}

fn default_n() -> usize {
    10_000
}
fn default_folds() -> usize {
    DEFAULT_FOLDS
}
fn default_replications() -> usize {
    MIN_REPLICATIONS
}
fn default_x_cells() -> usize {
    AnchorSpec::new(EstimandKind::Ate).x_cells
}
fn default_d_cells() -> usize {
    AnchorSpec::new(EstimandKind::Ate).d_cells
}
fn default_estimator() -> EstimatorKind {
    EstimatorKind::Dml
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: EstimandKind,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default = "default_x_cells")]
    pub x_cells: usize,
    #[serde(default = "default_d_cells")]
    pub d_cells: usize,
    pub sweep: Sweep,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub alignment: Alignment,
    /// Sample size for sweeps that do not vary it.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Nuisance errors for sweeps that do not vary them.
    #[serde(default)]
    pub eps_gamma: f64,
    #[serde(default)]
    pub eps_alpha: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Exact expectations instead of samples.
    #[serde(default)]
    pub population: bool,
}

impl ExperimentConfig {
    pub fn new(kind: EstimandKind, sweep: Sweep) -> Self {
        ExperimentConfig {
            kind,
            profile: Profile::Smooth,
            x_cells: default_x_cells(),
            d_cells: default_d_cells(),
            sweep,
            replications: MIN_REPLICATIONS,
            seed: 0,
            estimator: EstimatorKind::Dml,
            alignment: Alignment::Adversarial,
            n: default_n(),
            eps_gamma: 0.0,
            eps_alpha: 0.0,
            folds: DEFAULT_FOLDS,
            population: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < MIN_REPLICATIONS {
            return Err(Error::Precondition(format!(
                "slope fits need at least {MIN_REPLICATIONS} replications, got {}",
                self.replications
            )));
        }
        let increasing = match &self.sweep {
            Sweep::NSweep(v) => v.windows(2).all(|w| w[0] < w[1]) && v.first().is_some_and(|n| *n > 0),
            Sweep::MSweep(v) => v.windows(2).all(|w| w[0] < w[1]) && v.first().is_some_and(|m| *m > 0),
            Sweep::EpsSweep(v) => v
                .windows(2)
                .all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1 && w[0] != w[1]),
        };
        if self.sweep.len() < 2 || !increasing {
            return Err(Error::Precondition(
                "sweep needs at least two strictly increasing points".into(),
            ));
        }
        if self.estimator == EstimatorKind::Dr && self.kind != EstimandKind::Ate {
            return Err(Error::Precondition(
                "the doubly robust estimator is defined for `ate` only".into(),
            ));
        }
        if matches!(self.sweep, Sweep::MSweep(_)) && self.kind != EstimandKind::Ate {
            return Err(Error::Precondition(
                "pair sweeps use the treatment-effect family".into(),
            ));
        }
        Ok(())
    }

    pub fn anchor(&self) -> Result<(EstimandSpec, Density)> {
        AnchorSpec {
            kind: self.kind,
            x_cells: self.x_cells,
            d_cells: self.d_cells,
            profile: self.profile,
        }
        .build()
    }

    /// Sweep coordinate used on the horizontal axis of the fit.
    fn abscissa(&self, point: usize) -> f64 {
        match &self.sweep {
            Sweep::NSweep(v) => v[point] as f64,
            Sweep::MSweep(v) => v[point] as f64,
            Sweep::EpsSweep(v) => {
                let fixed_alpha = v.iter().all(|e| e.1 == v[0].1);
                let fixed_gamma = v.iter().all(|e| e.0 == v[0].0);
                let (g, a) = v[point];
                if fixed_alpha {
                    g
                } else if fixed_gamma {
                    a
                } else {
                    (g * a).sqrt()
                }
            }
        }
    }
}

/// One replication at one sweep point, with the configuration flattened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub kind: EstimandKind,
    pub profile: Profile,
    pub x_cells: usize,
    pub d_cells: usize,
    pub estimator: EstimatorKind,
    pub alignment: Alignment,
    pub population: bool,
    pub folds: usize,
    pub sweep: String,
    pub sweep_value: f64,
    pub n: usize,
    pub eps_gamma: f64,
    pub eps_alpha: f64,
    pub pairs: usize,
    pub seed: u64,
    pub replication: usize,
    pub derived_seed: u64,
    pub point: Option<f64>,
    pub oracle: f64,
    pub abs_error: Option<f64>,
    /// Failure message when the replication did not produce an estimate.
    pub failure: Option<String>,
}

/// Least-squares slope of `log(median |error|)` on `log(sweep value)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// `None` with only two sweep points.
    pub slope_se: Option<f64>,
    /// `(sweep value, median, mean)` of the absolute error per point.
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub records: Vec<ResultRecord>,
    pub fit: SlopeFit,
    pub failures: usize,
}

/// A pool sized by `DEBIAS_LAB_THREADS` when set, else by rayon's default.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Precondition(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::Precondition(format!("cannot start worker threads: {e}")))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Fits the slope from records in any order.
pub fn fit_slope(records: &[ResultRecord]) -> Result<SlopeFit> {
    let mut xs: Vec<f64> = records.iter().map(|r| r.sweep_value).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut points = Vec::with_capacity(xs.len());
    for &x in &xs {
        let mut errs: Vec<f64> = records
            .iter()
            .filter(|r| r.sweep_value == x)
            .filter_map(|r| r.abs_error)
            .collect();
        if errs.is_empty() {
            return Err(Error::Precondition(format!(
                "every replication failed at sweep value {x}"
            )));
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        points.push((x, median(&mut errs), mean));
    }
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, m, _)| *x > 0.0 && *m > 0.0)
        .map(|(x, m, _)| (x.ln(), m.ln()))
        .collect();
    if usable.len() < 2 {
        return Err(Error::Precondition(
            "need two sweep points with positive value and median error".into(),
        ));
    }
    let k = usable.len() as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / k;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = (usable.len() > 2).then(|| {
        let ssr: f64 = usable.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (ssr / (k - 2.0) / sxx).sqrt()
    });
    Ok(SlopeFit {
        slope,
        intercept,
        slope_se,
        points,
    })
}

/// Direction along which a nuisance is corrupted: the sign of the anchor's
/// `α`, so the plug-in bias is first order and aligned corruptions of `γ`
/// and `α` multiply.
fn riesz_sign(p: &Density, spec: &EstimandSpec) -> Result<Vec<f64>> {
    Ok(alpha_values(p, spec)?
        .iter()
        .map(|a| if *a < 0.0 { -1.0 } else { 1.0 })
        .collect())
}

struct Prepared {
    spec: EstimandSpec,
    anchor: Density,
    oracle: f64,
    gamma: NuisanceField,
    alpha: NuisanceField,
    propensity: Option<NuisanceField>,
    direction: Vec<f64>,
}

/// Corrupted `(γ̂, α̂, m̂)`. Debiased fields move along the sign of `α`; for
/// the doubly robust score the regression drops and the propensity rises
/// uniformly, which pushes both inverse-weight errors the same way.
fn corrupted(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    eps: (f64, f64),
    derived_seed: u64,
) -> Result<(NuisanceField, NuisanceField, Option<NuisanceField>)> {
    let law = nuisance_law(&prep.anchor, &prep.gamma)?;
    let spec_for = |eps: f64, dir: Vec<f64>, stream: u64| {
        let c = CorruptionSpec::new(eps, CorruptionDirection::Field(dir));
        match cfg.alignment {
            Alignment::Adversarial => c,
            Alignment::Random => c.random(derived_seed.wrapping_mul(2).wrapping_add(stream)),
        }
    };
    match &prep.propensity {
        Some(m) => {
            let down = vec![-1.0; prep.gamma.values.len()];
            let g = corrupt_nuisance(&prep.gamma, &spec_for(eps.0, down, 0), &law)?;
            let up = vec![1.0; m.values.len()];
            let mc = corrupt_nuisance(m, &spec_for(eps.1, up, 1), &nuisance_law(&prep.anchor, m)?)?;
            let a = alpha_from_propensity(prep.anchor.space(), &mc, DEFAULT_OVERLAP)?;
            Ok((g, a, Some(mc)))
        }
        None => {
            let g = corrupt_nuisance(&prep.gamma, &spec_for(eps.0, prep.direction.clone(), 0), &law)?;
            let a = corrupt_nuisance(&prep.alpha, &spec_for(eps.1, prep.direction.clone(), 1), &law)?;
            Ok((g, a, None))
        }
    }
}

fn one_replication(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    n: usize,
    eps: (f64, f64),
    derived_seed: u64,
) -> Result<f64> {
    let (g, a, m) = corrupted(cfg, prep, eps, derived_seed)?;
    let p = &prep.anchor;
    if cfg.population {
        return match cfg.estimator {
            EstimatorKind::Plugin => population_plugin(p, &g, &prep.spec),
            EstimatorKind::Dml => population_dml(p, &g, &a, &prep.spec),
            EstimatorKind::Dr => population_dr_ate(p, &g, m.as_ref().expect("ate"), DEFAULT_OVERLAP),
        };
    }
    let data = sample(p, n, derived_seed)?;
    match cfg.estimator {
        EstimatorKind::Plugin => plugin_estimate(&data, &g, &prep.spec),
        EstimatorKind::Dml => dml_estimate(&data, &g, &a, &prep.spec, cfg.folds),
        EstimatorKind::Dr => dr_ate_estimate(&data, &g, m.as_ref().expect("ate"), DEFAULT_OVERLAP),
    }
}

fn hellinger_point(cfg: &ExperimentConfig, anchor: &Density, pairs: usize) -> Result<f64> {
    let fam = AlternativeFamily::ate(anchor, cfg.eps_alpha, cfg.eps_gamma, pairs)?;
    product_mixture_hellinger(&TestingInstance::new(fam, cfg.n)?)
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (spec, anchor) = cfg.anchor()?;
    let (gamma, alpha) = true_nuisances(&anchor, &spec)?;
    let propensity = if cfg.estimator == EstimatorKind::Dr {
        if cfg.kind != EstimandKind::Ate {
            return Err(Error::Precondition(
                "the doubly robust estimator is defined for `ate` only".into(),
            ));
        }
        Some(propensity_field(&anchor)?.with_overlap(DEFAULT_OVERLAP)?)
    } else {
        None
    };
    Ok(Prepared {
        oracle: functional_value(&anchor, &spec)?,
        direction: riesz_sign(&anchor, &spec)?,
        spec,
        anchor,
        gamma,
        alpha,
        propensity,
    })
}

/// One estimate on the configured anchor with nuisance errors `eps`, and the
/// true value it targets.
pub fn estimate_once(cfg: &ExperimentConfig, n: usize, eps: (f64, f64), seed: u64) -> Result<(f64, f64)> {
    let prep = prepare(cfg)?;
    Ok((one_replication(cfg, &prep, n, eps, seed)?, prep.oracle))
}

/// Sizes rayon's global pool from `DEBIAS_LAB_THREADS`; a no-op when the
/// variable is unset.
pub fn init_global_pool() -> Result<()> {
    if std::env::var_os(THREADS_ENV).is_none() {
        return Ok(());
    }
    let n = thread_pool()?.current_num_threads();
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Precondition(format!("cannot size the global pool: {e}")))
}

/// Runs every `(sweep point, replication)` job and fits the slope.
pub fn run_rate_scan(cfg: &ExperimentConfig) -> Result<ScanResult> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let jobs: Vec<(usize, usize)> = (0..cfg.sweep.len())
        .flat_map(|i| (0..cfg.replications).map(move |r| (i, r)))
        .collect();
    let pool = thread_pool()?;
    let prep = Arc::new(prep);
    let records: Vec<ResultRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, r)| {
                let derived_seed = cfg.seed.wrapping_add(r as u64);
                let (n, eps, pairs) = match &cfg.sweep {
                    Sweep::NSweep(v) => (v[i], (cfg.eps_gamma, cfg.eps_alpha), 0),
                    Sweep::EpsSweep(v) => (cfg.n, v[i], 0),
                    Sweep::MSweep(v) => (cfg.n, (cfg.eps_gamma, cfg.eps_alpha), v[i]),
                };
                let (oracle, outcome) = match &cfg.sweep {
                    Sweep::MSweep(_) => (0.0, hellinger_point(cfg, &prep.anchor, pairs)),
                    _ => (prep.oracle, one_replication(cfg, &prep, n, eps, derived_seed)),
                };
                let (point, failure) = match outcome {
                    Ok(v) => (Some(v), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                ResultRecord {
                    kind: cfg.kind,
                    profile: cfg.profile,
                    x_cells: cfg.x_cells,
                    d_cells: cfg.d_cells,
                    estimator: cfg.estimator,
                    alignment: cfg.alignment,
                    population: cfg.population,
                    folds: cfg.folds,
                    sweep: cfg.sweep.name().to_string(),
                    sweep_value: cfg.abscissa(i),
                    n,
                    eps_gamma: eps.0,
                    eps_alpha: eps.1,
                    pairs,
                    seed: cfg.seed,
                    replication: r,
                    derived_seed,
                    point,
                    oracle,
                    abs_error: point.map(|v| (v - oracle).abs()),
                    failure,
                }
            })
            .collect()
    });
    let failures = records.iter().filter(|r| r.failure.is_some()).count();
    if failures == records.len() {
        return Err(Error::Precondition(format!(
            "every replication failed; first failure: {}",
            records[0].failure.as_deref().unwrap_or("")
        )));
    }
    let fit = fit_slope(&records)?;
    Ok(ScanResult { records, fit, failures })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            "svg" => Ok(OutputFormat::Svg),
            _ => Err(Error::InvalidSpec(format!("unknown format `{s}`"))),
        }
    }
}

pub fn records_to_csv(records: &[ResultRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<csv>", std::io::Error::other(e.to_string())))
}

pub fn records_from_csv(bytes: &[u8]) -> Result<Vec<ResultRecord>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Log-log scatter of the absolute errors, one path through the medians of
/// each `(estimator, alignment)` series, and the fitted line.
pub fn records_to_svg(records: &[ResultRecord], fit: Option<&SlopeFit>) -> Result<String> {
    use std::fmt::Write;
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.abs_error.map(|e| (r.sweep_value, e)))
        .filter(|(x, e)| *x > 0.0 && *e > 0.0)
        .map(|(x, e)| (x.log10(), e.log10()))
        .collect();
    if pts.is_empty() {
        return Err(Error::Precondition("nothing positive to plot on log axes".into()));
    }
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let ((x0, x1), (y0, y1)) = (span(|p| p.0), span(|p| p.1));
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let sweep = records.first().map_or("x", |r| r.sweep.as_str());
    let _ = writeln!(
        s,
        r#"<text class="x-label" x="{}" y="{}" text-anchor="middle">log10 {sweep}</text>"#,
        w / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text class="y-label" x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">log10 |error|</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (x, y) in &pts {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill-opacity="0.4"/>"#,
            sx(*x),
            sy(*y)
        );
    }
    let mut series: Vec<(EstimatorKind, Alignment)> = Vec::new();
    for r in records {
        if !series.contains(&(r.estimator, r.alignment)) {
            series.push((r.estimator, r.alignment));
        }
    }
    for (est, al) in series {
        let subset: Vec<ResultRecord> = records
            .iter()
            .filter(|r| r.estimator == est && r.alignment == al)
            .cloned()
            .collect();
        let medians: Vec<(f64, f64)> = fit_slope(&subset)
            .map(|f| f.points)
            .unwrap_or_default()
            .into_iter()
            .filter(|(x, m, _)| *x > 0.0 && *m > 0.0)
            .map(|(x, m, _)| (x.log10(), m.log10()))
            .collect();
        let d: Vec<String> = medians
            .iter()
            .enumerate()
            .map(|(i, (x, y))| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, sx(*x), sy(*y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<path class="series" data-series="{est}/{al}" d="{}" fill="none" stroke="steelblue"/>"#,
            d.join(" ")
        );
    }
    if let Some(f) = fit {
        // the fit is in natural logs; the same slope holds in base 10
        let at = |x: f64| (f.intercept + f.slope * x * std::f64::consts::LN_10) / std::f64::consts::LN_10;
        let _ = writeln!(
            s,
            r#"<line class="fit" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="firebrick" stroke-dasharray="4 3"/>"#,
            sx(x0),
            sy(at(x0)),
            sx(x1),
            sy(at(x1))
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">slope {:.3}</text>"#,
            w - pad,
            pad - 10.0,
            f.slope
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `records.{csv,json,svg}` into `dir` and returns the path.
pub fn emit(records: &[ResultRecord], fit: Option<&SlopeFit>, format: OutputFormat, dir: &Path) -> Result<PathBuf> {
    if records.is_empty() {
        return Err(Error::Precondition("no records to write".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (name, bytes) = match format {
        OutputFormat::Csv => ("records.csv", records_to_csv(records)?),
        OutputFormat::Json => ("records.json", serde_json::to_vec_pretty(records)?),
        OutputFormat::Svg => ("records.svg", records_to_svg(records, fit)?.into_bytes()),
    };
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eps_scan(estimator: EstimatorKind, population: bool) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(
            EstimandKind::Ate,
            Sweep::EpsSweep(vec![(0.01, 0.01), (0.02, 0.02), (0.04, 0.04), (0.08, 0.08)]),
        );
        c.x_cells = 32;
        c.estimator = estimator;
        c.population = population;
        c
    }

    #[test]
    fn population_dml_bias_is_quadratic() {
        let r = run_rate_scan(&eps_scan(EstimatorKind::Dml, true)).unwrap();
        assert!((r.fit.slope - 2.0).abs() < 1e-9, "{}", r.fit.slope);
        assert_eq!(r.records.len(), 4 * MIN_REPLICATIONS);
        assert_eq!(r.failures, 0);
    }

    #[test]
    fn population_plugin_bias_is_linear() {
        let r = run_rate_scan(&eps_scan(EstimatorKind::Plugin, true)).unwrap();
        assert!((r.fit.slope - 1.0).abs() < 1e-9, "{}", r.fit.slope);
    }

    #[test]
    fn population_dr_bias_is_near_quadratic() {
        let r = run_rate_scan(&eps_scan(EstimatorKind::Dr, true)).unwrap();
        assert!((r.fit.slope - 2.0).abs() < 0.1, "{}", r.fit.slope);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = eps_scan(EstimatorKind::Dml, true);
        c.replications = 4;
        assert!(matches!(run_rate_scan(&c), Err(Error::Precondition(_))));
        let mut c = eps_scan(EstimatorKind::Dr, true);
        c.kind = EstimandKind::Wad;
        assert!(c.validate().is_err());
        let c = ExperimentConfig::new(EstimandKind::Ate, Sweep::NSweep(vec![100, 100]));
        assert!(c.validate().is_err());
    }

    #[test]
    fn identical_configs_give_identical_bytes() {
        let mut c = ExperimentConfig::new(EstimandKind::Ate, Sweep::NSweep(vec![200, 800]));
        c.x_cells = 16;
        c.estimator = EstimatorKind::Dr;
        c.seed = 42;
        let a = records_to_csv(&run_rate_scan(&c).unwrap().records).unwrap();
        let b = records_to_csv(&run_rate_scan(&c).unwrap().records).unwrap();
        assert_eq!(a, b);
        let back = records_from_csv(&a).unwrap();
        assert_eq!(records_to_csv(&back).unwrap(), a);
        assert_eq!(back, run_rate_scan(&c).unwrap().records);
    }

    #[test]
    fn derived_seeds_follow_replications() {
        let mut c = ExperimentConfig::new(EstimandKind::Ds, Sweep::NSweep(vec![100, 400]));
        c.x_cells = 16;
        c.seed = 7;
        let r = run_rate_scan(&c).unwrap();
        for rec in &r.records {
            assert_eq!(rec.derived_seed, 7 + rec.replication as u64);
        }
        // a record can be recomputed alone
        let rec = &r.records[MIN_REPLICATIONS + 3];
        let (spec, p) = c.anchor().unwrap();
        let (g, a) = true_nuisances(&p, &spec).unwrap();
        let data = sample(&p, rec.n, rec.derived_seed).unwrap();
        assert_eq!(rec.point, Some(dml_estimate(&data, &g, &a, &spec, c.folds).unwrap()));
    }

    #[test]
    fn replication_order_does_not_move_the_fit() {
        let mut c = ExperimentConfig::new(EstimandKind::Ate, Sweep::NSweep(vec![100, 400, 1600]));
        c.x_cells = 16;
        let r = run_rate_scan(&c).unwrap();
        let mut shuffled = r.records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let f = fit_slope(&shuffled).unwrap();
        assert!((f.slope - r.fit.slope).abs() <= 1e-12);
        assert!(r.fit.slope_se.is_some());
    }

    #[test]
    fn pair_sweep_records_hellinger() {
        let mut c = ExperimentConfig::new(EstimandKind::Ate, Sweep::MSweep(vec![2, 4, 8]));
        c.x_cells = 12;
        c.profile = Profile::Constant;
        c.n = 2;
        c.eps_gamma = 0.2;
        c.eps_alpha = 0.2;
        let r = run_rate_scan(&c).unwrap();
        let med: Vec<f64> = r.fit.points.iter().map(|p| p.1).collect();
        assert!(med[0] >= med[1] && med[1] >= med[2], "{med:?}");
    }

    #[test]
    fn emit_formats() {
        let dir = std::env::temp_dir().join(format!("debias-lab-emit-{}", std::process::id()));
        assert!(matches!(
            emit(&[], None, OutputFormat::Csv, &dir),
            Err(Error::Precondition(_))
        ));
        let r = run_rate_scan(&eps_scan(EstimatorKind::Plugin, true)).unwrap();
        let csv = emit(&r.records, Some(&r.fit), OutputFormat::Csv, &dir).unwrap();
        assert_eq!(records_from_csv(&fs::read(&csv).unwrap()).unwrap(), r.records);
        let json = emit(&r.records, Some(&r.fit), OutputFormat::Json, &dir).unwrap();
        let back: Vec<ResultRecord> = serde_json::from_slice(&fs::read(json).unwrap()).unwrap();
        assert_eq!(back, r.records);
        let svg = fs::read_to_string(emit(&r.records, Some(&r.fit), OutputFormat::Svg, &dir).unwrap()).unwrap();
        assert_eq!(svg.matches("<path").count(), 1);
        assert!(svg.contains("log10 eps") && svg.contains("log10 |error|"));
        fs::remove_dir_all(dir).unwrap();
    }
}
