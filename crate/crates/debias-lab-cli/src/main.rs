use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use debias_lab::adversary::ate_partition;
use debias_lab::anchors::{AnchorSpec, Profile};
use debias_lab::bounds::{chunk_bound, fano_risk, optimal_test_error, product_mixture_hellinger, TestingInstance};
use debias_lab::estimators::{Alignment, EstimateReport};
use debias_lab::harness::{
    emit, estimate_once, init_global_pool, run_rate_scan, EstimatorKind, ExperimentConfig, OutputFormat, Sweep,
};
use debias_lab::models::EstimandKind;
use debias_lab::partition::iterated_partition;
use debias_lab::{Error, Result};

mod report;

#[derive(Parser)]
#[command(
    name = "debias-lab",
    version,
    about = "Rate experiments for debiased estimators of smooth functionals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a rate experiment from a JSON config and write its records.
    Scan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: OutputFormat,
    },
    /// Build the sign-flip family for an anchor and check its properties.
    Adversary {
        #[command(flatten)]
        anchor: AnchorArgs,
        #[arg(long, default_value_t = 0.02)]
        eps_gamma: f64,
        #[arg(long, default_value_t = 0.02)]
        eps_alpha: f64,
        #[arg(long, default_value_t = 4)]
        pairs: usize,
    },
    /// Hellinger distance between n draws from the anchor and from the family mixture.
    Hellinger {
        #[command(flatten)]
        anchor: AnchorArgs,
        #[arg(long)]
        n: usize,
        #[arg(long = "M", alias = "pairs")]
        pairs: usize,
        #[arg(long)]
        eps_gamma: f64,
        #[arg(long)]
        eps_alpha: f64,
        /// Constant in the chunk bound.
        #[arg(long, default_value_t = 1.0)]
        constant: f64,
    },
    /// One corrupted-nuisance estimate; appends a row to a CSV log.
    Estimate {
        #[command(flatten)]
        anchor: AnchorArgs,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        eps_gamma: f64,
        #[arg(long, default_value_t = 0.0)]
        eps_alpha: f64,
        #[arg(long, default_value = "adversarial")]
        alignment: Alignment,
        #[arg(long, default_value = "dml")]
        estimator: EstimatorKind,
        #[arg(long, default_value_t = debias_lab::estimators::DEFAULT_FOLDS)]
        folds: usize,
        #[arg(long)]
        population: bool,
        #[arg(long, default_value = "estimates.csv")]
        csv: PathBuf,
    },
    /// Balanced partition of covariate cells into sign-flip pairs.
    Partition {
        #[arg(long)]
        pairs: usize,
        /// Number of cells on [0, 1]; ignored with --kind.
        #[arg(long, default_value_t = 64)]
        cells: usize,
        /// Weights to balance, from one, x, x2, sin, cos.
        #[arg(long, value_delimiter = ',', default_value = "one,x")]
        weights: Vec<String>,
        /// Take the weights from this kind's anchor instead.
        #[arg(long)]
        kind: Option<EstimandKind>,
        #[arg(long, default_value_t = 64)]
        x_cells: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Constant,
    Smooth,
}

#[derive(Args)]
struct AnchorArgs {
    #[arg(long)]
    kind: EstimandKind,
    #[arg(long, default_value_t = 12)]
    x_cells: usize,
    #[arg(long, default_value_t = 16)]
    d_cells: usize,
    #[arg(long, value_enum, default_value = "smooth")]
    profile: ProfileArg,
}

impl AnchorArgs {
    fn spec(&self) -> AnchorSpec {
        AnchorSpec {
            kind: self.kind,
            x_cells: self.x_cells,
            d_cells: self.d_cells,
            profile: match self.profile {
                ProfileArg::Constant => Profile::Constant,
                ProfileArg::Smooth => Profile::Smooth,
            },
        }
    }
}

// A closed pipe on stdout is not an error worth reporting.
fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io_err(Path::new("<stdout>"))(e)),
        _ => Ok(()),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn scan(config: &Path, out: &Path, format: OutputFormat) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(io_err(config))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)?;
    let res = run_rate_scan(&cfg)?;
    let path = emit(&res.records, Some(&res.fit), format, out)?;
    print_json(&json!({
        "output": path,
        "records": res.records.len(),
        "failures": res.failures,
        "slope": res.fit.slope,
        "intercept": res.fit.intercept,
        "slope_se": res.fit.slope_se,
    }))
}

fn hellinger(anchor: &AnchorArgs, n: usize, pairs: usize, eg: f64, ea: f64, constant: f64) -> Result<()> {
    let (spec, p) = anchor.spec().build()?;
    let family = report::build_family(&spec, &p, eg, ea, pairs)?;
    let chunk = chunk_bound(&family, n, constant)?;
    let instance = TestingInstance::new(family, n)?;
    let h2 = product_mixture_hellinger(&instance)?;
    print_json(&json!({
        "kind": anchor.kind,
        "n": n,
        "pairs": pairs,
        "h2": h2,
        "b": chunk.b,
        "bound": chunk.bound,
        "fano_risk": fano_risk(h2)?,
        "optimal_test_error": optimal_test_error(&instance)?,
    }))
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    anchor: &AnchorArgs,
    n: usize,
    seed: u64,
    eps: (f64, f64),
    alignment: Alignment,
    estimator: EstimatorKind,
    folds: usize,
    population: bool,
    csv_path: &Path,
) -> Result<()> {
    let mut cfg = ExperimentConfig::new(anchor.kind, Sweep::NSweep(vec![n]));
    let a = anchor.spec();
    cfg.profile = a.profile;
    cfg.x_cells = a.x_cells;
    cfg.d_cells = a.d_cells;
    cfg.n = n;
    cfg.seed = seed;
    cfg.eps_gamma = eps.0;
    cfg.eps_alpha = eps.1;
    cfg.alignment = alignment;
    cfg.estimator = estimator;
    cfg.folds = folds;
    cfg.population = population;
    if n == 0 {
        return Err(Error::Precondition("need at least one observation".into()));
    }
    let (point, oracle) = estimate_once(&cfg, n, eps, seed)?;
    let report = EstimateReport::new(point, n, folds, seed);

    let fresh = std::fs::metadata(csv_path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(csv_path)
        .map_err(io_err(csv_path))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record([
            "kind",
            "n",
            "seed",
            "eps_gamma",
            "eps_alpha",
            "alignment",
            "point",
            "oracle",
            "abs_error",
        ])?;
    }
    w.write_record([
        anchor.kind.to_string(),
        n.to_string(),
        seed.to_string(),
        eps.0.to_string(),
        eps.1.to_string(),
        alignment.to_string(),
        point.to_string(),
        oracle.to_string(),
        (point - oracle).abs().to_string(),
    ])?;
    w.flush().map_err(io_err(csv_path))?;
    print_json(&report)
}

fn weight_fn(name: &str) -> Result<fn(f64) -> f64> {
    Ok(match name {
        "one" => |_| 1.0,
        "x" => |x| x,
        "x2" => |x| x * x,
        "sin" => |x| (std::f64::consts::TAU * x).sin(),
        "cos" => |x| (std::f64::consts::TAU * x).cos(),
        _ => return Err(Error::InvalidSpec(format!("unknown weight `{name}`"))),
    })
}

fn partition(pairs: usize, cells: usize, weights: &[String], kind: Option<EstimandKind>, x_cells: usize) -> Result<()> {
    let part = match kind {
        Some(EstimandKind::Ate) => {
            let mut a = AnchorSpec::new(EstimandKind::Ate);
            a.x_cells = x_cells;
            ate_partition(&a.build()?.1, pairs)?
        }
        Some(k) => {
            let mut a = AnchorSpec::new(k);
            a.x_cells = x_cells;
            let (spec, p) = a.build()?;
            report::build_family(&spec, &p, 0.0, 0.0, pairs)?.partition
        }
        None => {
            let fs = weights.iter().map(|w| weight_fn(w)).collect::<Result<Vec<_>>>()?;
            let rows: Vec<Vec<f64>> = fs
                .iter()
                .map(|f| (0..cells).map(|c| f((c as f64 + 0.5) / cells as f64)).collect())
                .collect();
            iterated_partition(&rows, pairs)?
        }
    };
    print_json(&json!({
        "max_relative_residual": part.max_relative_residual(),
        "unsplit": part.is_unsplit(),
        "partition": part,
    }))
}

fn run(cli: Cli) -> Result<()> {
    init_global_pool()?;
    match cli.command {
        Command::Scan { config, out, format } => scan(&config, &out, format),
        Command::Adversary {
            anchor,
            eps_gamma,
            eps_alpha,
            pairs,
        } => {
            let (spec, p) = anchor.spec().build()?;
            print_json(&report::adversary_report(&spec, &p, eps_gamma, eps_alpha, pairs)?)
        }
        Command::Hellinger {
            anchor,
            n,
            pairs,
            eps_gamma,
            eps_alpha,
            constant,
        } => hellinger(&anchor, n, pairs, eps_gamma, eps_alpha, constant),
        Command::Estimate {
            anchor,
            n,
            seed,
            eps_gamma,
            eps_alpha,
            alignment,
            estimator,
            folds,
            population,
            csv,
        } => estimate(
            &anchor,
            n,
            seed,
            (eps_gamma, eps_alpha),
            alignment,
            estimator,
            folds,
            population,
            &csv,
        ),
        Command::Partition {
            pairs,
            cells,
            weights,
            kind,
            x_cells,
        } => partition(pairs, cells, &weights, kind, x_cells),
    }
}

// 3 for searches that ran out of budget, 2 for everything else.
fn exit_code(e: &Error) -> u8 {
    if e.is_convergence() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_failures_exit_with_three() {
        let e = Error::NoConvergence {
            evaluations: 10,
            residual: 1.0,
        };
        assert_eq!(exit_code(&e), 3);
        assert_eq!(exit_code(&Error::Precondition("x".into())), 2);
        assert_eq!(exit_code(&Error::InvalidDirection), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
