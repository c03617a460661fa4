//! Command-line flags, the JSON run configuration, and their merge.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use nlsdof::sim::{paper_b10, Sigma2Mode, SimConfig, WeightMode};
use nlsdof::solver::SolverConfig;
use nlsdof::Execution;
use serde::Deserialize;

pub const DEFAULT_SEED: u64 = 20_240_601;
pub const DEFAULT_EXAMPLE_REPS: usize = 2_000_000;

#[derive(Debug, Parser)]
#[command(
    name = "nlsdof",
    version,
    about = "Degrees of freedom and risk estimation for l1-constrained nonlinear least squares"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed for simulated data and Monte Carlo draws.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for output files (default: current directory).
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Noise variance; estimated from the unpenalized fit when absent.
    #[arg(long, global = true)]
    pub sigma2: Option<f64>,
    /// Penalty weights: all ones, or 1/|B̂| from the unpenalized fit.
    #[arg(long, global = true, value_enum)]
    pub weights: Option<WeightArg>,
    /// Number of λ values on the path grid.
    #[arg(long, global = true)]
    pub lambda_grid: Option<usize>,
    /// Simulation replications, or Monte Carlo draws for `examples`.
    #[arg(long, global = true)]
    pub replications: Option<usize>,
    /// Use the d = 10, m = 15, R = 1000 simulation design.
    #[arg(long, global = true)]
    pub paper_scale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum WeightArg {
    Unit,
    Adaptive,
}

impl From<WeightArg> for WeightMode {
    fn from(w: WeightArg) -> Self {
        match w {
            WeightArg::Unit => WeightMode::Unit,
            WeightArg::Adaptive => WeightMode::Adaptive,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit at a single λ or constraint level s and write fit.json.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Penalty level.
        #[arg(long, conflicts_with = "s")]
        lambda: Option<f64>,
        /// Constraint level on the weighted ℓ1 norm.
        #[arg(long)]
        s: Option<f64>,
    },
    /// Solve along a λ grid and write path.csv.
    Path {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Divergence and risk estimates for a fit produced by `fit`.
    Df {
        #[command(flatten)]
        data: DataArgs,
        /// fit.json written by `fit`.
        #[arg(long, value_name = "FILE")]
        fit: Option<PathBuf>,
    },
    /// Run the simulation study and write its CSV tables.
    Simulate,
    /// Forward stepwise search over the sparsity pattern; writes search.csv.
    Search {
        #[command(flatten)]
        data: DataArgs,
        /// Stop once this many parameters are nonzero.
        #[arg(long)]
        max_nonzero: Option<usize>,
    },
    /// Monte Carlo checks of the closed-form projection examples.
    Examples,
}

#[derive(Debug, Args, Default, Clone)]
pub struct DataArgs {
    /// Observations: a d×m matrix CSV (ODE model) or an n×1 CSV (linear model).
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Initial conditions, d×m, for the ODE model.
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    /// Design matrix, n×p, selecting the linear model.
    #[arg(long, value_name = "FILE")]
    pub design: Option<PathBuf>,
    /// Sampling time of the ODE model.
    #[arg(long)]
    pub t: Option<f64>,
    /// Built-in data set (`paper_B10`).
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub sigma2: Option<f64>,
    pub weights: Option<WeightMode>,
    pub lambda_grid: Option<usize>,
    pub lambda_ratio: Option<f64>,
    pub replications: Option<usize>,
    pub paper_scale: Option<bool>,
    pub data: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub design: Option<PathBuf>,
    pub t: Option<f64>,
    pub dataset: Option<String>,
    pub lambda: Option<f64>,
    pub s: Option<f64>,
    pub fit: Option<PathBuf>,
    pub max_nonzero: Option<usize>,
    pub simulation: Option<SimSection>,
    pub solver: Option<SolverSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub d: Option<usize>,
    pub m: Option<usize>,
    pub t: Option<f64>,
    pub init_scale: Option<f64>,
    /// Rows of the true system matrix.
    pub b_true: Option<Vec<Vec<f64>>>,
    pub sigma2_mode: Option<Sigma2Mode>,
    pub s_grid_points: Option<usize>,
    pub s_grid: Option<Vec<f64>>,
    pub stepwise_max_nonzero: Option<usize>,
    pub execution: Option<Execution>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub max_sweeps: Option<usize>,
    pub tol_rel: Option<f64>,
    pub kkt_tol: Option<f64>,
    pub armijo_c: Option<f64>,
    pub armijo_shrink: Option<f64>,
    pub max_backtracks: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid configuration {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data,
            &mut cfg.init,
            &mut cfg.design,
            &mut cfg.fit,
            &mut cfg.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Where the observations come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Ode {
        data: PathBuf,
        init: PathBuf,
        t: f64,
    },
    Linear {
        data: PathBuf,
        design: PathBuf,
    },
    PaperB10,
}

/// Fully resolved settings shared by all subcommands.
#[derive(Debug)]
pub struct Settings {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    pub sigma2: Option<f64>,
    pub weights: WeightMode,
    pub lambda_grid: usize,
    pub lambda_ratio: f64,
    pub replications: Option<usize>,
    pub paper_scale: bool,
    pub solver: SolverConfig,
    pub data: Option<DataSource>,
    pub lambda: Option<f64>,
    pub s: Option<f64>,
    pub fit: Option<PathBuf>,
    pub max_nonzero: Option<usize>,
    pub sim: SimSection,
}

fn positive(v: f64, what: &str) -> Result<f64> {
    if !(v > 0.0 && v.is_finite()) {
        bail!("{what} must be positive and finite, got {v}");
    }
    Ok(v)
}

impl Settings {
    pub fn resolve(common: &CommonArgs, command: &Command) -> Result<Self> {
        let cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let empty = DataArgs::default();
        let (data_args, lambda, s, fit, max_nonzero) = match command {
            Command::Fit { data, lambda, s } => (data, *lambda, *s, None, None),
            Command::Path { data } => (data, None, None, None, None),
            Command::Df { data, fit } => (data, None, None, fit.clone(), None),
            Command::Search { data, max_nonzero } => (data, None, None, None, *max_nonzero),
            Command::Simulate | Command::Examples => (&empty, None, None, None, None),
        };

        let mut solver = SolverConfig::default();
        if let Some(sec) = &cfg.solver {
            solver.max_sweeps = sec.max_sweeps.unwrap_or(solver.max_sweeps);
            solver.tol_rel = sec.tol_rel.unwrap_or(solver.tol_rel);
            solver.kkt_tol = sec.kkt_tol.unwrap_or(solver.kkt_tol);
            solver.armijo_c = sec.armijo_c.unwrap_or(solver.armijo_c);
            solver.armijo_shrink = sec.armijo_shrink.unwrap_or(solver.armijo_shrink);
            solver.max_backtracks = sec.max_backtracks.unwrap_or(solver.max_backtracks);
        }
        solver.validate()?;

        let data_path = data_args.data.clone().or(cfg.data);
        let init = data_args.init.clone().or(cfg.init);
        let design = data_args.design.clone().or(cfg.design);
        let dataset = data_args.dataset.clone().or(cfg.dataset);
        let t = data_args.t.or(cfg.t);
        let data = match (dataset, data_path, init, design) {
            (Some(name), None, None, None) => {
                if name != "paper_B10" {
                    bail!("unknown dataset {name:?}; the built-in data set is \"paper_B10\"");
                }
                Some(DataSource::PaperB10)
            }
            (Some(_), ..) => bail!("--dataset cannot be combined with data files"),
            (None, Some(data), Some(init), None) => Some(DataSource::Ode {
                data,
                init,
                t: positive(t.unwrap_or(1.0), "t")?,
            }),
            (None, Some(data), None, Some(design)) => Some(DataSource::Linear { data, design }),
            (None, None, None, None) => None,
            (None, Some(_), None, None) => {
                bail!("--data needs either --init (ODE model) or --design (linear model)")
            }
            (None, _, Some(_), Some(_)) => bail!("--init and --design are mutually exclusive"),
            (None, None, ..) => bail!("--data is required together with --init or --design"),
        };

        let lambda = lambda.or(cfg.lambda);
        let s = s.or(cfg.s);
        if let Some(l) = lambda {
            if !(l >= 0.0 && l.is_finite()) {
                bail!("lambda must be non-negative and finite, got {l}");
            }
        }
        if let Some(v) = s {
            if !(v >= 0.0 && v.is_finite()) {
                bail!("s must be non-negative and finite, got {v}");
            }
        }
        let sigma2 = match common.sigma2.or(cfg.sigma2) {
            Some(v) => Some(positive(v, "sigma2")?),
            None => None,
        };
        let lambda_grid = common.lambda_grid.or(cfg.lambda_grid).unwrap_or(40);
        if lambda_grid == 0 {
            bail!("lambda grid must hold at least one value");
        }
        let lambda_ratio = cfg.lambda_ratio.unwrap_or(1e-3);
        if !(lambda_ratio > 0.0 && lambda_ratio < 1.0) {
            bail!("lambda_ratio must lie in (0, 1)");
        }
        let threads = common.threads.or(cfg.threads);
        if threads == Some(0) {
            bail!("threads must be positive");
        }

        Ok(Self {
            seed: common.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED),
            threads,
            out_dir: common
                .out_dir
                .clone()
                .or(cfg.out_dir)
                .unwrap_or_else(|| PathBuf::from(".")),
            sigma2,
            weights: common
                .weights
                .map(WeightMode::from)
                .or(cfg.weights)
                .unwrap_or(WeightMode::Unit),
            lambda_grid,
            lambda_ratio,
            replications: common.replications.or(cfg.replications),
            paper_scale: common.paper_scale || cfg.paper_scale.unwrap_or(false),
            solver,
            data,
            lambda,
            s,
            fit: fit.or(cfg.fit),
            max_nonzero: max_nonzero.or(cfg.max_nonzero),
            sim: cfg.simulation.unwrap_or_default(),
        })
    }

    /// The simulation design: desk scale unless `paper_scale`, with any
    /// overrides applied.
    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut c = if self.paper_scale {
            SimConfig::paper_scale()
        } else {
            SimConfig::desk()
        };
        let sec = &self.sim;
        match (&sec.b_true, sec.d) {
            (Some(rows), d) => {
                let n = rows.len();
                if n == 0 || rows.iter().any(|r| r.len() != n) {
                    bail!("b_true must be a non-empty square matrix given as rows");
                }
                if d.is_some_and(|d| d != n) {
                    bail!("d = {} does not match b_true ({n}×{n})", d.unwrap_or(0));
                }
                c.b_true = DMatrix::from_fn(n, n, |r, k| rows[r][k]);
                c.d = n;
            }
            (None, Some(d)) => {
                if d == 0 || d > 10 {
                    bail!("without b_true, d must lie in 1..=10 (leading block of the reference matrix)");
                }
                c.b_true = paper_b10().view((0, 0), (d, d)).into_owned();
                c.d = d;
            }
            (None, None) => {}
        }
        if let Some(m) = sec.m {
            c.m = m;
        }
        if let Some(t) = sec.t {
            c.t = t;
        }
        if let Some(v) = sec.init_scale {
            c.init_scale = v;
        }
        if let Some(v) = self.sigma2 {
            c.sigma2 = v;
        }
        if let Some(v) = sec.sigma2_mode {
            c.sigma2_mode = v;
        }
        if let Some(r) = self.replications {
            c.replications = r;
        }
        c.seed = self.seed;
        c.lambda_grid_size = self.lambda_grid;
        c.lambda_ratio = self.lambda_ratio;
        c.weight_mode = self.weights;
        match (&sec.s_grid, sec.s_grid_points) {
            (Some(_), Some(_)) => bail!("give either s_grid or s_grid_points, not both"),
            (Some(g), None) => c.s_grid = g.clone(),
            (None, Some(k)) => c.reset_s_grid(k),
            (None, None) => c.reset_s_grid(c.s_grid.len()),
        }
        c.stepwise_max_nonzero = sec.stepwise_max_nonzero;
        c.solver = self.solver.clone();
        if let Some(e) = sec.execution {
            c.execution = e;
        }
        c.validate()?;
        Ok(c)
    }
}
