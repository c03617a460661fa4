use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use nalgebra::{DMatrix, DVector};
use nlsdof::dof::{div_l1_constrained, div_unconstrained, fit_divergence};
use nlsdof::model::{
    beta_to_matrix, matrix_to_vec, IsochronalOdeModel, LinearModel, Parametrization,
};
use nlsdof::modelsearch::{diagonal_pattern, forward_stepwise, search_df};
use nlsdof::sim::{
    self, estimate_sigma2, format_real, generate_replication, mle_fit, SimConfig, WeightMode,
};
use nlsdof::solver::{
    coordinate_descent, default_lambda_grid, kkt_parts, lambda_max, lambda_path,
    local_least_squares, projected_positive_definite, solve_constrained, FitResult, PenaltyWeights,
};
use nlsdof::Execution;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, Settings};
use crate::data::{read_matrix, write_matrix};
use crate::failure::{Failure, EXIT_INPUT, EXIT_IO};

type CmdResult = Result<(), Failure>;

/// Observations together with the model that explains them.
enum Problem {
    Ode {
        model: IsochronalOdeModel,
        x: DMatrix<f64>,
        obs: DMatrix<f64>,
        y: DVector<f64>,
        /// Noise-free mean and noise variance of simulated data.
        truth: Option<(DVector<f64>, f64)>,
    },
    Linear {
        model: LinearModel,
        y: DVector<f64>,
    },
}

impl Problem {
    fn load(st: &Settings) -> Result<Self, Failure> {
        let source = st.data.as_ref().ok_or_else(|| {
            Failure::input("no data: pass --data with --init or --design, or --dataset paper_B10")
        })?;
        match source {
            DataSource::Ode { data, init, t } => {
                let obs = read_matrix(data)?;
                let x = read_matrix(init)?;
                if obs.shape() != x.shape() {
                    return Err(Failure::input(format!(
                        "observations are {}×{} but initial conditions are {}×{}",
                        obs.nrows(),
                        obs.ncols(),
                        x.nrows(),
                        x.ncols()
                    )));
                }
                let model = IsochronalOdeModel::new(*t, x.clone())?.with_data(&obs)?;
                Ok(Problem::Ode {
                    model,
                    x,
                    y: matrix_to_vec(&obs),
                    obs,
                    truth: None,
                })
            }
            DataSource::Linear { data, design } => {
                let y = read_matrix(data)?;
                let design = read_matrix(design)?;
                if y.ncols() != 1 {
                    return Err(Failure::input(
                        "linear-model observations must be a single column",
                    ));
                }
                if y.nrows() != design.nrows() {
                    return Err(Failure::input(format!(
                        "{} observations but the design has {} rows",
                        y.nrows(),
                        design.nrows()
                    )));
                }
                Ok(Problem::Linear {
                    model: LinearModel::new(design)?,
                    y: y.column(0).into_owned(),
                })
            }
            DataSource::PaperB10 => {
                let mut config = SimConfig::paper_scale();
                config.seed = st.seed;
                if let Some(v) = st.sigma2 {
                    config.sigma2 = v;
                }
                let rep = generate_replication(&config, 0)?;
                let model = IsochronalOdeModel::new(config.t, rep.x.clone())?.with_data(&rep.y)?;
                Ok(Problem::Ode {
                    model,
                    y: matrix_to_vec(&rep.y),
                    truth: Some((matrix_to_vec(&rep.mean), config.sigma2)),
                    x: rep.x,
                    obs: rep.y,
                })
            }
        }
    }

    fn model(&self) -> &dyn Parametrization {
        match self {
            Problem::Ode { model, .. } => model,
            Problem::Linear { model, .. } => model,
        }
    }

    fn y(&self) -> &DVector<f64> {
        match self {
            Problem::Ode { y, .. } | Problem::Linear { y, .. } => y,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Problem::Ode { .. } => "ode",
            Problem::Linear { .. } => "linear",
        }
    }

    fn dim(&self) -> Option<usize> {
        match self {
            Problem::Ode { model, .. } => Some(model.dim()),
            Problem::Linear { .. } => None,
        }
    }

    fn truth(&self) -> Option<&DVector<f64>> {
        match self {
            Problem::Ode { truth, .. } => truth.as_ref().map(|t| &t.0),
            Problem::Linear { .. } => None,
        }
    }

    /// Unpenalized pilot fit: the matrix-logarithm MLE for the ODE model,
    /// least squares for the linear model.
    fn pilot(&self) -> Result<DVector<f64>, Failure> {
        match self {
            Problem::Ode { model, x, obs, .. } => {
                Ok(matrix_to_vec(&mle_fit(x, obs, model.time())?.b_hat))
            }
            Problem::Linear { model, y } => {
                Ok(local_least_squares(model, y, &DVector::zeros(model.n_params()), 100)?.beta)
            }
        }
    }

    fn weights(&self, mode: WeightMode) -> Result<PenaltyWeights, Failure> {
        match mode {
            WeightMode::Unit => Ok(PenaltyWeights::unit(self.model().n_params())),
            WeightMode::Adaptive => Ok(PenaltyWeights::adaptive(&self.pilot()?)?),
        }
    }

    /// Noise variance and where it came from.
    fn sigma2(&self, st: &Settings) -> Result<(f64, &'static str), Failure> {
        if let Some(v) = st.sigma2 {
            return Ok((v, "given"));
        }
        match self {
            Problem::Ode {
                truth: Some((_, s2)),
                ..
            } => Ok((*s2, "dataset")),
            Problem::Ode { model, y, .. } => {
                let b = beta_to_matrix(&self.pilot()?, model.dim())?;
                Ok((estimate_sigma2(model, y, &b)?, "estimated"))
            }
            Problem::Linear { model, y } => {
                let (n, p) = (model.n_obs(), model.n_params());
                if n <= p {
                    return Err(Failure::input(
                        "cannot estimate sigma2 with n <= p; pass --sigma2",
                    ));
                }
                let rss = (y - model.eval(&self.pilot()?)?).norm_squared();
                Ok((rss / (n - p) as f64, "estimated"))
            }
        }
    }
}

fn sure(rss: f64, n: usize, sigma2: f64, div: f64) -> f64 {
    rss - n as f64 * sigma2 + 2.0 * sigma2 * div
}

pub fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(|e| Failure::new(EXIT_IO, e))?;
    let path = dir.join(name);
    let file = File::create(&path)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(|e| Failure::new(EXIT_IO, e))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<String, Failure> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    let mut out = create(dir, name)?;
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(text)
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub model: String,
    pub n_obs: usize,
    pub n_params: usize,
    pub d: Option<usize>,
    pub lambda: f64,
    pub s: f64,
    /// Flattened column-major for the ODE model.
    pub beta: Vec<f64>,
    /// `B̂` by rows (ODE model only).
    pub beta_matrix: Option<Vec<Vec<f64>>>,
    pub active_set: Vec<usize>,
    pub n_active: usize,
    pub rss: f64,
    pub objective: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    pub sweeps_used: usize,
    pub weights: WeightMode,
    pub penalty_weights: Vec<f64>,
    pub sigma2: f64,
    pub sigma2_source: String,
    pub divergence: Option<f64>,
    pub divergence_error: Option<String>,
    pub risk_hat: Option<f64>,
    pub risk_tilde: f64,
    pub true_risk: Option<f64>,
}

fn matrix_rows(beta: &DVector<f64>, d: usize) -> Result<Vec<Vec<f64>>, Failure> {
    let b = beta_to_matrix(beta, d)?;
    Ok((0..d).map(|r| b.row(r).iter().copied().collect()).collect())
}

pub fn fit(st: &Settings) -> CmdResult {
    let prob = Problem::load(st)?;
    let (model, y) = (prob.model(), prob.y());
    let weights = prob.weights(st.weights)?;
    let zero = DVector::zeros(model.n_params());
    let fit = match (st.lambda, st.s) {
        (Some(l), None) => coordinate_descent(model, y, l, &weights, &zero, &st.solver)?,
        (None, Some(s)) => solve_constrained(model, y, s, &weights, &zero, None, &st.solver)?,
        _ => return Err(Failure::input("fit needs exactly one of --lambda or --s")),
    };
    let (sigma2, source) = prob.sigma2(st)?;
    let n = model.n_obs();
    let (divergence, divergence_error) = match fit_divergence(model, &fit, y, &weights, false) {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let true_risk = match prob.truth() {
        Some(xi) => Some((xi - model.eval(&fit.beta)?).norm_squared()),
        None => None,
    };
    let report = FitReport {
        model: prob.kind().into(),
        n_obs: n,
        n_params: model.n_params(),
        d: prob.dim(),
        lambda: fit.lambda,
        s: fit.s,
        beta: fit.beta.iter().copied().collect(),
        beta_matrix: prob.dim().map(|d| matrix_rows(&fit.beta, d)).transpose()?,
        n_active: fit.active_set.len(),
        active_set: fit.active_set.clone(),
        rss: fit.rss,
        objective: fit.objective,
        kkt_residual: fit.kkt_residual,
        converged: fit.converged,
        sweeps_used: fit.sweeps_used,
        weights: st.weights,
        penalty_weights: weights.as_vector().iter().copied().collect(),
        sigma2,
        sigma2_source: source.into(),
        risk_hat: divergence.map(|div| sure(fit.rss, n, sigma2, div)),
        divergence,
        divergence_error,
        risk_tilde: sure(fit.rss, n, sigma2, fit.active_set.len() as f64 - 1.0),
        true_risk,
    };
    let text = write_json(&st.out_dir, "fit.json", &report)?;
    print!("{text}");
    if let DataSource::PaperB10 = st.data.as_ref().expect("data was loaded") {
        if let Problem::Ode { x, obs, .. } = &prob {
            let mut out = create(&st.out_dir, "data_Y.csv")?;
            write_matrix(&mut out, obs)?;
            out.flush()?;
            let mut out = create(&st.out_dir, "data_x.csv")?;
            write_matrix(&mut out, x)?;
            out.flush()?;
        }
    }
    if !fit.converged {
        return Err(Failure::numerical(format!(
            "solver did not converge (KKT residual {:e} after {} sweeps)",
            fit.kkt_residual, fit.sweeps_used
        )));
    }
    Ok(())
}

pub fn path(st: &Settings) -> CmdResult {
    let prob = Problem::load(st)?;
    let (model, y) = (prob.model(), prob.y());
    let weights = prob.weights(st.weights)?;
    let (sigma2, _) = prob.sigma2(st)?;
    let n = model.n_obs();
    let lmax = lambda_max(model, y, &weights)?;
    let grid = default_lambda_grid(lmax, st.lambda_grid, st.lambda_ratio);
    let path = lambda_path(model, y, &weights, &grid, &st.solver)?;

    let mut out = create(&st.out_dir, "path.csv")?;
    let beta_cols: Vec<String> = (0..model.n_params()).map(|k| format!("beta_{k}")).collect();
    writeln!(
        out,
        "index,lambda,s,rss,div_thm4,risk_hat,risk_tilde,n_active,kkt_residual,converged,{}",
        beta_cols.join(",")
    )?;
    let mut nonconverged = 0;
    for (i, fit) in path.fits.iter().enumerate() {
        if !fit.converged {
            nonconverged += 1;
        }
        let div = fit_divergence(model, fit, y, &weights, false).unwrap_or(f64::NAN);
        let fields = [
            fit.lambda,
            fit.s,
            fit.rss,
            div,
            sure(fit.rss, n, sigma2, div),
            sure(fit.rss, n, sigma2, fit.active_set.len() as f64 - 1.0),
        ]
        .map(format_real);
        let betas: Vec<String> = fit.beta.iter().map(|v| format_real(*v)).collect();
        writeln!(
            out,
            "{i},{},{},{},{},{}",
            fields.join(","),
            fit.active_set.len(),
            format_real(fit.kkt_residual),
            fit.converged,
            betas.join(",")
        )?;
    }
    out.flush()?;
    println!(
        "wrote {} path points to {}",
        path.fits.len(),
        st.out_dir.join("path.csv").display()
    );
    if nonconverged > 0 {
        return Err(Failure::numerical(format!(
            "{nonconverged} path fits did not converge"
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DfReport {
    lambda: f64,
    s: f64,
    n_active: usize,
    active_set: Vec<usize>,
    rss: f64,
    kkt_residual: f64,
    second_order_ok: bool,
    sigma2: f64,
    /// Constrained-fit divergence.
    div_thm4: Option<f64>,
    /// `tr(J⁻¹G)` over all parameters (meaningful for unpenalized fits).
    div_thm3_full: Option<f64>,
    /// `tr(J⁻¹G)` restricted to the active set.
    div_thm3_active: Option<f64>,
    risk_hat_thm4: Option<f64>,
    risk_hat_thm3_full: Option<f64>,
    risk_tilde: f64,
}

fn restrict(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}

fn ok_or_warn(what: &str, r: nlsdof::Result<f64>) -> Option<f64> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{what} unavailable: {e}");
            None
        }
    }
}

pub fn df(st: &Settings) -> CmdResult {
    let path = st
        .fit
        .as_ref()
        .ok_or_else(|| Failure::input("df needs --fit FILE (the output of `fit`)"))?;
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(|e| Failure::new(EXIT_INPUT, e))?;
    let report: FitReport = serde_json::from_str(&text)
        .with_context(|| format!("invalid fit file {}", path.display()))
        .map_err(|e| Failure::new(EXIT_INPUT, e))?;
    let prob = Problem::load(st)?;
    let (model, y) = (prob.model(), prob.y());
    let p = model.n_params();
    if report.beta.len() != p || report.penalty_weights.len() != p {
        return Err(Failure::input(format!(
            "fit has {} parameters, the data imply {p}",
            report.beta.len()
        )));
    }
    let beta = DVector::from_vec(report.beta.clone());
    let weights = PenaltyWeights::new(DVector::from_vec(report.penalty_weights.clone()))?;
    let (sigma2, _) = prob.sigma2(st)?;
    let n = model.n_obs();
    let lambda = report.lambda;

    let resid = y - model.eval(&beta)?;
    let rss = resid.norm_squared();
    let grad = model.jacobian_t_times(&beta, &resid)?;
    let (kkt_residual, _) = kkt_parts(&grad, &beta, lambda, &weights, None);
    let active: Vec<usize> = (0..p).filter(|&k| beta[k] != 0.0).collect();
    let w = weights.as_vector();
    let gamma = DVector::from_fn(p, |k, _| {
        if beta[k] != 0.0 {
            w[k] * beta[k].signum()
        } else {
            0.0
        }
    });
    let g = model.g_matrix(&beta)?;
    let j = model.j_matrix(&beta, y)?;
    let strict = (0..p)
        .filter(|&k| beta[k] == 0.0)
        .all(|k| grad[k].abs() < lambda * w[k]);
    let second_order_ok =
        lambda > 0.0 && strict && projected_positive_definite(&j, &gamma, &active);

    let div_thm4 = if active.is_empty() {
        Some(0.0)
    } else {
        ok_or_warn(
            "constrained divergence",
            div_l1_constrained(&g, &j, &gamma, &active),
        )
    };
    let div_thm3_full = ok_or_warn("unconstrained divergence", div_unconstrained(&g, &j));
    let div_thm3_active = if active.is_empty() {
        Some(0.0)
    } else {
        ok_or_warn(
            "active-set divergence",
            div_unconstrained(&restrict(&g, &active), &restrict(&j, &active)),
        )
    };
    let out = DfReport {
        lambda,
        s: weights.l1(&beta),
        n_active: active.len(),
        rss,
        kkt_residual,
        second_order_ok,
        sigma2,
        risk_hat_thm4: div_thm4.map(|d| sure(rss, n, sigma2, d)),
        risk_hat_thm3_full: div_thm3_full.map(|d| sure(rss, n, sigma2, d)),
        risk_tilde: sure(rss, n, sigma2, active.len() as f64 - 1.0),
        div_thm4: div_thm4.and_then(finite),
        div_thm3_full: div_thm3_full.and_then(finite),
        div_thm3_active: div_thm3_active.and_then(finite),
        active_set: active,
    };
    print!("{}", write_json(&st.out_dir, "df.json", &out)?);
    Ok(())
}

pub fn search(st: &Settings) -> CmdResult {
    let prob = Problem::load(st)?;
    let (model, y) = (prob.model(), prob.y());
    let (sigma2, _) = prob.sigma2(st)?;
    let p = model.n_params();
    let n = model.n_obs();
    let initial = prob.dim().map(diagonal_pattern).unwrap_or_default();
    let max_nonzero = st.max_nonzero.unwrap_or(p);
    let states = forward_stepwise(
        model,
        y,
        &initial,
        max_nonzero,
        &st.solver,
        Execution::Parallel,
    )?;

    let mut out = create(&st.out_dir, "search.csv")?;
    writeln!(
        out,
        "step,added,n_nonzero,rss,df_thm3,df_count,risk_hat_thm3,risk_hat_count,converged,fell_back,pattern"
    )?;
    for (step, state) in states.iter().enumerate() {
        let df = search_df(state, model, y)?;
        let added = state
            .step_history
            .last()
            .map_or(String::new(), |(k, _)| k.to_string());
        let pattern: Vec<String> = state.pattern.iter().map(usize::to_string).collect();
        let fit: &FitResult = &state.fit;
        writeln!(
            out,
            "{step},{added},{},{},{},{},{},{},{},{},{}",
            state.size(),
            format_real(fit.rss),
            format_real(df.df_thm3),
            format_real(df.df_count),
            format_real(sure(fit.rss, n, sigma2, df.df_thm3)),
            format_real(sure(fit.rss, n, sigma2, df.df_count)),
            fit.converged,
            df.fell_back,
            pattern.join(";")
        )?;
    }
    out.flush()?;
    println!(
        "wrote {} search states to {}",
        states.len(),
        st.out_dir.join("search.csv").display()
    );
    Ok(())
}

pub fn simulate(st: &Settings) -> CmdResult {
    let config = st.sim_config()?;
    log::info!(
        "simulating d = {}, m = {}, R = {}, seed = {}",
        config.d,
        config.m,
        config.replications,
        config.seed
    );
    let summary = sim::run_study(&config)?;
    let writers: [(
        &str,
        fn(&mut BufWriter<File>, &sim::SimSummary) -> std::io::Result<()>,
    ); 4] = [
        ("summary.csv", |w, s| sim::write_summary_csv(w, s)),
        ("stepwise.csv", |w, s| sim::write_stepwise_csv(w, s)),
        ("threshold.csv", |w, s| sim::write_threshold_csv(w, s)),
        ("scalars.csv", |w, s| sim::write_scalars_csv(w, s)),
    ];
    let mut out = create(&st.out_dir, "path.csv")?;
    sim::write_path_csv(&mut out, &summary.outcomes)?;
    out.flush()?;
    for (name, write) in writers {
        let mut out = create(&st.out_dir, name)?;
        write(&mut out, &summary)?;
        out.flush()?;
    }
    println!(
        "completed {} of {} replications ({} failed); tables in {}",
        summary.completed,
        config.replications,
        summary.failed,
        st.out_dir.display()
    );
    Ok(())
}
