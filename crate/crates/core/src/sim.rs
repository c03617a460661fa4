//! Simulation study for the sparse linear-ODE estimators.
//!
//! Each replication draws initial conditions and noisy observations at a
//! single time point, then evaluates the ℓ1 path (with its risk estimates),
//! the MLE, hard-thresholded MLEs and forward stepwise search against the
//! known truth. Replications run independently and are reduced in index
//! order.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::dof::{div_unconstrained, fit_divergence};
use crate::error::{Error, Result};
use crate::linalg::{expm, logm_principal};
use crate::model::{beta_to_matrix, matrix_to_vec, IsochronalOdeModel, Parametrization};
use crate::modelsearch::{diagonal_pattern, forward_stepwise, search_df};
use crate::oracle::Moments;
use crate::par::{map_indexed, Execution};
use crate::rng::{fill_normal, substream};
use crate::solver::{
    default_lambda_grid, lambda_max, lambda_path, solve_constrained, FitResult, PenaltyWeights,
    SolverConfig,
};

/// Largest tolerated fraction of failed replications.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

/// The 10×10 sparse system matrix of the reference study.
pub fn paper_b10() -> DMatrix<f64> {
    let first_row = [-1.0, -1.0, -0.9, -0.8, -0.7, -0.6, -0.4, -0.3, -0.2, -0.1];
    let first_col = [-1.0, 1.0, 0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1];
    let mut b = DMatrix::zeros(10, 10);
    for k in 0..10 {
        b[(0, k)] = first_row[k];
        b[(k, 0)] = first_col[k];
        b[(k, k)] = -1.0;
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Unit,
    /// `ω = 1/|B̂_MLE|`.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sigma2Mode {
    Known,
    /// MLE residuals with divisor `n − tr(J⁻¹G)`.
    Estimated,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub d: usize,
    pub m: usize,
    pub t: f64,
    pub sigma2: f64,
    pub b_true: DMatrix<f64>,
    pub init_scale: f64,
    pub replications: usize,
    pub seed: u64,
    pub lambda_grid_size: usize,
    /// `λ_min / λ_max` for the log-spaced grid.
    pub lambda_ratio: f64,
    pub weight_mode: WeightMode,
    pub sigma2_mode: Sigma2Mode,
    pub s_grid: Vec<f64>,
    /// Largest pattern size visited by stepwise search (`None` for `d²`).
    pub stepwise_max_nonzero: Option<usize>,
    pub solver: SolverConfig,
    pub execution: Execution,
}

impl SimConfig {
    /// d = 4, m = 6, R = 200 on the leading 4×4 block of the reference matrix.
    pub fn desk() -> Self {
        let b = paper_b10().view((0, 0), (4, 4)).into_owned();
        Self::for_truth(b, 6, 200)
    }

    /// The full d = 10, m = 15, R = 1000 design.
    pub fn paper_scale() -> Self {
        Self::for_truth(paper_b10(), 15, 1000)
    }

    fn for_truth(b_true: DMatrix<f64>, m: usize, replications: usize) -> Self {
        let d = b_true.nrows();
        let s_max = 1.2 * b_true.iter().map(|v| v.abs()).sum::<f64>();
        Self {
            d,
            m,
            t: 1.0,
            sigma2: 0.25,
            init_scale: 4.0,
            replications,
            seed: 20_240_601,
            lambda_grid_size: 40,
            lambda_ratio: 1e-3,
            weight_mode: WeightMode::Unit,
            sigma2_mode: Sigma2Mode::Known,
            s_grid: linspace(0.0, s_max, 60),
            stepwise_max_nonzero: None,
            solver: SolverConfig::default(),
            execution: Execution::default(),
            b_true,
        }
    }

    /// Resets the s grid to `points` values from 0 to `1.2 Σ|B_true|`.
    pub fn reset_s_grid(&mut self, points: usize) {
        let s_max = 1.2 * self.b_true.iter().map(|v| v.abs()).sum::<f64>();
        self.s_grid = linspace(0.0, s_max, points);
    }

    pub fn n_obs(&self) -> usize {
        self.d * self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 {
            return Err(Error::Config("d and m must be positive".into()));
        }
        if self.b_true.shape() != (self.d, self.d) {
            return Err(Error::Config(format!(
                "B_true is {:?}, expected {}×{}",
                self.b_true.shape(),
                self.d,
                self.d
            )));
        }
        if !(self.t > 0.0 && self.t.is_finite())
            || !(self.init_scale > 0.0 && self.init_scale.is_finite())
        {
            return Err(Error::Config("t and init_scale must be positive".into()));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Config("sigma2 must be non-negative".into()));
        }
        if self.replications == 0 || self.lambda_grid_size == 0 {
            return Err(Error::Config(
                "replications and lambda_grid_size must be positive".into(),
            ));
        }
        if !(self.lambda_ratio > 0.0 && self.lambda_ratio < 1.0) {
            return Err(Error::Config("lambda_ratio must lie in (0, 1)".into()));
        }
        if self.s_grid.is_empty()
            || self.s_grid.windows(2).any(|w| !(w[1] > w[0]))
            || self.s_grid[0] < 0.0
        {
            return Err(Error::Config(
                "s_grid must be non-empty, non-negative and increasing".into(),
            ));
        }
        if self
            .stepwise_max_nonzero
            .is_some_and(|k| k < self.d || k > self.d * self.d)
        {
            return Err(Error::Config(
                "stepwise_max_nonzero must lie in [d, d²]".into(),
            ));
        }
        if self.b_true.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("B_true".into()));
        }
        self.solver.validate()
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// One simulated data set.
#[derive(Debug, Clone)]
pub struct Replication {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// Noise-free mean `e^{tB}x`.
    pub mean: DMatrix<f64>,
}

/// Draws replication `rep`: columns of `x` from `N(0, init_scale² I)` and
/// `Y = e^{tB}x + N(0, σ² I)`.
pub fn generate_replication(config: &SimConfig, rep: usize) -> Result<Replication> {
    let (d, m) = (config.d, config.m);
    let mut rng = substream(config.seed, "sim-replication", rep as u64);
    let mut buf = vec![0.0; d * m];
    fill_normal(&mut rng, &mut buf);
    let x = DMatrix::from_column_slice(d, m, &buf) * config.init_scale;
    fill_normal(&mut rng, &mut buf);
    let noise = DMatrix::from_column_slice(d, m, &buf) * config.sigma2.sqrt();
    let mean = expm(&(&config.b_true * config.t))? * &x;
    Ok(Replication {
        y: &mean + noise,
        mean,
        x,
    })
}

#[derive(Debug, Clone)]
pub struct MleFit {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
}

/// `Â = Yxᵀ(xxᵀ)⁻¹` and `B̂ = log(Â)/t`.
pub fn mle_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, t: f64) -> Result<MleFit> {
    if x.shape() != y.shape() {
        return Err(Error::Dimension("x and Y shapes differ".into()));
    }
    if x.ncols() < x.nrows() {
        return Err(Error::Rank {
            context: "xxᵀ with m < d".into(),
            condition: f64::INFINITY,
        });
    }
    let xxt = x * x.transpose();
    let sv = xxt.singular_values();
    let cond = sv.max() / sv.min();
    if !(cond < 1e12) {
        return Err(Error::Rank {
            context: "xxᵀ".into(),
            condition: cond,
        });
    }
    let inv = xxt.try_inverse().ok_or_else(|| Error::Rank {
        context: "xxᵀ".into(),
        condition: cond,
    })?;
    let a_hat = y * x.transpose() * inv;
    let b_hat = logm_principal(&a_hat)? / t;
    Ok(MleFit { a_hat, b_hat })
}

/// `(B̂ with |B̂_kl| < level zeroed off the diagonal, number of nonzeros)`
/// for each level.
pub fn threshold_curve(b_hat: &DMatrix<f64>, levels: &[f64]) -> Result<Vec<(DMatrix<f64>, usize)>> {
    if levels.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config(
            "threshold levels must be sorted ascending".into(),
        ));
    }
    Ok(levels
        .iter()
        .map(|&level| {
            let b = DMatrix::from_fn(b_hat.nrows(), b_hat.ncols(), |r, c| {
                let v = b_hat[(r, c)];
                if r != c && v.abs() < level {
                    0.0
                } else {
                    v
                }
            });
            let nnz = b.iter().filter(|v| **v != 0.0).count();
            (b, nnz)
        })
        .collect())
}

/// Levels that remove the off-diagonal entries of `b_hat` one at a time,
/// smallest first, starting from level 0.
pub fn one_at_a_time_levels(b_hat: &DMatrix<f64>) -> Vec<f64> {
    let d = b_hat.nrows();
    let mut mags: Vec<f64> = (0..d * d)
        .filter(|i| i % d != i / d)
        .map(|i| b_hat[(i % d, i / d)].abs())
        .collect();
    mags.sort_by(f64::total_cmp);
    let mut levels = vec![0.0];
    for i in 0..mags.len() {
        let next = mags.get(i + 1).copied().unwrap_or(2.0 * mags[i] + 1.0);
        levels.push(0.5 * (mags[i] + next));
    }
    levels
}

/// `RSS(B̂_MLE) / (n − tr(J⁻¹G))`.
pub fn estimate_sigma2(
    model: &IsochronalOdeModel,
    y: &DVector<f64>,
    b_mle: &DMatrix<f64>,
) -> Result<f64> {
    let beta = matrix_to_vec(b_mle);
    let rss = (y - model.eval(&beta)?).norm_squared();
    let df = div_unconstrained(&model.g_matrix(&beta)?, &model.j_matrix(&beta, y)?)?;
    let denom = model.n_obs() as f64 - df;
    if !(denom > 0.0) {
        return Err(Error::Precondition(format!(
            "residual degrees of freedom {denom} are not positive"
        )));
    }
    Ok(rss / denom)
}

/// Linear interpolation of `(s, value)` points (sorted by `s` internally),
/// clamped to the end values outside their range.
pub fn interpolate(points: &[(f64, f64)], grid: &[f64]) -> Option<Vec<f64>> {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(s, v)| s.is_finite() && v.is_finite())
        .collect();
    if pts.is_empty() {
        return None;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    Some(
        grid.iter()
            .map(|&s| {
                let i = pts.partition_point(|p| p.0 <= s);
                if i == 0 {
                    pts[0].1
                } else if i == pts.len() {
                    pts[i - 1].1
                } else {
                    let (s0, v0) = pts[i - 1];
                    let (s1, v1) = pts[i];
                    if s1 == s0 {
                        v1
                    } else {
                        v0 + (v1 - v0) * (s - s0) / (s1 - s0)
                    }
                }
            })
            .collect(),
    )
}

/// One row of the per-replication path table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathRow {
    pub rep: usize,
    pub lambda: f64,
    pub s: f64,
    pub rss: f64,
    pub div_thm4: f64,
    pub risk_hat: f64,
    pub risk_tilde: f64,
    pub true_risk: f64,
    pub n_active: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepwiseRow {
    pub n_nonzero: usize,
    pub rss: f64,
    pub df_thm3: f64,
    pub risk_hat_thm3: f64,
    pub risk_hat_count: f64,
    pub true_risk: f64,
    pub converged: bool,
    pub fell_back: bool,
    pub accuracy: f64,
}

/// Everything one replication contributes to the summary.
#[derive(Debug, Clone)]
pub struct RepOutcome {
    pub rep: usize,
    pub sigma2_used: f64,
    pub path: Vec<PathRow>,
    pub true_on_grid: Vec<f64>,
    pub hat_on_grid: Vec<f64>,
    pub tilde_on_grid: Vec<f64>,
    pub s_hat: f64,
    pub risk_hat_at_s_hat: f64,
    pub true_risk_at_s_hat: f64,
    pub nonzero_at_s_hat: usize,
    pub accuracy_at_s_hat: f64,
    pub mle_true_risk: Option<f64>,
    /// `(nonzero count, true risk)` of the thresholded MLEs.
    pub threshold: Vec<(usize, f64)>,
    pub stepwise: Vec<StepwiseRow>,
    pub nonconverged_fits: usize,
    pub divergence_failures: usize,
}

fn structural_accuracy(b_hat: &DMatrix<f64>, b_true: &DMatrix<f64>) -> f64 {
    let hits = b_hat
        .iter()
        .zip(b_true.iter())
        .filter(|(a, b)| (**a != 0.0) == (**b != 0.0))
        .count();
    hits as f64 / b_true.len() as f64
}

fn sure(rss: f64, n: usize, sigma2: f64, div: f64) -> f64 {
    rss - n as f64 * sigma2 + 2.0 * sigma2 * div
}

/// Runs every estimator on replication `rep`.
pub fn run_replication(config: &SimConfig, rep: usize) -> Result<RepOutcome> {
    let data = generate_replication(config, rep)?;
    let d = config.d;
    let n = config.n_obs();
    let model = IsochronalOdeModel::new(config.t, data.x.clone())?.with_data(&data.y)?;
    let y = matrix_to_vec(&data.y);
    let xi = matrix_to_vec(&data.mean);
    let true_risk =
        |beta: &DVector<f64>| -> Result<f64> { Ok((&xi - model.eval(beta)?).norm_squared()) };

    let mle = match mle_fit(&data.x, &data.y, config.t) {
        Ok(f) => Some(f),
        Err(e) => {
            log::debug!("replication {rep}: MLE unavailable ({e})");
            None
        }
    };
    let sigma2 = match config.sigma2_mode {
        Sigma2Mode::Known => config.sigma2,
        Sigma2Mode::Estimated => {
            let mle = mle
                .as_ref()
                .ok_or_else(|| Error::Precondition("σ² estimate needs the MLE".into()))?;
            estimate_sigma2(&model, &y, &mle.b_hat)?
        }
    };
    let weights = match config.weight_mode {
        WeightMode::Unit => PenaltyWeights::unit(d * d),
        WeightMode::Adaptive => {
            let mle = mle
                .as_ref()
                .ok_or_else(|| Error::Precondition("adaptive weights need the MLE".into()))?;
            PenaltyWeights::adaptive(&matrix_to_vec(&mle.b_hat))?
        }
    };

    // ℓ1 path.
    let lmax = lambda_max(&model, &y, &weights)?;
    let grid = default_lambda_grid(lmax, config.lambda_grid_size, config.lambda_ratio);
    let path = lambda_path(&model, &y, &weights, &grid, &config.solver)?;
    let mut rows = Vec::with_capacity(path.fits.len());
    let mut nonconverged = 0;
    let mut div_failures = 0;
    for fit in &path.fits {
        if !fit.converged {
            nonconverged += 1;
        }
        let div = match fit_divergence(&model, fit, &y, &weights, false) {
            Ok(v) => v,
            Err(e) => {
                log::debug!(
                    "replication {rep}: divergence unavailable at lambda {:e} ({e})",
                    fit.lambda
                );
                div_failures += 1;
                f64::NAN
            }
        };
        rows.push(PathRow {
            rep,
            lambda: fit.lambda,
            s: fit.s,
            rss: fit.rss,
            div_thm4: div,
            risk_hat: sure(fit.rss, n, sigma2, div),
            risk_tilde: sure(fit.rss, n, sigma2, fit.active_set.len() as f64 - 1.0),
            true_risk: true_risk(&fit.beta)?,
            n_active: fit.active_set.len(),
        });
    }
    // Beyond the unpenalized fit's norm the constrained estimator is the
    // MLE itself, so the curves end there rather than at the smallest λ.
    let mut knots = rows.clone();
    if let Some(mle) = &mle {
        let beta = matrix_to_vec(&mle.b_hat);
        let s = weights.l1(&beta);
        if rows.last().is_none_or(|r| s > r.s) {
            let rss = (&y - model.eval(&beta)?).norm_squared();
            match div_unconstrained(&model.g_matrix(&beta)?, &model.j_matrix(&beta, &y)?) {
                Ok(div) => knots.push(PathRow {
                    rep,
                    lambda: 0.0,
                    s,
                    rss,
                    div_thm4: div,
                    risk_hat: sure(rss, n, sigma2, div),
                    risk_tilde: sure(rss, n, sigma2, beta.len() as f64),
                    true_risk: true_risk(&beta)?,
                    n_active: beta.len(),
                }),
                Err(e) => log::debug!("replication {rep}: MLE divergence unavailable ({e})"),
            }
        }
    }
    let on_grid = |f: fn(&PathRow) -> f64| {
        interpolate(
            &knots.iter().map(|r| (r.s, f(r))).collect::<Vec<_>>(),
            &config.s_grid,
        )
        .ok_or_else(|| Error::Divergence(format!("replication {rep}: no usable path points")))
    };
    let true_on_grid = on_grid(|r| r.true_risk)?;
    let hat_on_grid = on_grid(|r| r.risk_hat)?;
    let tilde_on_grid = on_grid(|r| r.risk_tilde)?;

    // Data-driven constraint level.
    let best = (0..config.s_grid.len())
        .min_by(|&a, &b| hat_on_grid[a].total_cmp(&hat_on_grid[b]))
        .expect("s grid is non-empty");
    let s_hat = config.s_grid[best];
    let start = nearest_fit(&path.fits, s_hat);
    let selected = solve_constrained(
        &model,
        &y,
        s_hat,
        &weights,
        &start.beta,
        Some(start.lambda),
        &config.solver,
    )?;
    let b_sel = beta_to_matrix(&selected.beta, d)?;

    // MLE and hard thresholding.
    let (mle_true_risk, threshold) = match &mle {
        Some(f) => {
            let curve = threshold_curve(&f.b_hat, &one_at_a_time_levels(&f.b_hat))?;
            let mut pts = Vec::with_capacity(curve.len());
            for (b, nnz) in curve {
                pts.push((nnz, true_risk(&matrix_to_vec(&b))?));
            }
            (Some(true_risk(&matrix_to_vec(&f.b_hat))?), pts)
        }
        None => (None, Vec::new()),
    };

    // Forward stepwise from the diagonal.
    let max_nz = config.stepwise_max_nonzero.unwrap_or(d * d);
    let states = forward_stepwise(
        &model,
        &y,
        &diagonal_pattern(d),
        max_nz,
        &config.solver,
        Execution::Sequential,
    )?;
    let mut stepwise = Vec::with_capacity(states.len());
    for state in &states {
        let df = search_df(state, &model, &y)?;
        stepwise.push(StepwiseRow {
            n_nonzero: state.size(),
            rss: state.fit.rss,
            df_thm3: df.df_thm3,
            risk_hat_thm3: sure(state.fit.rss, n, sigma2, df.df_thm3),
            risk_hat_count: sure(state.fit.rss, n, sigma2, df.df_count),
            true_risk: true_risk(&state.fit.beta)?,
            converged: state.fit.converged,
            fell_back: df.fell_back,
            accuracy: structural_accuracy(&beta_to_matrix(&state.fit.beta, d)?, &config.b_true),
        });
    }

    Ok(RepOutcome {
        rep,
        sigma2_used: sigma2,
        path: rows,
        true_on_grid,
        hat_on_grid,
        tilde_on_grid,
        s_hat,
        risk_hat_at_s_hat: sure(
            selected.rss,
            n,
            sigma2,
            fit_divergence(&model, &selected, &y, &weights, false).unwrap_or(f64::NAN),
        ),
        true_risk_at_s_hat: true_risk(&selected.beta)?,
        nonzero_at_s_hat: selected.active_set.len(),
        accuracy_at_s_hat: structural_accuracy(&b_sel, &config.b_true),
        mle_true_risk,
        threshold,
        stepwise,
        nonconverged_fits: nonconverged,
        divergence_failures: div_failures,
    })
}

fn nearest_fit(fits: &[FitResult], s: f64) -> &FitResult {
    fits.iter()
        .min_by(|a, b| (a.s - s).abs().total_cmp(&(b.s - s).abs()))
        .expect("path is non-empty")
}

/// Mean with standard error.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl From<&Moments> for MeanSe {
    fn from(m: &Moments) -> Self {
        MeanSe {
            mean: m.mean,
            se: m.stderr(),
            count: m.count,
        }
    }
}

/// Aggregates at one constraint level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SPoint {
    pub s: f64,
    pub true_risk: MeanSe,
    pub risk_hat: MeanSe,
    pub risk_tilde: MeanSe,
    /// Paired per-replication `risk_hat − true_risk`.
    pub bias_hat: MeanSe,
    pub bias_tilde: MeanSe,
}

/// Aggregates over replications at one pattern size (stepwise) or nonzero
/// count (thresholding).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizePoint {
    pub n_nonzero: usize,
    pub true_risk: MeanSe,
    pub risk_hat_thm3: MeanSe,
    pub risk_hat_count: MeanSe,
    pub bias_thm3: MeanSe,
    pub bias_count: MeanSe,
}

#[derive(Debug, Clone)]
pub struct SimSummary {
    pub s_curve: Vec<SPoint>,
    pub mle_true_risk: MeanSe,
    pub mle_unavailable: usize,
    pub threshold_curve: Vec<(usize, MeanSe)>,
    pub stepwise_curve: Vec<SizePoint>,
    pub s_hat: MeanSe,
    pub true_risk_at_s_hat: MeanSe,
    pub risk_hat_at_s_hat: MeanSe,
    pub nonzero_at_s_hat: MeanSe,
    pub accuracy_at_s_hat: MeanSe,
    /// Stepwise model chosen by minimal `risk_hat_thm3`.
    pub stepwise_selected_size: MeanSe,
    pub stepwise_selected_true_risk: MeanSe,
    pub stepwise_selected_accuracy: MeanSe,
    pub completed: usize,
    pub failed: usize,
    pub nonconverged_fits: usize,
    pub divergence_failures: usize,
    pub outcomes: Vec<RepOutcome>,
}

impl SimSummary {
    /// Number of nonzero entries of the true matrix.
    pub fn true_support(config: &SimConfig) -> usize {
        config.b_true.iter().filter(|v| **v != 0.0).count()
    }

    pub fn stepwise_at(&self, n_nonzero: usize) -> Option<&SizePoint> {
        self.stepwise_curve
            .iter()
            .find(|p| p.n_nonzero == n_nonzero)
    }
}

/// Runs all replications and aggregates them.
pub fn run_study(config: &SimConfig) -> Result<SimSummary> {
    config.validate()?;
    let results = map_indexed(config.replications, config.execution, |rep| {
        run_replication(config, rep)
    });
    let mut outcomes = Vec::with_capacity(results.len());
    let mut failed = 0;
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::warn!("replication {rep} failed: {e}");
                failed += 1;
            }
        }
    }
    let frac = failed as f64 / config.replications as f64;
    if frac > MAX_FAILURE_FRACTION {
        return Err(Error::Study(format!(
            "{failed} of {} replications failed",
            config.replications
        )));
    }
    Ok(summarize(config, outcomes, failed))
}

fn summarize(config: &SimConfig, outcomes: Vec<RepOutcome>, failed: usize) -> SimSummary {
    let g = config.s_grid.len();
    let mut tr = vec![Moments::default(); g];
    let mut hat = vec![Moments::default(); g];
    let mut tilde = vec![Moments::default(); g];
    let mut bh = vec![Moments::default(); g];
    let mut bt = vec![Moments::default(); g];
    let max_nz = config.d * config.d;
    let mut thr = vec![Moments::default(); max_nz + 1];
    let mut sw = vec![[Moments::default(); 5]; max_nz + 1];
    let mut mle = Moments::default();
    let mut scalars = [Moments::default(); 8];
    let mut mle_unavailable = 0;
    let (mut nonconverged, mut div_failures) = (0, 0);

    for o in &outcomes {
        for i in 0..g {
            tr[i].push(o.true_on_grid[i]);
            hat[i].push(o.hat_on_grid[i]);
            tilde[i].push(o.tilde_on_grid[i]);
            bh[i].push(o.hat_on_grid[i] - o.true_on_grid[i]);
            bt[i].push(o.tilde_on_grid[i] - o.true_on_grid[i]);
        }
        match o.mle_true_risk {
            Some(r) => mle.push(r),
            None => mle_unavailable += 1,
        }
        for &(nnz, r) in &o.threshold {
            thr[nnz].push(r);
        }
        for row in &o.stepwise {
            let acc = &mut sw[row.n_nonzero];
            acc[0].push(row.true_risk);
            acc[1].push(row.risk_hat_thm3);
            acc[2].push(row.risk_hat_count);
            acc[3].push(row.risk_hat_thm3 - row.true_risk);
            acc[4].push(row.risk_hat_count - row.true_risk);
        }
        scalars[0].push(o.s_hat);
        scalars[1].push(o.true_risk_at_s_hat);
        if o.risk_hat_at_s_hat.is_finite() {
            scalars[2].push(o.risk_hat_at_s_hat);
        }
        scalars[3].push(o.nonzero_at_s_hat as f64);
        scalars[4].push(o.accuracy_at_s_hat);
        if let Some(best) = o
            .stepwise
            .iter()
            .min_by(|a, b| a.risk_hat_thm3.total_cmp(&b.risk_hat_thm3))
        {
            scalars[5].push(best.n_nonzero as f64);
            scalars[6].push(best.true_risk);
            scalars[7].push(best.accuracy);
        }
        nonconverged += o.nonconverged_fits + o.stepwise.iter().filter(|r| !r.converged).count();
        div_failures += o.divergence_failures;
    }

    SimSummary {
        s_curve: (0..g)
            .map(|i| SPoint {
                s: config.s_grid[i],
                true_risk: (&tr[i]).into(),
                risk_hat: (&hat[i]).into(),
                risk_tilde: (&tilde[i]).into(),
                bias_hat: (&bh[i]).into(),
                bias_tilde: (&bt[i]).into(),
            })
            .collect(),
        mle_true_risk: (&mle).into(),
        mle_unavailable,
        threshold_curve: (0..=max_nz)
            .filter(|&k| thr[k].count > 0)
            .map(|k| (k, (&thr[k]).into()))
            .collect(),
        stepwise_curve: (0..=max_nz)
            .filter(|&k| sw[k][0].count > 0)
            .map(|k| SizePoint {
                n_nonzero: k,
                true_risk: (&sw[k][0]).into(),
                risk_hat_thm3: (&sw[k][1]).into(),
                risk_hat_count: (&sw[k][2]).into(),
                bias_thm3: (&sw[k][3]).into(),
                bias_count: (&sw[k][4]).into(),
            })
            .collect(),
        s_hat: (&scalars[0]).into(),
        true_risk_at_s_hat: (&scalars[1]).into(),
        risk_hat_at_s_hat: (&scalars[2]).into(),
        nonzero_at_s_hat: (&scalars[3]).into(),
        accuracy_at_s_hat: (&scalars[4]).into(),
        stepwise_selected_size: (&scalars[5]).into(),
        stepwise_selected_true_risk: (&scalars[6]).into(),
        stepwise_selected_accuracy: (&scalars[7]).into(),
        completed: outcomes.len(),
        failed,
        nonconverged_fits: nonconverged,
        divergence_failures: div_failures,
        outcomes,
    }
}

/// Full-precision decimal rendering (17 significant digits).
pub fn format_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "NaN".to_string()
    }
}

fn join(fields: impl IntoIterator<Item = String>) -> String {
    fields.into_iter().collect::<Vec<_>>().join(",")
}

fn mse_fields(m: &MeanSe) -> [String; 2] {
    [format_real(m.mean), format_real(m.se)]
}

/// One row per (replication, λ index).
pub fn write_path_csv<W: Write>(out: &mut W, outcomes: &[RepOutcome]) -> io::Result<()> {
    writeln!(
        out,
        "rep,lambda,s,rss,div_thm4,risk_hat,risk_tilde,true_risk,n_active"
    )?;
    for o in outcomes {
        for r in &o.path {
            let fields = [
                r.lambda,
                r.s,
                r.rss,
                r.div_thm4,
                r.risk_hat,
                r.risk_tilde,
                r.true_risk,
            ]
            .map(format_real);
            writeln!(out, "{},{},{}", r.rep, fields.join(","), r.n_active)?;
        }
    }
    Ok(())
}

/// One row per s-grid point.
pub fn write_summary_csv<W: Write>(out: &mut W, summary: &SimSummary) -> io::Result<()> {
    writeln!(
        out,
        "s,true_risk,true_risk_se,risk_hat,risk_hat_se,risk_tilde,risk_tilde_se,bias_hat,bias_hat_se,bias_tilde,bias_tilde_se,replications"
    )?;
    for p in &summary.s_curve {
        let mut f = vec![format_real(p.s)];
        for m in [
            &p.true_risk,
            &p.risk_hat,
            &p.risk_tilde,
            &p.bias_hat,
            &p.bias_tilde,
        ] {
            f.extend(mse_fields(m));
        }
        f.push(p.true_risk.count.to_string());
        writeln!(out, "{}", join(f))?;
    }
    Ok(())
}

/// One row per stepwise pattern size.
pub fn write_stepwise_csv<W: Write>(out: &mut W, summary: &SimSummary) -> io::Result<()> {
    writeln!(
        out,
        "n_nonzero,true_risk,true_risk_se,risk_hat_thm3,risk_hat_thm3_se,risk_hat_count,risk_hat_count_se,bias_thm3,bias_thm3_se,bias_count,bias_count_se,replications"
    )?;
    for p in &summary.stepwise_curve {
        let mut f = vec![p.n_nonzero.to_string()];
        for m in [
            &p.true_risk,
            &p.risk_hat_thm3,
            &p.risk_hat_count,
            &p.bias_thm3,
            &p.bias_count,
        ] {
            f.extend(mse_fields(m));
        }
        f.push(p.true_risk.count.to_string());
        writeln!(out, "{}", join(f))?;
    }
    Ok(())
}

/// One row per nonzero count of the thresholded MLE.
pub fn write_threshold_csv<W: Write>(out: &mut W, summary: &SimSummary) -> io::Result<()> {
    writeln!(out, "n_nonzero,true_risk,true_risk_se,replications")?;
    for (k, m) in &summary.threshold_curve {
        let [a, b] = mse_fields(m);
        writeln!(out, "{k},{a},{b},{}", m.count)?;
    }
    Ok(())
}

/// Scalar results as `metric,mean,se,count`.
pub fn write_scalars_csv<W: Write>(out: &mut W, summary: &SimSummary) -> io::Result<()> {
    writeln!(out, "metric,mean,se,count")?;
    let rows: [(&str, &MeanSe); 9] = [
        ("mle_true_risk", &summary.mle_true_risk),
        ("s_hat", &summary.s_hat),
        ("true_risk_at_s_hat", &summary.true_risk_at_s_hat),
        ("risk_hat_at_s_hat", &summary.risk_hat_at_s_hat),
        ("nonzero_at_s_hat", &summary.nonzero_at_s_hat),
        ("accuracy_at_s_hat", &summary.accuracy_at_s_hat),
        ("stepwise_selected_size", &summary.stepwise_selected_size),
        (
            "stepwise_selected_true_risk",
            &summary.stepwise_selected_true_risk,
        ),
        (
            "stepwise_selected_accuracy",
            &summary.stepwise_selected_accuracy,
        ),
    ];
    for (name, m) in rows {
        let [a, b] = mse_fields(m);
        writeln!(out, "{name},{a},{b},{}", m.count)?;
    }
    for (name, v) in [
        ("completed", summary.completed),
        ("failed", summary.failed),
        ("mle_unavailable", summary.mle_unavailable),
        ("nonconverged_fits", summary.nonconverged_fits),
        ("divergence_failures", summary.divergence_failures),
    ] {
        writeln!(out, "{name},{},NaN,1", format_real(v as f64))?;
    }
    Ok(())
}
