//! Coordinate descent for `½||y − ζ(β)||² + λ Σ_k ω_k |β_k|`.
//!
//! Each coordinate visit refreshes `∂_kζ` at the current iterate, solves the
//! Gauss-Newton surrogate in closed form by soft-thresholding and accepts the
//! move through Armijo backtracking on the true penalized objective. The
//! penalized solution at `λ` solves the constrained problem at
//! `s(λ) = Σ ω_k |β̂_k|` with Lagrange multiplier `λ`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{check_len, Parametrization};

/// Below this squared norm a coordinate direction is treated as flat.
pub const FLAT_DIRECTION: f64 = 1e-14;

/// Objective changes below `OBJECTIVE_RESOLUTION · max(||y||², 1)` are treated
/// as unmeasurable by the line search.
pub const OBJECTIVE_RESOLUTION: f64 = 1e-13;

/// Nonnegative ℓ1 weights; zero entries leave a coordinate unpenalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyWeights(DVector<f64>);

impl PenaltyWeights {
    pub fn new(w: DVector<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "penalty weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self(w))
    }

    pub fn unit(p: usize) -> Self {
        Self(DVector::from_element(p, 1.0))
    }

    /// Adaptive weights `1/|β̂_k|` from a pilot estimate.
    pub fn adaptive(pilot: &DVector<f64>) -> Result<Self> {
        if pilot.iter().any(|v| *v == 0.0 || !v.is_finite()) {
            return Err(Error::Config(
                "adaptive weights need a pilot estimate with finite nonzero entries".into(),
            ));
        }
        Ok(Self(pilot.map(|v| 1.0 / v.abs())))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `Σ ω_k |β_k|`.
    pub fn l1(&self, beta: &DVector<f64>) -> f64 {
        self.0
            .iter()
            .zip(beta.iter())
            .map(|(w, b)| w * b.abs())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_sweeps: usize,
    /// Stop when the relative objective change over a sweep drops below this
    /// (and the KKT residual is below `kkt_tol`).
    pub tol_rel: f64,
    pub kkt_tol: f64,
    pub armijo_c: f64,
    pub armijo_shrink: f64,
    pub max_backtracks: usize,
    /// Keep the objective value after every accepted step.
    pub record_objective: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 20_000,
            tol_rel: 1e-8,
            kkt_tol: 1e-6,
            armijo_c: 1e-4,
            armijo_shrink: 0.5,
            max_backtracks: 30,
            record_objective: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if self.max_sweeps == 0 {
            return Err(Error::Config("max_sweeps must be positive".into()));
        }
        if !(self.tol_rel > 0.0 && self.kkt_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if !open(self.armijo_c) || !open(self.armijo_shrink) {
            return Err(Error::Config("Armijo parameters must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Tight settings for oracle re-solves.
    pub fn tight() -> Self {
        Self {
            max_sweeps: 200_000,
            tol_rel: 1e-15,
            kkt_tol: 1e-11,
            ..Self::default()
        }
    }
}

/// One solution of the penalized problem with its KKT certificate.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub lambda: f64,
    pub active_set: Vec<usize>,
    /// `Σ ω_k |β̂_k|`.
    pub s: f64,
    pub gamma: DVector<f64>,
    pub lagrange: f64,
    pub rss: f64,
    pub objective: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    pub sweeps_used: usize,
    /// Coordinate visits skipped because `||∂_kζ||²` was below [`FLAT_DIRECTION`].
    pub flat_skips: usize,
    pub objective_trace: Vec<f64>,
}

/// Solutions along a decreasing λ grid.
#[derive(Debug, Clone)]
pub struct LambdaPath {
    pub fits: Vec<FitResult>,
}

impl LambdaPath {
    pub fn lambdas(&self) -> Vec<f64> {
        self.fits.iter().map(|f| f.lambda).collect()
    }

    pub fn s_values(&self) -> Vec<f64> {
        self.fits.iter().map(|f| f.s).collect()
    }
}

/// `sign(z) · max(|z| − a, 0)`; exact ties map to zero.
pub fn soft_threshold(z: f64, a: f64) -> f64 {
    if z.abs() <= a {
        0.0
    } else {
        z.signum() * (z.abs() - a)
    }
}

/// Outcome of a backtracking search.
#[derive(Debug, Clone)]
pub struct ArmijoStep<T> {
    /// Accepted step (0 when no trial satisfied the condition).
    pub step: f64,
    /// `F(step) − F(0)`; 0 on rejection.
    pub change: f64,
    pub payload: Option<T>,
    pub backtracks: usize,
}

/// Backtracking on `δ_j = shrink^j · δ`: accepts the first `j ≤ max_backtracks`
/// with `F(δ_j) − F(0) ≤ c · shrink^j · Δ`, where `Δ < 0` is the decrease
/// predicted for the full proposal. `trial` returns the objective change and
/// a payload for a candidate step, or `None` if it could not be evaluated.
///
/// When `|Δ| ≤ floor` the decrease is below the resolution at which `F` can
/// be evaluated; if no backtrack succeeds, the full proposal is then taken
/// provided its measured change does not exceed `floor`.
pub fn armijo_backtrack<T>(
    mut trial: impl FnMut(f64) -> Option<(f64, T)>,
    predicted: f64,
    proposal: f64,
    floor: f64,
    config: &SolverConfig,
) -> ArmijoStep<T> {
    let reject = ArmijoStep {
        step: 0.0,
        change: 0.0,
        payload: None,
        backtracks: 0,
    };
    if !proposal.is_finite() || proposal == 0.0 || !(predicted < 0.0) {
        return reject;
    }
    let below_resolution = -predicted <= floor;
    let mut full = None;
    let mut alpha = 1.0;
    for j in 0..=config.max_backtracks {
        if let Some((change, payload)) = trial(alpha * proposal) {
            if change.is_finite() && change <= config.armijo_c * alpha * predicted {
                return ArmijoStep {
                    step: alpha * proposal,
                    change,
                    payload: Some(payload),
                    backtracks: j,
                };
            }
            if j == 0 && below_resolution && change <= floor {
                full = Some((change, payload));
            }
        }
        alpha *= config.armijo_shrink;
    }
    match full {
        Some((change, payload)) => ArmijoStep {
            step: proposal,
            change,
            payload: Some(payload),
            backtracks: config.max_backtracks,
        },
        None => ArmijoStep {
            backtracks: config.max_backtracks,
            ..reject
        },
    }
}

/// KKT residual `||Dζᵀr − λγ||∞` and the subgradient vector `γ`, restricted
/// to the free coordinates.
pub fn kkt_parts(
    grad: &DVector<f64>,
    beta: &DVector<f64>,
    lambda: f64,
    weights: &PenaltyWeights,
    free: Option<&[bool]>,
) -> (f64, DVector<f64>) {
    let w = weights.as_vector();
    let mut gamma = DVector::zeros(beta.len());
    let mut residual: f64 = 0.0;
    for k in 0..beta.len() {
        if free.is_some_and(|f| !f[k]) {
            continue;
        }
        let g = grad[k];
        let thr = lambda * w[k];
        if beta[k] != 0.0 {
            gamma[k] = w[k] * beta[k].signum();
            residual = residual.max((g - lambda * gamma[k]).abs());
        } else {
            if lambda > 0.0 && w[k] > 0.0 {
                gamma[k] = (g / lambda).clamp(-w[k], w[k]);
            }
            residual = residual.max((g.abs() - thr).max(0.0));
        }
    }
    (residual, gamma)
}

fn penalized(rss_half: f64, lambda: f64, weights: &PenaltyWeights, beta: &DVector<f64>) -> f64 {
    rss_half + lambda * weights.l1(beta)
}

fn validate_problem<M: Parametrization + ?Sized>(
    model: &M,
    y: &DVector<f64>,
    lambda: f64,
    weights: &PenaltyWeights,
    beta: &DVector<f64>,
    config: &SolverConfig,
) -> Result<()> {
    config.validate()?;
    check_len(y, model.n_obs(), "observation vector")?;
    check_len(beta, model.n_params(), "initial parameter vector")?;
    if weights.len() != model.n_params() {
        return Err(Error::Dimension(format!(
            "{} weights for {} parameters",
            weights.len(),
            model.n_params()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial parameter vector".into()));
    }
    Ok(())
}

/// Cyclic coordinate descent at a single λ.
pub fn coordinate_descent<M: Parametrization + ?Sized>(
    model: &M,
    y: &DVector<f64>,
    lambda: f64,
    weights: &PenaltyWeights,
    beta_init: &DVector<f64>,
    config: &SolverConfig,
) -> Result<FitResult> {
    coordinate_descent_masked(model, y, lambda, weights, beta_init, None, config)
}

/// Coordinate descent where coordinates with `free[k] == false` are held at
/// their initial value.
pub fn coordinate_descent_masked<M: Parametrization + ?Sized>(
    model: &M,
    y: &DVector<f64>,
    lambda: f64,
    weights: &PenaltyWeights,
    beta_init: &DVector<f64>,
    free: Option<&[bool]>,
    config: &SolverConfig,
) -> Result<FitResult> {
    validate_problem(model, y, lambda, weights, beta_init, config)?;
    if let Some(f) = free {
        if f.len() != model.n_params() {
            return Err(Error::Dimension(
                "coordinate mask has the wrong length".into(),
            ));
        }
    }
    let p = model.n_params();
    let w = weights.as_vector();
    let mut beta = beta_init.clone();
    let mut resid = y - model.eval(&beta)?;
    let mut obj = penalized(0.5 * resid.norm_squared(), lambda, weights, &beta);
    if !obj.is_finite() {
        return Err(Error::Divergence(
            "objective at the initial point is not finite".into(),
        ));
    }
    let floor = OBJECTIVE_RESOLUTION * y.norm_squared().max(1.0);
    let mut trace = Vec::new();
    if config.record_objective {
        trace.push(obj);
    }
    let mut flat_skips = 0;
    let mut converged = false;
    let mut sweeps = 0;

    while sweeps < config.max_sweeps {
        sweeps += 1;
        let obj_start = obj;
        let mut moved = false;
        for k in 0..p {
            if free.is_some_and(|f| !f[k]) {
                continue;
            }
            let dir = model.jacobian_column(&beta, k)?;
            let curv = dir.norm_squared();
            if curv < FLAT_DIRECTION {
                flat_skips += 1;
                continue;
            }
            let corr = resid.dot(&dir);
            let thr = lambda * w[k];
            let target = soft_threshold(corr + curv * beta[k], thr) / curv;
            let proposal = target - beta[k];
            if proposal == 0.0 {
                continue;
            }
            let old = beta[k];
            let predicted = -corr * proposal + thr * ((old + proposal).abs() - old.abs());
            let mut trial_beta = beta.clone();
            let step = armijo_backtrack(
                |delta| {
                    trial_beta[k] = old + delta;
                    let fitted = model.eval(&trial_beta).ok()?;
                    let r = y - fitted;
                    // ½(||r'||² − ||r||²) = ½(r' − r)·(r' + r)
                    let change = 0.5 * (&r - &resid).dot(&(&r + &resid))
                        + thr * ((old + delta).abs() - old.abs());
                    Some((change, r))
                },
                predicted,
                proposal,
                floor,
                config,
            );
            if let Some(r) = step.payload {
                debug_assert!(step.change <= floor);
                beta[k] = old + step.step;
                resid = r;
                moved = true;
                obj += step.change;
                if config.record_objective {
                    trace.push(penalized(
                        0.5 * resid.norm_squared(),
                        lambda,
                        weights,
                        &beta,
                    ));
                }
            }
        }
        if !obj.is_finite() {
            return Err(Error::Divergence(format!(
                "objective became non-finite in sweep {sweeps}"
            )));
        }
        let rel = (obj_start - obj).abs() / obj_start.abs().max(f64::MIN_POSITIVE);
        if rel < config.tol_rel {
            let grad = model.jacobian_t_times(&beta, &resid)?;
            if kkt_parts(&grad, &beta, lambda, weights, free).0 <= config.kkt_tol {
                converged = true;
                break;
            }
        }
        if !moved {
            // Every further sweep would repeat this one.
            break;
        }
    }

    let grad = model.jacobian_t_times(&beta, &resid)?;
    let (kkt_residual, gamma) = kkt_parts(&grad, &beta, lambda, weights, free);
    if !converged {
        log::debug!(
            "coordinate descent stopped after {sweeps} sweeps at lambda {lambda:e} (kkt {kkt_residual:e})"
        );
    }
    Ok(FitResult {
        active_set: (0..p).filter(|&k| beta[k] != 0.0).collect(),
        s: weights.l1(&beta),
        gamma,
        lagrange: lambda,
        rss: resid.norm_squared(),
        objective: penalized(0.5 * resid.norm_squared(), lambda, weights, &beta),
        kkt_residual,
        converged,
        sweeps_used: sweeps,
        flat_skips,
        objective_trace: trace,
        lambda,
        beta,
    })
}

/// Smallest λ at which `β = 0` solves the penalized problem.
pub fn lambda_max<M: Parametrization + ?Sized>(
    model: &M,
    y: &DVector<f64>,
    weights: &PenaltyWeights,
) -> Result<f64> {
    check_len(y, model.n_obs(), "observation vector")?;
    let zero = DVector::zeros(model.n_params());
    let resid = y - model.eval(&zero)?;
    let grad = model.jacobian_t_times(&zero, &resid)?;
    let mut best: Option<f64> = None;
    for (g, w) in grad.iter().zip(weights.as_vector().iter()) {
        if *w > 0.0 {
            let v = g.abs() / w;
            best = Some(best.map_or(v, |b: f64| b.max(v)));
        }
    }
    best.ok_or_else(|| Error::Config("all penalty weights are zero".into()))
}

/// `count` log-spaced values from `lambda_max` down to `ratio · lambda_max`.
pub fn default_lambda_grid(lambda_max: f64, count: usize, ratio: f64) -> Vec<f64> {
    if count == 1 {
        return vec![lambda_max];
    }
    let lo = ratio.ln();
    (0..count)
        .map(|i| lambda_max * (lo * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Warm-started solutions along a strictly decreasing λ grid.
pub fn lambda_path<M: Parametrization + ?Sized>(
    model: &M,
    y: &DVector<f64>,
    weights: &PenaltyWeights,
    grid: &[f64],
    config: &SolverConfig,
) -> Result<LambdaPath> {
    lambda_path_from(
        model,
        y,
        weights,
        grid,
        &DVector::zeros(model.n_params()),
        config,
    )
}

/// As [`lambda_path`], starting from `beta_start` instead of zero.
pub fn lambda_path_from<M: Parametrization + ?Sized>(
    model: &M,
    y: &DVector<f64>,
    weights: &PenaltyWeights,
    grid: &[f64],
    beta_start: &DVector<f64>,
    config: &SolverConfig,
) -> Result<LambdaPath> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    if grid.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Config(
            "lambda grid must be strictly decreasing".into(),
        ));
    }
    let mut beta = beta_start.clone();
    let mut fits = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let fit = coordinate_descent(model, y, lambda, weights, &beta, config)?;
        beta = fit.beta.clone();
        fits.push(fit);
    }
    Ok(LambdaPath { fits })
}

/// Solves the constrained problem `Σ ω|β| ≤ s` by locating the λ whose
/// penalized solution has `s(λ) = s`. Warm starts from `beta_start` keep the
/// search on the branch of that solution.
pub fn solve_constrained<M: Parametrization + ?Sized>(
    model: &M,
    y: &DVector<f64>,
    s: f64,
    weights: &PenaltyWeights,
    beta_start: &DVector<f64>,
    lambda_hint: Option<f64>,
    config: &SolverConfig,
) -> Result<FitResult> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::Config(format!(
            "constraint level must be >= 0, got {s}"
        )));
    }
    let lmax = lambda_max(model, y, weights)?;
    if s == 0.0 || lmax == 0.0 {
        return coordinate_descent(
            model,
            y,
            lmax,
            weights,
            &DVector::zeros(model.n_params()),
            config,
        );
    }
    let solve = |lambda: f64, start: &DVector<f64>| {
        coordinate_descent(model, y, lambda, weights, start, config)
    };
    let s_tol = 1e-13 * s.max(1.0);

    // Bracket: s(hi) <= s <= s(lo), lambda_lo < lambda_hi.
    let mut hint = lambda_hint.unwrap_or(0.5 * lmax).clamp(1e-300, lmax);
    let mut fit = solve(hint, beta_start)?;
    if (fit.s - s).abs() <= s_tol {
        return Ok(fit);
    }
    let (mut lo, mut hi) = if fit.s < s {
        (None, Some((hint, fit.clone())))
    } else {
        (Some((hint, fit.clone())), None)
    };
    for _ in 0..200 {
        if lo.is_some() && hi.is_some() {
            break;
        }
        if lo.is_none() {
            hint *= 0.5;
            if hint < 1e-12 * lmax {
                let free = solve(0.0, &fit.beta)?;
                if free.s <= s {
                    return Ok(free);
                }
                lo = Some((0.0, free));
                break;
            }
        } else {
            hint = (hint * 2.0).min(lmax);
        }
        fit = solve(hint, &fit.beta)?;
        if fit.s < s {
            hi = Some((hint, fit.clone()));
        } else {
            lo = Some((hint, fit.clone()));
        }
        if hint >= lmax && hi.is_none() {
            hi = Some((lmax, fit.clone()));
        }
    }
    let (mut lam_lo, mut fit_lo) =
        lo.ok_or_else(|| Error::Divergence("bracketing failed".into()))?;
    let (mut lam_hi, mut fit_hi) =
        hi.ok_or_else(|| Error::Divergence("bracketing failed".into()))?;
    // Illinois false position on f(λ) = s(λ) − s, f(lo) ≥ 0 ≥ f(hi).
    let mut f_lo = fit_lo.s - s;
    let mut f_hi = fit_hi.s - s;
    let mut side = 0i8;
    for _ in 0..200 {
        let mut lam = if f_lo != f_hi {
            lam_lo + f_lo * (lam_hi - lam_lo) / (f_lo - f_hi)
        } else {
            0.5 * (lam_lo + lam_hi)
        };
        if !(lam > lam_lo && lam < lam_hi) {
            lam = 0.5 * (lam_lo + lam_hi);
        }
        let start = if f_lo.abs() < f_hi.abs() {
            &fit_lo.beta
        } else {
            &fit_hi.beta
        };
        let fit = solve(lam, start)?;
        let f = fit.s - s;
        if f.abs() <= s_tol || (lam_hi - lam_lo) <= 1e-15 * lam_hi {
            return Ok(fit);
        }
        if f > 0.0 {
            lam_lo = lam;
            fit_lo = fit;
            f_lo = f;
            if side == -1 {
                f_hi *= 0.5;
            }
            side = -1;
        } else {
            lam_hi = lam;
            fit_hi = fit;
            f_hi = f;
            if side == 1 {
                f_lo *= 0.5;
            }
            side = 1;
        }
    }
    Ok(if f_lo.abs() < f_hi.abs() {
        fit_lo
    } else {
        fit_hi
    })
}

/// Outcome of a damped Gauss-Newton least squares fit.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub beta: DVector<f64>,
    pub rss: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Levenberg–Marquardt minimization of `||y − ζ(β)||²` from `beta0`.
pub fn local_least_squares<M: Parametrization + ?Sized>(
    model: &M,
    y: &DVector<f64>,
    beta0: &DVector<f64>,
    max_iter: usize,
) -> Result<LocalFit> {
    let mut beta = beta0.clone();
    let mut resid = y - model.eval(&beta)?;
    let mut rss = resid.norm_squared();
    let mut mu = 1e-3;
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut stalls = 0;
    while iterations < max_iter {
        iterations += 1;
        let jac = model.jacobian(&beta)?;
        let grad = jac.tr_mul(&resid);
        grad_norm = grad.amax();
        let gram = jac.tr_mul(&jac);
        let scale = gram.diagonal().amax().max(f64::MIN_POSITIVE);
        if grad_norm <= 1e-13 * scale.sqrt() * (1.0 + y.amax()) {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let damped =
                &gram + DMatrix::from_diagonal(&gram.diagonal().map(|v| mu * v.max(1e-12 * scale)));
            let Some(delta) = damped.cholesky().map(|c| c.solve(&grad)) else {
                mu *= 4.0;
                continue;
            };
            let trial = &beta + &delta;
            if let Ok(fitted) = model.eval(&trial) {
                let r = y - fitted;
                let trial_rss = r.norm_squared();
                if trial_rss.is_finite() && trial_rss <= rss {
                    let improvement = rss - trial_rss;
                    beta = trial;
                    resid = r;
                    stalls = if improvement <= 1e-16 * rss.max(f64::MIN_POSITIVE) {
                        stalls + 1
                    } else {
                        0
                    };
                    rss = trial_rss;
                    mu = (mu / 3.0).max(1e-300);
                    accepted = true;
                    break;
                }
            }
            mu *= 4.0;
        }
        if !accepted || stalls >= 3 {
            break;
        }
    }
    Ok(LocalFit {
        beta,
        rss,
        gradient_norm: grad_norm,
        iterations,
    })
}

/// Result of an independent KKT audit.
#[derive(Debug, Clone)]
pub struct KktReport {
    pub residual: f64,
    pub gamma: DVector<f64>,
    pub lagrange: f64,
    /// Sufficient second-order conditions: `λ̂ > 0`, strict dual feasibility
    /// off the active set and `J_AA` positive definite on `γ_A^⊥`.
    pub second_order_ok: bool,
    pub note: Option<String>,
}

/// Recomputes the KKT quantities for `fit` from scratch.
pub fn kkt_check<M: Parametrization + ?Sized>(
    model: &M,
    fit: &FitResult,
    y: &DVector<f64>,
    weights: &PenaltyWeights,
) -> Result<KktReport> {
    let resid = y - model.eval(&fit.beta)?;
    let grad = model.jacobian_t_times(&fit.beta, &resid)?;
    let lambda = fit.lambda;
    let (residual, gamma) = kkt_parts(&grad, &fit.beta, lambda, weights, None);
    let active: Vec<usize> = (0..fit.beta.len())
        .filter(|&k| fit.beta[k] != 0.0)
        .collect();
    let mut note = None;
    if lambda <= 0.0 {
        note = Some("Lagrange multiplier is not positive".to_string());
        return Ok(KktReport {
            residual,
            gamma,
            lagrange: lambda,
            second_order_ok: false,
            note,
        });
    }
    if active.is_empty() {
        note = Some("empty active set".to_string());
    }
    let w = weights.as_vector();
    let strict = (0..fit.beta.len())
        .filter(|k| fit.beta[*k] == 0.0)
        .all(|k| grad[k].abs() < lambda * w[k]);
    let j = model.j_matrix(&fit.beta, y)?;
    let curvature_ok = projected_positive_definite(&j, &gamma, &active);
    Ok(KktReport {
        residual,
        gamma,
        lagrange: lambda,
        second_order_ok: strict && curvature_ok,
        note,
    })
}

/// Whether `δᵀ J_AA δ > 0` for all nonzero `δ ⟂ γ_A`.
pub fn projected_positive_definite(
    j: &DMatrix<f64>,
    gamma: &DVector<f64>,
    active: &[usize],
) -> bool {
    let a = active.len();
    if a == 0 {
        return true;
    }
    let j_aa = DMatrix::from_fn(a, a, |r, c| j[(active[r], active[c])]);
    let g_a = DVector::from_fn(a, |r, _| gamma[active[r]]);
    let basis = orthogonal_complement(&g_a);
    if basis.ncols() == 0 {
        return true;
    }
    let proj = basis.transpose() * &j_aa * &basis;
    let sym = (&proj + proj.transpose()) * 0.5;
    let scale = j_aa.amax().max(f64::MIN_POSITIVE);
    let eig = SymmetricEigen::new(sym);
    eig.eigenvalues.iter().all(|&v| v > 1e-12 * scale)
}

/// Orthonormal basis (as columns) of the complement of `v`.
pub(crate) fn orthogonal_complement(v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    let nrm = v.norm();
    if nrm == 0.0 {
        return DMatrix::identity(n, n);
    }
    let u = v / nrm;
    let proj = DMatrix::identity(n, n) - &u * u.transpose();
    let eig = SymmetricEigen::new(proj);
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > 0.5)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearModel;

    fn orthonormal_design() -> DMatrix<f64> {
        // Columns are orthonormal in R^4.
        let h = 0.5;
        DMatrix::from_row_slice(4, 3, &[h, h, h, h, -h, -h, h, h, -h, h, -h, h])
    }

    #[test]
    fn soft_threshold_ties_go_to_zero() {
        assert_eq!(soft_threshold(1.0, 1.0), 0.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 0.0), 0.5);
    }

    #[test]
    fn unpenalized_orthonormal_is_projection() {
        let x = orthonormal_design();
        let model = LinearModel::new(x.clone()).unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let fit = coordinate_descent(
            &model,
            &y,
            0.0,
            &PenaltyWeights::unit(3),
            &DVector::zeros(3),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert!((fit.beta - x.tr_mul(&y)).amax() < 1e-10);
    }

    #[test]
    fn orthonormal_lasso_is_soft_thresholded() {
        let x = orthonormal_design();
        let model = LinearModel::new(x.clone()).unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let w = DVector::from_vec(vec![1.0, 0.5, 2.0]);
        let lambda = 0.7;
        let fit = coordinate_descent(
            &model,
            &y,
            lambda,
            &PenaltyWeights::new(w.clone()).unwrap(),
            &DVector::zeros(3),
            &SolverConfig::default(),
        )
        .unwrap();
        let xty = x.tr_mul(&y);
        for k in 0..3 {
            assert!((fit.beta[k] - soft_threshold(xty[k], lambda * w[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn armijo_accepts_exact_quadratic_step() {
        // f(δ) = (δ - 1)², f(0) = 1, proposal 1, predicted decrease -1.
        let cfg = SolverConfig::default();
        let step = armijo_backtrack(
            |d| Some(((d - 1.0) * (d - 1.0) - 1.0, ())),
            -1.0,
            1.0,
            0.0,
            &cfg,
        );
        assert_eq!(step.step, 1.0);
        assert_eq!(step.backtracks, 0);
    }

    #[test]
    fn armijo_rejects_increasing_direction() {
        let cfg = SolverConfig::default();
        let step = armijo_backtrack(|d| Some((d.abs(), ())), -1.0, 1.0, 0.0, &cfg);
        assert_eq!(step.step, 0.0);
        assert!(step.payload.is_none());
    }

    #[test]
    fn non_monotone_grid_is_rejected() {
        let model = LinearModel::new(orthonormal_design()).unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let err = lambda_path(
            &model,
            &y,
            &PenaltyWeights::unit(3),
            &[1.0, 2.0],
            &SolverConfig::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn lambda_max_gives_zero_fit() {
        let model = LinearModel::new(orthonormal_design()).unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let w = PenaltyWeights::unit(3);
        let lmax = lambda_max(&model, &y, &w).unwrap();
        let path = lambda_path(&model, &y, &w, &[lmax], &SolverConfig::default()).unwrap();
        assert_eq!(path.fits.len(), 1);
        assert_eq!(path.fits[0].s, 0.0);
        assert!(path.fits[0].active_set.is_empty());
    }

    #[test]
    fn kkt_check_flags_perturbation() {
        let model = LinearModel::new(orthonormal_design()).unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let w = PenaltyWeights::unit(3);
        let mut fit = coordinate_descent(
            &model,
            &y,
            0.3,
            &w,
            &DVector::zeros(3),
            &SolverConfig::default(),
        )
        .unwrap();
        let report = kkt_check(&model, &fit, &y, &w).unwrap();
        assert!(report.residual < 1e-8);
        assert!(report.second_order_ok);
        let k = fit.active_set[0];
        fit.beta[k] += 0.1;
        let report = kkt_check(&model, &fit, &y, &w).unwrap();
        assert!(report.residual > 1e-6);
    }

    #[test]
    fn constrained_solve_hits_target_level() {
        let model = LinearModel::new(orthonormal_design()).unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let w = PenaltyWeights::unit(3);
        let fit = solve_constrained(
            &model,
            &y,
            1.5,
            &w,
            &DVector::zeros(3),
            None,
            &SolverConfig::tight(),
        )
        .unwrap();
        assert!((fit.s - 1.5).abs() < 1e-10, "s = {}", fit.s);
    }

    #[test]
    fn weights_validation() {
        assert!(PenaltyWeights::new(DVector::from_vec(vec![1.0, -1.0])).is_err());
        assert!(PenaltyWeights::adaptive(&DVector::from_vec(vec![0.0, 1.0])).is_err());
        let a = PenaltyWeights::adaptive(&DVector::from_vec(vec![-0.5, 4.0])).unwrap();
        assert_eq!(a.as_vector().as_slice(), &[2.0, 0.25]);
    }

    #[test]
    fn orthogonal_complement_is_orthonormal() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let z = orthogonal_complement(&v);
        assert_eq!(z.ncols(), 2);
        assert!(z.tr_mul(&v).amax() < 1e-12);
        assert!((z.tr_mul(&z) - DMatrix::identity(2, 2)).amax() < 1e-12);
    }
}
