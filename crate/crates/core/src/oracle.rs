//! Independent verification engines: Monte Carlo degrees of freedom from the
//! covariance definition, Monte Carlo Stein degrees of freedom and true risk,
//! central-difference divergences of estimator maps, brute-force multistart
//! projections, and the convex potential `ρ` whose gradient is the projection.

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;

use crate::dof::AnalyticSet;
use crate::error::{Error, Result};
use crate::model::Parametrization;
use crate::par::{map_indexed, Execution};
use crate::rng::{fill_normal, substream};
use crate::solver::{
    local_least_squares, solve_constrained, FitResult, PenaltyWeights, SolverConfig,
};

/// Replications are processed in fixed-size chunks whose partial results are
/// merged in chunk order, independent of thread count.
const CHUNK: usize = 4096;

/// Give up on a replication after this many non-unique draws in a row.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone)]
pub struct McConfig {
    pub replications: usize,
    pub seed: u64,
    pub sigma2: f64,
    pub xi: DVector<f64>,
    pub execution: Execution,
}

impl McConfig {
    pub fn new(replications: usize, seed: u64, sigma2: f64, xi: DVector<f64>) -> Self {
        Self {
            replications,
            seed,
            sigma2,
            xi,
            execution: Execution::default(),
        }
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::Config(
                "at least two replications are required".into(),
            ));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Config("sigma2 must be positive".into()));
        }
        if self.xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mean vector".into()));
        }
        Ok(())
    }
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Draws discarded because the estimator was not uniquely defined there.
    pub redraws: usize,
}

impl McEstimate {
    /// Standard error of a difference of two estimates, treated as independent.
    pub fn combined_stderr(&self, other: &McEstimate) -> f64 {
        self.stderr.hypot(other.stderr)
    }
}

/// Running mean and sum of squared deviations, mergeable (Chan et al.).
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            f64::NAN
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Draws `Y ~ N(ξ, σ²I)` for replication `rep`, redrawing from the same
/// substream while `f` reports a non-unique point.
fn with_draw<T>(
    config: &McConfig,
    rng: &mut ChaCha8Rng,
    f: &(impl Fn(&DVector<f64>) -> Result<T> + Sync),
) -> Result<(DVector<f64>, T, usize)> {
    let n = config.xi.len();
    let sigma = config.sigma2.sqrt();
    let mut z = vec![0.0; n];
    for attempt in 0..=MAX_REDRAWS {
        fill_normal(rng, &mut z);
        let y = DVector::from_fn(n, |i, _| config.xi[i] + sigma * z[i]);
        match f(&y) {
            Ok(v) => return Ok((y, v, attempt)),
            Err(Error::NonUnique) => continue,
            Err(e) => return Err(Error::Oracle(format!("estimator failed on a draw: {e}"))),
        }
    }
    Err(Error::Oracle(
        "too many non-unique draws in one replication".into(),
    ))
}

/// Runs `visit` over all replications in chunk order and merges the partial
/// accumulators in that order.
fn chunked<A, F>(config: &McConfig, purpose: &str, init: A, visit: F) -> Result<(A, usize)>
where
    A: Clone + Send + Sync + Merge,
    F: Fn(&mut A, usize, &mut ChaCha8Rng) -> Result<usize> + Sync + Send,
{
    let reps = config.replications;
    let chunks = reps.div_ceil(CHUNK);
    let partials = map_indexed(chunks, config.execution, |c| -> Result<(A, usize)> {
        let mut acc = init.clone();
        let mut redraws = 0;
        for rep in c * CHUNK..((c + 1) * CHUNK).min(reps) {
            let mut rng = substream(config.seed, purpose, rep as u64);
            redraws += visit(&mut acc, rep, &mut rng)?;
        }
        Ok((acc, redraws))
    });
    let mut total = init;
    let mut redraws = 0;
    for part in partials {
        let (acc, r) = part?;
        total.merge_from(&acc);
        redraws += r;
    }
    Ok((total, redraws))
}

trait Merge {
    fn merge_from(&mut self, other: &Self);
}

impl Merge for Moments {
    fn merge_from(&mut self, other: &Self) {
        self.merge(other);
    }
}

#[derive(Clone)]
struct VecSums(Vec<Moments>);

impl Merge for VecSums {
    fn merge_from(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            a.merge(b);
        }
    }
}

const DRAW_PURPOSE: &str = "mc-draws";

/// Degrees of freedom `(1/σ²) Σ_i cov(Y_i, pr_i(Y))` by Monte Carlo.
///
/// Two passes over the same reproducible draws: the first estimates the
/// means of `Y` and `pr(Y)`, the second averages the centred cross products,
/// whose spread gives the standard error.
pub fn mc_df_covariance(
    projector: impl Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync + Send,
    config: &McConfig,
) -> Result<McEstimate> {
    config.validate()?;
    let n = config.xi.len();
    let (means, redraws) = chunked(
        config,
        DRAW_PURPOSE,
        VecSums(vec![Moments::default(); 2 * n]),
        |acc, _, rng| {
            let (y, pr, r) = with_draw(config, rng, &projector)?;
            if pr.len() != n {
                return Err(Error::Oracle("projector changed the dimension".into()));
            }
            for i in 0..n {
                acc.0[i].push(y[i]);
                acc.0[n + i].push(pr[i]);
            }
            Ok(r)
        },
    )?;
    let ybar: Vec<f64> = means.0[..n].iter().map(|m| m.mean).collect();
    let pbar: Vec<f64> = means.0[n..].iter().map(|m| m.mean).collect();
    let (cross, _) = chunked(config, DRAW_PURPOSE, Moments::default(), |acc, _, rng| {
        let (y, pr, r) = with_draw(config, rng, &projector)?;
        let u: f64 = (0..n).map(|i| (y[i] - ybar[i]) * (pr[i] - pbar[i])).sum();
        acc.push(u / config.sigma2);
        Ok(r)
    })?;
    let reps = config.replications as f64;
    Ok(McEstimate {
        estimate: cross.mean * reps / (reps - 1.0),
        stderr: cross.stderr(),
        redraws,
    })
}

/// Stein degrees of freedom `E[∇·pr(Y)]` by Monte Carlo.
pub fn mc_df_stein(
    divergence: impl Fn(&DVector<f64>) -> Result<f64> + Sync + Send,
    config: &McConfig,
) -> Result<McEstimate> {
    mc_mean(|y| divergence(y), config)
}

/// True risk `E||ξ − est(Y)||²` by Monte Carlo.
pub fn mc_true_risk(
    estimator: impl Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync + Send,
    config: &McConfig,
) -> Result<McEstimate> {
    let xi = config.xi.clone();
    mc_mean(move |y| Ok((&xi - estimator(y)?).norm_squared()), config)
}

/// Monte Carlo mean of a scalar functional of `Y`.
pub fn mc_mean(
    functional: impl Fn(&DVector<f64>) -> Result<f64> + Sync + Send,
    config: &McConfig,
) -> Result<McEstimate> {
    config.validate()?;
    let (m, redraws) = chunked(config, DRAW_PURPOSE, Moments::default(), |acc, _, rng| {
        let (_, v, r) = with_draw(config, rng, &functional)?;
        acc.push(v);
        Ok(r)
    })?;
    Ok(McEstimate {
        estimate: m.mean,
        stderr: m.stderr(),
        redraws,
    })
}

/// Step rule for central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdStep {
    Fixed(f64),
    /// `h_i = h · (1 + |y_i|)`.
    Relative(f64),
}

impl Default for FdStep {
    fn default() -> Self {
        FdStep::Relative(1e-4)
    }
}

/// `Σ_i (f(y + h_i e_i)_i − f(y − h_i e_i)_i) / (2h_i)`.
pub fn fd_divergence(
    fitted_map: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
    y: &DVector<f64>,
    step: FdStep,
) -> Result<f64> {
    let mut total = 0.0;
    let mut probe = y.clone();
    for i in 0..y.len() {
        let h = match step {
            FdStep::Fixed(h) => h,
            FdStep::Relative(h) => h * (1.0 + y[i].abs()),
        };
        probe[i] = y[i] + h;
        let up = fitted_map(&probe).map_err(|e| Error::Oracle(format!("re-solve failed: {e}")))?;
        probe[i] = y[i] - h;
        let down =
            fitted_map(&probe).map_err(|e| Error::Oracle(format!("re-solve failed: {e}")))?;
        probe[i] = y[i];
        if up.len() != y.len() || down.len() != y.len() {
            return Err(Error::Oracle("fitted map changed the dimension".into()));
        }
        total += (up[i] - down[i]) / (2.0 * h);
    }
    Ok(total)
}

/// Best local projection found over all charts.
#[derive(Debug, Clone)]
pub struct NumericProjection {
    pub point: DVector<f64>,
    pub beta: DVector<f64>,
    pub chart: usize,
    pub distance_sq: f64,
}

/// Multistart local minimization of `||y − ζ(β)||²` over one or more charts.
/// Intended for auditing tiny problems (`p ≤ 8` per chart).
pub fn numeric_projection(
    charts: &[&dyn Parametrization],
    y: &DVector<f64>,
    multistart: usize,
    seed: u64,
) -> Result<NumericProjection> {
    if charts.is_empty() {
        return Err(Error::Config("no charts supplied".into()));
    }
    let mut best: Option<NumericProjection> = None;
    for (ci, chart) in charts.iter().enumerate() {
        let p = chart.n_params();
        if p > 8 {
            return Err(Error::Unsupported(format!(
                "numeric projection needs p <= 8, got {p}"
            )));
        }
        if chart.n_obs() != y.len() {
            return Err(Error::Dimension(
                "chart and observation dimensions differ".into(),
            ));
        }
        let mut rng = substream(seed, "numeric-projection", ci as u64);
        for start in 0..multistart.max(1) {
            let mut b0 = vec![0.0; p];
            if start > 0 {
                fill_normal(&mut rng, &mut b0);
            }
            let Ok(fit) = local_least_squares(*chart, y, &DVector::from_vec(b0), 500) else {
                continue;
            };
            if best.as_ref().is_none_or(|b| fit.rss < b.distance_sq) {
                best = Some(NumericProjection {
                    point: chart.eval(&fit.beta)?,
                    beta: fit.beta,
                    chart: ci,
                    distance_sq: fit.rss,
                });
            }
        }
    }
    best.ok_or_else(|| Error::Oracle("all starts failed".into()))
}

/// `ρ(y) = ||y||²/2 − dist(y, K)²/2`.
pub fn rho_eval(kind: AnalyticSet, y: &DVector<f64>) -> Result<f64> {
    Ok(0.5 * y.norm_squared() - 0.5 * kind.distance_sq(y)?)
}

/// Central-difference gradient of `ρ`.
pub fn rho_gradient_fd(kind: AnalyticSet, y: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let mut grad = DVector::zeros(y.len());
    let mut probe = y.clone();
    for i in 0..y.len() {
        probe[i] = y[i] + h;
        let up = rho_eval(kind, &probe)?;
        probe[i] = y[i] - h;
        let down = rho_eval(kind, &probe)?;
        probe[i] = y[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Fitted-value map `y ↦ ζ(β̂_s(y))` of the constrained estimator at the
/// level `s` of `base`, re-solved from `base` and required to keep its
/// active set and sign pattern.
pub fn constrained_fit_map<'a, M: Parametrization + ?Sized>(
    model: &'a M,
    weights: &'a PenaltyWeights,
    base: &'a FitResult,
    config: &'a SolverConfig,
) -> impl Fn(&DVector<f64>) -> Result<DVector<f64>> + 'a {
    move |y: &DVector<f64>| {
        let fit = solve_constrained(
            model,
            y,
            base.s,
            weights,
            &base.beta,
            Some(base.lambda),
            config,
        )?;
        let same_branch = fit.active_set == base.active_set
            && base
                .active_set
                .iter()
                .all(|&k| fit.beta[k].signum() == base.beta[k].signum());
        if !same_branch {
            return Err(Error::Oracle(format!(
                "active set changed under perturbation ({} -> {} active)",
                base.active_set.len(),
                fit.active_set.len()
            )));
        }
        model.eval(&fit.beta)
    }
}

/// Fitted-value map of the unconstrained least squares fit, re-solved from
/// `base_beta` with Levenberg–Marquardt.
pub fn unconstrained_fit_map<'a, M: Parametrization + ?Sized>(
    model: &'a M,
    base_beta: &'a DVector<f64>,
) -> impl Fn(&DVector<f64>) -> Result<DVector<f64>> + 'a {
    move |y: &DVector<f64>| {
        let fit = local_least_squares(model, y, base_beta, 1000)?;
        model.eval(&fit.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dof::analytic_project;
    use crate::model::LinearModel;
    use nalgebra::DMatrix;

    #[test]
    fn moments_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let mut whole = Moments::default();
        xs.iter().for_each(|&x| whole.push(x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..313].iter().for_each(|&x| a.push(x));
        xs[313..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean - whole.mean).abs() < 1e-12);
        assert!((a.m2 - whole.m2).abs() < 1e-8);
    }

    #[test]
    fn identity_projector_has_n_degrees_of_freedom() {
        let cfg = McConfig::new(20_000, 3, 2.0, DVector::from_vec(vec![1.0, -1.0, 0.5]));
        let est = mc_df_covariance(|y| Ok(y.clone()), &cfg).unwrap();
        assert!((est.estimate - 3.0).abs() < 3.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn identity_estimator_risk() {
        let cfg = McConfig::new(20_000, 5, 0.5, DVector::zeros(4));
        let est = mc_true_risk(|y| Ok(y.clone()), &cfg).unwrap();
        assert!((est.estimate - 2.0).abs() < 3.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn results_do_not_depend_on_execution() {
        let base = McConfig::new(10_000, 11, 1.0, DVector::zeros(2));
        let proj = |y: &DVector<f64>| analytic_project(AnalyticSet::TwoAxes, y).map(|p| p.0);
        let a = mc_df_covariance(proj, &base).unwrap();
        let b =
            mc_df_covariance(proj, &base.clone().with_execution(Execution::Sequential)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fd_divergence_of_linear_projection_is_trace() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 2.0, 1.0, -1.0]);
        let hat = &x * (x.tr_mul(&x)).try_inverse().unwrap() * x.transpose();
        let y = DVector::from_vec(vec![0.3, -1.2, 4.0, 2.0]);
        let div = fd_divergence(|v| Ok(&hat * v), &y, FdStep::default()).unwrap();
        assert!((div - 2.0).abs() < 1e-9);
    }

    #[test]
    fn line_projection_is_orthogonal() {
        let dir = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 2.0]);
        let line = LinearModel::new(dir.clone()).unwrap();
        let y = DVector::from_vec(vec![3.0, 0.0, 1.0]);
        let proj = numeric_projection(&[&line], &y, 3, 1).unwrap();
        let u = dir.column(0) / 3.0;
        let want = &u * u.dot(&y);
        assert!((proj.point - want).amax() < 1e-10);
    }

    #[test]
    fn rho_values() {
        let y = DVector::from_vec(vec![0.3, 0.4]);
        let r = rho_eval(AnalyticSet::Sphere, &y).unwrap();
        assert!((r - (0.125 - 0.5 * 0.25)).abs() < 1e-15);
        let r = rho_eval(AnalyticSet::Ball { radius: 1.0 }, &y).unwrap();
        assert!((r - 0.125).abs() < 1e-15);
        let g = rho_gradient_fd(
            AnalyticSet::TwoAxes,
            &DVector::from_vec(vec![3.0, 2.0]),
            1e-6,
        )
        .unwrap();
        assert!((g - DVector::from_vec(vec![3.0, 0.0])).amax() < 1e-5);
    }

    #[test]
    fn too_few_replications_rejected() {
        let cfg = McConfig::new(1, 0, 1.0, DVector::zeros(1));
        assert!(mc_mean(|_| Ok(0.0), &cfg).is_err());
    }
}
