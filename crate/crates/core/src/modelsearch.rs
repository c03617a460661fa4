//! Greedy forward stepwise search over sparsity patterns.
//!
//! Each step screens every inactive coordinate with a single Gauss-Newton
//! coordinate step, adds the one with the largest predicted decrease in
//! squared error, and refits all pattern coordinates without penalty.

use nalgebra::{DMatrix, DVector};

use crate::dof::div_unconstrained;
use crate::error::{Error, Result};
use crate::model::{check_len, Parametrization};
use crate::par::{map_indexed, Execution};
use crate::solver::{
    coordinate_descent_masked, kkt_parts, local_least_squares, FitResult, PenaltyWeights,
    SolverConfig, FLAT_DIRECTION,
};

/// Coordinate descent sweeps spent on a refit before switching to
/// Levenberg–Marquardt on the pattern coordinates.
pub const REFIT_SWEEPS: usize = 500;

/// One point on the search trajectory.
#[derive(Debug, Clone)]
pub struct SearchState {
    /// Sorted flat indices allowed to be nonzero.
    pub pattern: Vec<usize>,
    pub fit: FitResult,
    /// `(added index, rss after refit)` for every step so far.
    pub step_history: Vec<(usize, f64)>,
}

impl SearchState {
    pub fn size(&self) -> usize {
        self.pattern.len()
    }
}

/// Flat (column-major) indices of the diagonal of a d×d matrix.
pub fn diagonal_pattern(d: usize) -> Vec<usize> {
    (0..d).map(|k| k + d * k).collect()
}

/// `ζ` restricted to the coordinates in `idx`, the others held at zero.
pub struct Restricted<'a, M: ?Sized> {
    model: &'a M,
    idx: Vec<usize>,
}

impl<'a, M: Parametrization + ?Sized> Restricted<'a, M> {
    pub fn new(model: &'a M, idx: &[usize]) -> Self {
        Self {
            model,
            idx: idx.to_vec(),
        }
    }

    pub fn embed(&self, sub: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(self.model.n_params());
        for (i, &k) in self.idx.iter().enumerate() {
            full[k] = sub[i];
        }
        full
    }

    pub fn project(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.idx.len(), |i, _| full[self.idx[i]])
    }
}

impl<M: Parametrization + ?Sized> Parametrization for Restricted<'_, M> {
    fn n_params(&self) -> usize {
        self.idx.len()
    }

    fn n_obs(&self) -> usize {
        self.model.n_obs()
    }

    fn eval(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(beta, self.idx.len(), "restricted parameter vector")?;
        self.model.eval(&self.embed(beta))
    }

    fn jacobian(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_len(beta, self.idx.len(), "restricted parameter vector")?;
        let full = self.embed(beta);
        let mut jac = DMatrix::zeros(self.model.n_obs(), self.idx.len());
        for (i, &k) in self.idx.iter().enumerate() {
            jac.set_column(i, &self.model.jacobian_column(&full, k)?);
        }
        Ok(jac)
    }

    fn weighted_hessian(&self, beta: &DVector<f64>, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        let h = self.model.weighted_hessian(&self.embed(beta), w)?;
        Ok(restrict(&h, &self.idx))
    }
}

/// Unpenalized fit over `pattern`: capped coordinate descent, then
/// Levenberg–Marquardt if the sweeps did not reach the tolerances.
fn refit<M: Parametrization + ?Sized>(
    model: &M,
    y: &DVector<f64>,
    pattern: &[usize],
    start: &DVector<f64>,
    config: &SolverConfig,
) -> Result<FitResult> {
    let p = model.n_params();
    let mut free = vec![false; p];
    for &k in pattern {
        free[k] = true;
    }
    let mut beta0 = start.clone();
    for k in 0..p {
        if !free[k] {
            beta0[k] = 0.0;
        }
    }
    let weights = PenaltyWeights::unit(p);
    let capped = SolverConfig {
        max_sweeps: config.max_sweeps.min(REFIT_SWEEPS),
        ..config.clone()
    };
    let mut fit = coordinate_descent_masked(model, y, 0.0, &weights, &beta0, Some(&free), &capped)?;
    if fit.converged || pattern.is_empty() {
        return Ok(fit);
    }
    let sub = Restricted::new(model, pattern);
    let polished = local_least_squares(&sub, y, &sub.project(&fit.beta), 1000)?;
    if polished.rss <= fit.rss {
        fit.beta = sub.embed(&polished.beta);
        let resid = y - model.eval(&fit.beta)?;
        fit.rss = resid.norm_squared();
        fit.objective = 0.5 * fit.rss;
        let grad = model.jacobian_t_times(&fit.beta, &resid)?;
        let (kkt, gamma) = kkt_parts(&grad, &fit.beta, 0.0, &weights, Some(&free));
        fit.kkt_residual = kkt;
        fit.gamma = gamma;
        fit.active_set = (0..p).filter(|&k| fit.beta[k] != 0.0).collect();
        fit.s = weights.l1(&fit.beta);
        fit.converged = kkt <= config.kkt_tol;
    }
    Ok(fit)
}

/// Predicted decrease `(Dζ_kᵀ r)² / ||Dζ_k||²` of a single Gauss-Newton step
/// in coordinate `k`; flat directions score zero.
fn screening_scores<M: Parametrization + ?Sized>(
    model: &M,
    beta: &DVector<f64>,
    resid: &DVector<f64>,
    candidates: &[usize],
    exec: Execution,
) -> Result<Vec<f64>> {
    let corr = model.jacobian_t_times(beta, resid)?;
    map_indexed(candidates.len(), exec, |i| {
        let k = candidates[i];
        let curv = model.jacobian_column(beta, k)?.norm_squared();
        Ok(if curv < FLAT_DIRECTION {
            0.0
        } else {
            corr[k] * corr[k] / curv
        })
    })
    .into_iter()
    .collect()
}

/// Forward stepwise search from `initial_pattern` until the pattern holds
/// `max_nonzero` indices. Returns the whole trajectory, starting with the
/// refit on the initial pattern.
///
/// A refit that fails to converge is kept on the trajectory (with
/// `fit.converged == false`), and the next step restarts from the last
/// converged coefficients.
pub fn forward_stepwise<M: Parametrization + ?Sized>(
    model: &M,
    y: &DVector<f64>,
    initial_pattern: &[usize],
    max_nonzero: usize,
    config: &SolverConfig,
    exec: Execution,
) -> Result<Vec<SearchState>> {
    let p = model.n_params();
    check_len(y, model.n_obs(), "observation vector")?;
    if max_nonzero > p {
        return Err(Error::Config(format!(
            "max_nonzero {max_nonzero} exceeds p = {p}"
        )));
    }
    let mut pattern: Vec<usize> = initial_pattern.to_vec();
    pattern.sort_unstable();
    pattern.dedup();
    if pattern.iter().any(|&k| k >= p) {
        return Err(Error::Index(format!(
            "initial pattern index out of range for p = {p}"
        )));
    }
    if pattern.len() > max_nonzero {
        return Err(Error::Config(
            "initial pattern is larger than max_nonzero".into(),
        ));
    }

    let fit = refit(model, y, &pattern, &DVector::zeros(p), config)?;
    let mut good_beta = if fit.converged {
        fit.beta.clone()
    } else {
        DVector::zeros(p)
    };
    let mut states = vec![SearchState {
        pattern: pattern.clone(),
        fit,
        step_history: Vec::new(),
    }];

    while pattern.len() < max_nonzero {
        let current = &states.last().expect("trajectory is never empty").fit;
        let candidates: Vec<usize> = (0..p)
            .filter(|k| pattern.binary_search(k).is_err())
            .collect();
        let resid = y - model.eval(&current.beta)?;
        let scores = screening_scores(model, &current.beta, &resid, &candidates, exec)?;
        // Strict comparison keeps the lowest index on ties.
        let mut best = 0;
        for i in 1..candidates.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        let added = candidates[best];
        let pos = pattern.binary_search(&added).unwrap_err();
        pattern.insert(pos, added);

        let fit = refit(model, y, &pattern, &good_beta, config)?;
        if fit.converged {
            good_beta = fit.beta.clone();
        } else {
            log::warn!(
                "stepwise refit with {} indices did not converge",
                pattern.len()
            );
        }
        let mut history = states
            .last()
            .expect("trajectory is never empty")
            .step_history
            .clone();
        history.push((added, fit.rss));
        states.push(SearchState {
            pattern: pattern.clone(),
            fit,
            step_history: history,
        });
    }
    Ok(states)
}

/// Degrees of freedom of a search state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchDf {
    /// `tr(J_PP⁻¹ G_PP)` over the pattern, or the count on fallback.
    pub df_thm3: f64,
    pub df_count: f64,
    /// The restricted J was singular and `df_thm3` fell back to the count.
    pub fell_back: bool,
}

fn restrict(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}

pub fn search_df<M: Parametrization + ?Sized>(
    state: &SearchState,
    model: &M,
    y: &DVector<f64>,
) -> Result<SearchDf> {
    let df_count = state.pattern.len() as f64;
    if state.pattern.is_empty() {
        return Ok(SearchDf {
            df_thm3: 0.0,
            df_count,
            fell_back: false,
        });
    }
    let g = restrict(&model.g_matrix(&state.fit.beta)?, &state.pattern);
    let j = restrict(&model.j_matrix(&state.fit.beta, y)?, &state.pattern);
    match div_unconstrained(&g, &j) {
        Ok(df) => Ok(SearchDf {
            df_thm3: df,
            df_count,
            fell_back: false,
        }),
        Err(Error::Rank { .. }) => {
            log::warn!("restricted J is singular; using the pattern size as df");
            Ok(SearchDf {
                df_thm3: df_count,
                df_count,
                fell_back: true,
            })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearModel;

    fn orthogonal_design() -> DMatrix<f64> {
        // Columns are orthogonal with different norms.
        DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 2.0, 0.0, 1.0, -2.0, 0.0, 1.0, 0.0, 3.0, 1.0, 0.0, -3.0],
        )
    }

    #[test]
    fn orthogonal_greedy_order() {
        let x = orthogonal_design();
        let model = LinearModel::new(x.clone()).unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0, 0.5, -4.0]);
        let states = forward_stepwise(
            &model,
            &y,
            &[],
            3,
            &SolverConfig::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(states.len(), 4);
        // Decrease from adding k alone is (x_kᵀy)² / ||x_k||².
        let xty = x.tr_mul(&y);
        let mut gains: Vec<(usize, f64)> = (0..3)
            .map(|k| (k, xty[k].powi(2) / x.column(k).norm_squared()))
            .collect();
        gains.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let order: Vec<usize> = states[1..]
            .iter()
            .map(|s| *s.step_history.last().map(|(k, _)| k).unwrap())
            .collect();
        assert_eq!(order, gains.iter().map(|g| g.0).collect::<Vec<_>>());
        for w in states.windows(2) {
            assert!(w[1].fit.rss <= w[0].fit.rss + 1e-12);
            assert_eq!(w[1].size(), w[0].size() + 1);
        }
    }

    #[test]
    fn no_additions_gives_single_state() {
        let model = LinearModel::new(orthogonal_design()).unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0, 0.5, -4.0]);
        let states = forward_stepwise(
            &model,
            &y,
            &[1],
            1,
            &SolverConfig::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].pattern, vec![1]);
    }

    #[test]
    fn linear_search_df_is_pattern_size() {
        let model = LinearModel::new(orthogonal_design()).unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0, 0.5, -4.0]);
        let states = forward_stepwise(
            &model,
            &y,
            &[],
            2,
            &SolverConfig::default(),
            Execution::Parallel,
        )
        .unwrap();
        let df = search_df(&states[2], &model, &y).unwrap();
        assert!((df.df_thm3 - 2.0).abs() < 1e-10);
        assert_eq!(df.df_count, 2.0);
        assert!(!df.fell_back);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let model = LinearModel::new(DMatrix::identity(3, 3)).unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0, 2.0]);
        let states = forward_stepwise(
            &model,
            &y,
            &[],
            1,
            &SolverConfig::default(),
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(states[1].pattern, vec![1]);
    }

    #[test]
    fn oversized_request_rejected() {
        let model = LinearModel::new(DMatrix::identity(2, 2)).unwrap();
        let y = DVector::zeros(2);
        assert!(forward_stepwise(
            &model,
            &y,
            &[],
            3,
            &SolverConfig::default(),
            Execution::Sequential
        )
        .is_err());
    }

    #[test]
    fn diagonal_indices() {
        assert_eq!(diagonal_pattern(3), vec![0, 4, 8]);
    }
}
