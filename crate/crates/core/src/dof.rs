//! Divergence formulas for least squares fits, SURE risk estimates, TIC, and
//! closed-form metric projections used as ground truth.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_lr, gamma_ur};

use crate::error::{Error, Result};
use crate::model::Parametrization;
use crate::solver::{kkt_check, FitResult, PenaltyWeights};

/// Matrices with a larger condition estimate are treated as rank deficient.
pub const MAX_CONDITION: f64 = 1e12;

/// Tolerance for detecting points with a non-unique projection.
pub const NON_UNIQUE_TOL: f64 = 1e-12;

fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn guarded_lu(
    m: &DMatrix<f64>,
    context: &str,
) -> Result<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("{context}: matrix is not square")));
    }
    let cond = condition(m);
    if !(cond < MAX_CONDITION) {
        return Err(Error::Rank {
            context: context.to_string(),
            condition: cond,
        });
    }
    Ok(m.clone().lu())
}

fn submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}

/// `tr(J⁻¹G)`, the divergence of an interior least squares fit.
pub fn div_unconstrained(g: &DMatrix<f64>, j: &DMatrix<f64>) -> Result<f64> {
    if g.shape() != j.shape() {
        return Err(Error::Dimension("G and J shapes differ".into()));
    }
    let lu = guarded_lu(j, "J in the unconstrained divergence")?;
    let sol = lu.solve(g).ok_or_else(|| Error::Rank {
        context: "J".into(),
        condition: f64::INFINITY,
    })?;
    Ok(sol.trace())
}

/// Divergence of the ℓ1-constrained fit:
///
/// `tr(J_AA⁻¹G_AA) − γ_Aᵀ J_AA⁻¹ G_AA J_AA⁻¹ γ_A / (γ_Aᵀ J_AA⁻¹ γ_A)`.
///
/// An empty active set gives 0.
pub fn div_l1_constrained(
    g: &DMatrix<f64>,
    j: &DMatrix<f64>,
    gamma: &DVector<f64>,
    active: &[usize],
) -> Result<f64> {
    if g.shape() != j.shape() || g.nrows() != gamma.len() {
        return Err(Error::Dimension("G, J and gamma dimensions differ".into()));
    }
    if active.iter().any(|&k| k >= gamma.len()) {
        return Err(Error::Index("active index out of range".into()));
    }
    if active.is_empty() {
        log::warn!("empty active set: divergence taken as 0");
        return Ok(0.0);
    }
    let g_aa = submatrix(g, active);
    let j_aa = submatrix(j, active);
    let gam = DVector::from_fn(active.len(), |r, _| gamma[active[r]]);
    let lu = guarded_lu(&j_aa, "J restricted to the active set").map_err(|e| match e {
        Error::Rank { condition, .. } => Error::Precondition(format!(
            "J_AA is not of full rank (condition {condition:e})"
        )),
        other => other,
    })?;
    let jinv_g = lu
        .solve(&g_aa)
        .ok_or_else(|| Error::Precondition("J_AA is singular".into()))?;
    let jinv_gam = lu
        .solve(&gam)
        .ok_or_else(|| Error::Precondition("J_AA is singular".into()))?;
    let denom = gam.dot(&jinv_gam);
    if denom.abs() <= 1e-12 {
        return Err(Error::Precondition(format!(
            "γ_Aᵀ J_AA⁻¹ γ_A = {denom:e} vanishes"
        )));
    }
    // γᵀ J⁻¹ G J⁻¹ γ = (J⁻ᵀγ)ᵀ G (J⁻¹γ); J_AA is symmetric.
    let numer = jinv_gam.dot(&(&g_aa * &jinv_gam));
    Ok(jinv_g.trace() - numer / denom)
}

/// Divergence for a penalized fit reported as a constrained fit at `s(λ)`.
///
/// With `require_second_order`, the sufficient second-order conditions are
/// audited first and a failure is reported as a precondition error.
pub fn fit_divergence<M: Parametrization + ?Sized>(
    model: &M,
    fit: &FitResult,
    y: &DVector<f64>,
    weights: &PenaltyWeights,
    require_second_order: bool,
) -> Result<f64> {
    if fit.active_set.is_empty() {
        return Ok(0.0);
    }
    if require_second_order {
        let report = kkt_check(model, fit, y, weights)?;
        if !report.second_order_ok {
            return Err(Error::Precondition(
                "fit does not satisfy the sufficient second-order conditions".into(),
            ));
        }
    }
    let g = model.g_matrix(&fit.beta)?;
    let j = model.j_matrix(&fit.beta, y)?;
    if fit.lambda == 0.0 {
        // The constraint does not bind: an interior fit over the support.
        return div_unconstrained(
            &submatrix(&g, &fit.active_set),
            &submatrix(&j, &fit.active_set),
        );
    }
    let w = weights.as_vector();
    let gamma = DVector::from_fn(fit.beta.len(), |k, _| {
        if fit.beta[k] != 0.0 {
            w[k] * fit.beta[k].signum()
        } else {
            0.0
        }
    });
    div_l1_constrained(&g, &j, &gamma, &fit.active_set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskVariant {
    ExactDivergence,
    ActiveCountMinusOne,
    Tic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub rss: f64,
    pub n: usize,
    pub sigma2: f64,
    pub divergence: f64,
    pub risk_hat: f64,
    pub variant: RiskVariant,
}

/// `RSS − nσ² + 2σ²·divergence`.
pub fn sure_risk(rss: f64, n: usize, sigma2: f64, divergence: f64) -> Result<RiskEstimate> {
    sure_risk_variant(rss, n, sigma2, divergence, RiskVariant::ExactDivergence)
}

pub fn sure_risk_variant(
    rss: f64,
    n: usize,
    sigma2: f64,
    divergence: f64,
    variant: RiskVariant,
) -> Result<RiskEstimate> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Config(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    Ok(RiskEstimate {
        rss,
        n,
        sigma2,
        divergence,
        risk_hat: rss - n as f64 * sigma2 + 2.0 * sigma2 * divergence,
        variant,
    })
}

/// Risk estimate with divergence replaced by `|A| − 1`.
pub fn risk_tilde(rss: f64, n: usize, sigma2: f64, n_active: usize) -> Result<RiskEstimate> {
    sure_risk_variant(
        rss,
        n,
        sigma2,
        n_active as f64 - 1.0,
        RiskVariant::ActiveCountMinusOne,
    )
}

/// Takeuchi's information criterion `RSS + 2σ² tr(J⁻¹G)`.
pub fn tic(rss: f64, sigma2: f64, g: &DMatrix<f64>, j: &DMatrix<f64>) -> Result<f64> {
    Ok(rss + 2.0 * sigma2 * div_unconstrained(g, j)?)
}

/// Sets with a closed-form metric projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnalyticSet {
    /// Union of the two coordinate axes in ℝ².
    TwoAxes,
    /// Closed ℓ2 ball of the given radius around the origin.
    Ball { radius: f64 },
    /// Unit ℓ2 sphere.
    Sphere,
}

impl AnalyticSet {
    pub fn name(&self) -> &'static str {
        match self {
            AnalyticSet::TwoAxes => "two_axes",
            AnalyticSet::Ball { .. } => "ball",
            AnalyticSet::Sphere => "sphere",
        }
    }

    /// Squared distance from `y` to the set.
    pub fn distance_sq(&self, y: &DVector<f64>) -> Result<f64> {
        match *self {
            AnalyticSet::TwoAxes => {
                check_two(y)?;
                Ok(y[0].powi(2).min(y[1].powi(2)))
            }
            AnalyticSet::Ball { radius } => Ok((y.norm() - radius).max(0.0).powi(2)),
            AnalyticSet::Sphere => Ok((y.norm() - 1.0).powi(2)),
        }
    }
}

fn check_two(y: &DVector<f64>) -> Result<()> {
    if y.len() != 2 {
        return Err(Error::Dimension(format!(
            "the two-axes set lives in R^2, got dimension {}",
            y.len()
        )));
    }
    Ok(())
}

/// Metric projection of `y` and the divergence of the projection map at `y`.
pub fn analytic_project(kind: AnalyticSet, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    match kind {
        AnalyticSet::TwoAxes => {
            check_two(y)?;
            let (a, b) = (y[0].abs(), y[1].abs());
            if (a - b).abs() <= NON_UNIQUE_TOL {
                return Err(Error::NonUnique);
            }
            let proj = if a > b {
                DVector::from_vec(vec![y[0], 0.0])
            } else {
                DVector::from_vec(vec![0.0, y[1]])
            };
            Ok((proj, 1.0))
        }
        AnalyticSet::Ball { radius } => {
            if !(radius >= 0.0) {
                return Err(Error::Config("ball radius must be nonnegative".into()));
            }
            let n = y.len() as f64;
            let r = y.norm();
            if r <= radius {
                Ok((y.clone(), n))
            } else {
                Ok((y * (radius / r), radius * (n - 1.0) / r))
            }
        }
        AnalyticSet::Sphere => {
            let r = y.norm();
            if r <= NON_UNIQUE_TOL {
                return Err(Error::NonUnique);
            }
            Ok((y / r, (y.len() as f64 - 1.0) / r))
        }
    }
}

/// Exact degrees of freedom of an analytic projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalyticDf {
    pub df: f64,
    pub df_stein: f64,
}

impl AnalyticDf {
    /// `df − df_S`, the mass contributed by the singular part.
    pub fn gap(&self) -> f64 {
        self.df - self.df_stein
    }
}

/// `E||Y||` for `Y ~ N(0, I_n)`.
pub fn chi_mean(n: usize) -> f64 {
    std::f64::consts::SQRT_2 * gamma((n as f64 + 1.0) / 2.0) / gamma(n as f64 / 2.0)
}

/// Closed-form `(df, df_S)` for `Y ~ N(ξ, σ²I_n)`; only `ξ = 0` is supported,
/// and the two-axes and sphere cases additionally need `σ² = 1`.
pub fn analytic_df(
    kind: AnalyticSet,
    n: usize,
    sigma2: f64,
    xi: &DVector<f64>,
) -> Result<AnalyticDf> {
    if xi.len() != n {
        return Err(Error::Dimension(format!(
            "mean has length {}, expected {n}",
            xi.len()
        )));
    }
    if xi.iter().any(|v| *v != 0.0) {
        return Err(Error::Unsupported(
            "closed forms are only available at ξ = 0".into(),
        ));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Config("sigma2 must be positive".into()));
    }
    let unit_var = (sigma2 - 1.0).abs() < 1e-15;
    match kind {
        AnalyticSet::TwoAxes => {
            if n != 2 || !unit_var {
                return Err(Error::Unsupported(
                    "two-axes df needs n = 2 and σ² = 1".into(),
                ));
            }
            Ok(AnalyticDf {
                df: 1.0 + 2.0 / std::f64::consts::PI,
                df_stein: 1.0,
            })
        }
        AnalyticSet::Sphere => {
            if !unit_var || n == 0 {
                return Err(Error::Unsupported(
                    "sphere df needs σ² = 1 and n ≥ 1".into(),
                ));
            }
            if n == 1 {
                Ok(AnalyticDf {
                    df: (2.0 / std::f64::consts::PI).sqrt(),
                    df_stein: 0.0,
                })
            } else {
                let v = chi_mean(n);
                Ok(AnalyticDf { df: v, df_stein: v })
            }
        }
        AnalyticSet::Ball { radius } => {
            if n == 0 || !(radius >= 0.0) {
                return Err(Error::Unsupported(
                    "ball df needs n ≥ 1 and radius ≥ 0".into(),
                ));
            }
            let sigma = sigma2.sqrt();
            let nf = n as f64;
            let x = radius * radius / (2.0 * sigma2);
            let p_inside = if x == 0.0 { 0.0 } else { gamma_lr(nf / 2.0, x) };
            let outside = if n >= 2 {
                // E[||Y||⁻¹ 1(||Y|| > s)] through the upper incomplete Γ.
                let a = (nf - 1.0) / 2.0;
                let tail = if x == 0.0 { 1.0 } else { gamma_ur(a, x) };
                radius * (nf - 1.0) * gamma(a) / (std::f64::consts::SQRT_2 * gamma(nf / 2.0)) * tail
                    / sigma
            } else {
                0.0
            };
            let df = outside + nf * p_inside;
            Ok(AnalyticDf { df, df_stein: df })
        }
    }
}
