//! Mean-value parametrizations `ζ : ℝ^p → ℝ^n` together with the G and J
//! matrices used by the divergence formulas.
//!
//! For the ODE models the parameter `B` (d×d) is flattened column-major, so
//! flat index `k + d·l` refers to `B[(k, l)]`. Observations `e^{tB}x` (d×m)
//! are flattened the same way.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{check_finite, expm, expm_frechet, expm_second, unit_matrix};

/// A C² map from parameters to mean values.
pub trait Parametrization: Send + Sync {
    /// Parameter dimension `p`.
    fn n_params(&self) -> usize;
    /// Observation dimension `n`.
    fn n_obs(&self) -> usize;

    fn eval(&self, beta: &DVector<f64>) -> Result<DVector<f64>>;

    /// The n×p Jacobian `Dζ(β)`.
    fn jacobian(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Column `k` of the Jacobian, `∂_k ζ(β)`.
    fn jacobian_column(&self, beta: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
        check_index(k, self.n_params())?;
        Ok(self.jacobian(beta)?.column(k).into_owned())
    }

    /// `Dζ(β)ᵀ v`.
    fn jacobian_t_times(&self, beta: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(v, self.n_obs(), "weight vector")?;
        Ok(self.jacobian(beta)?.tr_mul(v))
    }

    /// The symmetric p×p matrix `Σ_i w_i ∂_k ∂_l ζ_i(β)`.
    fn weighted_hessian(&self, beta: &DVector<f64>, w: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// `G = Dζᵀ Dζ`.
    fn g_matrix(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let jac = self.jacobian(beta)?;
        Ok(jac.tr_mul(&jac))
    }

    /// `J = G − Σ_i (y_i − ζ_i) ∂_k ∂_l ζ_i`.
    fn j_matrix(&self, beta: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_len(y, self.n_obs(), "observation vector")?;
        let resid = y - self.eval(beta)?;
        Ok(self.g_matrix(beta)? - self.weighted_hessian(beta, &resid)?)
    }
}

pub(crate) fn check_len(v: &DVector<f64>, want: usize, what: &str) -> Result<()> {
    if v.len() != want {
        return Err(Error::Dimension(format!(
            "{what} has length {}, expected {want}",
            v.len()
        )));
    }
    Ok(())
}

fn check_index(k: usize, p: usize) -> Result<()> {
    if k >= p {
        return Err(Error::Index(format!(
            "parameter index {k} out of range for p = {p}"
        )));
    }
    Ok(())
}

/// `ζ(β) = Xβ`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    design: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(design: DMatrix<f64>) -> Result<Self> {
        if design.nrows() == 0 || design.ncols() == 0 {
            return Err(Error::Dimension("design must be non-empty".into()));
        }
        check_finite(&design, "design matrix")?;
        Ok(Self { design })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }
}

impl Parametrization for LinearModel {
    fn n_params(&self) -> usize {
        self.design.ncols()
    }

    fn n_obs(&self) -> usize {
        self.design.nrows()
    }

    fn eval(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(beta, self.n_params(), "parameter vector")?;
        Ok(&self.design * beta)
    }

    fn jacobian(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_len(beta, self.n_params(), "parameter vector")?;
        Ok(self.design.clone())
    }

    fn jacobian_column(&self, beta: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
        check_len(beta, self.n_params(), "parameter vector")?;
        check_index(k, self.n_params())?;
        Ok(self.design.column(k).into_owned())
    }

    fn weighted_hessian(&self, beta: &DVector<f64>, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_len(beta, self.n_params(), "parameter vector")?;
        check_len(w, self.n_obs(), "weight vector")?;
        Ok(DMatrix::zeros(self.n_params(), self.n_params()))
    }
}

/// Reshapes a column-major flat parameter vector into a d×d matrix.
pub fn beta_to_matrix(beta: &DVector<f64>, d: usize) -> Result<DMatrix<f64>> {
    if beta.len() != d * d {
        return Err(Error::Dimension(format!(
            "parameter vector has length {}, expected {}",
            beta.len(),
            d * d
        )));
    }
    Ok(DMatrix::from_column_slice(d, d, beta.as_slice()))
}

/// Flattens a matrix column-major.
pub fn matrix_to_vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Cross products `yyᵀ` and `xyᵀ` of attached data.
#[derive(Debug, Clone)]
pub struct CrossProducts {
    pub yyt: DMatrix<f64>,
    pub xyt: DMatrix<f64>,
}

/// Isochronal linear-ODE model: `ζ(B) = e^{tB} x` for a common sampling time.
#[derive(Debug, Clone)]
pub struct IsochronalOdeModel {
    t: f64,
    x: DMatrix<f64>,
    xxt: DMatrix<f64>,
    stats: Option<CrossProducts>,
}

impl IsochronalOdeModel {
    /// `x` is d×m, one initial condition per column.
    pub fn new(t: f64, x: DMatrix<f64>) -> Result<Self> {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Config(format!(
                "sampling time must be positive, got {t}"
            )));
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Dimension(
                "initial conditions must be non-empty".into(),
            ));
        }
        check_finite(&x, "initial conditions")?;
        let xxt = &x * x.transpose();
        Ok(Self {
            t,
            x,
            xxt,
            stats: None,
        })
    }

    /// Attaches observations (d×m) and caches their cross products.
    pub fn with_data(mut self, y: &DMatrix<f64>) -> Result<Self> {
        if y.shape() != self.x.shape() {
            return Err(Error::Dimension(format!(
                "observations {:?} do not match initial conditions {:?}",
                y.shape(),
                self.x.shape()
            )));
        }
        check_finite(y, "observations")?;
        self.stats = Some(CrossProducts {
            yyt: y * y.transpose(),
            xyt: &self.x * y.transpose(),
        });
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.x.ncols()
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn initial(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn xxt(&self) -> &DMatrix<f64> {
        &self.xxt
    }

    pub fn cross_products(&self) -> Option<&CrossProducts> {
        self.stats.as_ref()
    }

    fn scaled(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(beta_to_matrix(beta, self.dim())? * self.t)
    }

    /// Reshapes an n-vector into the d×m observation layout.
    pub fn obs_matrix(&self, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_len(v, self.n_obs(), "observation vector")?;
        Ok(DMatrix::from_column_slice(
            self.dim(),
            self.n_samples(),
            v.as_slice(),
        ))
    }

    /// Squared-error loss `||y − e^{tB}x||²` and the gradient of half of it,
    /// both from the cached cross products only.
    pub fn loss_and_gradient(&self, beta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let stats = self
            .stats
            .as_ref()
            .ok_or_else(|| Error::State("no data attached to the ODE model".into()))?;
        let a = self.scaled(beta)?;
        let e = expm(&a)?;
        let loss = stats.yyt.trace() - 2.0 * (&e * &stats.xyt).trace()
            + (e.transpose() * &e * &self.xxt).trace();
        let m = &stats.xyt - &self.xxt * e.transpose();
        let (_, l) = expm_frechet(&a, &m)?;
        let grad = l.transpose() * (-self.t);
        Ok((loss, matrix_to_vec(&grad)))
    }

    /// The p matrices `H(tB, E_kl, M)`, in flat parameter order.
    fn second_blocks(&self, a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let d = self.dim();
        (0..d * d)
            .map(|idx| expm_second(a, &unit_matrix(d, idx % d, idx / d), m))
            .collect()
    }
}

/// Assembles `Σ t² tr(∂_hr ∂_kl e^{A} M)` from precomputed `H(A, E_kl, M)`.
fn assemble_trace_hessian(hs: &[DMatrix<f64>], d: usize, scale: f64, out: &mut DMatrix<f64>) {
    let p = d * d;
    for i in 0..p {
        let (k, l) = (i % d, i / d);
        for j in 0..p {
            let (h, r) = (j % d, j / d);
            out[(i, j)] += scale * (hs[i][(r, h)] + hs[j][(l, k)]);
        }
    }
}

impl Parametrization for IsochronalOdeModel {
    fn n_params(&self) -> usize {
        self.dim() * self.dim()
    }

    fn n_obs(&self) -> usize {
        self.dim() * self.n_samples()
    }

    fn eval(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        let e = expm(&self.scaled(beta)?)?;
        Ok(matrix_to_vec(&(e * &self.x)))
    }

    fn jacobian(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let p = self.n_params();
        let mut jac = DMatrix::zeros(self.n_obs(), p);
        for k in 0..p {
            jac.set_column(k, &self.jacobian_column(beta, k)?);
        }
        Ok(jac)
    }

    fn jacobian_column(&self, beta: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
        check_index(k, self.n_params())?;
        let d = self.dim();
        let a = self.scaled(beta)?;
        let (_, l) = expm_frechet(&a, &unit_matrix(d, k % d, k / d))?;
        Ok(matrix_to_vec(&(l * &self.x * self.t)))
    }

    fn jacobian_t_times(&self, beta: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        let w = self.obs_matrix(v)?;
        let a = self.scaled(beta)?;
        let m = &self.x * w.transpose();
        let (_, l) = expm_frechet(&a, &m)?;
        Ok(matrix_to_vec(&(l.transpose() * self.t)))
    }

    fn weighted_hessian(&self, beta: &DVector<f64>, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        let wm = self.obs_matrix(w)?;
        let a = self.scaled(beta)?;
        let m = &self.x * wm.transpose();
        let hs = self.second_blocks(&a, &m)?;
        let p = self.n_params();
        let mut out = DMatrix::zeros(p, p);
        assemble_trace_hessian(&hs, self.dim(), self.t * self.t, &mut out);
        Ok(out)
    }

    /// Column `(h,r)` is `t² L(tBᵀ, L(tB, E_hr) xxᵀ)` read at `(k,l)`.
    fn g_matrix(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let p = self.n_params();
        let a = self.scaled(beta)?;
        let at = a.transpose();
        let mut g = DMatrix::zeros(p, p);
        for j in 0..p {
            let (_, l1) = expm_frechet(&a, &unit_matrix(d, j % d, j / d))?;
            let (_, l2) = expm_frechet(&at, &(l1 * &self.xxt))?;
            for i in 0..p {
                g[(i, j)] = self.t * self.t * l2[(i % d, i / d)];
            }
        }
        // Symmetrize away rounding asymmetry.
        Ok((&g + g.transpose()) * 0.5)
    }
}

/// Linear-ODE model with per-observation sampling times:
/// `ζ(B) = (e^{t₁B}x₁, …, e^{t_mB}x_m)`.
#[derive(Debug, Clone)]
pub struct MultiTimeOdeModel {
    times: Vec<f64>,
    x: DMatrix<f64>,
}

impl MultiTimeOdeModel {
    pub fn new(times: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        if times.len() != x.ncols() {
            return Err(Error::Dimension(format!(
                "{} sampling times for {} initial conditions",
                times.len(),
                x.ncols()
            )));
        }
        if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("sampling times must be positive".into()));
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Dimension(
                "initial conditions must be non-empty".into(),
            ));
        }
        check_finite(&x, "initial conditions")?;
        Ok(Self { times, x })
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    fn check_beta(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        beta_to_matrix(beta, self.dim())
    }
}

impl Parametrization for MultiTimeOdeModel {
    fn n_params(&self) -> usize {
        self.dim() * self.dim()
    }

    fn n_obs(&self) -> usize {
        self.dim() * self.times.len()
    }

    fn eval(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        let b = self.check_beta(beta)?;
        let d = self.dim();
        let mut out = DVector::zeros(self.n_obs());
        for (i, &t) in self.times.iter().enumerate() {
            let v = expm(&(&b * t))? * self.x.column(i);
            out.rows_mut(i * d, d).copy_from(&v);
        }
        Ok(out)
    }

    fn jacobian(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let b = self.check_beta(beta)?;
        let d = self.dim();
        let p = self.n_params();
        let mut jac = DMatrix::zeros(self.n_obs(), p);
        for (i, &t) in self.times.iter().enumerate() {
            let a = &b * t;
            for k in 0..p {
                let (_, l) = expm_frechet(&a, &unit_matrix(d, k % d, k / d))?;
                let col = l * self.x.column(i) * t;
                jac.view_mut((i * d, k), (d, 1)).copy_from(&col);
            }
        }
        Ok(jac)
    }

    fn weighted_hessian(&self, beta: &DVector<f64>, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        let b = self.check_beta(beta)?;
        check_len(w, self.n_obs(), "weight vector")?;
        let d = self.dim();
        let p = self.n_params();
        let mut out = DMatrix::zeros(p, p);
        for (i, &t) in self.times.iter().enumerate() {
            let a = &b * t;
            let wi = w.rows(i * d, d);
            let m = self.x.column(i) * wi.transpose();
            let hs = (0..p)
                .map(|idx| expm_second(&a, &unit_matrix(d, idx % d, idx / d), &m))
                .collect::<Result<Vec<_>>>()?;
            assemble_trace_hessian(&hs, d, t * t, &mut out);
        }
        Ok(out)
    }
}
