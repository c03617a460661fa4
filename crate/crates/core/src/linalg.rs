//! Dense matrix exponential, principal logarithm and the first and second
//! directional derivatives of `A -> e^A`.
//!
//! Derivatives are read off block-triangular exponentials:
//!
//! ```text
//! exp [[A, F], [0, A]]           = [[e^A, L(A,F)], [0, e^A]]
//! exp [[A, F, 0], [0, A, G], [0, 0, A]] has H(A,F,G) in its (1,3) block
//! ```
//!
//! where `L(A,F) = ∫₀¹ e^{(1-u)A} F e^{uA} du` is the Fréchet derivative and
//! `H(A,F,G) = ∫₀¹∫₀ᵘ e^{(1-u)A} F e^{(u-s)A} G e^{sA} ds du`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense real matrix used for parameters, data, Jacobians and the G/J matrices.
pub type RealMatrix = DMatrix<f64>;

/// Builds a matrix from row-major entries, rejecting non-finite values.
pub fn real_matrix(rows: usize, cols: usize, row_major: &[f64]) -> Result<RealMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(
            "matrix must have positive dimensions".into(),
        ));
    }
    if row_major.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "expected {} entries for a {rows}x{cols} matrix, got {}",
            rows * cols,
            row_major.len()
        )));
    }
    let m = DMatrix::from_row_slice(rows, cols, row_major);
    check_finite(&m, "matrix entries")?;
    Ok(m)
}

pub fn check_finite(m: &RealMatrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_square(a: &RealMatrix, what: &str) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(a.nrows())
}

fn check_same(a: &RealMatrix, f: &RealMatrix, what: &str) -> Result<()> {
    if a.shape() != f.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            f.shape()
        )));
    }
    Ok(())
}

/// The unit matrix `E_kl` of size `d`.
pub fn unit_matrix(d: usize, k: usize, l: usize) -> RealMatrix {
    let mut e = DMatrix::zeros(d, d);
    e[(k, l)] = 1.0;
    e
}

fn norm1(a: &RealMatrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068e0;
const THETA_13: f64 = 5.371920351148152e0;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn pade_low(a: &RealMatrix, b: &[f64]) -> (RealMatrix, RealMatrix) {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let mut u = &ident * b[1];
    let mut v = &ident * b[0];
    let mut pow = ident;
    for j in (2..b.len()).step_by(2) {
        pow = &pow * &a2;
        v += &pow * b[j];
        if j + 1 < b.len() {
            u += &pow * b[j + 1];
        }
    }
    (a * u, v)
}

fn pade_13(a: &RealMatrix) -> (RealMatrix, RealMatrix) {
    let b = &PADE_13;
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = a * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    (u, v)
}

fn pade_solve(u: RealMatrix, v: RealMatrix) -> Result<RealMatrix> {
    let p = &v + &u;
    let q = v - u;
    q.lu().solve(&p).ok_or_else(|| Error::Rank {
        context: "Padé denominator in expm".into(),
        condition: f64::INFINITY,
    })
}

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant (degrees 3, 5, 7, 9 for small norms, 13 otherwise).
pub fn expm(a: &RealMatrix) -> Result<RealMatrix> {
    let n = check_square(a, "expm argument")?;
    check_finite(a, "expm argument")?;
    if n == 0 {
        return Ok(a.clone());
    }
    let nrm = norm1(a);
    for (theta, coeffs) in [
        (THETA_3, &PADE_3[..]),
        (THETA_5, &PADE_5[..]),
        (THETA_7, &PADE_7[..]),
        (THETA_9, &PADE_9[..]),
    ] {
        if nrm <= theta {
            let (u, v) = pade_low(a, coeffs);
            return pade_solve(u, v);
        }
    }
    let s = if nrm > THETA_13 {
        (nrm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(s);
    let (u, v) = pade_13(&scaled);
    let mut r = pade_solve(u, v)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

fn block_upper(blocks: &[&[Option<&RealMatrix>]], d: usize) -> RealMatrix {
    let k = blocks.len();
    let mut m = DMatrix::zeros(k * d, k * d);
    for (bi, row) in blocks.iter().enumerate() {
        for (bj, blk) in row.iter().enumerate() {
            if let Some(b) = blk {
                m.view_mut((bi * d, bj * d), (d, d)).copy_from(*b);
            }
        }
    }
    m
}

/// Returns `(e^A, L(A, F))` from the 2d×2d block exponential.
pub fn expm_frechet(a: &RealMatrix, f: &RealMatrix) -> Result<(RealMatrix, RealMatrix)> {
    let d = check_square(a, "A")?;
    check_same(a, f, "expm_frechet")?;
    let big = block_upper(&[&[Some(a), Some(f)], &[None, Some(a)]], d);
    let e = expm(&big)?;
    Ok((
        e.view((0, 0), (d, d)).into_owned(),
        e.view((0, d), (d, d)).into_owned(),
    ))
}

/// Full 2d×2d block exponential `exp [[A, F], [0, A]]`.
pub fn expm_frechet_block(a: &RealMatrix, f: &RealMatrix) -> Result<RealMatrix> {
    let d = check_square(a, "A")?;
    check_same(a, f, "expm_frechet_block")?;
    expm(&block_upper(&[&[Some(a), Some(f)], &[None, Some(a)]], d))
}

/// Full 3d×3d block exponential `exp [[A, F, 0], [0, A, G], [0, 0, A]]`.
pub fn expm_second_block(a: &RealMatrix, f: &RealMatrix, g: &RealMatrix) -> Result<RealMatrix> {
    let d = check_square(a, "A")?;
    check_same(a, f, "expm_second")?;
    check_same(a, g, "expm_second")?;
    let blocks: [&[Option<&RealMatrix>]; 3] = [
        &[Some(a), Some(f), None],
        &[None, Some(a), Some(g)],
        &[None, None, Some(a)],
    ];
    expm(&block_upper(&blocks, d))
}

/// The iterated integral `H(A, F, G)`, the (1,3) block of the 3d×3d block exponential.
pub fn expm_second(a: &RealMatrix, f: &RealMatrix, g: &RealMatrix) -> Result<RealMatrix> {
    let d = a.nrows();
    let e = expm_second_block(a, f, g)?;
    Ok(e.view((0, 2 * d), (d, d)).into_owned())
}

/// Matrix whose `(k,l)` entry is `tr(∂_kl e^A · M)`, i.e. `L(A, M)ᵀ`.
pub fn grad_trace_expm(a: &RealMatrix, m: &RealMatrix) -> Result<RealMatrix> {
    let (_, l) = expm_frechet(a, m)?;
    Ok(l.transpose())
}

/// Second mixed partial `tr(∂_hr ∂_kl e^A · M)`.
pub fn hess_trace_expm_entry(
    a: &RealMatrix,
    m: &RealMatrix,
    kl: (usize, usize),
    hr: (usize, usize),
) -> Result<f64> {
    let d = check_square(a, "A")?;
    check_same(a, m, "hess_trace_expm_entry")?;
    let (k, l) = kl;
    let (h, r) = hr;
    if k >= d || l >= d || h >= d || r >= d {
        return Err(Error::Index(format!(
            "indices ({k},{l}), ({h},{r}) out of range for dimension {d}"
        )));
    }
    let h_kl = expm_second(a, &unit_matrix(d, k, l), m)?;
    let h_hr = expm_second(a, &unit_matrix(d, h, r), m)?;
    Ok(h_kl[(r, h)] + h_hr[(l, k)])
}

/// Imaginary-part tolerance used to decide that an eigenvalue sits on the
/// closed negative real axis.
pub const LOGM_AXIS_TOL: f64 = 1e-10;

/// Principal matrix logarithm via inverse scaling and squaring.
///
/// Repeated Denman–Beavers square roots bring the argument close to the
/// identity, where the Mercator series of `log(I + X)` converges fast. The
/// result is verified by exponentiating it back.
pub fn logm_principal(a: &RealMatrix) -> Result<RealMatrix> {
    let n = check_square(a, "logm argument")?;
    check_finite(a, "logm argument")?;
    let scale = norm1(a).max(1.0);
    for ev in a.clone().complex_eigenvalues().iter() {
        if ev.im.abs() <= LOGM_AXIS_TOL * scale && ev.re <= LOGM_AXIS_TOL * scale {
            return Err(Error::LogDomain(format!(
                "eigenvalue {:.3e}{:+.3e}i lies on the closed negative real axis",
                ev.re, ev.im
            )));
        }
    }
    let ident = DMatrix::<f64>::identity(n, n);
    let mut root = a.clone();
    let mut squarings = 0i32;
    while norm1(&(&root - &ident)) > 0.1 {
        if squarings >= 60 {
            return Err(Error::LogDomain(
                "square-root iteration did not approach I".into(),
            ));
        }
        root = sqrtm_denman_beavers(&root)?;
        squarings += 1;
    }
    let x = &root - &ident;
    let mut term = x.clone();
    let mut sum = x.clone();
    for j in 2..200 {
        term = &term * &x;
        let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
        let add = &term * (sign / j as f64);
        let small = norm1(&add) <= 1e-18 * norm1(&sum).max(1e-300);
        sum += add;
        if small {
            break;
        }
    }
    let log = sum * 2f64.powi(squarings);
    let back = expm(&log)?;
    let rel = norm1(&(&back - a)) / norm1(a).max(f64::MIN_POSITIVE);
    if !rel.is_finite() || rel > 1e-6 {
        return Err(Error::LogDomain(format!(
            "reconstruction check failed (relative error {rel:.3e})"
        )));
    }
    Ok(log)
}

fn sqrtm_denman_beavers(a: &RealMatrix) -> Result<RealMatrix> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let y_inv = y
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::LogDomain("singular iterate in square-root iteration".into()))?;
        let z_inv = z
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::LogDomain("singular iterate in square-root iteration".into()))?;
        let y_next = (&y + z_inv) * 0.5;
        let z_next = (&z + y_inv) * 0.5;
        let change = norm1(&(&y_next - &y)) / norm1(&y_next).max(f64::MIN_POSITIVE);
        y = y_next;
        z = z_next;
        if change < 1e-15 {
            return Ok(y);
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn max_abs(m: &RealMatrix) -> f64 {
        m.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let z = DMatrix::zeros(3, 3);
        assert_eq!(expm(&z).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn expm_of_diagonal() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.5, -7.25]));
        let e = expm(&a).unwrap();
        assert_relative_eq!(e[(0, 0)], 1.5f64.exp(), max_relative = 1e-14);
        assert_relative_eq!(e[(1, 1)], (-7.25f64).exp(), max_relative = 1e-13);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn expm_rejects_rectangular() {
        assert!(matches!(
            expm(&DMatrix::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn expm_nilpotent_exact() {
        // exp([[0,1],[0,0]]) = [[1,1],[0,1]]
        let a = real_matrix(2, 2, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let e = expm(&a).unwrap();
        assert!(max_abs(&(e - real_matrix(2, 2, &[1.0, 1.0, 0.0, 1.0]).unwrap())) < 1e-15);
    }

    #[test]
    fn expm_large_norm_rotation() {
        // exp(θ [[0,-1],[1,0]]) is a rotation; exercises the squaring branch.
        let theta = 40.0;
        let a = real_matrix(2, 2, &[0.0, -theta, theta, 0.0]).unwrap();
        let e = expm(&a).unwrap();
        assert_relative_eq!(e[(0, 0)], theta.cos(), epsilon = 1e-11);
        assert_relative_eq!(e[(1, 0)], theta.sin(), epsilon = 1e-11);
    }

    #[test]
    fn frechet_at_zero_is_direction() {
        let f = real_matrix(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (e, l) = expm_frechet(&DMatrix::zeros(2, 2), &f).unwrap();
        assert!(max_abs(&(e - DMatrix::identity(2, 2))) < 1e-15);
        assert!(max_abs(&(l - &f)) < 1e-14);
    }

    #[test]
    fn second_at_zero_is_half_product() {
        let f = real_matrix(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = real_matrix(2, 2, &[0.5, -1.0, 2.0, 0.0]).unwrap();
        let h = expm_second(&DMatrix::zeros(2, 2), &f, &g).unwrap();
        assert!(max_abs(&(h - (&f * &g) * 0.5)) < 1e-14);
    }

    #[test]
    fn grad_trace_at_zero_is_transpose() {
        let m = real_matrix(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = grad_trace_expm(&DMatrix::zeros(2, 2), &m).unwrap();
        assert!(max_abs(&(g - m.transpose())) < 1e-14);
        let z = grad_trace_expm(&m, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(max_abs(&z), 0.0);
    }

    #[test]
    fn hess_entry_at_zero_identity_weight() {
        let d = 3;
        let zero = DMatrix::zeros(d, d);
        let ident = DMatrix::identity(d, d);
        for (kl, hr) in [((0, 1), (1, 0)), ((2, 2), (2, 2)), ((0, 2), (1, 1))] {
            let got = hess_trace_expm_entry(&zero, &ident, kl, hr).unwrap();
            let ekl = unit_matrix(d, kl.0, kl.1) * 0.5;
            let ehr = unit_matrix(d, hr.0, hr.1) * 0.5;
            let want = ekl[(hr.1, hr.0)] + ehr[(kl.1, kl.0)];
            assert!((got - want).abs() < 1e-14, "{kl:?} {hr:?}: {got} vs {want}");
        }
    }

    #[test]
    fn hess_entry_rejects_bad_index() {
        let z = DMatrix::zeros(2, 2);
        assert!(matches!(
            hess_trace_expm_entry(&z, &z, (0, 2), (0, 0)),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn logm_identity_and_diagonal() {
        let l = logm_principal(&DMatrix::identity(3, 3)).unwrap();
        assert!(max_abs(&l) < 1e-15);
        let e = std::f64::consts::E;
        let a = real_matrix(2, 2, &[e, 0.0, 0.0, e * e]).unwrap();
        let l = logm_principal(&a).unwrap();
        assert!(max_abs(&(l - real_matrix(2, 2, &[1.0, 0.0, 0.0, 2.0]).unwrap())) < 1e-13);
    }

    #[test]
    fn logm_rejects_negative_eigenvalue() {
        let a = real_matrix(2, 2, &[-1.0, 0.0, 0.0, 2.0]).unwrap();
        assert!(matches!(logm_principal(&a), Err(Error::LogDomain(_))));
        let singular = real_matrix(2, 2, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            logm_principal(&singular),
            Err(Error::LogDomain(_))
        ));
    }

    #[test]
    fn logm_defective_jordan_block() {
        // log([[1,1],[0,1]]) = [[0,1],[0,0]]
        let a = real_matrix(2, 2, &[1.0, 1.0, 0.0, 1.0]).unwrap();
        let l = logm_principal(&a).unwrap();
        assert!(max_abs(&(l - real_matrix(2, 2, &[0.0, 1.0, 0.0, 0.0]).unwrap())) < 1e-13);
    }

    #[test]
    fn real_matrix_rejects_nan() {
        assert!(matches!(
            real_matrix(1, 2, &[1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            real_matrix(2, 2, &[1.0]),
            Err(Error::Dimension(_))
        ));
    }
}
