//! Small dense complex linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;

pub const J: C64 = C64 { re: 0.0, im: 1.0 };

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Jitter scale added to the diagonal when a Hermitian system is badly conditioned.
pub const JITTER: f64 = 1e-12;
pub const COND_LIMIT: f64 = 1e12;

/// Inverse of a Hermitian positive-definite matrix.
///
/// The condition number is estimated from the Cholesky diagonal; above
/// `COND_LIMIT` (or on factorization failure) `JITTER * trace` is added to the
/// diagonal and the factorization retried.
pub fn hpd_inverse(a: &CMat) -> Result<CMat> {
    let chol = hpd_cholesky(a)?;
    Ok(inverse_from_l_inv(&chol_l_inverse(&chol)))
}

pub fn hpd_cholesky(a: &CMat) -> Result<Cholesky<C64, Dyn>> {
    let n = a.nrows();
    if n == 0 {
        return Cholesky::new(a.clone()).ok_or_else(|| Error::Numerical("empty system".into()));
    }
    if let Some(ch) = Cholesky::new(a.clone()) {
        if cond_estimate(&ch) <= COND_LIMIT {
            return Ok(ch);
        }
    }
    let tr: f64 = (0..n).map(|i| a[(i, i)].re).sum();
    if !tr.is_finite() {
        return Err(Error::Numerical("non-finite normal matrix".into()));
    }
    let mut b = a.clone();
    for i in 0..n {
        b[(i, i)] += C64::new(JITTER * tr, 0.0);
    }
    Cholesky::new(b).ok_or_else(|| Error::Numerical("normal matrix not positive definite after jitter".into()))
}

/// L⁻¹ for the lower Cholesky factor, by forward substitution.
pub fn chol_l_inverse(ch: &Cholesky<C64, Dyn>) -> CMat {
    let l = ch.l_dirty();
    let n = l.nrows();
    let mut x = CMat::zeros(n, n);
    for j in 0..n {
        x[(j, j)] = C64::new(1.0 / l[(j, j)].re, 0.0);
        for i in j + 1..n {
            let mut s = C64::new(0.0, 0.0);
            for k in j..i {
                s += l[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = -s / l[(i, i)].re;
        }
    }
    x
}

/// diag((LL^H)⁻¹) from L⁻¹: entry i is the squared norm of column i.
pub fn inverse_diag(l_inv: &CMat) -> Vec<f64> {
    (0..l_inv.ncols()).map(|i| l_inv.view((i, i), (l_inv.nrows() - i, 1)).norm_squared()).collect()
}

/// (LL^H)⁻¹ = L^{-H} L⁻¹, exploiting the triangular zeros.
pub fn inverse_from_l_inv(l_inv: &CMat) -> CMat {
    let n = l_inv.nrows();
    let mut out = CMat::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let mut s = C64::new(0.0, 0.0);
            for k in i..n {
                s += l_inv[(k, i)].conj() * l_inv[(k, j)];
            }
            out[(i, j)] = s;
            out[(j, i)] = s.conj();
        }
    }
    out
}

fn cond_estimate(ch: &Cholesky<C64, Dyn>) -> f64 {
    let l = ch.l_dirty();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..l.nrows() {
        let d = l[(i, i)].re;
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).powi(2)
    }
}

/// Column-wise Khatri-Rao product: column q is `a[:,q] ⊗ b[:,q]`.
pub fn khatri_rao(a: &CMat, b: &CMat) -> Result<CMat> {
    if a.ncols() != b.ncols() {
        return Err(Error::Assembly(format!(
            "Khatri-Rao column mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let (ra, rb) = (a.nrows(), b.nrows());
    let mut out = CMat::zeros(ra * rb, a.ncols());
    for q in 0..a.ncols() {
        for i in 0..ra {
            let ai = a[(i, q)];
            for k in 0..rb {
                out[(i * rb + k, q)] = ai * b[(k, q)];
            }
        }
    }
    Ok(out)
}

/// `1_t ⊗ a`: the matrix `a` stacked `t` times vertically.
pub fn repeat_rows(a: &CMat, t: usize) -> CMat {
    let r = a.nrows();
    let mut out = CMat::zeros(r * t, a.ncols());
    for k in 0..t {
        out.view_mut((k * r, 0), (r, a.ncols())).copy_from(a);
    }
    out
}

pub fn vstack(parts: &[&CMat]) -> CMat {
    let cols = parts.iter().map(|m| m.ncols()).max().unwrap_or(0);
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let mut out = CMat::zeros(rows, cols);
    let mut r0 = 0;
    for m in parts {
        out.view_mut((r0, 0), (m.nrows(), m.ncols())).copy_from(*m);
        r0 += m.nrows();
    }
    out
}

pub fn vcat(parts: &[&CVec]) -> CVec {
    let n: usize = parts.iter().map(|v| v.len()).sum();
    let mut out = CVec::zeros(n);
    let mut i0 = 0;
    for v in parts {
        out.rows_mut(i0, v.len()).copy_from(*v);
        i0 += v.len();
    }
    out
}

pub fn block_diag(parts: &[&CMat]) -> CMat {
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let cols: usize = parts.iter().map(|m| m.ncols()).sum();
    let mut out = CMat::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for m in parts {
        out.view_mut((r0, c0), (m.nrows(), m.ncols())).copy_from(*m);
        r0 += m.nrows();
        c0 += m.ncols();
    }
    out
}

pub fn norm2(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Real part of the trace of `a * b` without forming the product.
pub fn trace_prod_re(a: &CMat, b: &CMat) -> f64 {
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            s += (a[(i, k)] * b[(k, i)]).re;
        }
    }
    s
}

pub fn max_abs_diff(a: &CVec, b: &CVec) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn khatri_rao_matches_kron_columns() {
        let a = CMat::from_fn(2, 3, |i, j| c(i as f64 + 1.0, j as f64));
        let b = CMat::from_fn(3, 3, |i, j| c(j as f64, -(i as f64)));
        let kr = khatri_rao(&a, &b).unwrap();
        for q in 0..3 {
            let kron = a.column(q).kronecker(&b.column(q));
            for i in 0..6 {
                assert!((kr[(i, q)] - kron[i]).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn jittered_inverse_of_singular_matrix_is_finite() {
        let v = CVec::from_vec(vec![c(1.0, 0.0), c(0.0, 1.0)]);
        let a = &v * v.adjoint();
        let inv = hpd_inverse(&a).unwrap();
        assert!(inv.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
    }

    #[test]
    fn triangular_inverse_matches_nalgebra() {
        let b = CMat::from_fn(7, 7, |i, j| c((i * 3 + j) as f64 % 5.0 - 2.0, (i as f64 - j as f64) * 0.3));
        let a = &b * b.adjoint() + CMat::identity(7, 7);
        let ch = hpd_cholesky(&a).unwrap();
        let want = ch.inverse();
        let li = chol_l_inverse(&ch);
        assert!((inverse_from_l_inv(&li) - &want).norm() < 1e-12 * want.norm());
        for (i, d) in inverse_diag(&li).iter().enumerate() {
            assert!((d - want[(i, i)].re).abs() < 1e-12);
        }
    }
}
