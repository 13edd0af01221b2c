//! Dense linear-algebra kernels: Moore–Penrose inverse, SVD rank, row-space
//! bases, Hurwitz and PBH tests, and a sign-function Riccati solver.

use nalgebra::{DMatrix, Schur, SVD};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type CMatrix = DMatrix<Complex64>;

/// Outcome of a tolerance-based rank decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub tolerance_used: f64,
}

impl RankResult {
    /// Smallest retained and largest discarded singular value.
    pub fn gap(&self) -> (Option<f64>, Option<f64>) {
        let kept = self.rank.checked_sub(1).map(|i| self.singular_values[i]);
        let dropped = self.singular_values.get(self.rank).copied();
        (kept, dropped)
    }
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}

/// Singular values in descending order; empty for a matrix with no rows or columns.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn default_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    let scale = rows.max(cols).max(1) as f64 * f64::EPSILON;
    if sigma_max > 0.0 {
        scale * sigma_max
    } else {
        scale
    }
}

pub fn rank_of(m: &Matrix, tol: Option<f64>) -> Result<RankResult> {
    ensure_finite(m, "matrix")?;
    if let Some(t) = tol {
        if t.is_nan() || t <= 0.0 {
            return Err(Error::InvalidTolerance(t));
        }
    }
    let singular_values = singular_values(m);
    let smax = singular_values.first().copied().unwrap_or(0.0);
    let tolerance_used = tol.unwrap_or_else(|| default_tolerance(m.nrows(), m.ncols(), smax));
    let rank = singular_values.iter().filter(|&&s| s > tolerance_used).count();
    Ok(RankResult {
        rank,
        singular_values,
        tolerance_used,
    })
}

/// Shorthand for the default-tolerance rank of a matrix known to be finite.
pub fn rank(m: &Matrix) -> usize {
    rank_of(m, None).map(|r| r.rank).unwrap_or(0)
}

fn svd(m: &Matrix) -> SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    m.clone().svd(true, true)
}

/// Moore–Penrose pseudoinverse.
pub fn pinv(m: &Matrix) -> Result<Matrix> {
    ensure_finite(m, "matrix")?;
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Ok(Matrix::zeros(c, r));
    }
    let d = svd(m);
    let u = d.u.as_ref().expect("u requested");
    let vt = d.v_t.as_ref().expect("v_t requested");
    let smax = d.singular_values.max();
    let tol = default_tolerance(r, c, smax);
    let mut out = Matrix::zeros(c, r);
    for (k, &s) in d.singular_values.iter().enumerate() {
        if s > tol {
            out += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    Ok(out)
}

/// Orthonormal basis of the row space, one basis vector per row.
pub fn row_space_basis(m: &Matrix) -> Result<Matrix> {
    ensure_finite(m, "matrix")?;
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Ok(Matrix::zeros(0, c));
    }
    let d = svd(m);
    let vt = d.v_t.as_ref().expect("v_t requested");
    let smax = d.singular_values.max();
    let tol = default_tolerance(r, c, smax);
    let mut idx: Vec<usize> = (0..d.singular_values.len())
        .filter(|&k| d.singular_values[k] > tol)
        .collect();
    idx.sort_by(|&a, &b| d.singular_values[b].total_cmp(&d.singular_values[a]));
    let mut basis = Matrix::zeros(idx.len(), c);
    for (i, &k) in idx.iter().enumerate() {
        let mut row = vt.row(k).clone_owned();
        // deterministic sign: first significant entry positive
        if let Some(p) = row.iter().find(|x| x.abs() > 1e-12) {
            if *p < 0.0 {
                row = -row;
            }
        }
        basis.row_mut(i).copy_from(&row);
    }
    Ok(basis)
}

pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!(
            "eigenvalues need a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure_finite(m, "matrix")?;
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Convergence("Schur decomposition did not converge".into()))?;
    let mut ev: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(ev)
}

pub fn spectral_abscissa(m: &Matrix) -> Result<f64> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// True when every eigenvalue has real part below `-margin`.
pub fn is_hurwitz(m: &Matrix, margin: f64) -> Result<bool> {
    Ok(eigenvalues(m)?.iter().all(|z| z.re < -margin))
}

pub fn complex_rank(m: &CMatrix) -> usize {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return 0;
    }
    let s = m.clone().singular_values();
    let smax = s.max();
    let tol = default_tolerance(r, c, smax);
    s.iter().filter(|&&x| x > tol).count()
}

/// stack(λI − n1; n2) as a complex matrix.
pub fn pencil(n1: &Matrix, n2: &Matrix, lambda: Complex64) -> CMatrix {
    let l = n1.nrows();
    let mut out = CMatrix::zeros(l + n2.nrows(), l);
    for i in 0..l {
        for j in 0..l {
            let d = if i == j { lambda } else { Complex64::new(0.0, 0.0) };
            out[(i, j)] = d - n1[(i, j)];
        }
    }
    for i in 0..n2.nrows() {
        for j in 0..l {
            out[(l + i, j)] = Complex64::new(n2[(i, j)], 0.0);
        }
    }
    out
}

/// PBH detectability of the pair (n1, n2).
pub fn pbh_detectable(n1: &Matrix, n2: &Matrix) -> Result<bool> {
    let l = n1.nrows();
    if n1.ncols() != l {
        return Err(Error::Shape(format!("n1 must be square, got {}x{}", l, n1.ncols())));
    }
    if n2.ncols() != l {
        return Err(Error::Shape(format!(
            "n2 must have {} columns, got {}",
            l,
            n2.ncols()
        )));
    }
    Ok(unobservable_unstable_modes(n1, n2)?.is_empty())
}

/// Eigenvalues of n1 in the closed right half-plane where the PBH rank drops.
pub fn unobservable_unstable_modes(n1: &Matrix, n2: &Matrix) -> Result<Vec<Complex64>> {
    let l = n1.nrows();
    Ok(eigenvalues(n1)?
        .into_iter()
        .filter(|z| z.re >= 0.0)
        .filter(|&z| complex_rank(&pencil(n1, n2, z)) < l)
        .collect())
}

/// Vertical concatenation; all parts must share a column count.
pub fn vstack(parts: &[&Matrix]) -> Matrix {
    let cols = parts.first().map_or(0, |m| m.ncols());
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for m in parts {
        assert_eq!(m.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), m.shape()).copy_from(m);
        r += m.nrows();
    }
    out
}

/// Horizontal concatenation; all parts must share a row count.
pub fn hstack(parts: &[&Matrix]) -> Matrix {
    let rows = parts.first().map_or(0, |m| m.nrows());
    let cols: usize = parts.iter().map(|m| m.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut c = 0;
    for m in parts {
        assert_eq!(m.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c), m.shape()).copy_from(m);
        c += m.ncols();
    }
    out
}

/// Block matrix from a grid; `None` entries are zero blocks sized by their row and column.
pub fn blocks(grid: &[Vec<Option<&Matrix>>], row_heights: &[usize], col_widths: &[usize]) -> Matrix {
    let rows: usize = row_heights.iter().sum();
    let cols: usize = col_widths.iter().sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r0 = 0;
    for (i, line) in grid.iter().enumerate() {
        let mut c0 = 0;
        for (j, cell) in line.iter().enumerate() {
            if let Some(m) = cell {
                assert_eq!(m.shape(), (row_heights[i], col_widths[j]), "block ({i},{j}) shape");
                out.view_mut((r0, c0), m.shape()).copy_from(*m);
            }
            c0 += col_widths[j];
        }
        r0 += row_heights[i];
    }
    out
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// m + mᵀ
pub fn sym(m: &Matrix) -> Matrix {
    m + m.transpose()
}

fn log_abs_det(m: &Matrix) -> Option<f64> {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows() {
        let d = u[(i, i)].abs();
        if d == 0.0 {
            return None;
        }
        acc += d.ln();
    }
    Some(acc)
}

/// Stabilizing solution of Fᵀ X + X F − X S X + Q = 0 by the matrix sign function.
pub fn solve_care(f: &Matrix, s: &Matrix, q: &Matrix) -> Result<Matrix> {
    let k = f.nrows();
    if f.ncols() != k || s.shape() != (k, k) || q.shape() != (k, k) {
        return Err(Error::Shape("Riccati data must be square and conformant".into()));
    }
    let mut w = blocks(
        &[vec![Some(f), Some(&-s)], vec![Some(&-q), Some(&-f.transpose())]],
        &[k, k],
        &[k, k],
    );
    let dim = 2 * k;
    let mut converged = false;
    for _ in 0..200 {
        let ld = log_abs_det(&w)
            .ok_or_else(|| Error::NoStabilizer("Hamiltonian has imaginary-axis eigenvalues".into()))?;
        let c = (-ld / dim as f64).exp();
        let inv = w
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NoStabilizer("singular iterate in sign iteration".into()))?;
        let next = (&w * c + inv / c) * 0.5;
        let delta = (&next - &w).norm();
        let scale = next.norm();
        w = next;
        if delta <= 1e-13 * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence("matrix sign iteration".into()));
    }
    let w11 = w.view((0, 0), (k, k)).clone_owned();
    let w12 = w.view((0, k), (k, k)).clone_owned();
    let w21 = w.view((k, 0), (k, k)).clone_owned();
    let w22 = w.view((k, k), (k, k)).clone_owned();
    let eye = Matrix::identity(k, k);
    let lhs = vstack(&[&w12, &(w22 + &eye)]);
    let rhs = -vstack(&[&(w11 + &eye), &w21]);
    let x = pinv(&lhs)? * rhs;
    Ok((&x + x.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn mp_residuals(a: &Matrix, p: &Matrix) -> [f64; 4] {
        let n = a.norm().max(1.0);
        let np = p.norm().max(1.0);
        [
            (a * p * a - a).norm() / n,
            (p * a * p - p).norm() / np,
            ((a * p) - (a * p).transpose()).norm() / n,
            ((p * a) - (p * a).transpose()).norm() / n,
        ]
    }

    #[test]
    fn pinv_of_identity() {
        let i3 = Matrix::identity(3, 3);
        assert!((pinv(&i3).unwrap() - &i3).norm() < 1e-15);
    }

    #[test]
    fn pinv_of_rows() {
        let p = pinv(&dmatrix![0.0, 1.0]).unwrap();
        assert!((p - dmatrix![0.0; 1.0]).norm() < 1e-15);
        // Fᵀ(FFᵀ)⁻¹ with FFᵀ = 5
        let p = pinv(&dmatrix![2.0, 1.0]).unwrap();
        assert!((p - dmatrix![0.4; 0.2]).norm() < 1e-15);
    }

    #[test]
    fn pinv_rank_deficient_identities() {
        let a = dmatrix![1.0, 2.0, 3.0; 2.0, 4.0, 6.0; 1.0, 0.0, 1.0; 0.0, 2.0, 2.0];
        let p = pinv(&a).unwrap();
        for r in mp_residuals(&a, &p) {
            assert!(r < 1e-12, "{r}");
        }
    }

    #[test]
    fn pinv_rejects_nan() {
        let a = dmatrix![1.0, f64::NAN];
        assert!(matches!(pinv(&a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of(&Matrix::zeros(2, 2), None).unwrap().rank, 0);
        let a = dmatrix![-2.0, 1.0; 0.0, -3.0];
        let f = dmatrix![0.0, 1.0];
        assert_eq!(rank(&vstack(&[&(&f * &a), &f])), 1);
        let f = dmatrix![2.0, 1.0];
        assert_eq!(rank(&vstack(&[&(&f * &a), &f])), 2);
    }

    #[test]
    fn rank_tolerance_validation() {
        let a = Matrix::identity(2, 2);
        assert!(matches!(rank_of(&a, Some(0.0)), Err(Error::InvalidTolerance(_))));
        assert!(matches!(rank_of(&a, Some(-1.0)), Err(Error::InvalidTolerance(_))));
        let r = rank_of(&dmatrix![1.0, 0.0; 0.0, 1e-6], Some(1e-3)).unwrap();
        assert_eq!(r.rank, 1);
        assert_eq!(r.gap(), (Some(1.0), Some(1e-6)));
        assert!(rank_of(&Matrix::zeros(3, 3), None).unwrap().tolerance_used > 0.0);
    }

    #[test]
    fn row_space_of_identity_is_orthonormal() {
        let b = row_space_basis(&Matrix::identity(2, 2)).unwrap();
        assert_eq!(b.nrows(), 2);
        assert!((&b * b.transpose() - Matrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn row_space_of_zero_is_empty() {
        assert_eq!(row_space_basis(&Matrix::zeros(2, 3)).unwrap().shape(), (0, 3));
    }

    #[test]
    fn row_space_rank_deficient_matches_gram_schmidt() {
        let m = dmatrix![1.0, 1.0; 2.0, 2.0; 0.0, 3.0];
        let b = row_space_basis(&m).unwrap();
        assert_eq!(b.nrows(), 2);
        // Gram–Schmidt on rows 1 and 3 spans the same plane: every row projects onto itself.
        let e1 = dmatrix![1.0, 1.0] / 2f64.sqrt();
        let r3 = dmatrix![0.0, 3.0];
        let mut e2 = &r3 - (&r3 * e1.transpose())[(0, 0)] * &e1;
        e2 /= e2.norm();
        let gs = vstack(&[&e1, &e2]);
        let proj_b = b.transpose() * &b;
        let proj_gs = gs.transpose() * &gs;
        assert!((proj_b - proj_gs).norm() < 1e-12);
    }

    #[test]
    fn hurwitz_examples() {
        assert!(is_hurwitz(&dmatrix![-3.0], 0.0).unwrap());
        assert!(!is_hurwitz(&dmatrix![0.5], 0.0).unwrap());
        let a = dmatrix![-2.0, 1.0; 0.0, -3.0];
        assert!(is_hurwitz(&a, 0.0).unwrap());
        let ev = eigenvalues(&a).unwrap();
        assert!((ev[0].re + 2.0).abs() < 1e-12 && (ev[1].re + 3.0).abs() < 1e-12);
        assert!(!is_hurwitz(&dmatrix![-1e-12], 1e-9).unwrap());
        assert!(matches!(is_hurwitz(&Matrix::zeros(1, 2), 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn detectability_examples() {
        let n1 = dmatrix![-1.0, 2.0; 0.0, -4.0];
        assert!(pbh_detectable(&n1, &Matrix::zeros(3, 2)).unwrap());
        let n1 = dmatrix![-2.0, 1.0, 3.0; 0.0, -3.0, 1.0; 0.0, 0.0, -4.0];
        assert!(pbh_detectable(&n1, &Matrix::zeros(4, 3)).unwrap());
        assert!(!pbh_detectable(&dmatrix![0.5], &dmatrix![0.0]).unwrap());
        assert!(pbh_detectable(&dmatrix![0.5], &dmatrix![1.0]).unwrap());
        assert!(matches!(
            pbh_detectable(&dmatrix![0.5], &Matrix::zeros(1, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn care_stabilizes_scalar() {
        // Ñ1 = 1, Ñ2 = 1: X satisfies 2X − X² + 1 = 0, stabilizing root 1 + √2.
        let x = solve_care(&dmatrix![1.0], &dmatrix![1.0], &dmatrix![1.0]).unwrap();
        assert!((x[(0, 0)] - (1.0 + 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn care_residual_and_stability() {
        let f = dmatrix![0.3, 1.0, 0.0; -1.0, 0.2, 0.5; 0.0, 0.0, 1.1];
        let h = dmatrix![1.0, 0.0, 1.0; 0.0, 1.0, 0.0];
        let s = h.transpose() * &h;
        let q = Matrix::identity(3, 3);
        let x = solve_care(&f, &s, &q).unwrap();
        let res = f.transpose() * &x + &x * &f - &x * &s * &x + &q;
        assert!(res.norm() < 1e-9, "{}", res.norm());
        assert!(is_hurwitz(&(&f - &s * &x), 0.0).unwrap());
    }

    #[test]
    fn blocks_places_parts() {
        let a = dmatrix![1.0];
        let b = dmatrix![2.0, 3.0];
        let m = blocks(&[vec![Some(&a), None], vec![None, Some(&b)]], &[1, 1], &[1, 2]);
        assert_eq!(m, dmatrix![1.0, 0.0, 0.0; 0.0, 2.0, 3.0]);
    }
}
