use delayobs::linalg::{
    pbh_detectable, pinv, rank, rank_of, row_space_basis, singular_values, solve_care, spectral_abscissa, Matrix,
};
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

fn matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-3i32..=3, r * c).prop_map(move |v| {
            Matrix::from_iterator(r, c, v.into_iter().map(f64::from))
        })
    })
}

/// Product of two integer factors, so the rank is at most `k` by construction.
fn low_rank(max_n: usize) -> impl Strategy<Value = (Matrix, usize)> {
    (1..=max_n, 1..=max_n, 1..=max_n).prop_flat_map(|(r, c, k)| {
        (
            proptest::collection::vec(-2i32..=2, r * k),
            proptest::collection::vec(-2i32..=2, k * c),
        )
            .prop_map(move |(a, b)| {
                let a = Matrix::from_iterator(r, k, a.into_iter().map(f64::from));
                let b = Matrix::from_iterator(k, c, b.into_iter().map(f64::from));
                (a * b, k)
            })
    })
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.shape() == b.shape() && (a - b).amax() <= tol * (1.0 + b.amax())
}

proptest! {
    #[test]
    fn penrose_identities_hold(a in matrix(5, 5)) {
        let p = pinv(&a).unwrap();
        prop_assert!(close(&(&a * &p * &a), &a, 1e-9));
        prop_assert!(close(&(&p * &a * &p), &p, 1e-9));
        let ap = &a * &p;
        let pa = &p * &a;
        prop_assert!(close(&ap.transpose(), &ap, 1e-9));
        prop_assert!(close(&pa.transpose(), &pa, 1e-9));
    }

    #[test]
    fn rank_matches_gaussian_elimination((m, k) in low_rank(5)) {
        let r = rank(&m);
        prop_assert!(r <= k);
        prop_assert_eq!(r, exact_rank(&m));
    }

    #[test]
    fn rank_is_invariant_under_invertible_mixing((m, _) in low_rank(4), s in 1.0f64..5.0) {
        let n = m.nrows();
        // unit upper triangular mixing is exactly invertible
        let t = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else if j > i { s } else { 0.0 });
        prop_assert_eq!(rank(&(t * &m)), rank(&m));
        prop_assert_eq!(rank(&(&m * s)), rank(&m));
        prop_assert_eq!(rank(&m.transpose()), rank(&m));
    }

    #[test]
    fn row_space_basis_spans_the_rows((m, _) in low_rank(5)) {
        let b = row_space_basis(&m).unwrap();
        prop_assert_eq!(b.nrows(), rank(&m));
        if b.nrows() > 0 {
            // orthonormal rows
            prop_assert!(close(&(&b * b.transpose()), &Matrix::identity(b.nrows(), b.nrows()), 1e-9));
            // every row of m is reproduced by projection onto the basis
            let proj = &m * b.transpose() * &b;
            prop_assert!(close(&proj, &m, 1e-9));
        }
    }

    #[test]
    fn singular_values_are_sorted_and_match_frobenius(a in matrix(5, 5)) {
        let s = singular_values(&a);
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        let f2: f64 = s.iter().map(|x| x * x).sum();
        prop_assert!((f2 - a.norm_squared()).abs() <= 1e-9 * (1.0 + f2));
    }

    #[test]
    fn pbh_agrees_with_brute_force_over_the_spectrum(n1 in matrix(3, 3), row in proptest::collection::vec(-2i32..=2, 3)) {
        let n = n1.nrows().min(n1.ncols());
        let n1 = n1.view((0, 0), (n, n)).into_owned();
        let n2 = Matrix::from_iterator(1, n, row.into_iter().take(n).map(f64::from).chain(std::iter::repeat(0.0)).take(n));
        let expected = brute_force_detectable(&n1, &n2);
        prop_assert_eq!(pbh_detectable(&n1, &n2).unwrap(), expected);
    }
}

/// Fraction-free elimination on integer-valued matrices.
fn exact_rank(m: &Matrix) -> usize {
    let mut a: Vec<Vec<i128>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].round() as i128).collect())
        .collect();
    let (rows, cols) = (m.nrows(), m.ncols());
    let mut r = 0;
    for c in 0..cols {
        let Some(p) = (r..rows).find(|&i| a[i][c] != 0) else {
            continue;
        };
        a.swap(r, p);
        for i in (r + 1)..rows {
            let (f, g) = (a[i][c], a[r][c]);
            let pivot = a[r].clone();
            for (x, y) in a[i].iter_mut().zip(&pivot) {
                *x = *x * g - y * f;
            }
            let gcd = a[i].iter().fold(0i128, |x, &y| gcd(x, y.abs()));
            if gcd > 1 {
                a[i].iter_mut().for_each(|v| *v /= gcd);
            }
        }
        r += 1;
    }
    r
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Tests rank(λI − N₁; N₂) at every eigenvalue with Re λ ≥ 0 via the smallest singular value.
fn brute_force_detectable(n1: &Matrix, n2: &Matrix) -> bool {
    let n = n1.nrows();
    let eig = n1.complex_eigenvalues();
    eig.iter().filter(|l| l.re >= 0.0).all(|&l| {
        let mut p = DMatrix::<Complex64>::zeros(n + n2.nrows(), n);
        for i in 0..n {
            for j in 0..n {
                let d = if i == j { l } else { Complex64::new(0.0, 0.0) };
                p[(i, j)] = d - Complex64::new(n1[(i, j)], 0.0);
            }
        }
        for i in 0..n2.nrows() {
            for j in 0..n {
                p[(n + i, j)] = Complex64::new(n2[(i, j)], 0.0);
            }
        }
        let s = p.singular_values();
        s.min() > 1e-8 * (1.0 + s.max())
    })
}

#[test]
fn rank_reports_a_gap_for_borderline_matrices() {
    // the default threshold is max(r, c)·ε·σ_max ≈ 4.4e-16 here
    let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-17]);
    let r = rank_of(&m, None).unwrap();
    assert_eq!(r.rank, 1);
    let (kept, dropped) = r.gap();
    assert_eq!(kept, Some(1.0));
    assert!(dropped.unwrap() < 1e-16);
    assert_eq!(rank_of(&Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]), None).unwrap().rank, 2);
}

#[test]
fn riccati_solution_stabilizes() {
    // ẋ = Fx with F unstable; the gain −S P stabilizes F − S P.
    let f = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 2.0]);
    let s = Matrix::identity(2, 2);
    let q = Matrix::identity(2, 2);
    let p = solve_care(&f, &s, &q).unwrap();
    let res = f.transpose() * &p + &p * &f - &p * &s * &p + &q;
    assert!(res.amax() < 1e-8, "{res}");
    assert!(spectral_abscissa(&(&f - &s * &p)).unwrap() < 0.0);
}
