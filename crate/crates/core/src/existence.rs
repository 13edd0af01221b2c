//! Constraint matrices XΘ = Υ for each observer structure and the rank and
//! detectability tests that decide existence.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::linalg::{
    blocks, complex_rank, eigenvalues, is_hurwitz, pencil, pinv, rank, rank_of,
    unobservable_unstable_modes, vstack, Matrix, RankResult,
};
use crate::model::{FunctionalSpec, Structure, TimeDelaySystem};
use crate::synthesis::ParamFamily;

/// Margin used whenever a design must reject marginally stable N.
pub const HURWITZ_MARGIN: f64 = 1e-9;

/// Columns `start..start+len` of X hold the named observer block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSlice {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintPair {
    #[serde(rename = "Theta", with = "crate::model::mat")]
    pub theta: Matrix,
    #[serde(rename = "Upsilon", with = "crate::model::mat")]
    pub upsilon: Matrix,
    pub column_layout: Vec<ColumnSlice>,
}

impl ConstraintPair {
    fn new(theta: Matrix, upsilon: Matrix, layout: &[(&str, usize)]) -> Self {
        let mut start = 0;
        let column_layout = layout
            .iter()
            .map(|&(name, len)| {
                let s = ColumnSlice {
                    name: name.to_string(),
                    start,
                    len,
                };
                start += len;
                s
            })
            .collect();
        debug_assert_eq!(start, theta.nrows());
        debug_assert_eq!(theta.ncols(), upsilon.ncols());
        Self {
            theta,
            upsilon,
            column_layout,
        }
    }

    /// Number of columns of X (rows of Θ).
    pub fn width(&self) -> usize {
        self.theta.nrows()
    }

    pub fn slice(&self, name: &str) -> Option<&ColumnSlice> {
        self.column_layout.iter().find(|s| s.name == name)
    }

    /// The columns of `x` that hold block `name`.
    pub fn extract(&self, x: &Matrix, name: &str) -> Result<Matrix> {
        let s = self
            .slice(name)
            .ok_or_else(|| Error::Shape(format!("layout has no block {name}")))?;
        if x.ncols() != self.width() {
            return Err(Error::Shape(format!(
                "X has {} columns, layout expects {}",
                x.ncols(),
                self.width()
            )));
        }
        Ok(x.columns(s.start, s.len).clone_owned())
    }

    /// Identity columns selecting block `name` out of X: X·sel = block.
    pub fn selector(&self, name: &str) -> Result<Matrix> {
        let s = self
            .slice(name)
            .ok_or_else(|| Error::Shape(format!("layout has no block {name}")))?;
        let mut sel = Matrix::zeros(self.width(), s.len);
        for i in 0..s.len {
            sel[(s.start + i, i)] = 1.0;
        }
        Ok(sel)
    }

    pub fn theta_rank(&self) -> RankResult {
        rank_of(&self.theta, None).expect("finite constraint")
    }

    pub fn augmented_rank(&self) -> RankResult {
        rank_of(&vstack(&[&self.upsilon, &self.theta]), None).expect("finite constraint")
    }

    /// rank(stack(Υ; Θ)) = rank(Θ) as a reportable condition.
    pub fn solvability(&self, name: &str) -> Condition {
        let t = self.theta_rank();
        let a = self.augmented_rank();
        Condition {
            name: name.to_string(),
            satisfied: t.rank == a.rank,
            detail: Detail::Rank {
                lhs: a.rank,
                rhs: t.rank,
                sigma_kept: t.gap().0,
                sigma_dropped: t.gap().1,
            },
        }
    }

    pub fn is_solvable(&self) -> bool {
        self.theta_rank().rank == self.augmented_rank().rank
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detail {
    /// Compares `lhs` with `rhs`; singular values bracket the rank decision of the reference matrix.
    Rank {
        lhs: usize,
        rhs: usize,
        sigma_kept: Option<f64>,
        sigma_dropped: Option<f64>,
    },
    Spectrum {
        eigenvalues: Vec<[f64; 2]>,
    },
    Detectability {
        eigenvalues: Vec<[f64; 2]>,
        undetectable: Vec<[f64; 2]>,
    },
    Note {
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub satisfied: bool,
    pub detail: Detail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExistenceReport {
    pub structure: Structure,
    pub order: usize,
    pub conditions: Vec<Condition>,
    pub overall: bool,
}

impl ExistenceReport {
    fn new(structure: Structure, order: usize, conditions: Vec<Condition>) -> Self {
        let overall = conditions.iter().all(|c| c.satisfied);
        Self {
            structure,
            order,
            conditions,
            overall,
        }
    }

    pub fn failed(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.iter().filter(|c| !c.satisfied)
    }

    pub fn push(&mut self, c: Condition) {
        self.overall &= c.satisfied;
        self.conditions.push(c);
    }
}

fn pairs(z: &[Complex64]) -> Vec<[f64; 2]> {
    z.iter().map(|c| [c.re, c.im]).collect()
}

fn require_aligned(sys: &TimeDelaySystem, what: &str) -> Result<()> {
    if sys.delays_coincide() {
        Ok(())
    } else {
        Err(Error::StructureNotApplicable(format!(
            "{what} requires h = tau (got tau = {}, h = {})",
            sys.tau, sys.h
        )))
    }
}

fn require_columns(f: &Matrix, n: usize, what: &str) -> Result<()> {
    if f.ncols() != n || f.nrows() == 0 {
        return Err(Error::Shape(format!(
            "{what} must be r x {n} with r >= 1, got {}x{}",
            f.nrows(),
            f.ncols()
        )));
    }
    Ok(())
}

fn require_full_row_rank(f: &Matrix, what: &str) -> Result<()> {
    let r = rank_of(f, None)?;
    if r.rank < f.nrows() {
        return Err(Error::InvalidFunctional(format!(
            "{what} has rank {} < {} rows",
            r.rank,
            f.nrows()
        )));
    }
    Ok(())
}

/// Θ = (C 0; 0 C; CA CA_τ), Υ = (FA_τ 0), X = (Ḡ G_τ M).
pub fn build_a_minimal(sys: &TimeDelaySystem, f: &Matrix) -> Result<ConstraintPair> {
    sys.ensure_valid()?;
    require_aligned(sys, "structure A")?;
    require_columns(f, sys.n(), "F")?;
    let (n, p) = (sys.n(), sys.p());
    let c = sys.merged_c();
    let ca = &c * &sys.a;
    let cat = &c * &sys.a_tau;
    let theta = blocks(
        &[
            vec![Some(&c), None],
            vec![None, Some(&c)],
            vec![Some(&ca), Some(&cat)],
        ],
        &[p, p, p],
        &[n, n],
    );
    let fat = f * &sys.a_tau;
    let upsilon = blocks(&[vec![Some(&fat), None]], &[f.nrows()], &[n, n]);
    Ok(ConstraintPair::new(
        theta,
        upsilon,
        &[("Gbar", p), ("G_tau", p), ("M", p)],
    ))
}

/// N = F·A·F⁺ for an A-invariant functional.
pub fn invariant_n(sys: &TimeDelaySystem, f: &Matrix) -> Result<Matrix> {
    Ok(f * &sys.a * pinv(f)?)
}

fn invariance_condition(sys: &TimeDelaySystem, f: &Matrix, name: &str) -> Condition {
    let fa = f * &sys.a;
    let lhs = rank_of(&vstack(&[&fa, f]), None).expect("finite");
    let rhs = rank(f);
    Condition {
        name: name.into(),
        satisfied: lhs.rank == rhs,
        detail: Detail::Rank {
            lhs: lhs.rank,
            rhs,
            sigma_kept: lhs.gap().0,
            sigma_dropped: lhs.gap().1,
        },
    }
}

fn hurwitz_condition(n: &Matrix, name: &str) -> Result<Condition> {
    Ok(Condition {
        name: name.into(),
        satisfied: is_hurwitz(n, HURWITZ_MARGIN)?,
        detail: Detail::Spectrum {
            eigenvalues: pairs(&eigenvalues(n)?),
        },
    })
}

/// Three conditions for a minimal-order Structure-A observer.
pub fn check_a_minimal(sys: &TimeDelaySystem, f: &Matrix) -> Result<ExistenceReport> {
    let cp = build_a_minimal(sys, f)?;
    require_full_row_rank(f, "F")?;
    let inv = invariance_condition(sys, f, "(i) rank(FA; F) = rank(F)");
    let hur = hurwitz_condition(&invariant_n(sys, f)?, "(ii) N = F A F+ Hurwitz")?;
    let sol = cp.solvability("(iii) rank(Upsilon; Theta) = rank(Theta)");
    Ok(ExistenceReport::new(Structure::A, f.nrows(), vec![inv, hur, sol]))
}

/// Powers stack(F, FA, …, FA^{n−1}).
pub fn krylov_stack(sys: &TimeDelaySystem, f: &Matrix) -> Matrix {
    let mut parts = vec![f.clone()];
    for k in 1..sys.n() {
        parts.push(&parts[k - 1] * &sys.a);
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    vstack(&refs)
}

/// Extra rows R completing F to an A-invariant functional, from the orthogonal
/// projector onto the complement of row(F).
pub fn build_r_projector(sys: &TimeDelaySystem, f: &Matrix) -> Result<Matrix> {
    sys.ensure_valid()?;
    require_columns(f, sys.n(), "F")?;
    require_full_row_rank(f, "F")?;
    let n = sys.n();
    let ff = f * f.transpose();
    let ffi = ff
        .try_inverse()
        .ok_or_else(|| Error::InvalidFunctional("F F^T is singular".into()))?;
    let pf = f.transpose() * ffi * f;
    let r0 = krylov_stack(sys, f) * (Matrix::identity(n, n) - pf);
    crate::linalg::row_space_basis(&r0)
}

/// Conditions for the augmented functional F̄ = stack(F; R).
pub fn check_a_augmented(sys: &TimeDelaySystem, fbar: &Matrix) -> Result<ExistenceReport> {
    let cp = build_a_minimal(sys, fbar)?;
    require_full_row_rank(fbar, "F-bar")?;
    let inv = invariance_condition(sys, fbar, "invariance");
    if !inv.satisfied {
        return Err(Error::Precondition(
            "rank(F-bar A; F-bar) differs from rank(F-bar); F-bar is not A-invariant".into(),
        ));
    }
    let hur = hurwitz_condition(&invariant_n(sys, fbar)?, "(i) N = Fbar A Fbar+ Hurwitz")?;
    let sol = cp.solvability("(ii) rank(Upsilon-bar; Theta) = rank(Theta)");
    Ok(ExistenceReport::new(Structure::A, fbar.nrows(), vec![hur, sol]))
}

/// Θ̃ = (F₀ F_τ 0; 0 C 0; 0 0 C; 0 CA CA_τ), Υ̃ = (F₀A  F₀A_τ+F_τA  F_τA_τ), X = (N Ḡ G_τ M).
pub fn build_a_extended(sys: &TimeDelaySystem, f0: &Matrix, ftau: &Matrix) -> Result<ConstraintPair> {
    sys.ensure_valid()?;
    require_aligned(sys, "structure A")?;
    require_columns(f0, sys.n(), "F0")?;
    if ftau.shape() != f0.shape() {
        return Err(Error::Shape("F0 and F_tau must have equal shapes".into()));
    }
    let (n, p, s) = (sys.n(), sys.p(), f0.nrows());
    let c = sys.merged_c();
    let ca = &c * &sys.a;
    let cat = &c * &sys.a_tau;
    let theta = blocks(
        &[
            vec![Some(f0), Some(ftau), None],
            vec![None, Some(&c), None],
            vec![None, None, Some(&c)],
            vec![None, Some(&ca), Some(&cat)],
        ],
        &[s, p, p, p],
        &[n, n, n],
    );
    let u1 = f0 * &sys.a;
    let u2 = f0 * &sys.a_tau + ftau * &sys.a;
    let u3 = ftau * &sys.a_tau;
    let upsilon = blocks(&[vec![Some(&u1), Some(&u2), Some(&u3)]], &[s], &[n, n, n]);
    Ok(ConstraintPair::new(
        theta,
        upsilon,
        &[("N", s), ("Gbar", p), ("G_tau", p), ("M", p)],
    ))
}

fn detectability_condition(n1: &Matrix, n2: &Matrix, name: &str) -> Result<Condition> {
    let undetectable = unobservable_unstable_modes(n1, n2)?;
    Ok(Condition {
        name: name.into(),
        satisfied: undetectable.is_empty(),
        detail: Detail::Detectability {
            eigenvalues: pairs(&eigenvalues(n1)?),
            undetectable: pairs(&undetectable),
        },
    })
}

/// Solvability and detectability for the extended functional F₀x(t) + F_τx(t−τ).
pub fn check_a_extended(
    sys: &TimeDelaySystem,
    f0: &Matrix,
    ftau: &Matrix,
) -> Result<(ExistenceReport, Option<ParamFamily>)> {
    let cp = build_a_extended(sys, f0, ftau)?;
    let s = f0.nrows();
    let sol = cp.solvability("(i) rank(Upsilon~; Theta~) = rank(Theta~)");
    if !sol.satisfied {
        return Ok((ExistenceReport::new(Structure::A, s, vec![sol]), None));
    }
    let fam = ParamFamily::from_constraint(cp, &["N"])?;
    let det = detectability_condition(&fam.n1, &fam.n2, "(ii) (N~1, N~2) detectable")?;
    Ok((ExistenceReport::new(Structure::A, s, vec![sol, det]), Some(fam)))
}

/// Extended functional (F̄ over zeros; zeros over F_d).
pub fn extended_functional(fbar: &Matrix, f_d: &Matrix) -> Result<(Matrix, Matrix)> {
    if fbar.ncols() != f_d.ncols() {
        return Err(Error::Shape("F_d must have as many columns as F".into()));
    }
    let zd = Matrix::zeros(f_d.nrows(), fbar.ncols());
    let zf = Matrix::zeros(fbar.nrows(), fbar.ncols());
    Ok((vstack(&[fbar, &zd]), vstack(&[&zf, f_d])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionCandidate {
    #[serde(with = "crate::model::mat")]
    pub f_d: Matrix,
    pub theta_rank: usize,
    pub solvable: bool,
}

/// Evaluates rank(Θ̃) and solvability for each candidate F_d.
pub fn scan_extensions(
    sys: &TimeDelaySystem,
    fbar: &Matrix,
    grid: &[Matrix],
    par: Parallelism,
) -> Vec<Result<ExtensionCandidate>> {
    par.map(grid, |f_d| {
        let (f0, ft) = extended_functional(fbar, f_d)?;
        let cp = build_a_extended(sys, &f0, &ft)?;
        Ok(ExtensionCandidate {
            f_d: f_d.clone(),
            theta_rank: cp.theta_rank().rank,
            solvable: cp.is_solvable(),
        })
    })
}

/// Θ̂/Υ̂ for Structure B, X = (N N_τ Ḡ Ḡ_τ M).
pub fn build_b(sys: &TimeDelaySystem, h0: &Matrix, htau: &Matrix) -> Result<ConstraintPair> {
    sys.ensure_valid()?;
    require_aligned(sys, "structure B")?;
    require_columns(h0, sys.n(), "H0")?;
    if htau.shape() != h0.shape() {
        return Err(Error::Shape("H0 and H_tau must have equal shapes".into()));
    }
    let (n, p, s) = (sys.n(), sys.p(), h0.nrows());
    let c = sys.merged_c();
    let ca = &c * &sys.a;
    let cat = &c * &sys.a_tau;
    let theta = blocks(
        &[
            vec![Some(h0), Some(htau), None],
            vec![None, Some(h0), Some(htau)],
            vec![None, Some(&c), None],
            vec![None, None, Some(&c)],
            vec![None, Some(&ca), Some(&cat)],
        ],
        &[s, s, p, p, p],
        &[n, n, n],
    );
    let u1 = h0 * &sys.a;
    let u2 = h0 * &sys.a_tau + htau * &sys.a;
    let u3 = htau * &sys.a_tau;
    let upsilon = blocks(&[vec![Some(&u1), Some(&u2), Some(&u3)]], &[s], &[n, n, n]);
    Ok(ConstraintPair::new(
        theta,
        upsilon,
        &[("N", s), ("N_tau", s), ("Gbar", p), ("Gbar_tau", p), ("M", p)],
    ))
}

pub fn check_b(
    sys: &TimeDelaySystem,
    h0: &Matrix,
    htau: &Matrix,
) -> Result<(ExistenceReport, Option<ParamFamily>)> {
    let cp = build_b(sys, h0, htau)?;
    let s = h0.nrows();
    let sol = cp.solvability("(i) rank(Upsilon^; Theta^) = rank(Theta^)");
    if !sol.satisfied {
        return Ok((ExistenceReport::new(Structure::B, s, vec![sol]), None));
    }
    let fam = ParamFamily::from_constraint(cp, &["N", "N_tau"])?;
    Ok((ExistenceReport::new(Structure::B, s, vec![sol]), Some(fam)))
}

/// Θ̆/Ῠ for Structure C (h > τ).
///
/// Columns of Θ̆ follow x(t), x(t−τ), x(t−h), x(t−2τ), x(t−2h), x(t−τ−h),
/// x(t−2τ−h), x(t−τ−2h), x(t−3τ), x(t−3h).
pub fn build_c(sys: &TimeDelaySystem, fs: &FunctionalSpec) -> Result<ConstraintPair> {
    sys.ensure_valid()?;
    if sys.delays_coincide() || sys.h <= sys.tau {
        return Err(Error::StructureNotApplicable(format!(
            "structure C requires h > tau (got tau = {}, h = {})",
            sys.tau, sys.h
        )));
    }
    let n = sys.n();
    require_columns(&fs.h0, n, "H0")?;
    if fs.h_tau.shape() != fs.h0.shape() || fs.h_h.shape() != fs.h0.shape() {
        return Err(Error::Shape("H0, H_tau, H_h must have equal shapes".into()));
    }
    let (p, s) = (sys.p(), fs.order());
    let (h0, ht, hh) = (&fs.h0, &fs.h_tau, &fs.h_h);
    let (ct, ch) = (&sys.c_tau, &sys.c_h);
    let (a, at) = (&sys.a, &sys.a_tau);
    let cta = ct * a;
    let cha = ch * a;
    let ctat = ct * at;
    let chat = ch * at;
    let o = None;
    let theta = blocks(
        &[
            vec![Some(h0), Some(ht), Some(hh), o, o, o, o, o, o, o],
            vec![o, Some(h0), o, Some(ht), o, Some(hh), o, o, o, o],
            vec![o, o, Some(h0), o, Some(hh), Some(ht), o, o, o, o],
            vec![o, Some(ct), Some(ch), o, o, o, o, o, o, o],
            vec![o, o, o, Some(ct), o, Some(ch), o, o, o, o],
            vec![o, o, o, o, Some(ch), Some(ct), o, o, o, o],
            vec![o, o, o, o, o, o, Some(ch), o, Some(ct), o],
            vec![o, o, o, o, o, o, Some(ct), Some(ch), o, o],
            vec![o, o, o, o, o, o, o, Some(ct), o, Some(ch)],
            vec![o, Some(&cta), Some(&cha), Some(&ctat), o, Some(&chat), o, o, o, o],
            vec![o, o, o, Some(&cta), o, Some(&cha), Some(&chat), o, Some(&ctat), o],
            vec![o, o, o, o, Some(&cha), Some(&cta), Some(&ctat), Some(&chat), o, o],
        ],
        &[s, s, s, p, p, p, p, p, p, p, p, p],
        &[n; 10],
    );
    let u1 = h0 * a;
    let u2 = h0 * at + ht * a;
    let u3 = hh * a;
    let u4 = ht * at;
    let u6 = hh * at;
    let upsilon = blocks(
        &[vec![Some(&u1), Some(&u2), Some(&u3), Some(&u4), o, Some(&u6), o, o, o, o]],
        &[s],
        &[n; 10],
    );
    Ok(ConstraintPair::new(
        theta,
        upsilon,
        &[
            ("N", s),
            ("N_tau", s),
            ("N_h", s),
            ("Gbar", p),
            ("Gbreve_tau", p),
            ("Gbreve_h", p),
            ("Gbreve_tautau", p),
            ("Gbreve_tauh", p),
            ("Gbreve_hh", p),
            ("M", p),
            ("M_tau", p),
            ("M_h", p),
        ],
    ))
}

pub fn check_c(
    sys: &TimeDelaySystem,
    fs: &FunctionalSpec,
) -> Result<(ExistenceReport, Option<ParamFamily>)> {
    let cp = build_c(sys, fs)?;
    let s = fs.order();
    let sol = cp.solvability("(i) rank(Upsilon-breve; Theta-breve) = rank(Theta-breve)");
    if !sol.satisfied {
        return Ok((ExistenceReport::new(Structure::C, s, vec![sol]), None));
    }
    let fam = ParamFamily::from_constraint(cp, &["N", "N_tau", "N_h"])?;
    Ok((ExistenceReport::new(Structure::C, s, vec![sol]), Some(fam)))
}

/// rank(stack(λI − N₁; N₂)) equals the order of N₁.
pub fn pencil_full_rank(n1: &Matrix, n2: &Matrix, lambda: Complex64) -> bool {
    complex_rank(&pencil(n1, n2, lambda)) == n1.nrows()
}

/// Complex matrix helper for tests and diagnostics.
pub fn to_complex(m: &Matrix) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}
