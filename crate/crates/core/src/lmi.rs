//! Lyapunov–Krasovskii LMIs for the error dynamics
//! ė = (N₁+KN₂)e + (N_τ₁+KN_τ₂)e(t−τ) [+ (N_h₁+KN_h₂)e(t−h)],
//! a semidefinite backend interface, and gain recovery K = M⁻¹G.
//!
//! λ multiplies decision variables, so it is fixed per solve and scanned over a grid.

use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::linalg::{eigenvalues, singular_values, sym, Matrix};
use crate::model::NamedBlock;

/// Required strict margin: Θ ⪯ −εI and P, Q, R ⪰ εI under the trace normalization.
pub const STRICT_EPS: f64 = 1e-7;
/// Entry bound on SlackM and SlackG.
pub const SLACK_BOUND: f64 = 1e3;
pub const MIN_SLACK_SIGMA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LmiKind {
    SingleDelay,
    TwoDelay,
}

/// One matrix-valued decision variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub symmetric: bool,
    pub positive: bool,
    pub offset: usize,
}

impl VarBlock {
    pub fn scalar_count(&self) -> usize {
        if self.symmetric {
            self.rows * (self.rows + 1) / 2
        } else {
            self.rows * self.cols
        }
    }

    /// Matrix from this block's slice of the variable vector.
    fn unpack(&self, x: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        let mut k = self.offset;
        if self.symmetric {
            for j in 0..self.cols {
                for i in 0..=j {
                    m[(i, j)] = x[k];
                    m[(j, i)] = x[k];
                    k += 1;
                }
            }
        } else {
            for i in 0..self.rows {
                for j in 0..self.cols {
                    m[(i, j)] = x[k];
                    k += 1;
                }
            }
        }
        m
    }

    /// (row, col) of the k-th scalar of the block.
    fn position(&self, k: usize) -> (usize, usize) {
        if self.symmetric {
            let mut j = 0;
            let mut start = 0;
            while start + j < k {
                start += j + 1;
                j += 1;
            }
            (k - start, j)
        } else {
            (k / self.cols, k % self.cols)
        }
    }
}

/// Decision-variable values by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiVars {
    pub blocks: Vec<NamedBlock>,
}

impl LmiVars {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &b.value)
    }

    fn req(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing LMI variable {name}")))
    }
}

/// A fixed-λ instance of the single- or two-delay LMI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiProblem {
    pub kind: LmiKind,
    /// Order of the error system.
    pub n: usize,
    /// Column count of K (rows of N₂).
    pub m: usize,
    pub lambda: f64,
    pub tau: f64,
    pub h: Option<f64>,
    #[serde(with = "crate::model::mat")]
    pub n1: Matrix,
    #[serde(with = "crate::model::mat")]
    pub n2: Matrix,
    #[serde(with = "crate::model::mat")]
    pub ntau1: Matrix,
    #[serde(with = "crate::model::mat")]
    pub ntau2: Matrix,
    #[serde(with = "crate::model::mat")]
    pub nh1: Matrix,
    #[serde(with = "crate::model::mat")]
    pub nh2: Matrix,
    pub manifest: Vec<VarBlock>,
}

fn check_pair(n: usize, a: &Matrix, b: &Matrix, m: usize, what: &str) -> Result<()> {
    if a.shape() != (n, n) || b.shape() != (m, n) {
        return Err(Error::Shape(format!(
            "{what}: expected {n}x{n} and {m}x{n}, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn manifest(n: usize, m: usize, kind: LmiKind) -> Vec<VarBlock> {
    let mut out = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, rows: usize, cols: usize, symmetric: bool, positive: bool| {
        let b = VarBlock {
            name: name.into(),
            rows,
            cols,
            symmetric,
            positive,
            offset,
        };
        offset += b.scalar_count();
        out.push(b);
    };
    match kind {
        LmiKind::SingleDelay => {
            push("P", 2 * n, 2 * n, true, true);
            push("Q", n, n, true, true);
            push("R", n, n, true, true);
        }
        LmiKind::TwoDelay => {
            push("P", 3 * n, 3 * n, true, true);
            push("Q1", n, n, true, true);
            push("Q2", n, n, true, true);
            push("R1", n, n, true, true);
            push("R2", n, n, true, true);
        }
    }
    push("SlackM", n, n, false, false);
    push("SlackG", n, m, false, false);
    out
}

/// Block selector vᵢ = (0 … I … 0)ᵀ of a `count`-block vector.
fn selector(count: usize, i: usize, n: usize) -> Matrix {
    let mut v = Matrix::zeros(count * n, n);
    for k in 0..n {
        v[(i * n + k, k)] = 1.0;
    }
    v
}

fn sandwich(v: &Matrix, x: &Matrix) -> Matrix {
    v * x * v.transpose()
}

/// Single-delay LMI for ė = (N₁+KN₂)e + (N_τ₁+KN_τ₂)e(t−τ).
pub fn build_single_delay(
    n1: &Matrix,
    n2: &Matrix,
    ntau1: &Matrix,
    ntau2: &Matrix,
    tau: f64,
    lambda: f64,
) -> Result<LmiProblem> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidDelay(format!("tau must be positive, got {tau}")));
    }
    if !lambda.is_finite() {
        return Err(Error::InvalidInput("lambda must be finite".into()));
    }
    let n = n1.nrows();
    let m = n2.nrows();
    check_pair(n, n1, n2, m, "N1/N2")?;
    check_pair(n, ntau1, ntau2, m, "Ntau1/Ntau2")?;
    Ok(LmiProblem {
        kind: LmiKind::SingleDelay,
        n,
        m,
        lambda,
        tau,
        h: None,
        n1: n1.clone(),
        n2: n2.clone(),
        ntau1: ntau1.clone(),
        ntau2: ntau2.clone(),
        nh1: Matrix::zeros(n, n),
        nh2: Matrix::zeros(m, n),
        manifest: manifest(n, m, LmiKind::SingleDelay),
    })
}

/// Two-delay LMI for ė = (N₁+KN₂)e + (N_τ₁+KN_τ₂)e(t−τ) + (N_h₁+KN_h₂)e(t−h), h > τ.
#[allow(clippy::too_many_arguments)]
pub fn build_two_delay(
    n1: &Matrix,
    n2: &Matrix,
    ntau1: &Matrix,
    ntau2: &Matrix,
    nh1: &Matrix,
    nh2: &Matrix,
    tau: f64,
    h: f64,
    lambda: f64,
) -> Result<LmiProblem> {
    if !(tau > 0.0 && h > tau && h.is_finite()) {
        return Err(Error::InvalidDelay(format!(
            "two-delay LMI needs h > tau > 0, got tau = {tau}, h = {h}"
        )));
    }
    if !lambda.is_finite() {
        return Err(Error::InvalidInput("lambda must be finite".into()));
    }
    let n = n1.nrows();
    let m = n2.nrows();
    check_pair(n, n1, n2, m, "N1/N2")?;
    check_pair(n, ntau1, ntau2, m, "Ntau1/Ntau2")?;
    check_pair(n, nh1, nh2, m, "Nh1/Nh2")?;
    Ok(LmiProblem {
        kind: LmiKind::TwoDelay,
        n,
        m,
        lambda,
        tau,
        h: Some(h),
        n1: n1.clone(),
        n2: n2.clone(),
        ntau1: ntau1.clone(),
        ntau2: ntau2.clone(),
        nh1: nh1.clone(),
        nh2: nh2.clone(),
        manifest: manifest(n, m, LmiKind::TwoDelay),
    })
}

impl LmiProblem {
    pub fn dimension(&self) -> usize {
        match self.kind {
            LmiKind::SingleDelay => 4 * self.n,
            LmiKind::TwoDelay => 6 * self.n,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.manifest.iter().map(|b| b.scalar_count()).sum()
    }

    pub fn unpack(&self, x: &[f64]) -> LmiVars {
        LmiVars {
            blocks: self
                .manifest
                .iter()
                .map(|b| NamedBlock {
                    name: b.name.clone(),
                    value: b.unpack(x),
                })
                .collect(),
        }
    }

    /// Θ evaluated at the given variable values.
    pub fn assemble(&self, vars: &LmiVars) -> Result<Matrix> {
        let n = self.n;
        let slack_m = vars.req("SlackM")?;
        let slack_g = vars.req("SlackG")?;
        let eye = Matrix::identity(n, n);
        let lam = self.lambda;
        let tau = self.tau;
        match self.kind {
            LmiKind::SingleDelay => {
                let v: Vec<Matrix> = (0..4).map(|i| selector(4, i, n)).collect();
                let (p, q, r) = (vars.req("P")?, vars.req("Q")?, vars.req("R")?);
                let pi1 = crate::linalg::hstack(&[&v[0], &(&v[2] * tau)]);
                let pi2 = crate::linalg::hstack(&[&v[3], &(&v[0] - &v[1])]);
                let rho = &v[0] + &v[1] - &v[2] * 2.0;
                let d12 = &v[0] - &v[1];
                let zn = Matrix::zeros(n, n);
                let nn1t = crate::linalg::hstack(&[&self.n1, &self.ntau1, &zn, &(-&eye)]);
                let zm = Matrix::zeros(self.m, n);
                let nn2t = crate::linalg::hstack(&[&self.n2, &self.ntau2, &zm, &zm]);
                let lv = &v[0] * lam + &v[3];
                let theta = sym(&(&pi1 * p * pi2.transpose()))
                    + sandwich(&v[0], q)
                    - sandwich(&v[1], q)
                    + sandwich(&v[3], r) * tau
                    - (sandwich(&d12, r) + sandwich(&rho, r) * 3.0) / tau
                    + sym(&(&lv * slack_m * &nn1t))
                    + sym(&(&lv * slack_g * &nn2t));
                Ok(theta)
            }
            LmiKind::TwoDelay => {
                let h = self.h.expect("two-delay problem carries h");
                let ht = h - tau;
                let v: Vec<Matrix> = (0..6).map(|i| selector(6, i, n)).collect();
                let p = vars.req("P")?;
                let (q1, q2) = (vars.req("Q1")?, vars.req("Q2")?);
                let (r1, r2) = (vars.req("R1")?, vars.req("R2")?);
                let pi1 = crate::linalg::hstack(&[&v[0], &(&v[3] * tau), &(&v[4] * ht)]);
                let d12 = &v[0] - &v[1];
                let d23 = &v[1] - &v[2];
                let pi2 = crate::linalg::hstack(&[&v[5], &d12, &d23]);
                let rho1 = &v[0] + &v[1] - &v[3] * 2.0;
                let rho2 = &v[1] + &v[2] - &v[4] * 2.0;
                let z2n = Matrix::zeros(n, 2 * n);
                let nn1t =
                    crate::linalg::hstack(&[&self.n1, &self.ntau1, &self.nh1, &z2n, &(-&eye)]);
                let z3m = Matrix::zeros(self.m, 3 * n);
                let nn2t = crate::linalg::hstack(&[&self.n2, &self.ntau2, &self.nh2, &z3m]);
                let lv = &v[0] * lam + &v[5];
                let theta = sym(&(&pi1 * p * pi2.transpose()))
                    + sandwich(&v[0], q1)
                    - sandwich(&v[1], &(q1 - q2))
                    - sandwich(&v[2], q2)
                    + sandwich(&v[5], r1) * tau
                    + sandwich(&v[5], r2) * ht
                    - (sandwich(&d12, r1) + sandwich(&rho1, r1) * 3.0) / tau
                    - (sandwich(&d23, r2) + sandwich(&rho2, r2) * 3.0) / ht
                    + sym(&(&lv * slack_m * &nn1t))
                    + sym(&(&lv * slack_g * &nn2t));
                Ok(theta)
            }
        }
    }

    /// Θ is linear and homogeneous in the variables; one symmetric coefficient per scalar.
    pub fn coefficient_matrices(&self) -> Vec<Matrix> {
        let total = self.num_scalars();
        let mut x = vec![0.0; total];
        (0..total)
            .map(|k| {
                x[k] = 1.0;
                let c = self.assemble(&self.unpack(&x)).expect("manifest covers all variables");
                x[k] = 0.0;
                c
            })
            .collect()
    }

    fn scalar_name(&self, k: usize) -> String {
        let b = self
            .manifest
            .iter()
            .rev()
            .find(|b| b.offset <= k)
            .expect("index inside manifest");
        let (i, j) = b.position(k - b.offset);
        format!("{}[{},{}]", b.name, i, j)
    }

    /// Plain-text coefficient dump: `variable row col value` per nonzero entry.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# kind {:?} n {} m {} lambda {} tau {} h {}",
            self.kind,
            self.n,
            self.m,
            self.lambda,
            self.tau,
            self.h.map_or("-".to_string(), |h| h.to_string())
        );
        for (k, c) in self.coefficient_matrices().iter().enumerate() {
            let name = self.scalar_name(k);
            for i in 0..c.nrows() {
                for j in i..c.ncols() {
                    if c[(i, j)] != 0.0 {
                        let _ = writeln!(out, "{name} {i} {j} {:.17e}", c[(i, j)]);
                    }
                }
            }
        }
        out
    }
}

/// F₀ + Σ xₖFₖ ⪰ 0 with symmetric coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixInequality {
    pub constant: Matrix,
    pub terms: Vec<(usize, Matrix)>,
}

/// Σ aⱼxⱼ (= or ≤) rhs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// minimize cᵀx subject to matrix inequalities, equalities and upper bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpInstance {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub lmis: Vec<MatrixInequality>,
    pub equalities: Vec<LinearConstraint>,
    pub inequalities: Vec<LinearConstraint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    Solved,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub x: Vec<f64>,
}

/// Any conic engine able to handle semidefinite constraints.
pub trait SdpBackend: Sync {
    fn name(&self) -> &str;
    fn solve(&self, sdp: &SdpInstance) -> Result<SdpSolution>;
}

/// Interior-point backend built on Clarabel.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClarabelBackend;

/// Upper-triangle column-major vectorization with √2-scaled off-diagonals.
fn svec_entries(m: &Matrix, offset: usize, col: usize, sign: f64, out: &mut Triplets) {
    let d = m.nrows();
    let mut k = offset;
    let r2 = std::f64::consts::SQRT_2;
    for j in 0..d {
        for i in 0..=j {
            let v = if i == j { m[(i, i)] } else { r2 * m[(i, j)] };
            if v != 0.0 {
                out.push(k, col, sign * v);
            }
            k += 1;
        }
    }
}

fn svec(m: &Matrix) -> Vec<f64> {
    let d = m.nrows();
    let r2 = std::f64::consts::SQRT_2;
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        for i in 0..=j {
            out.push(if i == j { m[(i, i)] } else { r2 * m[(i, j)] });
        }
    }
    out
}

#[derive(Default)]
struct Triplets {
    i: Vec<usize>,
    j: Vec<usize>,
    v: Vec<f64>,
}

impl Triplets {
    fn push(&mut self, i: usize, j: usize, v: f64) {
        self.i.push(i);
        self.j.push(j);
        self.v.push(v);
    }
}

impl SdpBackend for ClarabelBackend {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn solve(&self, sdp: &SdpInstance) -> Result<SdpSolution> {
        // Clarabel form: A x + s = b, s ∈ K.
        let nv = sdp.num_vars;
        let mut a = Triplets::default();
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut row = 0;
        if !sdp.equalities.is_empty() {
            for e in &sdp.equalities {
                for &(j, v) in &e.coeffs {
                    a.push(row, j, v);
                }
                b.push(e.rhs);
                row += 1;
            }
            cones.push(SupportedConeT::ZeroConeT(sdp.equalities.len()));
        }
        if !sdp.inequalities.is_empty() {
            for e in &sdp.inequalities {
                for &(j, v) in &e.coeffs {
                    a.push(row, j, v);
                }
                b.push(e.rhs);
                row += 1;
            }
            cones.push(SupportedConeT::NonnegativeConeT(sdp.inequalities.len()));
        }
        for lmi in &sdp.lmis {
            let d = lmi.constant.nrows();
            // s = F₀ + Σ xₖFₖ  ⇒  b = svec(F₀), A column k = −svec(Fₖ)
            b.extend(svec(&lmi.constant));
            for (k, f) in &lmi.terms {
                svec_entries(f, row, *k, -1.0, &mut a);
            }
            row += d * (d + 1) / 2;
            cones.push(SupportedConeT::PSDTriangleConeT(d));
        }
        let amat = CscMatrix::new_from_triplets(row, nv, a.i, a.j, a.v);
        let p = CscMatrix::zeros((nv, nv));
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(500)
            .build()
            .map_err(|e| Error::Backend(format!("settings: {e}")))?;
        let mut solver = DefaultSolver::new(&p, &sdp.objective, &amat, &b, &cones, settings)
            .map_err(|e| Error::Backend(format!("setup: {e}")))?;
        solver.solve();
        let status = solver.solution.status;
        match status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => Ok(SdpSolution {
                status: SdpStatus::Solved,
                x: solver.solution.x.clone(),
            }),
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                Ok(SdpSolution {
                    status: SdpStatus::Infeasible,
                    x: vec![0.0; nv],
                })
            }
            other => Err(Error::Backend(format!("clarabel terminated with {other:?}"))),
        }
    }
}

/// Feasibility program: maximize t with Θ ⪯ −tI, P, Q, R ⪰ tI, Σ traces = dimension,
/// |SlackM|, |SlackG| entries ≤ SLACK_BOUND.
pub fn to_sdp(p: &LmiProblem) -> SdpInstance {
    let nx = p.num_scalars();
    let t = nx;
    let num_vars = nx + 1;
    let d = p.dimension();
    let mut objective = vec![0.0; num_vars];
    objective[t] = -1.0;

    let coeffs = p.coefficient_matrices();
    let mut terms: Vec<(usize, Matrix)> = coeffs
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.iter().any(|&v| v != 0.0))
        .map(|(k, c)| (k, -c))
        .collect();
    terms.push((t, -Matrix::identity(d, d)));
    let mut lmis = vec![MatrixInequality {
        constant: Matrix::zeros(d, d),
        terms,
    }];

    let mut trace = Vec::new();
    let mut inequalities = Vec::new();
    for b in &p.manifest {
        if b.positive {
            let mut terms = Vec::new();
            for k in 0..b.scalar_count() {
                let (i, j) = b.position(k);
                let mut e = Matrix::zeros(b.rows, b.rows);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                terms.push((b.offset + k, e));
                if i == j {
                    trace.push((b.offset + k, 1.0));
                }
            }
            terms.push((t, -Matrix::identity(b.rows, b.rows)));
            lmis.push(MatrixInequality {
                constant: Matrix::zeros(b.rows, b.rows),
                terms,
            });
        } else {
            for k in 0..b.scalar_count() {
                let j = b.offset + k;
                inequalities.push(LinearConstraint {
                    coeffs: vec![(j, 1.0)],
                    rhs: SLACK_BOUND,
                });
                inequalities.push(LinearConstraint {
                    coeffs: vec![(j, -1.0)],
                    rhs: SLACK_BOUND,
                });
            }
        }
    }
    // t ≤ 1 keeps the program bounded even for degenerate data.
    inequalities.push(LinearConstraint {
        coeffs: vec![(t, 1.0)],
        rhs: 1.0,
    });
    SdpInstance {
        num_vars,
        objective,
        lmis,
        equalities: vec![LinearConstraint {
            coeffs: trace,
            rhs: d as f64,
        }],
        inequalities,
    }
}

/// Outcome of one fixed-λ solve, re-verified without the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiCertificate {
    pub feasible: bool,
    pub lambda_used: f64,
    pub margin: f64,
    pub variables: LmiVars,
    pub max_eigenvalue_of_theta: f64,
    pub min_eigenvalue_of_pqr: f64,
    pub slack_m_singular_values: Vec<f64>,
    #[serde(rename = "K", default, with = "crate::model::mat::opt")]
    pub k: Option<Matrix>,
}

fn max_sym_eig(m: &Matrix) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().max()
}

fn min_sym_eig(m: &Matrix) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().min()
}

/// Independent check of a candidate: Θ ≺ 0, P/Q/R ≻ 0, SlackM invertible.
pub fn reverify(p: &LmiProblem, vars: &LmiVars) -> Result<(f64, f64, Vec<f64>)> {
    let theta = p.assemble(vars)?;
    let max_theta = max_sym_eig(&theta);
    let min_pqr = p
        .manifest
        .iter()
        .filter(|b| b.positive)
        .map(|b| min_sym_eig(vars.req(&b.name).expect("manifest variable")))
        .fold(f64::INFINITY, f64::min);
    let sv = singular_values(vars.req("SlackM")?);
    Ok((max_theta, min_pqr, sv))
}

/// Solves the LMI at its fixed λ; infeasibility is a result, backend failure an error.
pub fn solve_feasibility(p: &LmiProblem, backend: &dyn SdpBackend) -> Result<LmiCertificate> {
    let sdp = to_sdp(p);
    let sol = backend.solve(&sdp)?;
    let x = &sol.x;
    let margin = match sol.status {
        SdpStatus::Solved => x[p.num_scalars()],
        SdpStatus::Infeasible => f64::NEG_INFINITY,
    };
    let vars = p.unpack(&x[..p.num_scalars()]);
    let (max_theta, min_pqr, sv) = reverify(p, &vars)?;
    let smin = sv.last().copied().unwrap_or(0.0);
    let feasible = sol.status == SdpStatus::Solved
        && margin >= STRICT_EPS
        && max_theta < 0.0
        && min_pqr > 0.0
        && smin > MIN_SLACK_SIGMA;
    let mut cert = LmiCertificate {
        feasible,
        lambda_used: p.lambda,
        margin,
        variables: vars,
        max_eigenvalue_of_theta: max_theta,
        min_eigenvalue_of_pqr: min_pqr,
        slack_m_singular_values: sv,
        k: None,
    };
    if feasible {
        cert.k = Some(recover_gain(&cert)?);
    }
    Ok(cert)
}

/// K = SlackM⁻¹ · SlackG.
pub fn recover_gain(cert: &LmiCertificate) -> Result<Matrix> {
    if !cert.feasible {
        return Err(Error::Precondition("gain recovery needs a feasible certificate".into()));
    }
    let sm = cert.variables.req("SlackM")?;
    let sg = cert.variables.req("SlackG")?;
    let sv = singular_values(sm);
    let smin = sv.last().copied().unwrap_or(0.0);
    if smin <= MIN_SLACK_SIGMA {
        return Err(Error::Conditioning {
            sigma_min: smin,
            singular_values: sv,
        });
    }
    sm.clone().lu().solve(sg).ok_or(Error::Conditioning {
        sigma_min: smin,
        singular_values: sv,
    })
}

/// Error-system data for the LMI builders.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayFamily {
    pub n1: Matrix,
    pub n2: Matrix,
    pub ntau1: Matrix,
    pub ntau2: Matrix,
    pub h_pair: Option<(Matrix, Matrix)>,
    pub tau: f64,
    pub h: Option<f64>,
}

impl DelayFamily {
    pub fn build(&self, lambda: f64) -> Result<LmiProblem> {
        match (&self.h_pair, self.h) {
            (Some((nh1, nh2)), Some(h)) => build_two_delay(
                &self.n1, &self.n2, &self.ntau1, &self.ntau2, nh1, nh2, self.tau, h, lambda,
            ),
            _ => build_single_delay(&self.n1, &self.n2, &self.ntau1, &self.ntau2, self.tau, lambda),
        }
    }

    /// Analysis-only family for fixed closed-loop matrices (K has no effect).
    pub fn closed_loop(n: &Matrix, ntau: &Matrix, nh: Option<&Matrix>, tau: f64, h: Option<f64>) -> Self {
        let s = n.nrows();
        let z = Matrix::zeros(1, s);
        Self {
            n1: n.clone(),
            n2: z.clone(),
            ntau1: ntau.clone(),
            ntau2: z.clone(),
            h_pair: nh.map(|m| (m.clone(), z.clone())),
            tau,
            h,
        }
    }
}

/// Default λ values followed by smaller ones and then user additions.
pub fn default_lambda_grid(extra: &[f64]) -> Vec<f64> {
    let mut g = vec![
        0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001,
    ];
    for &x in extra {
        if x.is_finite() && !g.contains(&x) {
            g.push(x);
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAttempt {
    pub lambda: f64,
    pub outcome: String,
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best: Option<LmiCertificate>,
    pub attempts: Vec<GridAttempt>,
    pub backend_failures: usize,
}

impl GridOutcome {
    pub fn all_backend_failures(&self) -> bool {
        self.best.is_none() && self.backend_failures == self.attempts.len()
    }
}

/// Solves every grid point (concurrently if requested) and returns the first feasible one in grid order.
pub fn lambda_grid(
    family: &DelayFamily,
    grid: &[f64],
    backend: &dyn SdpBackend,
    par: Parallelism,
) -> GridOutcome {
    let results = par.map(grid, |&lam| family.build(lam).and_then(|p| solve_feasibility(&p, backend)));
    let mut attempts = Vec::new();
    let mut best = None;
    let mut backend_failures = 0;
    for (&lam, r) in grid.iter().zip(results) {
        match r {
            Ok(c) => {
                attempts.push(GridAttempt {
                    lambda: lam,
                    outcome: if c.feasible { "feasible" } else { "infeasible" }.into(),
                    margin: c.margin.is_finite().then_some(c.margin),
                });
                if c.feasible && best.is_none() {
                    best = Some(c);
                }
            }
            Err(e) => {
                backend_failures += 1;
                attempts.push(GridAttempt {
                    lambda: lam,
                    outcome: format!("error: {e}"),
                    margin: None,
                });
            }
        }
    }
    GridOutcome {
        best,
        attempts,
        backend_failures,
    }
}

/// Eigenvalues of the closed-loop delay-free part, handy for diagnostics.
pub fn closed_loop_spectrum(family: &DelayFamily, k: &Matrix) -> Result<Vec<num_complex::Complex64>> {
    eigenvalues(&(&family.n1 + k * &family.n2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn clarabel_svec_convention() {
        // minimize x s.t. [[x, 1], [1, x]] ⪰ 0  ⇒  x = 1
        let sdp = SdpInstance {
            num_vars: 1,
            objective: vec![1.0],
            lmis: vec![MatrixInequality {
                constant: dmatrix![0.0, 1.0; 1.0, 0.0],
                terms: vec![(0, Matrix::identity(2, 2))],
            }],
            equalities: vec![],
            inequalities: vec![],
        };
        let sol = ClarabelBackend.solve(&sdp).unwrap();
        assert_eq!(sol.status, SdpStatus::Solved);
        assert!((sol.x[0] - 1.0).abs() < 1e-6, "{}", sol.x[0]);

        // off-diagonal coefficient: minimize x s.t. [[1, x], [x, 1]] ⪰ 0 ⇒ x = −1
        let sdp = SdpInstance {
            num_vars: 1,
            objective: vec![1.0],
            lmis: vec![MatrixInequality {
                constant: Matrix::identity(2, 2),
                terms: vec![(0, dmatrix![0.0, 1.0; 1.0, 0.0])],
            }],
            equalities: vec![],
            inequalities: vec![],
        };
        let sol = ClarabelBackend.solve(&sdp).unwrap();
        assert!((sol.x[0] + 1.0).abs() < 1e-6, "{}", sol.x[0]);
    }

    #[test]
    fn selectors_are_orthonormal() {
        let n = 2;
        for i in 0..6 {
            for j in 0..6 {
                let g = selector(6, i, n).transpose() * selector(6, j, n);
                let want = if i == j { Matrix::identity(n, n) } else { Matrix::zeros(n, n) };
                assert_eq!(g, want);
            }
        }
    }

    #[test]
    fn symmetric_positions_follow_svec_order() {
        let b = VarBlock {
            name: "P".into(),
            rows: 3,
            cols: 3,
            symmetric: true,
            positive: true,
            offset: 0,
        };
        let pos: Vec<_> = (0..6).map(|k| b.position(k)).collect();
        assert_eq!(pos, vec![(0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2)]);
    }

    #[test]
    fn theta_is_symmetric_and_sized() {
        let p = build_two_delay(
            &dmatrix![-1.0],
            &dmatrix![0.0; 1.0],
            &dmatrix![0.2],
            &dmatrix![1.0; 0.0],
            &dmatrix![0.1],
            &dmatrix![0.0; 0.0],
            0.1,
            0.2,
            1.0,
        )
        .unwrap();
        assert_eq!(p.dimension(), 6);
        for c in p.coefficient_matrices() {
            assert_eq!(c.shape(), (6, 6));
            assert!((&c - c.transpose()).norm() < 1e-15);
        }
    }

    #[test]
    fn delay_preconditions() {
        let one = dmatrix![1.0];
        assert!(matches!(
            build_single_delay(&one, &one, &one, &one, 0.0, 1.0),
            Err(Error::InvalidDelay(_))
        ));
        assert!(matches!(
            build_two_delay(&one, &one, &one, &one, &one, &one, 1.0, 1.0, 1.0),
            Err(Error::InvalidDelay(_))
        ));
    }

    #[test]
    fn stable_scalar_is_feasible_at_first_grid_point() {
        let fam = DelayFamily {
            n1: dmatrix![-2.0],
            n2: dmatrix![0.0],
            ntau1: dmatrix![0.0],
            ntau2: dmatrix![0.0],
            h_pair: None,
            tau: 1.0,
            h: None,
        };
        let out = lambda_grid(&fam, &default_lambda_grid(&[]), &ClarabelBackend, Parallelism::Sequential);
        let c = out.best.expect("feasible");
        assert_eq!(c.lambda_used, 0.1);
        assert!(c.max_eigenvalue_of_theta < 0.0);
    }

    #[test]
    fn unstable_untouched_mode_is_infeasible_everywhere() {
        let fam = DelayFamily {
            n1: dmatrix![1.0],
            n2: dmatrix![0.0],
            ntau1: dmatrix![0.0],
            ntau2: dmatrix![0.0],
            h_pair: None,
            tau: 1.0,
            h: None,
        };
        let out = lambda_grid(&fam, &default_lambda_grid(&[]), &ClarabelBackend, Parallelism::Parallel);
        assert!(out.best.is_none());
        assert_eq!(out.backend_failures, 0);
    }

    #[test]
    fn identity_slack_gives_slack_g() {
        let p = build_single_delay(
            &dmatrix![-1.0, 0.0; 0.0, -1.0],
            &Matrix::zeros(3, 2),
            &Matrix::zeros(2, 2),
            &Matrix::zeros(3, 2),
            1.0,
            1.0,
        )
        .unwrap();
        let mut vars = p.unpack(&vec![0.0; p.num_scalars()]);
        for b in &mut vars.blocks {
            if b.name == "SlackM" {
                b.value = Matrix::identity(2, 2);
            }
            if b.name == "SlackG" {
                b.value = dmatrix![1.0, 2.0, 3.0; 4.0, 5.0, 6.0];
            }
        }
        let cert = LmiCertificate {
            feasible: true,
            lambda_used: 1.0,
            margin: 1.0,
            variables: vars.clone(),
            max_eigenvalue_of_theta: -1.0,
            min_eigenvalue_of_pqr: 1.0,
            slack_m_singular_values: vec![1.0, 1.0],
            k: None,
        };
        assert_eq!(recover_gain(&cert).unwrap(), *vars.get("SlackG").unwrap());
    }

    #[test]
    fn dump_lists_triplets() {
        let p = build_single_delay(&dmatrix![-1.0], &dmatrix![1.0], &dmatrix![0.0], &dmatrix![0.0], 1.0, 0.5)
            .unwrap();
        let text = p.dump();
        assert!(text.lines().any(|l| l.starts_with("P[0,0] ")));
        assert!(text.lines().any(|l| l.starts_with("SlackG[0,0] ")));
    }
}
