//! Plants, functionals and observer realizations, with validation, the
//! decoupling-residual evaluator and JSON ingestion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, rank, Matrix};

/// Serde adapter: `{"rows", "cols", "data"}` in row-major order on output; also
/// accepts nested arrays on input.
pub mod mat {
    use super::Matrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Dense {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Dense(Dense),
        Nested(Vec<Vec<f64>>),
        Scalar(f64),
    }

    pub fn to_dense(m: &Matrix) -> (usize, usize, Vec<f64>) {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        (m.nrows(), m.ncols(), data)
    }

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let (rows, cols, data) = to_dense(m);
        Dense { rows, cols, data }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Dense(x) => {
                if x.data.len() != x.rows * x.cols {
                    return Err(D::Error::custom(format!(
                        "matrix data has {} entries, expected {}x{}",
                        x.data.len(),
                        x.rows,
                        x.cols
                    )));
                }
                Ok(Matrix::from_row_slice(x.rows, x.cols, &x.data))
            }
            Repr::Nested(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, |x| x.len());
                if rows.iter().any(|x| x.len() != c) {
                    return Err(D::Error::custom("ragged nested matrix"));
                }
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                Ok(Matrix::from_row_slice(r, c, &flat))
            }
            Repr::Scalar(v) => Ok(Matrix::from_element(1, 1, v)),
        }
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Option<Matrix>, s: S) -> Result<S::Ok, S::Error> {
            #[derive(Serialize)]
            struct W<'a>(#[serde(with = "super")] &'a Matrix);
            m.as_ref().map(W).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Matrix>, D::Error> {
            #[derive(Deserialize)]
            struct W(#[serde(with = "super")] Matrix);
            Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
        }
    }
}

/// A linear plant with one state delay and two measurement delays:
/// ẋ = A x + A_τ x(t−τ) + B u, y = C_τ x(t−τ) + C_h x(t−h).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeDelaySystem {
    #[serde(rename = "A", with = "mat")]
    pub a: Matrix,
    #[serde(rename = "A_tau", with = "mat")]
    pub a_tau: Matrix,
    #[serde(rename = "B", with = "mat")]
    pub b: Matrix,
    #[serde(rename = "C_tau", with = "mat")]
    pub c_tau: Matrix,
    #[serde(rename = "C_h", with = "mat")]
    pub c_h: Matrix,
    pub tau: f64,
    pub h: f64,
}

/// A single violated invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub field: String,
    pub message: String,
}

impl Finding {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub const DELAY_MATCH_TOL: f64 = 1e-12;

impl TimeDelaySystem {
    /// Builds a plant after checking every invariant.
    pub fn new(
        a: Matrix,
        a_tau: Matrix,
        b: Matrix,
        c_tau: Matrix,
        c_h: Matrix,
        tau: f64,
        h: f64,
    ) -> Result<Self> {
        let sys = Self {
            a,
            a_tau,
            b,
            c_tau,
            c_h,
            tau,
            h,
        };
        sys.ensure_valid()?;
        Ok(sys)
    }

    /// Plant measured as y = C x(t−τ).
    pub fn aligned(a: Matrix, a_tau: Matrix, b: Matrix, c: Matrix, tau: f64) -> Result<Self> {
        let c_h = Matrix::zeros(c.nrows(), c.ncols());
        Self::new(a, a_tau, b, c, c_h, tau, tau)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn p(&self) -> usize {
        self.c_tau.nrows()
    }

    /// C := C_τ + C_h, meaningful when h = τ.
    pub fn merged_c(&self) -> Matrix {
        &self.c_tau + &self.c_h
    }

    pub fn delays_coincide(&self) -> bool {
        (self.h - self.tau).abs() <= DELAY_MATCH_TOL * self.tau.max(1.0)
    }

    pub fn validate(&self) -> Vec<Finding> {
        let mut out = Vec::new();
        let n = self.a.nrows();
        if n == 0 {
            out.push(Finding::new("A", "A must have at least one row"));
        }
        if self.a.ncols() != n {
            out.push(Finding::new("A", "A must be square"));
        }
        if self.a_tau.shape() != (n, n) {
            out.push(Finding::new("A_tau", format!("A_tau must be {n}x{n}")));
        }
        if self.b.nrows() != n {
            out.push(Finding::new("B", format!("B must have {n} rows")));
        }
        if self.b.ncols() == 0 {
            out.push(Finding::new("B", "B must have at least one column"));
        }
        if self.c_tau.ncols() != n || self.c_tau.nrows() == 0 {
            out.push(Finding::new("C_tau", format!("C_tau must be p x {n} with p >= 1")));
        }
        if self.c_h.shape() != self.c_tau.shape() {
            out.push(Finding::new("C_h", "C_h must have the shape of C_tau"));
        }
        for (name, m) in [
            ("A", &self.a),
            ("A_tau", &self.a_tau),
            ("B", &self.b),
            ("C_tau", &self.c_tau),
            ("C_h", &self.c_h),
        ] {
            if m.iter().any(|x| !x.is_finite()) {
                out.push(Finding::new(name, format!("{name} has non-finite entries")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            out.push(Finding::new("tau", "tau must be positive"));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            out.push(Finding::new("h", "h must be positive"));
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let f = self.validate();
        if f.is_empty() {
            Ok(())
        } else {
            let msg: Vec<String> = f.iter().map(|x| x.message.clone()).collect();
            Err(Error::InvalidInput(msg.join("; ")))
        }
    }
}

/// Generalized functional H₀x(t) + H_τx(t−τ) + H_hx(t−h).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSpec {
    #[serde(rename = "H0", with = "mat")]
    pub h0: Matrix,
    #[serde(rename = "H_tau", with = "mat")]
    pub h_tau: Matrix,
    #[serde(rename = "H_h", with = "mat")]
    pub h_h: Matrix,
}

impl FunctionalSpec {
    pub fn new(h0: Matrix, h_tau: Matrix, h_h: Matrix) -> Result<Self> {
        let s = h0.nrows();
        if h_tau.nrows() != s || h_h.nrows() != s {
            return Err(Error::Shape("H0, H_tau and H_h need equal row counts".into()));
        }
        if h_tau.ncols() != h0.ncols() || h_h.ncols() != h0.ncols() {
            return Err(Error::Shape("H0, H_tau and H_h need equal column counts".into()));
        }
        Ok(Self { h0, h_tau, h_h })
    }

    /// z = F x(t).
    pub fn instantaneous(f: Matrix) -> Self {
        let z = Matrix::zeros(f.nrows(), f.ncols());
        Self {
            h0: f,
            h_tau: z.clone(),
            h_h: z,
        }
    }

    /// z = F₀ x(t) + F_τ x(t−τ).
    pub fn extended(f0: Matrix, f_tau: Matrix) -> Result<Self> {
        let z = Matrix::zeros(f0.nrows(), f0.ncols());
        Self::new(f0, f_tau, z)
    }

    pub fn order(&self) -> usize {
        self.h0.nrows()
    }

    pub fn stacked(&self) -> Matrix {
        crate::linalg::hstack(&[&self.h0, &self.h_tau, &self.h_h])
    }

    pub fn validate_against(&self, sys: &TimeDelaySystem) -> Vec<Finding> {
        let mut out = Vec::new();
        let n = sys.n();
        if self.h0.nrows() == 0 {
            out.push(Finding::new("H0", "functional must have at least one row"));
        }
        for (name, m) in [("H0", &self.h0), ("H_tau", &self.h_tau), ("H_h", &self.h_h)] {
            if m.ncols() != n {
                out.push(Finding::new(name, format!("{name} must have {n} columns")));
            }
            if m.nrows() != self.h0.nrows() {
                out.push(Finding::new(name, format!("{name} row count differs from H0")));
            }
            if m.iter().any(|x| !x.is_finite()) {
                out.push(Finding::new(name, format!("{name} has non-finite entries")));
            }
        }
        if out.is_empty() && rank(&self.stacked()) < self.order() {
            out.push(Finding::new("H0", "stack(H0 H_tau H_h) must have full row rank"));
        }
        out
    }

    pub fn has_h_channel(&self) -> bool {
        self.h_h.iter().any(|&x| x != 0.0)
    }
    pub fn has_tau_channel(&self) -> bool {
        self.h_tau.iter().any(|&x| x != 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Structure {
    A,
    B,
    C,
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Structure::A => "A",
            Structure::B => "B",
            Structure::C => "C",
        };
        f.write_str(s)
    }
}

/// Every observer matrix of the three structures; blocks a structure does not use stay zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverRealization {
    pub structure: Structure,
    pub order: usize,
    #[serde(rename = "M", with = "mat")]
    pub m: Matrix,
    #[serde(rename = "M_tau", with = "mat")]
    pub m_tau: Matrix,
    #[serde(rename = "M_h", with = "mat")]
    pub m_h: Matrix,
    #[serde(rename = "N", with = "mat")]
    pub n: Matrix,
    #[serde(rename = "N_tau", with = "mat")]
    pub n_tau: Matrix,
    #[serde(rename = "N_h", with = "mat")]
    pub n_h: Matrix,
    #[serde(rename = "G", with = "mat")]
    pub g: Matrix,
    #[serde(rename = "G_tau", with = "mat")]
    pub g_tau: Matrix,
    #[serde(rename = "G_h", with = "mat")]
    pub g_h: Matrix,
    #[serde(rename = "G_tautau", with = "mat")]
    pub g_tautau: Matrix,
    #[serde(rename = "G_tauh", with = "mat")]
    pub g_tauh: Matrix,
    #[serde(rename = "G_hh", with = "mat")]
    pub g_hh: Matrix,
    #[serde(rename = "J", with = "mat")]
    pub j: Matrix,
    #[serde(rename = "J_tau", with = "mat")]
    pub j_tau: Matrix,
    #[serde(rename = "J_h", with = "mat")]
    pub j_h: Matrix,
    #[serde(rename = "J_tautau", with = "mat")]
    pub j_tautau: Matrix,
    #[serde(rename = "J_tauh", with = "mat")]
    pub j_tauh: Matrix,
    #[serde(rename = "J_hh", with = "mat")]
    pub j_hh: Matrix,
}

impl ObserverRealization {
    /// All-zero realization of order `s` with `p` outputs and `m` inputs.
    pub fn zeros(structure: Structure, s: usize, p: usize, m: usize) -> Self {
        let sp = Matrix::zeros(s, p);
        let ss = Matrix::zeros(s, s);
        let sm = Matrix::zeros(s, m);
        Self {
            structure,
            order: s,
            m: sp.clone(),
            m_tau: sp.clone(),
            m_h: sp.clone(),
            n: ss.clone(),
            n_tau: ss.clone(),
            n_h: ss,
            g: sp.clone(),
            g_tau: sp.clone(),
            g_h: sp.clone(),
            g_tautau: sp.clone(),
            g_tauh: sp.clone(),
            g_hh: sp,
            j: sm.clone(),
            j_tau: sm.clone(),
            j_h: sm.clone(),
            j_tautau: sm.clone(),
            j_tauh: sm.clone(),
            j_hh: sm,
        }
    }

    pub fn named_blocks(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("M", &self.m),
            ("M_tau", &self.m_tau),
            ("M_h", &self.m_h),
            ("N", &self.n),
            ("N_tau", &self.n_tau),
            ("N_h", &self.n_h),
            ("G", &self.g),
            ("G_tau", &self.g_tau),
            ("G_h", &self.g_h),
            ("G_tautau", &self.g_tautau),
            ("G_tauh", &self.g_tauh),
            ("G_hh", &self.g_hh),
            ("J", &self.j),
            ("J_tau", &self.j_tau),
            ("J_h", &self.j_h),
            ("J_tautau", &self.j_tautau),
            ("J_tauh", &self.j_tauh),
            ("J_hh", &self.j_hh),
        ]
    }

    pub fn block(&self, name: &str) -> Option<&Matrix> {
        self.named_blocks().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        Some(match name {
            "M" => &mut self.m,
            "M_tau" => &mut self.m_tau,
            "M_h" => &mut self.m_h,
            "N" => &mut self.n,
            "N_tau" => &mut self.n_tau,
            "N_h" => &mut self.n_h,
            "G" => &mut self.g,
            "G_tau" => &mut self.g_tau,
            "G_h" => &mut self.g_h,
            "G_tautau" => &mut self.g_tautau,
            "G_tauh" => &mut self.g_tauh,
            "G_hh" => &mut self.g_hh,
            "J" => &mut self.j,
            "J_tau" => &mut self.j_tau,
            "J_h" => &mut self.j_h,
            "J_tautau" => &mut self.j_tautau,
            "J_tauh" => &mut self.j_tauh,
            "J_hh" => &mut self.j_hh,
            _ => return None,
        })
    }

    /// Names of blocks the structure tag forces to zero.
    fn gated(&self) -> &'static [&'static str] {
        match self.structure {
            Structure::A => &[
                "M_tau", "M_h", "N_tau", "N_h", "G_h", "G_tautau", "G_tauh", "G_hh", "J_h",
                "J_tautau", "J_tauh", "J_hh",
            ],
            Structure::B => &[
                "M_tau", "M_h", "N_h", "G_h", "G_tautau", "G_tauh", "G_hh", "J_h", "J_tautau",
                "J_tauh", "J_hh",
            ],
            Structure::C => &[],
        }
    }

    /// Checks block shapes against (s, p, m) and the structure gating.
    pub fn check_shape(&self, p: usize, m: usize) -> Result<()> {
        let s = self.order;
        for (name, blk) in self.named_blocks() {
            let want = match name.as_bytes()[0] {
                b'N' => (s, s),
                b'J' => (s, m),
                _ => (s, p),
            };
            if blk.shape() != want {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {}x{}",
                    blk.nrows(),
                    blk.ncols(),
                    want.0,
                    want.1
                )));
            }
        }
        let gated = self.gated();
        for (name, blk) in self.named_blocks() {
            if gated.contains(&name) && blk.iter().any(|&x| x != 0.0) {
                return Err(Error::Shape(format!(
                    "{name} must be zero for structure {}",
                    self.structure
                )));
            }
        }
        Ok(())
    }

    /// Error-dynamics coefficients as (delay, matrix) pairs.
    pub fn error_terms(&self, tau: f64, h: f64) -> Vec<(f64, Matrix)> {
        let mut terms = vec![(0.0, self.n.clone())];
        if self.structure != Structure::A {
            terms.push((tau, self.n_tau.clone()));
        }
        if self.structure == Structure::C {
            terms.push((h, self.n_h.clone()));
        }
        terms
    }
}

/// One named coefficient block of the error equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedBlock {
    pub name: String,
    #[serde(with = "mat")]
    pub value: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecouplingResidual {
    pub blocks: Vec<NamedBlock>,
    pub max_abs: f64,
}

impl DecouplingResidual {
    fn from_blocks(list: Vec<(String, Matrix)>) -> Self {
        let max_abs = list.iter().map(|(_, m)| max_abs(m)).fold(0.0, f64::max);
        Self {
            blocks: list
                .into_iter()
                .map(|(name, value)| NamedBlock { name, value })
                .collect(),
            max_abs,
        }
    }

    pub fn block(&self, name: &str) -> Option<&Matrix> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &b.value)
    }
}

/// Evaluates every coefficient block of the error equation for `obs`.
pub fn residuals(
    sys: &TimeDelaySystem,
    fs: &FunctionalSpec,
    obs: &ObserverRealization,
) -> Result<DecouplingResidual> {
    sys.ensure_valid()?;
    let n = sys.n();
    if fs.h0.ncols() != n || fs.h_tau.ncols() != n || fs.h_h.ncols() != n {
        return Err(Error::Shape("functional column count differs from plant order".into()));
    }
    if fs.order() != obs.order {
        return Err(Error::Shape(format!(
            "observer order {} differs from functional order {}",
            obs.order,
            fs.order()
        )));
    }
    obs.check_shape(sys.p(), sys.m())?;
    match obs.structure {
        Structure::A | Structure::B => {
            if !sys.delays_coincide() {
                return Err(Error::StructureNotApplicable(format!(
                    "structure {} requires h = tau",
                    obs.structure
                )));
            }
            if fs.has_h_channel() {
                return Err(Error::Shape(format!(
                    "structure {} does not accept an H_h term",
                    obs.structure
                )));
            }
        }
        Structure::C => {}
    }
    let (a, at, b) = (&sys.a, &sys.a_tau, &sys.b);
    let (h0, ht, hh) = (&fs.h0, &fs.h_tau, &fs.h_h);
    let o = obs;
    let list: Vec<(String, Matrix)> = match obs.structure {
        Structure::A => {
            let c = sys.merged_c();
            let vals = [
                &o.n * h0 - h0 * a,
                &o.j - h0 * b,
                &o.j_tau - ht * b + &o.m * &c * b,
                &o.n * ht + &o.g * &c - &o.n * &o.m * &c + &o.m * &c * a - h0 * at - ht * a,
                &o.g_tau * &c + &o.m * &c * at - ht * at,
            ];
            let prefix = if fs.has_tau_channel() { "Lt" } else { "L" };
            vals.into_iter()
                .enumerate()
                .map(|(i, v)| (format!("{prefix}{}", i + 1), v))
                .collect()
        }
        Structure::B => {
            let c = sys.merged_c();
            let vals = [
                &o.n * h0 - h0 * a,
                &o.j - h0 * b,
                &o.j_tau - ht * b + &o.m * &c * b,
                &o.n * ht + &o.n_tau * h0 + &o.g * &c - &o.n * &o.m * &c + &o.m * &c * a
                    - h0 * at
                    - ht * a,
                &o.n_tau * ht + &o.g_tau * &c - &o.n_tau * &o.m * &c + &o.m * &c * at - ht * at,
            ];
            vals.into_iter()
                .enumerate()
                .map(|(i, v)| (format!("Lhat{}", i + 1), v))
                .collect()
        }
        Structure::C => {
            let (ct, ch) = (&sys.c_tau, &sys.c_h);
            let gbar = &o.g - &o.n * &o.m;
            let gt = &o.g_tau - &o.n * &o.m_tau - &o.n_tau * &o.m;
            let gh = &o.g_h - &o.n * &o.m_h - &o.n_h * &o.m;
            let gtt = &o.g_tautau - &o.n_tau * &o.m_tau;
            let gth = &o.g_tauh - &o.n_tau * &o.m_h - &o.n_h * &o.m_tau;
            let ghh = &o.g_hh - &o.n_h * &o.m_h;
            let vals = [
                &o.j - h0 * b,
                &o.j_tau - ht * b + &o.m * ct * b,
                &o.j_h - hh * b + &o.m * ch * b,
                &o.j_tautau + &o.m_tau * ct * b,
                &o.j_hh + &o.m_h * ch * b,
                &o.j_tauh + &o.m_tau * ch * b + &o.m_h * ct * b,
                &o.n * h0 - h0 * a,
                &o.n * ht + &o.n_tau * h0 + &gbar * ct + &o.m * ct * a - h0 * at - ht * a,
                &o.n * hh + &o.n_h * h0 + &gbar * ch + &o.m * ch * a - hh * a,
                &o.n_tau * ht + &gt * ct + &o.m * ct * at + &o.m_tau * ct * a - ht * at,
                &o.n_h * hh + &gh * ch + &o.m_h * ch * a,
                &o.n_tau * hh + &o.n_h * ht + &gt * ch + &gh * ct + &o.m * ch * at
                    + &o.m_tau * ch * a
                    + &o.m_h * ct * a
                    - hh * at,
                &gtt * ch + &gth * ct + &o.m_tau * ch * at + &o.m_h * ct * at,
                &ghh * ct + &gth * ch + &o.m_h * ch * at,
                &gtt * ct + &o.m_tau * ct * at,
                &ghh * ch,
            ];
            vals.into_iter()
                .enumerate()
                .map(|(i, v)| (format!("Lbreve{}", i + 1), v))
                .collect()
        }
    };
    Ok(DecouplingResidual::from_blocks(list))
}

/// Input document: plant plus functional, with optional design hints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    #[serde(rename = "A", with = "mat")]
    pub a: Matrix,
    #[serde(rename = "A_tau", with = "mat")]
    pub a_tau: Matrix,
    #[serde(rename = "B", with = "mat")]
    pub b: Matrix,
    #[serde(rename = "C_tau", with = "mat")]
    pub c_tau: Matrix,
    #[serde(rename = "C_h", default, with = "mat::opt", skip_serializing_if = "Option::is_none")]
    pub c_h: Option<Matrix>,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(rename = "H0", alias = "F", with = "mat")]
    pub h0: Matrix,
    #[serde(rename = "H_tau", default, with = "mat::opt", skip_serializing_if = "Option::is_none")]
    pub h_tau: Option<Matrix>,
    #[serde(rename = "H_h", default, with = "mat::opt", skip_serializing_if = "Option::is_none")]
    pub h_h: Option<Matrix>,
    /// Extra rows R for the augmented functional stack(F; R).
    #[serde(rename = "R", default, with = "mat::opt", skip_serializing_if = "Option::is_none")]
    pub r: Option<Matrix>,
    /// Extra delayed rows F_d for the extended functional.
    #[serde(rename = "F_d", default, with = "mat::opt", skip_serializing_if = "Option::is_none")]
    pub f_d: Option<Matrix>,
    /// Pinned delayed gain for the scalar Structure-B shortcut.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pin_n_tau: Option<f64>,
}

/// How the measurement was re-timed while loading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputShift {
    /// ỹ(t) = y(t − shift)
    pub shift: f64,
    pub original_h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedProblem {
    pub system: TimeDelaySystem,
    pub functional: FunctionalSpec,
    pub shift: Option<OutputShift>,
    pub file: ProblemFile,
}

impl ProblemFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Builds validated plant and functional, re-timing the output when 0 < h < τ.
    pub fn load(self) -> Result<LoadedProblem> {
        let p = self.c_tau.nrows();
        let n = self.a.nrows();
        let c_h = self.c_h.clone().unwrap_or_else(|| Matrix::zeros(p, n));
        let h = self.h.unwrap_or(self.tau);
        let mut sys = TimeDelaySystem {
            a: self.a.clone(),
            a_tau: self.a_tau.clone(),
            b: self.b.clone(),
            c_tau: self.c_tau.clone(),
            c_h,
            tau: self.tau,
            h,
        };
        let mut shift = None;
        if sys.tau > 0.0 && h > 0.0 && h < sys.tau && !sys.delays_coincide() {
            // ỹ(t) = y(t−τ+h) = C_h x(t−τ) + C_τ x(t−(2τ−h))
            let s = sys.tau - h;
            shift = Some(OutputShift {
                shift: s,
                original_h: h,
            });
            std::mem::swap(&mut sys.c_tau, &mut sys.c_h);
            sys.h = 2.0 * sys.tau - h;
            if sys.c_h.iter().all(|&x| x == 0.0) {
                sys.h = sys.tau;
            }
        }
        sys.ensure_valid()?;
        let z = || Matrix::zeros(self.h0.nrows(), n);
        let functional = FunctionalSpec {
            h0: self.h0.clone(),
            h_tau: self.h_tau.clone().unwrap_or_else(z),
            h_h: self.h_h.clone().unwrap_or_else(z),
        };
        let findings = functional.validate_against(&sys);
        if !findings.is_empty() {
            let msg: Vec<String> = findings.into_iter().map(|f| f.message).collect();
            return Err(Error::InvalidFunctional(msg.join("; ")));
        }
        Ok(LoadedProblem {
            system: sys,
            functional,
            shift,
            file: self,
        })
    }
}

/// Serialized observer plus its decoupling residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverReport {
    pub observer: ObserverRealization,
    pub residual_max_abs: f64,
}
