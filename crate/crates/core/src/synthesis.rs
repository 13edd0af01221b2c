//! Observer parameters from the constraint XΘ = Υ, block recovery for each
//! structure, stabilizing choices of the free matrix Z, and the design ladder.

use serde::{Deserialize, Serialize};

use crate::dde::{rightmost_roots, spectral_abscissa_fixed, DdeSystem, DEFAULT_NODES};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::existence::{
    build_a_extended, build_a_minimal, build_b, build_c, build_r_projector, check_a_augmented,
    check_a_extended, check_a_minimal, check_b, check_c, extended_functional, invariant_n,
    ConstraintPair, ExistenceReport, HURWITZ_MARGIN,
};
use crate::linalg::{
    eigenvalues, is_hurwitz, max_abs, pbh_detectable, pinv, rank, solve_care, spectral_abscissa,
    vstack, Matrix,
};
use crate::lmi::{
    default_lambda_grid, lambda_grid, ClarabelBackend, DelayFamily, GridAttempt, LmiCertificate,
    SdpBackend,
};
use crate::model::{residuals, FunctionalSpec, ObserverRealization, Structure, TimeDelaySystem};

/// Largest residual accepted from assembly.
pub const ASSEMBLY_TOL: f64 = 1e-8;

/// X = ΥΘ⁺ + Z(I − ΘΘ⁺).
pub fn general_solution(cp: &ConstraintPair, z: &Matrix) -> Result<Matrix> {
    if !cp.is_solvable() {
        return Err(no_solution(cp));
    }
    let k = cp.width();
    if z.shape() != (cp.upsilon.nrows(), k) {
        return Err(Error::Shape(format!(
            "Z must be {}x{k}, got {}x{}",
            cp.upsilon.nrows(),
            z.nrows(),
            z.ncols()
        )));
    }
    let tp = pinv(&cp.theta)?;
    let proj = Matrix::identity(k, k) - &cp.theta * &tp;
    Ok(&cp.upsilon * &tp + z * proj)
}

fn no_solution(cp: &ConstraintPair) -> Error {
    Error::NoSolution {
        theta: cp.theta_rank().rank,
        augmented: cp.augmented_rank().rank,
    }
}

/// The affine map Z ↦ (N, N_τ, N_h) over all solutions of XΘ = Υ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFamily {
    pub constraint: ConstraintPair,
    /// N = n1 + Z n2.
    pub n1: Matrix,
    pub n2: Matrix,
    pub n_tau: Option<(Matrix, Matrix)>,
    pub n_h: Option<(Matrix, Matrix)>,
    particular: Matrix,
    annihilator: Matrix,
}

impl ParamFamily {
    /// `channels` names the N-type blocks of X, instantaneous first.
    pub fn from_constraint(cp: ConstraintPair, channels: &[&str]) -> Result<Self> {
        if !cp.is_solvable() {
            return Err(no_solution(&cp));
        }
        let k = cp.width();
        let tp = pinv(&cp.theta)?;
        let particular = &cp.upsilon * &tp;
        let annihilator = Matrix::identity(k, k) - &cp.theta * &tp;
        let mut pairs = Vec::new();
        for name in channels {
            let sel = cp.selector(name)?;
            pairs.push((&particular * &sel, &annihilator * &sel));
        }
        let mut it = pairs.into_iter();
        let (n1, n2) = it
            .next()
            .ok_or_else(|| Error::InvalidInput("family needs at least one channel".into()))?;
        Ok(Self {
            constraint: cp,
            n1,
            n2,
            n_tau: it.next(),
            n_h: it.next(),
            particular,
            annihilator,
        })
    }

    pub fn z_shape(&self) -> (usize, usize) {
        (self.constraint.upsilon.nrows(), self.constraint.width())
    }

    fn check_z(&self, z: &Matrix) -> Result<()> {
        if z.shape() != self.z_shape() {
            return Err(Error::Shape(format!(
                "Z must be {:?}, got {:?}",
                self.z_shape(),
                z.shape()
            )));
        }
        Ok(())
    }

    pub fn solution(&self, z: &Matrix) -> Result<Matrix> {
        self.check_z(z)?;
        Ok(&self.particular + z * &self.annihilator)
    }

    /// (N, N_τ, N_h) for a given Z; absent channels come back as None.
    pub fn channels(&self, z: &Matrix) -> Result<(Matrix, Option<Matrix>, Option<Matrix>)> {
        self.check_z(z)?;
        let f = |p: &(Matrix, Matrix)| &p.0 + z * &p.1;
        Ok((
            &self.n1 + z * &self.n2,
            self.n_tau.as_ref().map(f),
            self.n_h.as_ref().map(f),
        ))
    }

    /// Error dynamics as (delay, matrix) pairs.
    pub fn error_terms(&self, z: &Matrix, tau: f64, h: f64) -> Result<Vec<(f64, Matrix)>> {
        let (n, nt, nh) = self.channels(z)?;
        let mut out = vec![(0.0, n)];
        if let Some(m) = nt {
            out.push((tau, m));
        }
        if let Some(m) = nh {
            out.push((h, m));
        }
        Ok(out)
    }

    /// Stacked Z-coefficients (N₂ | N_τ₂ | N_h₂).
    fn z_coefficients(&self) -> Matrix {
        let mut parts = vec![&self.n2];
        if let Some(p) = &self.n_tau {
            parts.push(&p.1);
        }
        if let Some(p) = &self.n_h {
            parts.push(&p.1);
        }
        crate::linalg::hstack(&parts)
    }

    /// LMI data for the family; `h` selects the two-delay form.
    pub fn delay_family(&self, tau: f64, h: Option<f64>) -> DelayFamily {
        let s = self.n1.nrows();
        let k = self.n2.nrows();
        let (ntau1, ntau2) = self
            .n_tau
            .clone()
            .unwrap_or_else(|| (Matrix::zeros(s, s), Matrix::zeros(k, s)));
        DelayFamily {
            n1: self.n1.clone(),
            n2: self.n2.clone(),
            ntau1,
            ntau2,
            h_pair: self.n_h.clone(),
            tau,
            h,
        }
    }
}

fn verified(
    sys: &TimeDelaySystem,
    fs: &FunctionalSpec,
    obs: ObserverRealization,
) -> Result<(ObserverRealization, f64)> {
    let r = residuals(sys, fs, &obs)?;
    if r.max_abs > ASSEMBLY_TOL {
        return Err(Error::AssemblyInconsistency {
            residual: r.max_abs,
            limit: ASSEMBLY_TOL,
        });
    }
    Ok((obs, r.max_abs))
}

/// Structure A from X = (Ḡ G_τ M) and an invariant functional F: N = F A F⁺.
pub fn assemble_a_invariant(
    sys: &TimeDelaySystem,
    f: &Matrix,
    cp: &ConstraintPair,
    x: &Matrix,
) -> Result<(ObserverRealization, f64)> {
    let c = sys.merged_c();
    let n = invariant_n(sys, f)?;
    let m = cp.extract(x, "M")?;
    let mut o = ObserverRealization::zeros(Structure::A, f.nrows(), sys.p(), sys.m());
    o.g = cp.extract(x, "Gbar")? + &n * &m;
    o.g_tau = cp.extract(x, "G_tau")?;
    o.j = f * &sys.b;
    o.j_tau = -(&m * &c * &sys.b);
    o.n = n;
    o.m = m;
    verified(sys, &FunctionalSpec::instantaneous(f.clone()), o)
}

/// Structure A from X = (N Ḡ G_τ M) for z = F₀x(t) + F_τx(t−τ).
pub fn assemble_a_extended(
    sys: &TimeDelaySystem,
    fs: &FunctionalSpec,
    cp: &ConstraintPair,
    x: &Matrix,
) -> Result<(ObserverRealization, f64)> {
    let c = sys.merged_c();
    let n = cp.extract(x, "N")?;
    let m = cp.extract(x, "M")?;
    let mut o = ObserverRealization::zeros(Structure::A, fs.order(), sys.p(), sys.m());
    o.g = cp.extract(x, "Gbar")? + &n * &m;
    o.g_tau = cp.extract(x, "G_tau")?;
    o.j = &fs.h0 * &sys.b;
    o.j_tau = &fs.h_tau * &sys.b - &m * &c * &sys.b;
    o.n = n;
    o.m = m;
    verified(sys, fs, o)
}

/// Structure B from X = (N N_τ Ḡ Ḡ_τ M).
pub fn assemble_b(
    sys: &TimeDelaySystem,
    fs: &FunctionalSpec,
    cp: &ConstraintPair,
    x: &Matrix,
) -> Result<(ObserverRealization, f64)> {
    let c = sys.merged_c();
    let n = cp.extract(x, "N")?;
    let nt = cp.extract(x, "N_tau")?;
    let m = cp.extract(x, "M")?;
    let mut o = ObserverRealization::zeros(Structure::B, fs.order(), sys.p(), sys.m());
    o.g = cp.extract(x, "Gbar")? + &n * &m;
    o.g_tau = cp.extract(x, "Gbar_tau")? + &nt * &m;
    o.j = &fs.h0 * &sys.b;
    o.j_tau = &fs.h_tau * &sys.b - &m * &c * &sys.b;
    o.n = n;
    o.n_tau = nt;
    o.m = m;
    verified(sys, fs, o)
}

/// Structure C from the twelve blocks of X.
pub fn assemble_c(
    sys: &TimeDelaySystem,
    fs: &FunctionalSpec,
    cp: &ConstraintPair,
    x: &Matrix,
) -> Result<(ObserverRealization, f64)> {
    let e = |name: &str| cp.extract(x, name);
    let (n, nt, nh) = (e("N")?, e("N_tau")?, e("N_h")?);
    let (m, mt, mh) = (e("M")?, e("M_tau")?, e("M_h")?);
    let (ct, ch, b) = (&sys.c_tau, &sys.c_h, &sys.b);
    let mut o = ObserverRealization::zeros(Structure::C, fs.order(), sys.p(), sys.m());
    o.g = e("Gbar")? + &n * &m;
    o.g_tau = e("Gbreve_tau")? + &n * &mt + &nt * &m;
    o.g_h = e("Gbreve_h")? + &n * &mh + &nh * &m;
    o.g_tautau = e("Gbreve_tautau")? + &nt * &mt;
    o.g_tauh = e("Gbreve_tauh")? + &nt * &mh + &nh * &mt;
    o.g_hh = e("Gbreve_hh")? + &nh * &mh;
    o.j = &fs.h0 * b;
    o.j_tau = &fs.h_tau * b - &m * ct * b;
    o.j_h = &fs.h_h * b - &m * ch * b;
    o.j_tautau = -(&mt * ct * b);
    o.j_hh = -(&mh * ch * b);
    o.j_tauh = -(&mt * ch * b) - &mh * ct * b;
    o.n = n;
    o.n_tau = nt;
    o.n_h = nh;
    o.m = m;
    o.m_tau = mt;
    o.m_h = mh;
    verified(sys, fs, o)
}

/// Z making Ñ₁ + ZÑ₂ Hurwitz via the dual Riccati equation; Z = 0 when Ñ₁ already is.
pub fn stabilize_a_extended(fam: &ParamFamily) -> Result<Matrix> {
    let (s, k) = fam.z_shape();
    if is_hurwitz(&fam.n1, HURWITZ_MARGIN)? {
        return Ok(Matrix::zeros(s, k));
    }
    if !pbh_detectable(&fam.n1, &fam.n2)? {
        return Err(Error::NoStabilizer(
            "(N~1, N~2) has an undetectable unstable mode".into(),
        ));
    }
    let p = solve_care(
        &fam.n1.transpose(),
        &(fam.n2.transpose() * &fam.n2),
        &Matrix::identity(s, s),
    )?;
    let z = -(p * fam.n2.transpose());
    if !is_hurwitz(&(&fam.n1 + &z * &fam.n2), 0.0)? {
        return Err(Error::NoStabilizer("Riccati gain failed to stabilize".into()));
    }
    Ok(z)
}

/// Minimal Nelder–Mead simplex search.
fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    max_evals: usize,
    stop_below: f64,
) -> (Vec<f64>, f64) {
    let d = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut v = x0.to_vec();
        v[i] += if v[i].abs() > 1e-3 { 0.25 * v[i] } else { 0.5 };
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut evals = d + 1;
    while evals < max_evals {
        let mut idx: Vec<usize> = (0..=d).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        if vals[0] <= stop_below || (vals[d] - vals[0]).abs() <= 1e-10 * (1.0 + vals[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|v| v[j]).sum::<f64>() / d as f64)
            .collect();
        let towards = |t: f64| -> Vec<f64> {
            (0..d).map(|j| centroid[j] + t * (simplex[d][j] - centroid[j])).collect()
        };
        let xr = towards(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = towards(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                simplex[d] = xe;
                vals[d] = fe;
            } else {
                simplex[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            simplex[d] = xr;
            vals[d] = fr;
        } else {
            let xc = if fr < vals[d] { towards(-0.5) } else { towards(0.5) };
            let fc = f(&xc);
            evals += 1;
            if fc < vals[d].min(fr) {
                simplex[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    simplex[i] = (0..d)
                        .map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j]))
                        .collect();
                    vals[i] = f(&simplex[i]);
                }
                evals += d;
            }
        }
    }
    let best = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    (simplex[best].clone(), vals[best])
}

/// Rows of W spanning its row space, picked greedily by norm.
fn spanning_rows(w: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..w.nrows()).collect();
    order.sort_by(|&a, &b| w.row(b).norm().total_cmp(&w.row(a).norm()));
    let target = rank(w);
    let mut chosen: Vec<usize> = Vec::new();
    for i in order {
        if chosen.len() == target {
            break;
        }
        let mut trial = chosen.clone();
        trial.push(i);
        let rows: Vec<_> = trial.iter().map(|&r| w.row(r).into_owned()).collect();
        let m = Matrix::from_rows(&rows);
        if rank(&m) == trial.len() {
            chosen = trial;
        }
    }
    chosen.sort_unstable();
    chosen
}

/// How a Z was chosen for a delayed error system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZChoice {
    #[serde(with = "crate::model::mat")]
    pub z: Matrix,
    pub method: String,
    pub certificate: Option<LmiCertificate>,
    pub lambda_attempts: Vec<GridAttempt>,
    pub spectral_abscissa: f64,
}

/// Why a delayed-structure gain search gave up.
#[derive(Debug)]
enum GainFailure {
    Infeasible(String),
    Numerical(Error),
}

const REFINE_NODES: usize = 24;

fn abscissa_of(fam: &ParamFamily, z: &Matrix, tau: f64, h: f64, nodes: Option<usize>) -> f64 {
    let terms = match fam.error_terms(z, tau, h) {
        Ok(t) => t,
        Err(_) => return f64::INFINITY,
    };
    let Ok(sys) = DdeSystem::new(terms) else {
        return f64::INFINITY;
    };
    match nodes {
        Some(nn) => spectral_abscissa_fixed(&sys, nn).unwrap_or(f64::INFINITY),
        None => rightmost_roots(&sys, DEFAULT_NODES)
            .map(|r| r.spectral_abscissa)
            .unwrap_or(f64::INFINITY),
    }
}

/// Sparse Nelder–Mead search on the spectral abscissa, started from `z0`.
fn refine_decay(fam: &ParamFamily, z0: &Matrix, tau: f64, h: f64, target: f64) -> Matrix {
    let w = fam.z_coefficients();
    let support = spanning_rows(&w);
    let (s, k) = fam.z_shape();
    if support.is_empty() {
        return z0.clone();
    }
    let wj = Matrix::from_rows(&support.iter().map(|&r| w.row(r).into_owned()).collect::<Vec<_>>());
    let kj = match pinv(&wj) {
        Ok(p) => z0 * &w * p,
        Err(_) => return z0.clone(),
    };
    let expand = |v: &[f64]| {
        let mut z = Matrix::zeros(s, k);
        for i in 0..s {
            for (c, &col) in support.iter().enumerate() {
                z[(i, col)] = v[i * support.len() + c];
            }
        }
        z
    };
    let x0: Vec<f64> = (0..s)
        .flat_map(|i| (0..support.len()).map(move |c| (i, c)))
        .map(|(i, c)| kj[(i, c)])
        .collect();
    let obj = |v: &[f64]| {
        let pen = 1e-6 * v.iter().map(|x| x * x).sum::<f64>();
        abscissa_of(fam, &expand(v), tau, h, Some(REFINE_NODES)) + pen
    };
    let budget = 400 + 200 * x0.len();
    let (best, _) = nelder_mead(obj, &x0, budget, -target);
    expand(&best)
}

/// Analysis LMI on fixed closed-loop matrices.
fn analysis_certificate(
    fam: &ParamFamily,
    z: &Matrix,
    tau: f64,
    h: Option<f64>,
    grid: &[f64],
    backend: &dyn SdpBackend,
    par: Parallelism,
) -> Option<LmiCertificate> {
    let (n, nt, nh) = fam.channels(z).ok()?;
    let nt = nt.unwrap_or_else(|| Matrix::zeros(n.nrows(), n.nrows()));
    let df = DelayFamily::closed_loop(&n, &nt, nh.as_ref(), tau, h);
    lambda_grid(&df, grid, backend, par).best
}

/// Scalar shortcut: N = a fixed, N_τ = b chosen inside the delay-independent region.
fn scalar_choice(fam: &ParamFamily, tau: f64, pin: Option<f64>) -> Option<(Matrix, String)> {
    let (s, k) = fam.z_shape();
    let (nt1, nt2) = fam.n_tau.as_ref()?;
    if s != 1 || fam.n_h.is_some() || max_abs(&fam.n2) > 1e-12 {
        return None;
    }
    let a = fam.n1[(0, 0)];
    let (j, piv) = (0..k)
        .map(|j| (j, nt2[(j, 0)]))
        .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))?;
    if piv.abs() <= 1e-12 {
        return None;
    }
    let b = match pin {
        Some(b) => b,
        None => {
            let lo = -1.0 / tau;
            if -a <= lo {
                return None;
            }
            0.5 * (lo + (-a))
        }
    };
    if !(a + b < 0.0 && b >= -1.0 / tau) {
        return None;
    }
    let mut z = Matrix::zeros(s, k);
    z[(0, j)] = (b - nt1[(0, 0)]) / piv;
    let how = if pin.is_some() { "scalar-pinned" } else { "scalar-midpoint" };
    Some((z, how.into()))
}

#[allow(clippy::too_many_arguments)]
fn choose_delayed_z(
    fam: &ParamFamily,
    tau: f64,
    h: Option<f64>,
    opts: &DesignOptions,
    backend: &dyn SdpBackend,
) -> std::result::Result<ZChoice, GainFailure> {
    let hh = h.unwrap_or(tau);
    let stable = |x: f64| x < -HURWITZ_MARGIN;
    if let Some(z) = &opts.z_override {
        fam.check_z(z).map_err(GainFailure::Numerical)?;
        let a = abscissa_of(fam, z, tau, hh, None);
        if !stable(a) {
            return Err(GainFailure::Infeasible(format!(
                "supplied Z leaves the error unstable (abscissa {a:.4})"
            )));
        }
        return Ok(ZChoice {
            z: z.clone(),
            method: "supplied".into(),
            certificate: None,
            lambda_attempts: Vec::new(),
            spectral_abscissa: a,
        });
    }
    if let Some((z, method)) = scalar_choice(fam, tau, opts.pin_n_tau) {
        let a = abscissa_of(fam, &z, tau, hh, None);
        if stable(a) {
            return Ok(ZChoice {
                z,
                method,
                certificate: None,
                lambda_attempts: Vec::new(),
                spectral_abscissa: a,
            });
        }
    }
    let grid = match &opts.lambda_grid {
        Some(g) => g.clone(),
        None => default_lambda_grid(&opts.extra_lambdas),
    };
    let out = lambda_grid(&fam.delay_family(tau, h), &grid, backend, opts.parallelism);
    if out.all_backend_failures() {
        let msg = out
            .attempts
            .first()
            .map(|a| a.outcome.clone())
            .unwrap_or_default();
        return Err(GainFailure::Numerical(Error::Backend(msg)));
    }
    let attempts = out.attempts.clone();
    let (s, k) = fam.z_shape();
    let (z0, cert) = match out.best {
        Some(c) => (c.k.clone().expect("feasible certificate carries K"), Some(c)),
        None => (Matrix::zeros(s, k), None),
    };
    let a0 = abscissa_of(fam, &z0, tau, hh, None);
    let mut choice = ZChoice {
        z: z0.clone(),
        method: if cert.is_some() { "lmi" } else { "none" }.into(),
        certificate: cert.clone(),
        lambda_attempts: attempts,
        spectral_abscissa: a0,
    };
    if let Some(target) = opts.decay_target {
        if a0 > -target {
            let z1 = refine_decay(fam, &z0, tau, hh, target);
            let a1 = abscissa_of(fam, &z1, tau, hh, None);
            if stable(a1) && a1 < a0 {
                choice.method = if cert.is_some() { "lmi+decay-search" } else { "decay-search" }.into();
                choice.certificate = analysis_certificate(fam, &z1, tau, h, &grid, backend, opts.parallelism);
                choice.z = z1;
                choice.spectral_abscissa = a1;
            }
        }
    }
    if choice.method == "none" || !stable(choice.spectral_abscissa) {
        return Err(GainFailure::Infeasible(
            "LMI infeasible on the whole lambda grid and no stabilizing Z found".into(),
        ));
    }
    Ok(choice)
}

/// One rung of the ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "A-minimal")]
    AMinimal,
    #[serde(rename = "A-augmented")]
    AAugmented,
    #[serde(rename = "A-extended")]
    AExtended,
    #[serde(rename = "B-order-r")]
    BOrderR,
    #[serde(rename = "B-order-q")]
    BOrderQ,
    #[serde(rename = "B-order-s")]
    BOrderS,
    #[serde(rename = "C")]
    C,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::AMinimal,
        Stage::AAugmented,
        Stage::AExtended,
        Stage::BOrderR,
        Stage::BOrderQ,
        Stage::BOrderS,
        Stage::C,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::AMinimal => "A-minimal",
            Stage::AAugmented => "A-augmented",
            Stage::AExtended => "A-extended",
            Stage::BOrderR => "B-order-r",
            Stage::BOrderQ => "B-order-q",
            Stage::BOrderS => "B-order-s",
            Stage::C => "C",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.label().eq_ignore_ascii_case(s))
    }

    fn delayed(self) -> bool {
        matches!(self, Stage::BOrderR | Stage::BOrderQ | Stage::BOrderS | Stage::C)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignOptions {
    /// Rows R of the augmented functional; projector-based when absent.
    pub r_rows: Option<Matrix>,
    /// Delayed rows F_d; unit rows are scanned when absent.
    pub f_d: Option<Matrix>,
    pub pin_n_tau: Option<f64>,
    pub z_override: Option<Matrix>,
    pub extra_lambdas: Vec<f64>,
    /// Replaces the default λ grid entirely.
    pub lambda_grid: Option<Vec<f64>>,
    /// Decay rate sought when refining delayed designs; None keeps the LMI gain.
    pub decay_target: Option<f64>,
    /// Run only this stage.
    pub only_stage: Option<Stage>,
    pub parallelism: Parallelism,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            r_rows: None,
            f_d: None,
            pin_n_tau: None,
            z_override: None,
            extra_lambdas: Vec::new(),
            lambda_grid: None,
            decay_target: Some(0.5),
            only_stage: None,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Success,
    NotApplicable,
    Skipped,
    ConditionsFailed,
    StabilizationFailed,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAttempt {
    pub stage: Stage,
    pub outcome: AttemptOutcome,
    pub reasons: Vec<String>,
    pub reports: Vec<ExistenceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOutcome {
    pub stage: Stage,
    pub report: ExistenceReport,
    /// Functional the observer actually estimates.
    pub functional: FunctionalSpec,
    pub observer: ObserverRealization,
    pub residual_max_abs: f64,
    #[serde(rename = "Z", default, with = "crate::model::mat::opt")]
    pub z_used: Option<Matrix>,
    pub z_method: String,
    pub certificate: Option<LmiCertificate>,
    pub lambda_attempts: Vec<GridAttempt>,
    pub spectral_abscissa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderResult {
    pub design: Option<DesignOutcome>,
    pub trace: Vec<StageAttempt>,
}

impl LadderResult {
    /// True when the only reason for failure was an infeasible gain search.
    pub fn failed_on_stabilization(&self) -> bool {
        self.design.is_none()
            && self.trace.iter().any(|t| t.outcome == AttemptOutcome::StabilizationFailed)
            && !self.trace.iter().any(|t| t.outcome == AttemptOutcome::NumericalFailure)
    }

    pub fn failed_numerically(&self) -> bool {
        self.design.is_none() && self.trace.iter().any(|t| t.outcome == AttemptOutcome::NumericalFailure)
    }
}

struct Ctx<'a> {
    sys: &'a TimeDelaySystem,
    fs: &'a FunctionalSpec,
    opts: &'a DesignOptions,
    backend: &'a dyn SdpBackend,
}

type StageResult = std::result::Result<DesignOutcome, (AttemptOutcome, Vec<String>, Vec<ExistenceReport>)>;

fn numerical(e: Error) -> (AttemptOutcome, Vec<String>, Vec<ExistenceReport>) {
    let kind = match e {
        Error::StructureNotApplicable(_) => AttemptOutcome::NotApplicable,
        Error::Precondition(_) | Error::NoSolution { .. } => AttemptOutcome::ConditionsFailed,
        Error::NoStabilizer(_) => AttemptOutcome::StabilizationFailed,
        _ => AttemptOutcome::NumericalFailure,
    };
    (kind, vec![e.to_string()], Vec::new())
}

fn failed_conditions(r: &ExistenceReport) -> Vec<String> {
    r.failed().map(|c| format!("{} fails", c.name)).collect()
}

/// Standard-basis rows completing F to full rank n.
fn complete_with_unit_rows(f: &Matrix) -> Matrix {
    let n = f.ncols();
    let mut cur = f.clone();
    for i in 0..n {
        if rank(&cur) == n {
            break;
        }
        let mut e = Matrix::zeros(1, n);
        e[(0, i)] = 1.0;
        let trial = vstack(&[&cur, &e]);
        if rank(&trial) > rank(&cur) {
            cur = trial;
        }
    }
    cur.rows(f.nrows(), cur.nrows() - f.nrows()).into_owned()
}

impl Ctx<'_> {
    fn plain_f(&self) -> std::result::Result<&Matrix, (AttemptOutcome, Vec<String>, Vec<ExistenceReport>)> {
        if self.fs.has_tau_channel() || self.fs.has_h_channel() {
            return Err((
                AttemptOutcome::NotApplicable,
                vec!["functional carries delayed terms".into()],
                Vec::new(),
            ));
        }
        Ok(&self.fs.h0)
    }

    fn aligned(&self) -> std::result::Result<(), (AttemptOutcome, Vec<String>, Vec<ExistenceReport>)> {
        if self.sys.delays_coincide() {
            Ok(())
        } else {
            Err((
                AttemptOutcome::NotApplicable,
                vec![format!("structures A and B need h = tau (h = {})", self.sys.h)],
                Vec::new(),
            ))
        }
    }

    /// Augmentation rows: user R, else projector rows.
    fn r_rows(&self, f: &Matrix) -> Result<Matrix> {
        match &self.opts.r_rows {
            Some(r) => Ok(r.clone()),
            None => build_r_projector(self.sys, f),
        }
    }

    fn base_for_extension(&self, f: &Matrix) -> Result<Matrix> {
        let r = self.r_rows(f)?;
        Ok(if r.nrows() == 0 { f.clone() } else { vstack(&[f, &r]) })
    }

    fn extension_candidates(&self) -> Vec<Matrix> {
        match &self.opts.f_d {
            Some(fd) => vec![fd.clone()],
            None => {
                let n = self.sys.n();
                (0..n)
                    .map(|i| {
                        let mut e = Matrix::zeros(1, n);
                        e[(0, i)] = 1.0;
                        e
                    })
                    .collect()
            }
        }
    }

    fn a_invariant(&self, stage: Stage, f: &Matrix, report: ExistenceReport) -> StageResult {
        let cp = build_a_minimal(self.sys, f).map_err(numerical)?;
        let x = general_solution(&cp, &Matrix::zeros(f.nrows(), cp.width())).map_err(numerical)?;
        let (obs, res) = assemble_a_invariant(self.sys, f, &cp, &x).map_err(numerical)?;
        let abscissa = spectral_abscissa(&obs.n).map_err(numerical)?;
        Ok(DesignOutcome {
            stage,
            report,
            functional: FunctionalSpec::instantaneous(f.clone()),
            observer: obs,
            residual_max_abs: res,
            z_used: None,
            z_method: "particular".into(),
            certificate: None,
            lambda_attempts: Vec::new(),
            spectral_abscissa: abscissa,
        })
    }

    fn a_minimal(&self) -> StageResult {
        self.aligned()?;
        let f = self.plain_f()?;
        let report = check_a_minimal(self.sys, f).map_err(numerical)?;
        if !report.overall {
            return Err((AttemptOutcome::ConditionsFailed, failed_conditions(&report), vec![report]));
        }
        self.a_invariant(Stage::AMinimal, f, report)
    }

    fn a_augmented(&self) -> StageResult {
        self.aligned()?;
        let f = self.plain_f()?;
        let r = self.r_rows(f).map_err(numerical)?;
        if r.nrows() == 0 {
            return Err((
                AttemptOutcome::Skipped,
                vec!["F is already A-invariant; no rows to add".into()],
                Vec::new(),
            ));
        }
        let fbar = vstack(&[f, &r]);
        let report = check_a_augmented(self.sys, &fbar).map_err(numerical)?;
        if !report.overall {
            return Err((AttemptOutcome::ConditionsFailed, failed_conditions(&report), vec![report]));
        }
        self.a_invariant(Stage::AAugmented, &fbar, report)
    }

    fn a_extended(&self) -> StageResult {
        self.aligned()?;
        let f = self.plain_f()?;
        let base = self.base_for_extension(f).map_err(numerical)?;
        let mut reasons = Vec::new();
        let mut reports = Vec::new();
        let mut worst = AttemptOutcome::ConditionsFailed;
        for fd in self.extension_candidates() {
            let (f0, ft) = extended_functional(&base, &fd).map_err(numerical)?;
            let (report, fam) = check_a_extended(self.sys, &f0, &ft).map_err(numerical)?;
            let Some(fam) = fam.filter(|_| report.overall) else {
                reasons.push(format!("F_d = {:?}: {}", fd.as_slice(), failed_conditions(&report).join(", ")));
                reports.push(report);
                continue;
            };
            let z = match self.opts.z_override.clone() {
                Some(z) => z,
                None => match stabilize_a_extended(&fam) {
                    Ok(z) => z,
                    Err(e) => {
                        worst = AttemptOutcome::StabilizationFailed;
                        reasons.push(e.to_string());
                        reports.push(report);
                        continue;
                    }
                },
            };
            let fs = FunctionalSpec::extended(f0, ft).map_err(numerical)?;
            let x = fam.solution(&z).map_err(numerical)?;
            let (obs, res) = assemble_a_extended(self.sys, &fs, &fam.constraint, &x).map_err(numerical)?;
            let abscissa = spectral_abscissa(&obs.n).map_err(numerical)?;
            if abscissa >= 0.0 {
                worst = AttemptOutcome::StabilizationFailed;
                reasons.push(format!("N has spectral abscissa {abscissa:.4}"));
                reports.push(report);
                continue;
            }
            return Ok(DesignOutcome {
                stage: Stage::AExtended,
                report,
                functional: fs,
                observer: obs,
                residual_max_abs: res,
                z_used: Some(z),
                z_method: if self.opts.z_override.is_some() { "supplied" } else { "riccati" }.into(),
                certificate: None,
                lambda_attempts: Vec::new(),
                spectral_abscissa: abscissa,
            });
        }
        Err((worst, reasons, reports))
    }

    fn b_design(&self, stage: Stage, h0: &Matrix, htau: &Matrix) -> StageResult {
        let (report, fam) = check_b(self.sys, h0, htau).map_err(numerical)?;
        let Some(fam) = fam.filter(|_| report.overall) else {
            return Err((AttemptOutcome::ConditionsFailed, failed_conditions(&report), vec![report]));
        };
        let choice = match choose_delayed_z(&fam, self.sys.tau, None, self.opts, self.backend) {
            Ok(c) => c,
            Err(GainFailure::Infeasible(m)) => {
                return Err((AttemptOutcome::StabilizationFailed, vec![m], vec![report]))
            }
            Err(GainFailure::Numerical(e)) => {
                return Err((AttemptOutcome::NumericalFailure, vec![e.to_string()], vec![report]))
            }
        };
        let fs = FunctionalSpec::extended(h0.clone(), htau.clone()).map_err(numerical)?;
        let x = fam.solution(&choice.z).map_err(numerical)?;
        let (obs, res) = assemble_b(self.sys, &fs, &fam.constraint, &x).map_err(numerical)?;
        Ok(DesignOutcome {
            stage,
            report,
            functional: fs,
            observer: obs,
            residual_max_abs: res,
            z_used: Some(choice.z),
            z_method: choice.method,
            certificate: choice.certificate,
            lambda_attempts: choice.lambda_attempts,
            spectral_abscissa: choice.spectral_abscissa,
        })
    }

    fn b_order_r(&self) -> StageResult {
        self.aligned()?;
        if self.fs.has_h_channel() {
            return Err((AttemptOutcome::NotApplicable, vec!["H_h term needs structure C".into()], Vec::new()));
        }
        self.b_design(Stage::BOrderR, &self.fs.h0, &self.fs.h_tau)
    }

    fn b_order_q(&self) -> StageResult {
        self.aligned()?;
        let f = self.plain_f()?;
        let mut r = self.r_rows(f).map_err(numerical)?;
        if r.nrows() == 0 {
            r = complete_with_unit_rows(f);
        }
        if r.nrows() == 0 {
            return Err((AttemptOutcome::Skipped, vec!["F already has full rank".into()], Vec::new()));
        }
        let fbar = vstack(&[f, &r]);
        let z = Matrix::zeros(fbar.nrows(), fbar.ncols());
        self.b_design(Stage::BOrderQ, &fbar, &z)
    }

    fn b_order_s(&self) -> StageResult {
        self.aligned()?;
        let f = self.plain_f()?;
        let base = self.base_for_extension(f).map_err(numerical)?;
        let mut reasons = Vec::new();
        let mut reports = Vec::new();
        let mut worst = AttemptOutcome::ConditionsFailed;
        for fd in self.extension_candidates() {
            let (f0, ft) = extended_functional(&base, &fd).map_err(numerical)?;
            match self.b_design(Stage::BOrderS, &f0, &ft) {
                Ok(d) => return Ok(d),
                Err((kind, mut r, mut rep)) => {
                    if kind != AttemptOutcome::ConditionsFailed {
                        worst = kind;
                    }
                    reasons.append(&mut r);
                    reports.append(&mut rep);
                }
            }
        }
        Err((worst, reasons, reports))
    }

    fn c(&self) -> StageResult {
        if self.sys.delays_coincide() {
            return Err((
                AttemptOutcome::NotApplicable,
                vec!["structure C needs h > tau".into()],
                Vec::new(),
            ));
        }
        let (report, fam) = check_c(self.sys, self.fs).map_err(numerical)?;
        let Some(fam) = fam.filter(|_| report.overall) else {
            return Err((AttemptOutcome::ConditionsFailed, failed_conditions(&report), vec![report]));
        };
        let choice = match choose_delayed_z(&fam, self.sys.tau, Some(self.sys.h), self.opts, self.backend) {
            Ok(c) => c,
            Err(GainFailure::Infeasible(m)) => {
                return Err((AttemptOutcome::StabilizationFailed, vec![m], vec![report]))
            }
            Err(GainFailure::Numerical(e)) => {
                return Err((AttemptOutcome::NumericalFailure, vec![e.to_string()], vec![report]))
            }
        };
        let x = fam.solution(&choice.z).map_err(numerical)?;
        let (obs, res) = assemble_c(self.sys, self.fs, &fam.constraint, &x).map_err(numerical)?;
        Ok(DesignOutcome {
            stage: Stage::C,
            report,
            functional: self.fs.clone(),
            observer: obs,
            residual_max_abs: res,
            z_used: Some(choice.z),
            z_method: choice.method,
            certificate: choice.certificate,
            lambda_attempts: choice.lambda_attempts,
            spectral_abscissa: choice.spectral_abscissa,
        })
    }

    fn run(&self, stage: Stage) -> StageResult {
        match stage {
            Stage::AMinimal => self.a_minimal(),
            Stage::AAugmented => self.a_augmented(),
            Stage::AExtended => self.a_extended(),
            Stage::BOrderR => self.b_order_r(),
            Stage::BOrderQ => self.b_order_q(),
            Stage::BOrderS => self.b_order_s(),
            Stage::C => self.c(),
        }
    }
}

/// Tries the stages in order and returns the first observer that exists and is stable.
pub fn design_ladder(sys: &TimeDelaySystem, fs: &FunctionalSpec, opts: &DesignOptions) -> Result<LadderResult> {
    design_ladder_with(sys, fs, opts, &ClarabelBackend)
}

pub fn design_ladder_with(
    sys: &TimeDelaySystem,
    fs: &FunctionalSpec,
    opts: &DesignOptions,
    backend: &dyn SdpBackend,
) -> Result<LadderResult> {
    sys.ensure_valid()?;
    let findings = fs.validate_against(sys);
    if !findings.is_empty() {
        let msg: Vec<String> = findings.into_iter().map(|f| f.message).collect();
        return Err(Error::InvalidFunctional(msg.join("; ")));
    }
    let ctx = Ctx {
        sys,
        fs,
        opts,
        backend,
    };
    let stages: Vec<Stage> = match opts.only_stage {
        Some(s) => vec![s],
        None => Stage::ALL.to_vec(),
    };
    let mut trace = Vec::new();
    for stage in stages {
        match ctx.run(stage) {
            Ok(d) => {
                trace.push(StageAttempt {
                    stage,
                    outcome: AttemptOutcome::Success,
                    reasons: Vec::new(),
                    reports: vec![d.report.clone()],
                });
                return Ok(LadderResult {
                    design: Some(d),
                    trace,
                });
            }
            Err((outcome, reasons, reports)) => {
                let outcome = if outcome == AttemptOutcome::StabilizationFailed && !stage.delayed() {
                    AttemptOutcome::ConditionsFailed
                } else {
                    outcome
                };
                trace.push(StageAttempt {
                    stage,
                    outcome,
                    reasons,
                    reports,
                })
            }
        }
    }
    Ok(LadderResult { design: None, trace })
}

/// Spectrum of N for delay-free error dynamics, as (re, im) pairs.
pub fn n_spectrum(obs: &ObserverRealization) -> Result<Vec<[f64; 2]>> {
    Ok(eigenvalues(&obs.n)?.iter().map(|z| [z.re, z.im]).collect())
}

/// Assembles the observer of a stage for a caller-supplied Z.
pub fn realize(
    sys: &TimeDelaySystem,
    fs: &FunctionalSpec,
    structure: Structure,
    z: &Matrix,
) -> Result<(ObserverRealization, f64)> {
    match structure {
        Structure::A => {
            let cp = build_a_extended(sys, &fs.h0, &fs.h_tau)?;
            let x = general_solution(&cp, z)?;
            assemble_a_extended(sys, fs, &cp, &x)
        }
        Structure::B => {
            let cp = build_b(sys, &fs.h0, &fs.h_tau)?;
            let x = general_solution(&cp, z)?;
            assemble_b(sys, fs, &cp, &x)
        }
        Structure::C => {
            let cp = build_c(sys, fs)?;
            let x = general_solution(&cp, z)?;
            assemble_c(sys, fs, &cp, &x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn ex1(c: Matrix) -> TimeDelaySystem {
        TimeDelaySystem::aligned(
            dmatrix![-2.0, 1.0; 0.0, -3.0],
            dmatrix![-4.0, 1.0; 2.0, 1.0],
            dmatrix![1.0; 2.0],
            c,
            1.0,
        )
        .unwrap()
    }

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.shape() == b.shape() && (a - b).amax() <= tol
    }

    #[test]
    fn general_solution_satisfies_constraint() {
        let sys = ex1(Matrix::identity(2, 2));
        let cp = build_a_minimal(&sys, &dmatrix![0.0, 1.0]).unwrap();
        let z = Matrix::from_fn(1, cp.width(), |_, j| j as f64 - 2.0);
        let x = general_solution(&cp, &z).unwrap();
        assert!((x * &cp.theta - &cp.upsilon).amax() < 1e-10);
    }

    #[test]
    fn unsolvable_constraint_is_reported() {
        let sys = ex1(dmatrix![1.0, 0.0]);
        let cp = build_a_minimal(&sys, &dmatrix![0.0, 1.0]).unwrap();
        assert!(matches!(
            general_solution(&cp, &Matrix::zeros(1, cp.width())),
            Err(Error::NoSolution { .. })
        ));
    }

    #[test]
    fn case1_design_matches_published_gains() {
        let sys = ex1(Matrix::identity(2, 2));
        let fs = FunctionalSpec::instantaneous(dmatrix![0.0, 1.0]);
        let r = design_ladder(&sys, &fs, &DesignOptions::default()).unwrap();
        let d = r.design.unwrap();
        assert_eq!(d.stage, Stage::AMinimal);
        let o = &d.observer;
        assert!(close(&o.n, &dmatrix![-3.0], 1e-12));
        assert!(close(&o.m, &dmatrix![-0.3061, -0.4041], 1e-4));
        assert!(close(&o.g, &dmatrix![2.3061, 1.3061], 1e-4));
        assert!(close(&o.g_tau, &dmatrix![-0.4163, 0.7102], 1e-4));
        assert!(close(&o.j_tau, &dmatrix![1.1143], 1e-4));
    }

    #[test]
    fn case4_extended_observer() {
        let sys = ex1(dmatrix![1.0, 0.0]);
        let fs = FunctionalSpec::instantaneous(dmatrix![0.0, 1.0]);
        let r = design_ladder(&sys, &fs, &DesignOptions::default()).unwrap();
        let d = r.design.unwrap();
        assert_eq!(d.stage, Stage::AExtended);
        let o = &d.observer;
        assert!(close(&o.n, &dmatrix![-3.0, 1.0; 0.0, -4.0], 1e-9));
        assert!(close(&o.m, &dmatrix![0.0; 1.0], 1e-9));
        assert!(close(&o.g, &dmatrix![3.0; -2.0], 1e-9));
        assert!(close(&o.g_tau, &dmatrix![0.0; 6.0], 1e-9));
        assert!(close(&o.j_tau, &dmatrix![0.0; 1.0], 1e-9));
    }

    #[test]
    fn riccati_gain_stabilizes() {
        let sys = ex1(dmatrix![1.0, 0.0]);
        let (f0, ft) = extended_functional(&dmatrix![0.0, 1.0], &dmatrix![1.0, 0.0]).unwrap();
        let cp = build_a_extended(&sys, &f0, &ft).unwrap();
        if !cp.is_solvable() {
            return;
        }
        let fam = ParamFamily::from_constraint(cp, &["N"]).unwrap();
        if let Ok(z) = stabilize_a_extended(&fam) {
            assert!(is_hurwitz(&(&fam.n1 + &z * &fam.n2), 0.0).unwrap());
        }
    }

    #[test]
    fn family_is_affine_in_z() {
        let sys = ex1(dmatrix![1.0, 0.0]);
        let cp = build_b(&sys, &dmatrix![0.0, 1.0; 1.0, 0.0], &Matrix::zeros(2, 2)).unwrap();
        let fam = ParamFamily::from_constraint(cp, &["N", "N_tau"]).unwrap();
        let (s, k) = fam.z_shape();
        let z1 = Matrix::from_fn(s, k, |i, j| (i + 2 * j) as f64 * 0.1);
        let z2 = Matrix::from_fn(s, k, |i, j| (i as f64 - j as f64) * 0.3);
        let x = |z: &Matrix| fam.solution(z).unwrap();
        let lhs = x(&(&z1 * 2.0 - &z2));
        let rhs = x(&z1) * 2.0 - x(&z2);
        assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let (x, f) = nelder_mead(|v| (v[0] - 1.0).powi(2) + (v[1] + 2.0).powi(2), &[0.0, 0.0], 2000, -1.0);
        assert!(f < 1e-8, "{x:?}");
    }

    #[test]
    fn spanning_rows_cover_rank() {
        let w = dmatrix![1.0, 0.0; 2.0, 0.0; 0.0, 0.0; 0.0, 3.0];
        assert_eq!(spanning_rows(&w), vec![1, 3]);
    }

    #[test]
    fn unit_row_completion() {
        let r = complete_with_unit_rows(&dmatrix![0.0, 1.0]);
        assert_eq!(r, dmatrix![1.0, 0.0]);
    }

    #[test]
    fn stage_labels_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.label()), Some(s));
        }
    }
}
