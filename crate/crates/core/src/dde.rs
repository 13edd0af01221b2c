//! Linear delay differential equations: characteristic roots by spectral
//! collocation with Newton polishing, RK4 method-of-steps simulation of the
//! plant/observer loop, and scalar stability tests.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::linalg::{eigenvalues, CMatrix, Matrix};
use crate::model::{
    residuals, FunctionalSpec, ObserverRealization, Structure, TimeDelaySystem, DELAY_MATCH_TOL,
};

pub type Vector = DVector<f64>;

/// Relative residual σ_min(Δ(λ)) / scale accepted for a reported root.
pub const ROOT_RESIDUAL_TOL: f64 = 1e-6;
pub const DEFAULT_NODES: usize = 30;
const MAX_NODES: usize = 480;

/// ẋ(t) = Σₖ Aₖ x(t − dₖ) with d₀ = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DdeSystem {
    terms: Vec<(f64, Matrix)>,
}

fn same_delay(a: f64, b: f64) -> bool {
    (a - b).abs() <= DELAY_MATCH_TOL * a.abs().max(b.abs()).max(1.0)
}

impl DdeSystem {
    /// Merges equal delays and adds a zero instantaneous term if absent.
    pub fn new(terms: Vec<(f64, Matrix)>) -> Result<Self> {
        let n = terms
            .first()
            .map(|(_, m)| m.nrows())
            .ok_or_else(|| Error::InvalidInput("DDE needs at least one term".into()))?;
        let mut merged: Vec<(f64, Matrix)> = vec![(0.0, Matrix::zeros(n, n))];
        for (d, m) in terms {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::InvalidDelay(format!("delay {d} must be finite and non-negative")));
            }
            if m.shape() != (n, n) {
                return Err(Error::Shape(format!("DDE coefficient is {:?}, expected {n}x{n}", m.shape())));
            }
            crate::linalg::ensure_finite(&m, "DDE coefficient")?;
            match merged.iter_mut().find(|(e, _)| same_delay(*e, d)) {
                Some((_, acc)) => *acc += m,
                None => merged.push((d, m)),
            }
        }
        merged.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { terms: merged })
    }

    pub fn terms(&self) -> &[(f64, Matrix)] {
        &self.terms
    }

    pub fn dim(&self) -> usize {
        self.terms[0].1.nrows()
    }

    pub fn max_delay(&self) -> f64 {
        self.terms.iter().map(|t| t.0).fold(0.0, f64::max)
    }

    fn delayed(&self) -> impl Iterator<Item = &(f64, Matrix)> {
        self.terms.iter().filter(|(d, m)| *d > 0.0 && m.iter().any(|&x| x != 0.0))
    }

    /// Δ(λ) = λI − Σ Aₖ e^{−λdₖ}.
    pub fn characteristic(&self, lambda: Complex64) -> CMatrix {
        let n = self.dim();
        let mut out = CMatrix::identity(n, n) * lambda;
        for (d, a) in &self.terms {
            let w = (-lambda * *d).exp();
            out -= a.map(|x| Complex64::new(x, 0.0)) * w;
        }
        out
    }

    /// Δ'(λ) = I + Σ dₖ Aₖ e^{−λdₖ}.
    fn characteristic_derivative(&self, lambda: Complex64) -> CMatrix {
        let n = self.dim();
        let mut out = CMatrix::identity(n, n);
        for (d, a) in &self.terms {
            if *d > 0.0 {
                let w = (-lambda * *d).exp() * *d;
                out += a.map(|x| Complex64::new(x, 0.0)) * w;
            }
        }
        out
    }

    fn residual(&self, lambda: Complex64) -> f64 {
        let delta = self.characteristic(lambda);
        let smin = delta.clone().singular_values().min();
        let scale = 1.0
            + lambda.norm()
            + self
                .terms
                .iter()
                .map(|(d, a)| a.norm() * (-lambda.re * d).exp())
                .sum::<f64>();
        smin / scale
    }
}

/// A characteristic root with its relative residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Root {
    pub re: f64,
    pub im: f64,
    pub residual: f64,
}

impl Root {
    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootReport {
    pub roots: Vec<Root>,
    pub nodes: usize,
    pub converged: bool,
    pub spectral_abscissa: f64,
}

/// Chebyshev points xⱼ = cos(jπ/N) and the differentiation matrix on [−1, 1].
fn chebyshev(nn: usize) -> (Vec<f64>, Matrix) {
    let x: Vec<f64> = (0..=nn).map(|j| (j as f64 * PI / nn as f64).cos()).collect();
    let c: Vec<f64> = (0..=nn)
        .map(|j| {
            let e = if j == 0 || j == nn { 2.0 } else { 1.0 };
            if j % 2 == 0 { e } else { -e }
        })
        .collect();
    let mut d = Matrix::zeros(nn + 1, nn + 1);
    for i in 0..=nn {
        for j in 0..=nn {
            if i != j {
                d[(i, j)] = c[i] / c[j] / (x[i] - x[j]);
            }
        }
        let s: f64 = (0..=nn).filter(|&j| j != i).map(|j| d[(i, j)]).sum();
        d[(i, i)] = -s;
    }
    (x, d)
}

/// Lagrange basis values at `x` for Chebyshev points, barycentric form.
fn lagrange_row(nodes: &[f64], x: f64) -> Vec<f64> {
    let nn = nodes.len() - 1;
    if let Some(k) = nodes.iter().position(|&t| (t - x).abs() < 1e-14) {
        let mut out = vec![0.0; nodes.len()];
        out[k] = 1.0;
        return out;
    }
    let w: Vec<f64> = (0..=nn)
        .map(|j| {
            let s = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == nn { s * 0.5 } else { s }
        })
        .collect();
    let terms: Vec<f64> = (0..=nn).map(|j| w[j] / (x - nodes[j])).collect();
    let total: f64 = terms.iter().sum();
    terms.iter().map(|t| t / total).collect()
}

/// Collocation approximation of the infinitesimal generator.
fn generator(sys: &DdeSystem, nn: usize) -> Matrix {
    let n = sys.dim();
    let hmax = sys.max_delay();
    let (x, d) = chebyshev(nn);
    let size = n * (nn + 1);
    let mut g = Matrix::zeros(size, size);
    for (delay, a) in sys.terms() {
        // θ = hmax (x − 1)/2  ⇒  x = 1 − 2 d / hmax
        let ell = lagrange_row(&x, 1.0 - 2.0 * delay / hmax);
        for (j, l) in ell.iter().enumerate() {
            if *l != 0.0 {
                let mut blk = g.view_mut((0, j * n), (n, n));
                blk += a * *l;
            }
        }
    }
    let s = 2.0 / hmax;
    for i in 1..=nn {
        for j in 0..=nn {
            let v = s * d[(i, j)];
            if v != 0.0 {
                for k in 0..n {
                    g[(i * n + k, j * n + k)] = v;
                }
            }
        }
    }
    g
}

fn newton(sys: &DdeSystem, start: Complex64) -> Complex64 {
    let mut lam = start;
    for _ in 0..40 {
        let delta = sys.characteristic(lam);
        let dp = sys.characteristic_derivative(lam);
        let Some(sol) = delta.lu().solve(&dp) else {
            return lam;
        };
        let tr = sol.trace();
        if tr.norm() == 0.0 || !tr.is_finite() {
            return lam;
        }
        let step = tr.inv();
        lam -= step;
        if !lam.is_finite() {
            return start;
        }
        if step.norm() <= 1e-14 * (1.0 + lam.norm()) {
            break;
        }
    }
    lam
}

fn sort_roots(roots: &mut [Root]) {
    roots.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
}

fn push_unique(out: &mut Vec<Root>, r: Root) {
    let z = r.value();
    if !out.iter().any(|o| (o.value() - z).norm() <= 1e-8 * (1.0 + z.norm())) {
        out.push(r);
    }
}

/// Roots obtained at a fixed node count; `candidates` limits how many eigenvalues are polished.
fn roots_fixed(sys: &DdeSystem, nn: usize, candidates: usize) -> Result<Vec<Root>> {
    if sys.delayed().next().is_none() {
        let a0 = &sys.terms()[0].1;
        let mut out = Vec::new();
        for z in eigenvalues(a0)? {
            push_unique(
                &mut out,
                Root {
                    re: z.re,
                    im: z.im,
                    residual: sys.residual(z),
                },
            );
        }
        sort_roots(&mut out);
        return Ok(out);
    }
    let ev = eigenvalues(&generator(sys, nn))?;
    let mut out = Vec::new();
    for z in ev.into_iter().take(candidates) {
        let r = newton(sys, z);
        let res = sys.residual(r);
        if res <= ROOT_RESIDUAL_TOL {
            push_unique(
                &mut out,
                Root {
                    re: r.re,
                    im: r.im,
                    residual: res,
                },
            );
        }
    }
    sort_roots(&mut out);
    Ok(out)
}

/// Rightmost characteristic roots; node count doubles until the dominant pair settles to 1e-6.
pub fn rightmost_roots(sys: &DdeSystem, nodes: usize) -> Result<RootReport> {
    let n = sys.dim();
    let candidates = (8 * n).max(16);
    let mut nn = nodes.max(4);
    let mut prev = roots_fixed(sys, nn, candidates)?;
    if sys.delayed().next().is_none() {
        let abscissa = prev.first().map_or(f64::NEG_INFINITY, |r| r.re);
        return Ok(RootReport {
            roots: prev,
            nodes: 0,
            converged: true,
            spectral_abscissa: abscissa,
        });
    }
    loop {
        let next_nn = nn * 2;
        let next = roots_fixed(sys, next_nn, candidates)?;
        let agree = match (prev.first(), next.first()) {
            (Some(a), Some(b)) => {
                (a.re - b.re).abs() <= 1e-6 && (a.im.abs() - b.im.abs()).abs() <= 1e-6
            }
            _ => false,
        };
        if agree || next_nn >= MAX_NODES {
            if next.is_empty() {
                return Err(Error::Convergence(
                    "no characteristic root passed the residual filter".into(),
                ));
            }
            let abscissa = next[0].re;
            return Ok(RootReport {
                roots: next,
                nodes: next_nn,
                converged: agree,
                spectral_abscissa: abscissa,
            });
        }
        nn = next_nn;
        prev = next;
    }
}

/// Fast abscissa at a fixed node count, for optimization loops.
pub fn spectral_abscissa_fixed(sys: &DdeSystem, nodes: usize) -> Result<f64> {
    let roots = roots_fixed(sys, nodes, (4 * sys.dim()).max(8))?;
    Ok(roots.first().map_or(f64::INFINITY, |r| r.re))
}

/// Sufficient test for ė = a e + b e(t−τ): a + b < 0 and b ≥ −1/τ.
pub fn mori_scalar_stable(a: f64, b: f64, tau: f64) -> Result<bool> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidDelay(format!("tau must be positive, got {tau}")));
    }
    Ok(a + b < 0.0 && b >= -1.0 / tau)
}

/// Exact delay-dependent test for ė = a e + b e(t−τ).
pub fn hayes_scalar_stable(a: f64, b: f64, tau: f64) -> Result<bool> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidDelay(format!("tau must be positive, got {tau}")));
    }
    let (a, b) = (a * tau, b * tau);
    if !(a < 1.0 && a + b < 0.0) {
        return Ok(false);
    }
    Ok(-b < hayes_bound(a))
}

/// ζ / sin ζ with ζ ∈ (0, π) the root of ζ cos ζ = a sin ζ.
fn hayes_bound(a: f64) -> f64 {
    let g = |z: f64| z * z.cos() - a * z.sin();
    let (mut lo, mut hi) = (1e-12, PI - 1e-15);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z = 0.5 * (lo + hi);
    z / z.sin()
}

/// History on (−∞, 0].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryFunction {
    Constant { value: Vec<f64> },
    /// Σ cₖ θᵏ with coefficient vectors cₖ.
    Polynomial { coefficients: Vec<Vec<f64>> },
    /// amplitude · e^{rate t}
    Exponential { amplitude: Vec<f64>, rate: f64 },
    /// Uniform samples from `t0` with cubic interpolation; clamped outside.
    Sampled {
        t0: f64,
        dt: f64,
        samples: Vec<Vec<f64>>,
    },
}

impl HistoryFunction {
    pub fn dim(&self) -> usize {
        match self {
            Self::Constant { value } => value.len(),
            Self::Polynomial { coefficients } => coefficients.first().map_or(0, |c| c.len()),
            Self::Exponential { amplitude, .. } => amplitude.len(),
            Self::Sampled { samples, .. } => samples.first().map_or(0, |c| c.len()),
        }
    }

    pub fn eval(&self, t: f64) -> Vector {
        match self {
            Self::Constant { value } => Vector::from_column_slice(value),
            Self::Polynomial { coefficients } => {
                let mut out = Vector::zeros(self.dim());
                for c in coefficients.iter().rev() {
                    out = out * t + Vector::from_column_slice(c);
                }
                out
            }
            Self::Exponential { amplitude, rate } => Vector::from_column_slice(amplitude) * (rate * t).exp(),
            Self::Sampled { t0, dt, samples } => {
                let last = samples.len() - 1;
                let s = ((t - t0) / dt).clamp(0.0, last as f64);
                let k = s.round();
                if (s - k).abs() < 1e-9 {
                    return Vector::from_column_slice(&samples[k as usize]);
                }
                if last < 3 {
                    let i = (s.floor() as usize).min(last.saturating_sub(1));
                    let f = s - i as f64;
                    let a = Vector::from_column_slice(&samples[i]);
                    let b = Vector::from_column_slice(&samples[(i + 1).min(last)]);
                    return a * (1.0 - f) + b * f;
                }
                let i0 = (s.floor() as usize).saturating_sub(1).min(last - 3);
                let mut out = Vector::zeros(samples[0].len());
                for j in 0..4 {
                    let mut w = 1.0;
                    for k in 0..4 {
                        if k != j {
                            w *= (s - (i0 + k) as f64) / (j as f64 - k as f64);
                        }
                    }
                    out += Vector::from_column_slice(&samples[i0 + j]) * w;
                }
                out
            }
        }
    }
}

/// Input u(t), defined for all t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSignal {
    Zero,
    Constant { value: Vec<f64> },
    /// Channel i carries amplitude · sin(ω t + phase + i).
    Sine { amplitude: f64, omega: f64, phase: f64 },
}

impl InputSignal {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Constant { .. } => "constant",
            Self::Sine { .. } => "sine",
        }
    }

    pub fn eval(&self, t: f64, m: usize) -> Vector {
        match self {
            Self::Zero => Vector::zeros(m),
            Self::Constant { value } => Vector::from_fn(m, |i, _| value.get(i).copied().unwrap_or(0.0)),
            Self::Sine {
                amplitude,
                omega,
                phase,
            } => Vector::from_fn(m, |i, _| amplitude * (omega * t + phase + i as f64).sin()),
        }
    }
}

/// Recorded samples; the first column is time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    /// Rows restricted to columns whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<Vec<f64>> {
        let idx: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                c.strip_prefix(prefix)
                    .and_then(|r| r.strip_prefix('_'))
                    .is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit()))
            })
            .map(|(i, _)| i)
            .collect();
        self.rows.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.11e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Approximate common divisor of the delays.
fn delay_gcd(delays: &[f64]) -> f64 {
    let mut g = delays[0];
    for &d in &delays[1..] {
        let (mut a, mut b) = (g.max(d), g.min(d));
        while b > 1e-9 * g.max(d) {
            let r = a % b;
            let r = if (b - r) < 1e-9 * b { 0.0 } else { r };
            a = b;
            b = r;
        }
        g = a;
    }
    g
}

/// Rejects a step that does not divide every delay.
pub fn check_alignment(dt: f64, delays: &[f64]) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let positive: Vec<f64> = delays.iter().copied().filter(|&d| d > 0.0).collect();
    if positive.is_empty() {
        return Ok(0);
    }
    let aligned = positive.iter().all(|d| {
        let q = d / dt;
        (q - q.round()).abs() <= 1e-12 * q.max(1.0) && q.round() >= 1.0
    });
    if aligned {
        return Ok(0);
    }
    let g = delay_gcd(&positive);
    let suggested = g / (g / dt).ceil();
    Err(Error::Alignment { dt, suggested })
}

/// Which RK4 stage is asking; delayed lookups read the matching stage of the earlier step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Grid,
    Mid2,
    Mid3,
    End,
}

struct Point {
    x: Vector,
    dx: Option<Vector>,
    /// Y₂, Y₃ (at t + dt/2) and Y₄ (at t + dt) of the step leaving this point.
    stages: Option<[Vector; 3]>,
}

/// Grid store. Lookups at stage-aligned times return the stored stage state, which makes the
/// scheme exactly RK4 on the method-of-steps ODE; anything else is cubic Hermite.
struct Store<'h> {
    dt: f64,
    first: usize,
    buf: VecDeque<Point>,
    capacity: usize,
    history: &'h dyn Fn(f64) -> Vector,
    phase: Phase,
}

impl<'h> Store<'h> {
    fn new(dt: f64, max_lag: f64, history: &'h dyn Fn(f64) -> Vector) -> Self {
        Self {
            dt,
            first: 0,
            buf: VecDeque::new(),
            capacity: (max_lag / dt).ceil() as usize + 4,
            history,
            phase: Phase::Grid,
        }
    }

    fn push(&mut self, x: Vector) {
        self.buf.push_back(Point {
            x,
            dx: None,
            stages: None,
        });
        if self.buf.len() > self.capacity {
            self.buf.pop_front();
            self.first += 1;
        }
    }

    fn last_mut(&mut self) -> &mut Point {
        self.buf.back_mut().expect("store holds the current point")
    }

    fn point(&self, k: usize) -> &Point {
        &self.buf[k - self.first]
    }

    fn stage(&self, j: f64, which: usize) -> Option<&Vector> {
        if j < 0.0 {
            return None;
        }
        let j = j as usize;
        if j < self.first {
            return None;
        }
        self.buf.get(j - self.first)?.stages.as_ref().map(|s| &s[which])
    }

    fn at(&self, t: f64) -> Vector {
        if t <= 1e-12 * self.dt {
            return (self.history)(t.min(0.0));
        }
        let s = t / self.dt;
        let k = s.round();
        let on_grid = (s - k).abs() < 1e-9;
        let on_mid = (s - 0.5 - (s - 0.5).round()).abs() < 1e-9;
        let hit = match self.phase {
            Phase::Mid2 if on_mid => self.stage((s - 0.5).round(), 0),
            Phase::Mid3 if on_mid => self.stage((s - 0.5).round(), 1),
            Phase::End if on_grid => self.stage(k - 1.0, 2),
            _ => None,
        };
        if let Some(v) = hit {
            return v.clone();
        }
        if on_grid {
            return self.point(k as usize).x.clone();
        }
        self.hermite(s)
    }

    fn hermite(&self, s: f64) -> Vector {
        let k = s.floor() as usize;
        let f = s - k as f64;
        let (p0, p1) = (self.point(k), self.point(k + 1));
        let d0 = p0.dx.as_ref().expect("derivative stored before lookup");
        let d1 = p1.dx.as_ref().expect("derivative stored before lookup");
        let (f2, f3) = (f * f, f * f * f);
        let h00 = 2.0 * f3 - 3.0 * f2 + 1.0;
        let h10 = f3 - 2.0 * f2 + f;
        let h01 = -2.0 * f3 + 3.0 * f2;
        let h11 = f3 - f2;
        &p0.x * h00 + d0 * (h10 * self.dt) + &p1.x * h01 + d1 * (h11 * self.dt)
    }
}

/// Classical RK4 on a uniform grid; `rhs(t, x, past)` may query `past.at(s)` for s ≤ t − dt.
fn integrate<R, O>(
    x0: Vector,
    history: &dyn Fn(f64) -> Vector,
    max_lag: f64,
    dt: f64,
    steps: usize,
    rhs: R,
    mut observe: O,
) where
    R: Fn(f64, &Vector, &Store) -> Vector,
    O: FnMut(usize, f64, &Store),
{
    let mut store = Store::new(dt, max_lag, history);
    store.push(x0.clone());
    let mut x = x0;
    for k in 0..steps {
        let t = k as f64 * dt;
        store.phase = Phase::Grid;
        let k1 = rhs(t, &x, &store);
        store.last_mut().dx = Some(k1.clone());
        observe(k, t, &store);
        let y2 = &x + &k1 * (0.5 * dt);
        store.phase = Phase::Mid2;
        let k2 = rhs(t + 0.5 * dt, &y2, &store);
        let y3 = &x + &k2 * (0.5 * dt);
        store.phase = Phase::Mid3;
        let k3 = rhs(t + 0.5 * dt, &y3, &store);
        let y4 = &x + &k3 * dt;
        store.phase = Phase::End;
        let k4 = rhs(t + dt, &y4, &store);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        store.last_mut().stages = Some([y2, y3, y4]);
        store.push(x.clone());
    }
    store.phase = Phase::Grid;
    let t = steps as f64 * dt;
    let last = rhs(t, &x, &store);
    store.last_mut().dx = Some(last);
    observe(steps, t, &store);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub t_final: f64,
    pub dt: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            t_final: 40.0,
            dt: 0.005,
        }
    }
}

fn step_count(cfg: &SimulationConfig) -> Result<usize> {
    if !(cfg.t_final > 0.0 && cfg.t_final.is_finite()) {
        return Err(Error::InvalidInput(format!("T must be positive, got {}", cfg.t_final)));
    }
    Ok((cfg.t_final / cfg.dt).round() as usize)
}

/// Autonomous DDE from a history.
pub fn simulate_dde(sys: &DdeSystem, history: &HistoryFunction, cfg: &SimulationConfig) -> Result<Trajectory> {
    let n = sys.dim();
    if history.dim() != n {
        return Err(Error::Shape(format!("history has dimension {}, expected {n}", history.dim())));
    }
    let delays: Vec<f64> = sys.terms().iter().map(|t| t.0).collect();
    check_alignment(cfg.dt, &delays)?;
    let min_delay = delays.iter().copied().filter(|&d| d > 0.0).fold(f64::INFINITY, f64::min);
    if cfg.dt > min_delay {
        return Err(Error::InvalidInput(format!("dt {} exceeds the smallest delay {min_delay}", cfg.dt)));
    }
    let steps = step_count(cfg)?;
    let hist = |t: f64| history.eval(t);
    let mut columns = vec!["t".to_string()];
    columns.extend((0..n).map(|i| format!("x_{}", i + 1)));
    let mut rows = Vec::with_capacity(steps + 1);
    integrate(
        history.eval(0.0),
        &hist,
        sys.max_delay(),
        cfg.dt,
        steps,
        |t, x, past| {
            let mut out = &sys.terms()[0].1 * x;
            for (d, a) in sys.terms().iter().skip(1) {
                out += a * past.at(t - d);
            }
            out
        },
        |_, t, store| {
            let x = store.at(t);
            let mut r = vec![t];
            r.extend(x.iter());
            rows.push(r);
        },
    );
    Ok(Trajectory { columns, rows })
}

/// Coupled plant/observer run. Columns: t, x*, w*, z*, zhat*, e*.
pub fn simulate(
    sys: &TimeDelaySystem,
    fs: &FunctionalSpec,
    obs: &ObserverRealization,
    phi: &HistoryFunction,
    rho: &HistoryFunction,
    input: &InputSignal,
    cfg: &SimulationConfig,
) -> Result<Trajectory> {
    sys.ensure_valid()?;
    obs.check_shape(sys.p(), sys.m())?;
    let (n, s, m) = (sys.n(), obs.order, sys.m());
    if fs.order() != s {
        return Err(Error::Shape("functional order differs from observer order".into()));
    }
    if phi.dim() != n || rho.dim() != s {
        return Err(Error::Shape(format!(
            "histories have dimensions {} and {}, expected {n} and {s}",
            phi.dim(),
            rho.dim()
        )));
    }
    let (tau, h) = (sys.tau, sys.h);
    let delays = [tau, h];
    check_alignment(cfg.dt, &delays)?;
    if cfg.dt > tau.min(h) {
        return Err(Error::InvalidInput(format!("dt {} exceeds the smallest delay", cfg.dt)));
    }
    let steps = step_count(cfg)?;
    let hmax = tau.max(h);

    let nz = |m: &Matrix| m.iter().any(|&x| x != 0.0);
    let pick = |list: Vec<(f64, &Matrix)>| -> Vec<(f64, Matrix)> {
        list.into_iter().filter(|(_, m)| nz(m)).map(|(d, m)| (d, m.clone())).collect()
    };
    let w_terms = pick(vec![(tau, &obs.n_tau), (h, &obs.n_h)]);
    let y_terms = pick(vec![
        (0.0, &obs.g),
        (tau, &obs.g_tau),
        (h, &obs.g_h),
        (2.0 * tau, &obs.g_tautau),
        (tau + h, &obs.g_tauh),
        (2.0 * h, &obs.g_hh),
    ]);
    let u_terms = pick(vec![
        (0.0, &obs.j),
        (tau, &obs.j_tau),
        (h, &obs.j_h),
        (2.0 * tau, &obs.j_tautau),
        (tau + h, &obs.j_tauh),
        (2.0 * h, &obs.j_hh),
    ]);

    let hist = |t: f64| {
        let mut v = Vector::zeros(n + s);
        v.rows_mut(0, n).copy_from(&phi.eval(t));
        v.rows_mut(n, s).copy_from(&rho.eval(t));
        v
    };
    let xs = |v: Vector| v.rows(0, n).into_owned();
    let y_at = |store: &Store, t: f64| -> Vector {
        &sys.c_tau * xs(store.at(t - tau)) + &sys.c_h * xs(store.at(t - h))
    };
    let rhs = |t: f64, state: &Vector, store: &Store| -> Vector {
        let x = state.rows(0, n);
        let w = state.rows(n, s);
        let u = input.eval(t, m);
        let dx = &sys.a * x + &sys.a_tau * xs(store.at(t - tau)) + &sys.b * &u;
        let mut dw = &obs.n * w;
        for (d, mat) in &w_terms {
            dw += mat * store.at(t - d).rows(n, s);
        }
        for (d, mat) in &y_terms {
            dw += mat * y_at(store, t - d);
        }
        for (d, mat) in &u_terms {
            dw += mat * input.eval(t - d, m);
        }
        let mut out = Vector::zeros(n + s);
        out.rows_mut(0, n).copy_from(&dx);
        out.rows_mut(n, s).copy_from(&dw);
        out
    };

    let mut columns = vec!["t".to_string()];
    for (p, k) in [("x", n), ("w", s), ("z", s), ("zhat", s), ("e", s)] {
        columns.extend((0..k).map(|i| format!("{p}_{}", i + 1)));
    }
    let mut rows = Vec::with_capacity(steps + 1);
    let x0 = hist(0.0);
    integrate(x0, &hist, 3.0 * hmax, cfg.dt, steps, rhs, |_, t, store| {
        let state = store.at(t);
        let x = xs(state.clone());
        let w = state.rows(n, s).into_owned();
        let z = &fs.h0 * &x + &fs.h_tau * xs(store.at(t - tau)) + &fs.h_h * xs(store.at(t - h));
        let zhat = &w
            + &obs.m * y_at(store, t)
            + &obs.m_tau * y_at(store, t - tau)
            + &obs.m_h * y_at(store, t - h);
        let e = &zhat - &z;
        let mut r = Vec::with_capacity(1 + n + 4 * s);
        r.push(t);
        r.extend(x.iter());
        r.extend(w.iter());
        r.extend(z.iter());
        r.extend(zhat.iter());
        r.extend(e.iter());
        rows.push(r);
    });
    Ok(Trajectory { columns, rows })
}

/// Error dynamics of an observer as a DDE.
pub fn error_system(obs: &ObserverRealization, sys: &TimeDelaySystem) -> Result<DdeSystem> {
    DdeSystem::new(obs.error_terms(sys.tau, sys.h))
}

/// Time after which the error obeys its autonomous equation.
fn decoupling_onset(obs: &ObserverRealization, sys: &TimeDelaySystem) -> f64 {
    match obs.structure {
        Structure::A | Structure::B => sys.tau,
        Structure::C => 2.0 * sys.tau.max(sys.h),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub history: usize,
    pub input: String,
    pub e0_norm: f64,
    pub e_final_norm: f64,
    /// Largest plant state norm; e is a difference of terms this large.
    pub x_peak_norm: f64,
    pub decay_estimate: f64,
    pub decoupling_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub residual_max_abs: f64,
    pub residual_flag: bool,
    pub rightmost_roots: Vec<Root>,
    pub spectral_abscissa: f64,
    pub roots_stable: bool,
    pub simulations: Vec<SimulationSummary>,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub sim: SimulationConfig,
    pub seed: u64,
    pub histories: usize,
    pub parallelism: Parallelism,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            sim: SimulationConfig::default(),
            seed: 7,
            histories: 5,
            parallelism: Parallelism::default(),
        }
    }
}

/// Residual flag threshold for synthesized observers.
pub const RESIDUAL_FLAG: f64 = 1e-8;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Least-squares slope of ln‖e‖ over the second half of the run.
fn decay_estimate(times: &[f64], e: &[Vec<f64>]) -> f64 {
    let tf = *times.last().unwrap_or(&0.0);
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(e)
        .filter(|(t, _)| **t >= 0.5 * tf)
        .map(|(t, v)| (*t, norm(v)))
        .filter(|(_, n)| *n > 1e-290)
        .map(|(t, n)| (t, n.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NEG_INFINITY;
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let num: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    num / den
}

/// Coupled error vs the autonomous error equation restarted from the coupled history.
pub fn decoupling_error(
    traj: &Trajectory,
    obs: &ObserverRealization,
    sys: &TimeDelaySystem,
    dt: f64,
) -> Result<f64> {
    let err_sys = error_system(obs, sys)?;
    let lag = err_sys.max_delay();
    let onset = decoupling_onset(obs, sys) + lag;
    let start = (onset / dt).ceil() as usize;
    let e = traj.group("e");
    if start + 1 >= e.len() {
        return Err(Error::InvalidInput("simulation horizon too short for the decoupling check".into()));
    }
    let lag_steps = (lag / dt).round() as usize;
    let from = start.saturating_sub(lag_steps + 2);
    let samples = e[from..=start].to_vec();
    let t0 = -((start - from) as f64) * dt;
    let history = HistoryFunction::Sampled { t0, dt, samples };
    let remaining = (e.len() - 1 - start) as f64 * dt;
    let auto = simulate_dde(&err_sys, &history, &SimulationConfig { t_final: remaining, dt })?;
    let ae = auto.group("x");
    let mut diff: f64 = 0.0;
    let mut peak: f64 = 0.0;
    for (k, a) in ae.iter().enumerate() {
        let c = &e[start + k];
        let d: Vec<f64> = c.iter().zip(a).map(|(x, y)| x - y).collect();
        diff = diff.max(norm(&d));
        peak = peak.max(norm(c));
    }
    Ok(if peak > 0.0 { diff / peak } else { diff })
}

fn random_history(rng: &mut ChaCha8Rng, dim: usize, degree: usize, scale: f64) -> HistoryFunction {
    let coefficients = (0..=degree)
        .map(|k| (0..dim).map(|_| rng.random_range(-1.0..1.0) / scale.powi(k as i32)).collect())
        .collect();
    HistoryFunction::Polynomial { coefficients }
}

/// Seeded plant and observer histories used by the battery; `index` picks the draw.
pub fn seeded_histories(seed: u64, index: usize, n: usize, s: usize, max_delay: f64) -> (HistoryFunction, HistoryFunction) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
    let phi = random_history(&mut rng, n, 2, 3.0 * max_delay);
    let rho = random_history(&mut rng, s, 0, 1.0);
    (phi, rho)
}

/// Residual, rightmost roots and a seeded battery of coupled simulations.
pub fn verify_observer(
    sys: &TimeDelaySystem,
    fs: &FunctionalSpec,
    obs: &ObserverRealization,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let res = residuals(sys, fs, obs)?;
    let err_sys = error_system(obs, sys)?;
    let report = rightmost_roots(&err_sys, DEFAULT_NODES)?;
    let abscissa = report.spectral_abscissa;
    let hmax = sys.tau.max(sys.h);
    let (n, s, m) = (sys.n(), obs.order, sys.m());
    let inputs = [
        InputSignal::Zero,
        InputSignal::Sine {
            amplitude: 1.0,
            omega: 1.3,
            phase: 0.2,
        },
        InputSignal::Constant { value: vec![1.0; m] },
    ];
    let mut cases = Vec::new();
    for hi in 0..opts.histories {
        let (phi, rho) = seeded_histories(opts.seed, hi, n, s, hmax);
        for input in &inputs {
            cases.push((hi, phi.clone(), rho.clone(), input.clone()));
        }
    }
    let runs = opts.parallelism.map(&cases, |(hi, phi, rho, input)| -> Result<SimulationSummary> {
        let traj = simulate(sys, fs, obs, phi, rho, input, &opts.sim)?;
        let e = traj.group("e");
        let times = traj.times();
        let e0 = norm(&e[0]);
        let ef = norm(e.last().expect("non-empty trajectory"));
        let dec = decoupling_error(&traj, obs, sys, opts.sim.dt)?;
        let x_peak = traj.group("x").iter().map(|x| norm(x)).fold(0.0, f64::max);
        Ok(SimulationSummary {
            history: *hi,
            input: input.label().into(),
            e0_norm: e0,
            e_final_norm: ef,
            x_peak_norm: x_peak,
            decay_estimate: decay_estimate(&times, &e),
            decoupling_rel_error: dec,
            passed: ef <= 1e-4 * e0.max(1.0) && dec <= 1e-6,
        })
    });
    let simulations = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let roots_stable = abscissa < 0.0;
    let residual_flag = res.max_abs >= RESIDUAL_FLAG;
    let passed = roots_stable && !residual_flag && simulations.iter().all(|s| s.passed);
    Ok(VerificationReport {
        residual_max_abs: res.max_abs,
        residual_flag,
        rightmost_roots: report.roots.into_iter().take(6).collect(),
        spectral_abscissa: abscissa,
        roots_stable,
        simulations,
        passed,
    })
}

/// Human-readable root listing.
pub fn format_roots(roots: &[Root]) -> String {
    let mut out = String::new();
    for r in roots {
        let _ = writeln!(out, "{:+.6} {:+.6}i  (residual {:.1e})", r.re, r.im, r.residual);
    }
    out
}
