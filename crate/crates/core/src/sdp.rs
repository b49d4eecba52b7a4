//! Small dense SDP solver.
//!
//! Maximizes `c^T y` subject to LMI blocks `A_0 + sum_i y_i A_i >= 0` and
//! scalar constraints `g^T y <= h`, using a log-det barrier with damped
//! Newton centering. A phase-I problem with one extra slack variable finds a
//! strictly feasible start when none is supplied.
//!
//! Coefficient matrices are stored on their support only: the Hessian entry
//! `tr(W A_i W A_k)` is accumulated from `A_i[S_i, S_i] W[S_i, :]` and never
//! forms a full product.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{lambda_min, Cholesky};

/// Symmetric matrix supported on `idx x idx` of its block.
#[derive(Debug, Clone, PartialEq)]
pub struct SymCoeff {
    pub idx: Vec<usize>,
    pub vals: DMatrix<f64>,
}

impl SymCoeff {
    /// Keep only rows/columns with a nonzero entry.
    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let idx: Vec<usize> = (0..a.nrows())
            .filter(|&i| a.row(i).iter().any(|&x| x != 0.0) || a.column(i).iter().any(|&x| x != 0.0))
            .collect();
        let vals = a.select_rows(&idx).select_columns(&idx);
        SymCoeff { idx, vals }
    }

    pub fn identity(d: usize) -> Self {
        SymCoeff { idx: (0..d).collect(), vals: DMatrix::identity(d, d) }
    }

    pub fn add_to(&self, out: &mut DMatrix<f64>, w: f64) {
        for (a, &i) in self.idx.iter().enumerate() {
            for (b, &j) in self.idx.iter().enumerate() {
                out[(i, j)] += w * self.vals[(a, b)];
            }
        }
    }

    pub fn to_dense(&self, d: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(d, d);
        self.add_to(&mut out, 1.0);
        out
    }

    /// `A[S, S] W[S, :]`, skipping zero coefficients (the Schur-block
    /// terms are mostly zero).
    fn times_rows(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.idx.len();
        let cols = w.ncols();
        let mut out = DMatrix::zeros(k, cols);
        for (c, &src) in self.idx.iter().enumerate() {
            for r in 0..k {
                let a = self.vals[(r, c)];
                if a != 0.0 {
                    for j in 0..cols {
                        out[(r, j)] += a * w[(src, j)];
                    }
                }
            }
        }
        out
    }

    /// `tr(W A)`.
    fn trace_with(&self, w: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for (a, &i) in self.idx.iter().enumerate() {
            for (b, &j) in self.idx.iter().enumerate() {
                s += self.vals[(a, b)] * w[(j, i)];
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub dim: usize,
    pub constant: DMatrix<f64>,
    /// `(variable index, coefficient)`.
    pub terms: Vec<(usize, SymCoeff)>,
    pub label: String,
}

impl LmiBlock {
    pub fn new(dim: usize, constant: DMatrix<f64>, label: impl Into<String>) -> Self {
        LmiBlock { dim, constant, terms: Vec::new(), label: label.into() }
    }

    pub fn zeros(dim: usize, label: impl Into<String>) -> Self {
        Self::new(dim, DMatrix::zeros(dim, dim), label)
    }

    pub fn term(mut self, var: usize, a: SymCoeff) -> Self {
        if !a.idx.is_empty() {
            self.terms.push((var, a));
        }
        self
    }

    pub fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        let mut f = self.constant.clone();
        for (i, a) in &self.terms {
            if y[*i] != 0.0 {
                a.add_to(&mut f, y[*i]);
            }
        }
        f
    }
}

/// `sum coeffs * y <= rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
    pub label: String,
}

impl LinearConstraint {
    pub fn new(coeffs: Vec<(usize, f64)>, rhs: f64, label: impl Into<String>) -> Self {
        LinearConstraint { coeffs, rhs, label: label.into() }
    }

    pub fn slack(&self, y: &[f64]) -> f64 {
        self.rhs - self.coeffs.iter().map(|&(i, g)| g * y[i]).sum::<f64>()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LmiProgram {
    pub n_vars: usize,
    /// Maximized.
    pub objective: Vec<f64>,
    pub blocks: Vec<LmiBlock>,
    pub linear: Vec<LinearConstraint>,
    pub var_names: Vec<String>,
    /// Optional strictly feasible starting point; phase I runs otherwise.
    pub start: Option<Vec<f64>>,
}

impl LmiProgram {
    pub fn new(n_vars: usize) -> Self {
        LmiProgram {
            n_vars,
            objective: vec![0.0; n_vars],
            var_names: (0..n_vars).map(|i| format!("y{i}")).collect(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objective.len() != self.n_vars {
            return Err(Error::Dimension("objective length".into()));
        }
        for (j, b) in self.blocks.iter().enumerate() {
            if b.constant.nrows() != b.dim || b.constant.ncols() != b.dim {
                return Err(Error::Dimension(format!("block {j} constant is not {0}x{0}", b.dim)));
            }
            for (i, a) in &b.terms {
                if *i >= self.n_vars || a.idx.iter().any(|&k| k >= b.dim) {
                    return Err(Error::Dimension(format!("block {j} coefficient out of range")));
                }
                if (&a.vals - a.vals.transpose()).amax() > 1e-12 * a.vals.amax().max(1.0) {
                    return Err(Error::Dimension(format!("block {j} coefficient for y{i} not symmetric")));
                }
            }
        }
        for c in &self.linear {
            if c.coeffs.iter().any(|&(i, _)| i >= self.n_vars) {
                return Err(Error::Dimension(format!("linear constraint '{}' out of range", c.label)));
            }
        }
        Ok(())
    }

    /// Barrier parameter `m`: total LMI order plus scalar constraints.
    pub fn barrier_order(&self) -> usize {
        self.blocks.iter().map(|b| b.dim).sum::<usize>() + self.linear.len()
    }

    pub fn objective_at(&self, y: &[f64]) -> f64 {
        self.objective.iter().zip(y).map(|(c, x)| c * x).sum()
    }

    /// Most negative constraint value at `y`: block `lambda_min` or scalar
    /// slack, with the constraint index (blocks first, then scalars).
    pub fn margin(&self, y: &[f64]) -> (f64, usize) {
        let mut worst = (f64::INFINITY, 0);
        for (j, b) in self.blocks.iter().enumerate() {
            let l = lambda_min(&b.eval(y)).unwrap_or(f64::NEG_INFINITY);
            if l < worst.0 {
                worst = (l, j);
            }
        }
        for (k, c) in self.linear.iter().enumerate() {
            let s = c.slack(y);
            if s < worst.0 {
                worst = (s, self.blocks.len() + k);
            }
        }
        worst
    }

    pub fn constraint_label(&self, k: usize) -> String {
        if k < self.blocks.len() {
            format!("block {k} ({})", self.blocks[k].label)
        } else {
            let c = &self.linear[k - self.blocks.len()];
            format!("scalar {} ({})", k - self.blocks.len(), c.label)
        }
    }

    /// Plain-text dump: header, objective, then every block and scalar row.
    /// Matrices are written as `row col value` triplets of the upper
    /// triangle.
    pub fn dump<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "# max c'y s.t. F_j(y) = A_j0 + sum_i y_i A_ji >= 0, g'y <= h");
        let _ = writeln!(s, "vars {}", self.n_vars);
        let _ = writeln!(s, "names {}", self.var_names.join(" "));
        let _ = writeln!(s, "objective {}", join_f64(&self.objective));
        let _ = writeln!(s, "blocks {}", self.blocks.len());
        for (j, b) in self.blocks.iter().enumerate() {
            let _ = writeln!(s, "block {j} dim {} label {}", b.dim, b.label);
            write_triplets(&mut s, "A0", &b.constant, None);
            for (i, a) in &b.terms {
                write_triplets(&mut s, &format!("A{}", i + 1), &a.vals, Some(&a.idx));
            }
            let _ = writeln!(s, "end");
        }
        let _ = writeln!(s, "linear {}", self.linear.len());
        for c in &self.linear {
            let terms: Vec<String> = c.coeffs.iter().map(|(i, g)| format!("{i}:{g:e}")).collect();
            let _ = writeln!(s, "{} <= {:e} # {}", terms.join(" "), c.rhs, c.label);
        }
        out.write_all(s.as_bytes())?;
        Ok(())
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

fn write_triplets(s: &mut String, name: &str, m: &DMatrix<f64>, idx: Option<&[usize]>) {
    let map = |k: usize| idx.map_or(k, |ix| ix[k]);
    let _ = writeln!(s, "{name}");
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            if m[(i, j)] != 0.0 {
                let _ = writeln!(s, "{} {} {:e}", map(i), map(j), m[(i, j)]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolverOptions {
    pub feas_tol: f64,
    /// Stop when `m / t <= max(gap_tol * |c'y|, abs_gap)`.
    pub gap_tol: f64,
    pub abs_gap: f64,
    /// Newton steps per phase.
    pub max_iter: usize,
    pub t0: f64,
    pub mu: f64,
    /// Phase I searches inside `|y_i| <= box_radius` so its barrier stays
    /// bounded when some variable is free in one direction.
    pub box_radius: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { feas_tol: 1e-7, gap_tol: 1e-7, abs_gap: 1e-12, max_iter: 200, t0: 1.0, mu: 20.0, box_radius: 1e6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    MaxIter,
    Unbounded,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterLog {
    pub phase: u8,
    pub newton: usize,
    pub t: f64,
    pub objective: f64,
    pub step: f64,
    /// Last Newton step at this `t`: the iterate lies on the central path.
    pub centered: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SdpSolution {
    pub y: Vec<f64>,
    pub objective: f64,
    /// Certified upper bound `c'y + m/t` on the optimum (when optimal).
    pub bound: f64,
    pub status: SdpStatus,
    /// Most negative block eigenvalue or scalar slack at `y`.
    pub margin: f64,
    /// Most violated constraint when infeasible.
    pub violated: Option<String>,
    pub iterations: usize,
    pub log: Vec<IterLog>,
}

const UNBOUNDED_LIMIT: f64 = 1e12;
const MAX_CENTERING: usize = 50;

struct Barrier<'a> {
    prog: &'a LmiProgram,
}

impl Barrier<'_> {
    /// Barrier value `-t c'y - sum log det F_j - sum log s_k`, or `None`
    /// outside the interior.
    fn value(&self, y: &[f64], t: f64) -> Option<f64> {
        let mut v = -t * self.prog.objective_at(y);
        for b in &self.prog.blocks {
            v -= Cholesky::new(&b.eval(y))?.log_det();
        }
        for c in &self.prog.linear {
            let s = c.slack(y);
            if s <= 0.0 {
                return None;
            }
            v -= s.ln();
        }
        v.is_finite().then_some(v)
    }

    /// Gradient and Hessian of the barrier function.
    fn derivatives(&self, y: &[f64], t: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let p = self.prog.n_vars;
        let mut g = DVector::from_fn(p, |i, _| -t * self.prog.objective[i]);
        let mut h = DMatrix::zeros(p, p);
        for b in &self.prog.blocks {
            let w = Cholesky::new(&b.eval(y))?.inverse();
            // B_i = A_i[S, S] W[S, :]
            let bs: Vec<DMatrix<f64>> = b
                .terms
                .iter()
                .map(|(_, a)| a.times_rows(&w))
                .collect();
            for (ti, (i, a)) in b.terms.iter().enumerate() {
                g[*i] -= a.trace_with(&w);
                for (tk, (k, ak)) in b.terms.iter().enumerate().skip(ti) {
                    let (bi, bk) = (&bs[ti], &bs[tk]);
                    let mut s = 0.0;
                    for (r, &row) in a.idx.iter().enumerate() {
                        for (c, &col) in ak.idx.iter().enumerate() {
                            s += bi[(r, col)] * bk[(c, row)];
                        }
                    }
                    h[(*i, *k)] += s;
                    if tk != ti {
                        h[(*k, *i)] += s;
                    }
                }
            }
        }
        for c in &self.prog.linear {
            let s = c.slack(y);
            for &(i, gi) in &c.coeffs {
                g[i] += gi / s;
                for &(k, gk) in &c.coeffs {
                    h[(i, k)] += gi * gk / (s * s);
                }
            }
        }
        Some((g, h))
    }
}

fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> Option<DVector<f64>> {
    let scale = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..8 {
        let mut hr = h.clone();
        for i in 0..hr.nrows() {
            hr[(i, i)] += ridge;
        }
        if let Some(ch) = Cholesky::new(&hr) {
            let d = -ch.solve(g);
            if d.iter().all(|x| x.is_finite()) {
                return Some(d);
            }
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
    }
    None
}

enum Outcome {
    Optimal,
    MaxIter,
    Unbounded,
    /// Phase-I early exit: a strictly feasible point was reached.
    Stopped,
    /// Phase-I certificate that the optimum is positive.
    Infeasible,
}

struct Run {
    y: Vec<f64>,
    t: f64,
    newton: usize,
    outcome: Outcome,
}

/// Barrier method from a strictly feasible `y`. `stop` ends the run early
/// (used by phase I); `certify` returns true when the lower bound proves
/// infeasibility.
fn barrier_method(
    prog: &LmiProgram,
    mut y: Vec<f64>,
    opts: &SolverOptions,
    phase: u8,
    log: &mut Vec<IterLog>,
    stop: impl Fn(&[f64]) -> bool,
    certify: impl Fn(&[f64], f64) -> bool,
) -> Run {
    let bar = Barrier { prog };
    let m = prog.barrier_order() as f64;
    let mut t = opts.t0;
    let mut newton = 0;
    loop {
        // centering
        let entered = newton;
        let mut centered = false;
        loop {
            if newton >= opts.max_iter {
                return Run { y, t, newton, outcome: Outcome::MaxIter };
            }
            let Some((g, h)) = bar.derivatives(&y, t) else {
                return Run { y, t, newton, outcome: Outcome::MaxIter };
            };
            let Some(d) = newton_direction(&g, &h) else {
                return Run { y, t, newton, outcome: Outcome::MaxIter };
            };
            let dec2 = -g.dot(&d);
            newton += 1;
            if dec2 / 2.0 <= 1e-9 {
                log.push(IterLog { phase, newton, t, objective: prog.objective_at(&y), step: 0.0, centered: true });
                centered = true;
                break;
            }
            let f0 = bar.value(&y, t).unwrap_or(f64::INFINITY);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = y.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
                if let Some(f1) = bar.value(&trial, t) {
                    if f1 <= f0 - 0.25 * alpha * dec2 {
                        y = trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let at_center = !accepted || dec2 / 2.0 <= 1e-9;
            log.push(IterLog { phase, newton, t, objective: prog.objective_at(&y), step: if accepted { alpha } else { 0.0 }, centered: at_center });
            if !accepted {
                // no progress possible at this t; treat as centered
                break;
            }
            if stop(&y) {
                return Run { y, t, newton, outcome: Outcome::Stopped };
            }
            if prog.objective_at(&y).abs() > UNBOUNDED_LIMIT || y.iter().any(|x| x.abs() > UNBOUNDED_LIMIT) {
                return Run { y, t, newton, outcome: Outcome::Unbounded };
            }
            if dec2 / 2.0 <= 1e-9 {
                centered = true;
                break;
            }
            // tiny steps mean the Hessian has gone ill-conditioned at this t
            if alpha < 1e-6 || newton - entered >= MAX_CENTERING {
                break;
            }
        }
        let obj = prog.objective_at(&y);
        // the m/t duality bound only holds on the central path
        if centered && certify(&y, m / t) {
            return Run { y, t, newton, outcome: Outcome::Infeasible };
        }
        if m / t <= (opts.gap_tol * obj.abs()).max(opts.abs_gap) {
            return Run { y, t, newton, outcome: Outcome::Optimal };
        }
        t *= opts.mu;
    }
}

/// Phase I: maximize `-s` over `F_j(y) + s I >= 0`, `g'y - s <= h`,
/// `s >= -1` and the box `|y_i| <= R`, starting from `y0` with a large enough `s`.
enum PhaseOne {
    Feasible(Vec<f64>, usize),
    /// The auxiliary optimum is provably positive.
    Certified(Vec<f64>, usize),
    /// Ran out of Newton steps without a feasible point or a certificate.
    Exhausted(Vec<f64>, usize),
}

fn phase_one(prog: &LmiProgram, y0: &[f64], opts: &SolverOptions, log: &mut Vec<IterLog>) -> PhaseOne {
    let p = prog.n_vars;
    let mut aux = LmiProgram::new(p + 1);
    aux.objective[p] = -1.0;
    for b in &prog.blocks {
        let mut nb = b.clone();
        nb.terms.push((p, SymCoeff::identity(b.dim)));
        aux.blocks.push(nb);
    }
    for c in &prog.linear {
        let mut nc = c.clone();
        nc.coeffs.push((p, -1.0));
        aux.linear.push(nc);
    }
    aux.linear.push(LinearConstraint::new(vec![(p, -1.0)], 1.0, "phase-I floor"));
    let r = opts.box_radius.max(2.0 * y0.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    for i in 0..p {
        aux.linear.push(LinearConstraint::new(vec![(i, 1.0)], r, "phase-I box"));
        aux.linear.push(LinearConstraint::new(vec![(i, -1.0)], r, "phase-I box"));
    }

    let (worst, _) = prog.margin(y0);
    let s0 = (-worst).max(0.0) * 1.5 + 1.0;
    let mut y = y0.to_vec();
    y.push(s0);
    let run = barrier_method(
        &aux,
        y,
        opts,
        1,
        log,
        |y| y[p] < 0.0,
        |y, gap| y[p] - gap > 0.0,
    );
    let mut y = run.y;
    let s = y.pop().unwrap();
    match run.outcome {
        Outcome::Stopped => PhaseOne::Feasible(y, run.newton),
        _ if s < 0.0 => PhaseOne::Feasible(y, run.newton),
        Outcome::Infeasible => PhaseOne::Certified(y, run.newton),
        _ => PhaseOne::Exhausted(y, run.newton),
    }
}

pub fn solve(prog: &LmiProgram, opts: &SolverOptions) -> Result<SdpSolution> {
    prog.validate()?;
    let mut log = Vec::new();
    let y0 = prog.start.clone().unwrap_or_else(|| vec![0.0; prog.n_vars]);
    let (start, phase1_iters) = if prog.margin(&y0).0 > 0.0 {
        (y0, 0)
    } else {
        let (status, y, iters) = match phase_one(prog, &y0, opts, &mut log) {
            PhaseOne::Feasible(y, iters) => (None, y, iters),
            PhaseOne::Certified(y, iters) => (Some(SdpStatus::Infeasible), y, iters),
            // no feasible point, but no proof either
            PhaseOne::Exhausted(y, iters) => (Some(SdpStatus::MaxIter), y, iters),
        };
        match status {
            None => (y, iters),
            Some(status) => {
                let (margin, worst) = prog.margin(&y);
                return Ok(SdpSolution {
                    objective: prog.objective_at(&y),
                    bound: f64::NAN,
                    y,
                    status,
                    margin,
                    violated: Some(prog.constraint_label(worst)),
                    iterations: iters,
                    log,
                });
            }
        }
    };
    let run = barrier_method(prog, start, opts, 2, &mut log, |_| false, |_, _| false);
    let m = prog.barrier_order() as f64;
    let objective = prog.objective_at(&run.y);
    let (margin, _) = prog.margin(&run.y);
    let status = match run.outcome {
        Outcome::Optimal => SdpStatus::Optimal,
        Outcome::Unbounded => SdpStatus::Unbounded,
        _ => SdpStatus::MaxIter,
    };
    Ok(SdpSolution {
        y: run.y,
        objective,
        bound: objective + m / run.t,
        status,
        margin,
        violated: None,
        iterations: phase1_iters + run.newton,
        log,
    })
}
