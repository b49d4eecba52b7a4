//! Gain-matrix components and the COP metric.
//!
//! With `V = v v^T` the gain `F_A(v)^T F_A(v)` splits into a PMU part
//! `P(pmu)`, linear in the placement vector, and a SCADA part `S(V, I, F)`,
//! linear in `V`. `M = S(I_2N, I, F)` is the Lipschitz matrix of the
//! Jacobian. `beta` is `lambda_min(P + S(v_prior v_prior^T))`, `phi` is the
//! largest eigenvalue of `M` restricted to buses without a PMU, and
//! `rho = beta / phi`.

use nalgebra::DMatrix;
use serde::{Serialize, Serializer};

use crate::error::Result;
use crate::grid::{build_admittance, build_constant_matrices, ConstantMatrixSet, Grid, LocalSym, SparseRow};
use crate::linalg::{clamp_eig, eigvals_sym, lambda_max, Cholesky};
use crate::measurement::{selected_rows, Block, NoiseModel, Placement, SelectionMask, StateVector};

/// Grid, constant matrices, noise and prior: everything placement-independent.
#[derive(Debug, Clone)]
pub struct CopModel {
    pub grid: Grid,
    pub mats: ConstantMatrixSet,
    pub noise: NoiseModel,
    pub v_prior: StateVector,
    pmu_terms: Vec<LocalSym>,
}

impl CopModel {
    pub fn new(grid: Grid, noise: NoiseModel) -> Self {
        let v_prior = StateVector::flat(grid.n_buses());
        Self::with_prior(grid, noise, v_prior)
    }

    pub fn with_prior(grid: Grid, noise: NoiseModel, v_prior: StateVector) -> Self {
        let mats = build_constant_matrices(&grid, &build_admittance(&grid));
        let n = grid.n_buses();
        let wv = noise.weight(Block::V);
        let wc = noise.weight(Block::C);
        let pmu_terms = (0..n)
            .map(|bus| {
                let mut idx = vec![bus, n + bus];
                for ell in mats.outgoing(bus) {
                    idx.extend_from_slice(&mats.current_re[ell].idx);
                    idx.extend_from_slice(&mats.current_im[ell].idx);
                }
                idx.sort_unstable();
                idx.dedup();
                let pos = |g: usize| idx.binary_search(&g).unwrap();
                let mut vals = DMatrix::zeros(idx.len(), idx.len());
                vals[(pos(bus), pos(bus))] += wv;
                vals[(pos(n + bus), pos(n + bus))] += wv;
                for ell in mats.outgoing(bus) {
                    for row in [&mats.current_re[ell], &mats.current_im[ell]] {
                        for (&i, &a) in row.idx.iter().zip(&row.vals) {
                            for (&j, &b) in row.idx.iter().zip(&row.vals) {
                                vals[(pos(i), pos(j))] += wc * a * b;
                            }
                        }
                    }
                }
                LocalSym { dim: 2 * n, idx, vals }
            })
            .collect();
        CopModel { grid, mats, noise, v_prior, pmu_terms }
    }

    pub fn n_buses(&self) -> usize {
        self.grid.n_buses()
    }

    pub fn dim(&self) -> usize {
        2 * self.n_buses()
    }

    /// Contribution of a PMU at `bus` to `P`.
    pub fn pmu_term(&self, bus: usize) -> &LocalSym {
        &self.pmu_terms[bus]
    }

    /// `P(w) = sum_n w_n P_n`; `w` may be fractional.
    pub fn gain_pmu(&self, w: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (bus, &wn) in w.iter().enumerate() {
            if wn != 0.0 {
                let t = &self.pmu_terms[bus];
                for (a, &i) in t.idx.iter().enumerate() {
                    for (b, &j) in t.idx.iter().enumerate() {
                        out[(i, j)] += wn * t.vals[(a, b)];
                    }
                }
            }
        }
        out
    }

    fn generators<'a>(&'a self, inj: &'a [bool], flow: &'a [bool]) -> impl Iterator<Item = (f64, &'a LocalSym)> + 'a {
        let wi = self.noise.weight(Block::I);
        let wf = self.noise.weight(Block::F);
        let m = &self.mats;
        let injections = inj
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .flat_map(move |(n, _)| [(wi, &m.h_inj_p[n]), (wi, &m.h_inj_q[n])]);
        let flows = flow
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .flat_map(move |(l, _)| [(wf, &m.h_flow_p[l]), (wf, &m.h_flow_q[l])]);
        injections.chain(flows)
    }

    /// `S(V, I, F) = sum w (A + A^T)^T V (A + A^T)` over selected sites.
    pub fn gain_scada(&self, v_mat: &DMatrix<f64>, inj: &[bool], flow: &[bool]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (w, h) in self.generators(inj, flow) {
            let s = h.idx.len();
            let mut vloc = DMatrix::zeros(s, s);
            for (a, &i) in h.idx.iter().enumerate() {
                for (b, &j) in h.idx.iter().enumerate() {
                    vloc[(a, b)] = v_mat[(i, j)];
                }
            }
            let t = h.vals.transpose() * vloc * &h.vals;
            for (a, &i) in h.idx.iter().enumerate() {
                for (b, &j) in h.idx.iter().enumerate() {
                    out[(i, j)] += w * t[(a, b)];
                }
            }
        }
        out
    }

    /// `S(v v^T, I, F)` via the rank-one rows `(A + A^T) v`.
    pub fn gain_scada_rank1(&self, v: &[f64], inj: &[bool], flow: &[bool]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (w, h) in self.generators(inj, flow) {
            h.apply(v).add_outer_to(&mut out, w);
        }
        out
    }

    /// `M = S(I, I, F)`.
    pub fn m_matrix(&self, inj: &[bool], flow: &[bool]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (w, h) in self.generators(inj, flow) {
            h.add_gram_to(&mut out, w);
        }
        out
    }

    /// Exact gain `P + S(v v^T)` at a state.
    pub fn gain_at(&self, v: &StateVector, p: &Placement) -> DMatrix<f64> {
        let w: Vec<f64> = p.pmu.iter().map(|&b| f64::from(u8::from(b))).collect();
        self.gain_pmu(&w) + self.gain_scada_rank1(v.as_slice(), &p.scada_injection, &p.scada_flow)
    }

    /// `F_A(v)^T F_A(v)` assembled directly from the whitened Jacobian rows.
    pub fn gain_from_jacobian(&self, v: &StateVector, p: &Placement) -> Result<DMatrix<f64>> {
        let mask = SelectionMask::from_placement(p, &self.mats)?;
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (_, row) in selected_rows(v, &self.mats, &mask, &self.noise) {
            row.add_outer_to(&mut out, 1.0);
        }
        Ok(out)
    }

    /// Precompute everything that depends on the SCADA configuration.
    pub fn scada(&self, inj: Vec<bool>, flow: Vec<bool>) -> Scada {
        let prior = self.v_prior.as_slice();
        let s_prior = self.gain_scada_rank1(prior, &inj, &flow);
        let m = self.m_matrix(&inj, &flow);
        let m_scale = lambda_max(&m).unwrap_or(0.0);
        let patterns = failure_patterns(&inj, &flow);
        let wi = self.noise.weight(Block::I).sqrt();
        let wf = self.noise.weight(Block::F).sqrt();
        let scaled = |h: &LocalSym, w: f64| {
            let mut r = h.apply(prior);
            r.vals.iter_mut().for_each(|x| *x *= w);
            r
        };
        let site_rows = patterns
            .iter()
            .map(|p| match *p {
                FailurePattern::Injection(n) => [scaled(&self.mats.h_inj_p[n], wi), scaled(&self.mats.h_inj_q[n], wi)],
                FailurePattern::Flow(l) => [scaled(&self.mats.h_flow_p[l], wf), scaled(&self.mats.h_flow_q[l], wf)],
            })
            .collect();
        Scada { injection: inj, flow, s_prior, m, m_scale, patterns, site_rows }
    }
}

/// SCADA configuration with its prior-linearized gain, `M` and failure
/// patterns.
#[derive(Debug, Clone)]
pub struct Scada {
    pub injection: Vec<bool>,
    pub flow: Vec<bool>,
    /// `S(v_prior v_prior^T, I, F)`.
    pub s_prior: DMatrix<f64>,
    pub m: DMatrix<f64>,
    /// `lambda_max(M)`.
    pub m_scale: f64,
    pub patterns: Vec<FailurePattern>,
    site_rows: Vec<[SparseRow; 2]>,
}

impl Scada {
    /// `S(v_prior v_prior^T)` with pattern `k` removed.
    pub fn pattern_s(&self, k: usize) -> DMatrix<f64> {
        let mut s = self.s_prior.clone();
        for r in &self.site_rows[k] {
            r.add_outer_to(&mut s, -1.0);
        }
        s
    }

    pub fn placement(&self, pmu: Vec<bool>) -> Placement {
        Placement::new(pmu, self.injection.clone(), self.flow.clone())
    }

    pub fn n_sites(&self) -> usize {
        self.patterns.len()
    }
}

/// A single lost SCADA site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FailurePattern {
    /// Injection at this bus removed.
    Injection(usize),
    /// Flow on this directed line removed.
    Flow(usize),
}

impl FailurePattern {
    pub fn apply(&self, inj: &[bool], flow: &[bool]) -> (Vec<bool>, Vec<bool>) {
        let (mut i, mut f) = (inj.to_vec(), flow.to_vec());
        match *self {
            FailurePattern::Injection(n) => i[n] = false,
            FailurePattern::Flow(l) => f[l] = false,
        }
        (i, f)
    }
}

/// One pattern per present injection, then one per present flow.
pub fn failure_patterns(inj: &[bool], flow: &[bool]) -> Vec<FailurePattern> {
    let injections = inj.iter().enumerate().filter(|(_, &on)| on).map(|(n, _)| FailurePattern::Injection(n));
    let flows = flow.iter().enumerate().filter(|(_, &on)| on).map(|(l, _)| FailurePattern::Flow(l));
    injections.chain(flows).collect()
}

fn indicator(pmu: &[bool]) -> Vec<f64> {
    pmu.iter().map(|&b| f64::from(u8::from(b))).collect()
}

/// Smallest eigenvalue, clamped to zero below the relative tolerance.
pub fn clamped_lambda_min(a: &DMatrix<f64>) -> f64 {
    match eigvals_sym(a) {
        Ok(ev) if !ev.is_empty() => {
            let scale = ev.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            clamp_eig(ev[0], scale)
        }
        _ => 0.0,
    }
}

/// `lambda_min[P(pmu) + S(v_prior v_prior^T)]`.
pub fn beta_approx(model: &CopModel, scada: &Scada, pmu: &[bool]) -> f64 {
    beta_weighted(model, scada, &indicator(pmu))
}

pub fn beta_weighted(model: &CopModel, scada: &Scada, w: &[f64]) -> f64 {
    clamped_lambda_min(&(model.gain_pmu(w) + &scada.s_prior))
}

/// `lambda_max[(I - J) M (I - J)]`: the top eigenvalue of `M` restricted to
/// the coordinates of buses without a PMU.
pub fn phi_approx(m: &DMatrix<f64>, pmu: &[bool]) -> f64 {
    let n = pmu.len();
    let keep: Vec<usize> = (0..2 * n).filter(|&i| !pmu[i % n]).collect();
    if keep.is_empty() {
        return 0.0;
    }
    let sub = m.select_rows(&keep).select_columns(&keep);
    let scale = lambda_max(m).unwrap_or(0.0);
    clamp_eig(lambda_max(&sub).unwrap_or(0.0), scale)
}

/// `phi` for a fractional placement: `lambda_max(D M D)` with
/// `D = I - I_2 (x) diag(w)`.
pub fn phi_weighted(m: &DMatrix<f64>, w: &[f64]) -> f64 {
    let n = w.len();
    let d = DMatrix::from_fn(2 * n, 2 * n, |i, j| if i == j { 1.0 - w[i % n] } else { 0.0 });
    let dmd = &d * m * &d;
    let scale = lambda_max(m).unwrap_or(0.0);
    clamp_eig(lambda_max(&dmd).unwrap_or(0.0), scale)
}

/// True iff `lambda_min(G) >= beta_min`, decided by a Cholesky of
/// `G - beta_min I` (semidefinite boundary counts as failing).
pub fn lambda_min_at_least(g: &DMatrix<f64>, beta_min: f64) -> bool {
    let mut a = g.clone();
    for i in 0..a.nrows() {
        a[(i, i)] -= beta_min;
    }
    Cholesky::new(&a).is_some()
}

/// One flag per failure pattern of `scada`.
pub fn critical_check(model: &CopModel, scada: &Scada, pmu: &[bool], beta_min: f64) -> Vec<bool> {
    let p = model.gain_pmu(&indicator(pmu));
    (0..scada.n_sites())
        .map(|k| lambda_min_at_least(&(&p + scada.pattern_s(k)), beta_min))
        .collect()
}

/// Progress towards the critical checks: over all single-site failure
/// patterns, the total count of eigenvalues of `P(pmu) + S_k` at or above
/// `beta_min`, and the smallest `lambda_min`.
pub fn critical_margin(model: &CopModel, scada: &Scada, pmu: &[bool], beta_min: f64) -> (usize, f64) {
    let p = model.gain_pmu(&indicator(pmu));
    (0..scada.n_sites())
        .map(|k| {
            let ev = eigvals_sym(&(&p + scada.pattern_s(k))).unwrap_or_default();
            let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
            (ev.iter().filter(|&&x| x >= beta_min).count(), lo)
        })
        .fold((0, f64::INFINITY), |(c, m), (ck, mk)| (c + ck, m.min(mk)))
}

fn ser_extended<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" })
    }
}

/// Format `rho`/`mse_bound` for CSV: `inf` for the sentinel.
pub fn fmt_extended(x: f64) -> String {
    if x.is_infinite() {
        "inf".to_string()
    } else {
        format!("{x:.10e}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CopReport {
    pub pmu: Vec<bool>,
    pub beta: f64,
    pub phi: f64,
    /// `+inf` when `phi = 0` and `beta > 0`.
    #[serde(serialize_with = "ser_extended")]
    pub rho: f64,
    /// `2N / beta`; `+inf` when unobservable.
    #[serde(serialize_with = "ser_extended")]
    pub mse_bound: f64,
    pub critical_ok: Vec<bool>,
    /// `beta = 0` and `phi = 0` at once.
    pub degenerate: bool,
}

impl CopReport {
    pub fn observable(&self) -> bool {
        self.beta > 0.0
    }

    pub fn all_critical_ok(&self) -> bool {
        self.critical_ok.iter().all(|&b| b)
    }
}

pub fn cop_metric(model: &CopModel, scada: &Scada, pmu: &[bool], beta_min: f64) -> CopReport {
    let beta = beta_approx(model, scada, pmu);
    let phi = phi_approx(&scada.m, pmu);
    let (rho, degenerate) = rho_of(beta, phi);
    CopReport {
        pmu: pmu.to_vec(),
        beta,
        phi,
        rho,
        mse_bound: mse_bound(model.n_buses(), beta),
        critical_ok: critical_check(model, scada, pmu, beta_min),
        degenerate,
    }
}

/// `(rho, degenerate)`.
pub fn rho_of(beta: f64, phi: f64) -> (f64, bool) {
    if phi > 0.0 {
        (beta / phi, false)
    } else if beta > 0.0 {
        (f64::INFINITY, false)
    } else {
        (0.0, true)
    }
}

pub fn mse_bound(n: usize, beta: f64) -> f64 {
    if beta > 0.0 {
        2.0 * n as f64 / beta
    } else {
        f64::INFINITY
    }
}
