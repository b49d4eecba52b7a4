//! Gauss-Newton hybrid estimator with PMU initialization and per-iteration
//! instrumentation of the quadratic error recursion.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ConstantMatrixSet;
use crate::linalg::{lambda_min, Cholesky};
use crate::measurement::{eval_f, selected_rows, Layout, MeasurementEnsemble, NoiseModel, SelectionMask, StateVector};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GnOptions {
    pub max_iters: usize,
    /// Stop once `||d^k|| < step_tol`.
    pub step_tol: f64,
    /// Relative ridge for the retry on a singular gain; 0 disables it.
    pub ridge: f64,
    /// `||v^k||` above this counts as divergence.
    pub divergence_norm: f64,
}

impl Default for GnOptions {
    fn default() -> Self {
        GnOptions { max_iters: 50, step_tol: 1e-10, ridge: 0.0, divergence_norm: 1e3 }
    }
}

impl GnOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.step_tol > 0.0) || !(self.ridge >= 0.0) || !(self.divergence_norm > 0.0) {
            return Err(Error::Config(format!("invalid Gauss-Newton options {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GnStatus {
    Converged,
    Diverged,
    MaxIters,
}

/// One iterate `v^k`. The `rho`, `phi` and `bound` fields are filled by
/// [`GnTrace::instrument`] once the fixed point is known.
#[derive(Debug, Clone, Serialize)]
pub struct GnIterate {
    pub iter: usize,
    #[serde(skip)]
    pub v: DVector<f64>,
    pub tve: Option<f64>,
    /// `||d^k||` of the step leaving this iterate.
    pub step: Option<f64>,
    /// `lambda_min(F_A^T F_A)` at this iterate.
    pub gain_lambda_min: Option<f64>,
    pub ridged: bool,
    pub rho: Option<f64>,
    pub phi: Option<f64>,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GnTrace {
    pub iterates: Vec<GnIterate>,
    pub status: GnStatus,
    pub diagnostic: Option<String>,
}

impl GnTrace {
    pub fn iterations(&self) -> usize {
        self.iterates.len().saturating_sub(1)
    }

    pub fn tve(&self) -> Vec<f64> {
        self.iterates.iter().filter_map(|it| it.tve).collect()
    }

    /// Smallest gain eigenvalue along the trajectory.
    pub fn beta(&self) -> f64 {
        self.iterates
            .iter()
            .filter_map(|it| it.gain_lambda_min)
            .fold(f64::INFINITY, f64::min)
    }

    /// Fill `rho_k = ||v^k - v_est||`, the Rayleigh quotient `phi_k` of `m`
    /// at `v^k - v_est`, and the recursion bound predicting `rho_{k+1}`.
    pub fn instrument(&mut self, v_est: &StateVector, m: &DMatrix<f64>, beta: f64, eps: f64) {
        for it in &mut self.iterates {
            let e = &it.v - &v_est.0;
            let rho = e.norm();
            let phi = if rho > 0.0 { (e.transpose() * m * &e)[(0, 0)] / (rho * rho) } else { 0.0 };
            it.rho = Some(rho);
            it.phi = Some(phi);
            it.bound = Some(lemma1_rhs(rho, phi, beta, eps));
        }
    }

    /// CSV with header `iter,tve,rho,phi_k,bound`; missing values are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "tve", "rho", "phi_k", "bound"])?;
        let f = |x: Option<f64>| x.map(|x| format!("{x:.10e}")).unwrap_or_default();
        for it in &self.iterates {
            w.write_record([it.iter.to_string(), f(it.tve), f(it.rho), f(it.phi), f(it.bound)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `1/2 sqrt(phi/beta) rho^2 + eps sqrt(2 phi)/beta rho`.
pub fn lemma1_rhs(rho: f64, phi: f64, beta: f64, eps: f64) -> f64 {
    0.5 * (phi / beta).sqrt() * rho * rho + eps * (2.0 * phi).sqrt() / beta * rho
}

/// Per step `k`, whether `rho_{k+1}` respects the recursion bound built from
/// `rho_k` and `phi_k` (plus `1e-8` slack). Needs an instrumented trace.
pub fn lemma1_bound_check(trace: &GnTrace, beta: f64, eps: f64) -> Vec<bool> {
    trace
        .iterates
        .windows(2)
        .map(|w| match (w[0].rho, w[0].phi, w[1].rho) {
            (Some(r), Some(p), Some(r1)) => r1 <= lemma1_rhs(r, p, beta, eps) + 1e-8,
            _ => false,
        })
        .collect()
}

/// `2 sqrt(beta/phi) - 2 sqrt(2) eps / sqrt(beta)`, defined when
/// `eps sqrt(2 phi) < beta`.
pub fn convergence_radius(beta: f64, phi: f64, eps: f64) -> Result<f64> {
    let lhs = eps * (2.0 * phi).sqrt();
    if !(beta > 0.0) || !(phi > 0.0) || !(lhs < beta) {
        return Err(Error::NoConvergenceGuarantee { lhs, beta });
    }
    Ok(2.0 * (beta / phi).sqrt() - 2.0 * 2f64.sqrt() * eps / beta.sqrt())
}

/// Measured phasors at PMU buses, prior elsewhere. `z_v` is the voltage
/// block `[Re; Im]`.
pub fn pmu_initializer(z_v: &DVector<f64>, v_prior: &StateVector, pmu: &[bool]) -> Result<StateVector> {
    let n = pmu.len();
    if z_v.len() != 2 * n || v_prior.0.len() != 2 * n {
        return Err(Error::Dimension(format!(
            "initializer: {} PMU flags, voltage block {}, prior {}",
            n,
            z_v.len(),
            v_prior.0.len()
        )));
    }
    let v = DVector::from_fn(2 * n, |i, _| if pmu[i % n] { z_v[i] } else { v_prior.0[i] });
    Ok(StateVector(v))
}

/// Total vector error in percent.
pub fn tve(v: &DVector<f64>, v_true: &StateVector) -> f64 {
    (v - &v_true.0).norm() / v_true.0.norm() * 100.0
}

/// Whitened gain `F_A^T F_A`, gradient `F_A^T (z_A - f_A)` and residual at `v`.
pub struct Linearization {
    pub gain: DMatrix<f64>,
    pub grad: DVector<f64>,
    pub residual: DVector<f64>,
}

pub fn linearize(v: &StateVector, z: &MeasurementEnsemble, mats: &ConstantMatrixSet) -> Linearization {
    let lay = Layout::new(mats);
    let d = v.0.len();
    let f = eval_f(v, mats);
    let rows = selected_rows(v, mats, &z.mask, &z.noise);
    let mut gain = DMatrix::zeros(d, d);
    let mut grad = DVector::zeros(d);
    let mut residual = DVector::zeros(rows.len());
    for (i, (r, row)) in rows.iter().enumerate() {
        let res = (z.z[*r] - f[*r]) / z.noise.sigma(lay.block_of(*r));
        residual[i] = res;
        row.add_outer_to(&mut gain, 1.0);
        for (&c, &a) in row.idx.iter().zip(&row.vals) {
            grad[c] += a * res;
        }
    }
    Linearization { gain, grad, residual }
}

/// Whitened residual norm `||z_A - f_A(v)||`.
pub fn residual_norm(v: &StateVector, z: &MeasurementEnsemble, mats: &ConstantMatrixSet) -> f64 {
    linearize(v, z, mats).residual.norm()
}

/// Plain Gauss-Newton from `v0`. Singular gains get one ridge retry; if
/// that fails too the run is reported as diverged.
pub fn gauss_newton(
    z: &MeasurementEnsemble,
    mats: &ConstantMatrixSet,
    v0: &StateVector,
    opts: &GnOptions,
    v_true: Option<&StateVector>,
) -> Result<(StateVector, GnTrace)> {
    opts.validate()?;
    let d = 2 * mats.n_buses;
    if v0.0.len() != d || z.z.len() != z.mask.len() {
        return Err(Error::Dimension(format!("state length {} for a {}-bus grid", v0.0.len(), d / 2)));
    }
    let mut v = v0.0.clone();
    let mut iterates = Vec::with_capacity(opts.max_iters + 1);
    let mut status = GnStatus::MaxIters;
    let mut diagnostic = None;
    for k in 0..=opts.max_iters {
        let mut it = GnIterate {
            iter: k,
            v: v.clone(),
            tve: v_true.map(|t| tve(&v, t)),
            step: None,
            gain_lambda_min: None,
            ridged: false,
            rho: None,
            phi: None,
            bound: None,
        };
        if !v.iter().all(|x| x.is_finite()) || v.norm() > opts.divergence_norm {
            status = GnStatus::Diverged;
            diagnostic = Some(format!("iterate {k}: ||v|| = {:.3e}", v.norm()));
            iterates.push(it);
            break;
        }
        if k == opts.max_iters {
            iterates.push(it);
            break;
        }
        let lin = linearize(&StateVector(v.clone()), z, mats);
        it.gain_lambda_min = lambda_min(&lin.gain).ok();
        let chol = match Cholesky::new(&lin.gain) {
            Some(c) => Some(c),
            None if opts.ridge > 0.0 => {
                it.ridged = true;
                let scale = lin.gain.diagonal().max().max(1.0);
                Cholesky::new(&(&lin.gain + DMatrix::identity(d, d) * (opts.ridge * scale)))
            }
            None => None,
        };
        let Some(chol) = chol else {
            status = GnStatus::Diverged;
            diagnostic = Some(format!("iterate {k}: singular gain, lambda_min = {:?}", it.gain_lambda_min));
            iterates.push(it);
            break;
        };
        let step = chol.solve(&lin.grad);
        let norm = step.norm();
        it.step = Some(norm);
        if it.ridged {
            diagnostic = Some(format!("iterate {k}: ridge retry, condition estimate {:.3e}", chol.condition_estimate()));
        }
        iterates.push(it);
        v += step;
        if !(norm >= opts.step_tol) && norm.is_finite() {
            status = GnStatus::Converged;
            iterates.push(GnIterate {
                iter: k + 1,
                v: v.clone(),
                tve: v_true.map(|t| tve(&v, t)),
                step: None,
                gain_lambda_min: None,
                ridged: false,
                rho: None,
                phi: None,
                bound: None,
            });
            break;
        }
    }
    Ok((StateVector(v), GnTrace { iterates, status, diagnostic }))
}

/// Noise-free ensemble over `mask` taken at `v` (useful as an oracle run).
pub fn exact_ensemble(v: &StateVector, mats: &ConstantMatrixSet, mask: SelectionMask, noise: NoiseModel) -> MeasurementEnsemble {
    let z = eval_f(v, mats);
    MeasurementEnsemble { z, mask, noise }
}
