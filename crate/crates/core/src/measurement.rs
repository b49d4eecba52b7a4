//! Measurement functions `f(v)`, the Jacobian `F(v)`, selection masks and
//! synthetic data.
//!
//! The full measurement vector has `2M = 4N + 8L` entries in four blocks:
//!
//! | block | size | content                                          |
//! |-------|------|--------------------------------------------------|
//! | V     | 2N   | `[Re V; Im V]`                                   |
//! | C     | 4L   | `Re I` per directed line, then `Im I`            |
//! | I     | 2N   | `P_1..P_N`, then `Q_1..Q_N`                      |
//! | F     | 4L   | `P` per directed line, then `Q`                  |

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ConstantMatrixSet, Grid, SparseRow};

/// Rectangular state `[Re V_1..Re V_N, Im V_1..Im V_N]` in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(pub DVector<f64>);

impl StateVector {
    pub fn new(v: DVector<f64>) -> Result<Self> {
        if v.len() % 2 != 0 || v.is_empty() {
            return Err(Error::Dimension(format!("state length {} is not 2N", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("state vector"));
        }
        Ok(StateVector(v))
    }

    /// Nominal profile `[1_N; 0_N]`.
    pub fn flat(n: usize) -> Self {
        let mut v = DVector::zeros(2 * n);
        v.rows_mut(0, n).fill(1.0);
        StateVector(v)
    }

    pub fn from_phasors(ph: &[Complex64]) -> Self {
        let n = ph.len();
        StateVector(DVector::from_fn(2 * n, |i, _| if i < n { ph[i].re } else { ph[i - n].im }))
    }

    pub fn n_buses(&self) -> usize {
        self.0.len() / 2
    }

    pub fn phasor(&self, bus: usize) -> Complex64 {
        let n = self.n_buses();
        Complex64::new(self.0[bus], self.0[n + bus])
    }

    pub fn phasors(&self) -> Vec<Complex64> {
        (0..self.n_buses()).map(|b| self.phasor(b)).collect()
    }

    /// Check magnitudes lie in `(0, v_max]`.
    pub fn check_physical(&self, v_max: f64) -> Result<()> {
        for (b, p) in self.phasors().iter().enumerate() {
            let m = p.norm();
            if !(m > 0.0 && m <= v_max) {
                return Err(Error::Config(format!("bus {b} magnitude {m} outside (0, {v_max}]")));
            }
        }
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Voltage magnitudes uniform in `1 +- 0.05`, phases uniform in `+-0.1` rad.
pub fn random_true_state<R: Rng>(n: usize, rng: &mut R) -> StateVector {
    let ph: Vec<Complex64> = (0..n)
        .map(|_| {
            let mag = 1.0 + rng.random_range(-0.05..=0.05);
            let ang = rng.random_range(-0.1..=0.1);
            Complex64::from_polar(mag, ang)
        })
        .collect();
    StateVector::from_phasors(&ph)
}

/// Offsets of the four blocks in the `2M` measurement vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_buses: usize,
    pub n_directed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    V,
    C,
    I,
    F,
}

impl Layout {
    pub fn new(mats: &ConstantMatrixSet) -> Self {
        Layout { n_buses: mats.n_buses, n_directed: mats.n_directed() }
    }

    pub fn len(&self) -> usize {
        4 * self.n_buses + 4 * self.n_directed
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voltage(&self) -> usize {
        0
    }

    pub fn current(&self) -> usize {
        2 * self.n_buses
    }

    pub fn injection(&self) -> usize {
        2 * self.n_buses + 2 * self.n_directed
    }

    pub fn flow(&self) -> usize {
        4 * self.n_buses + 2 * self.n_directed
    }

    pub fn block_of(&self, row: usize) -> Block {
        if row < self.current() {
            Block::V
        } else if row < self.injection() {
            Block::C
        } else if row < self.flow() {
            Block::I
        } else {
            Block::F
        }
    }
}

/// PMU vector plus the SCADA masks. `scada_flow` is indexed by directed line.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub pmu: Vec<bool>,
    pub scada_injection: Vec<bool>,
    pub scada_flow: Vec<bool>,
}

impl Placement {
    pub fn new(pmu: Vec<bool>, scada_injection: Vec<bool>, scada_flow: Vec<bool>) -> Self {
        Placement { pmu, scada_injection, scada_flow }
    }

    pub fn empty(n: usize, n_directed: usize) -> Self {
        Placement::new(vec![false; n], vec![false; n], vec![false; n_directed])
    }

    pub fn with_pmu(&self, pmu: Vec<bool>) -> Self {
        Placement { pmu, ..self.clone() }
    }

    pub fn n_pmu(&self) -> usize {
        self.pmu.iter().filter(|&&b| b).count()
    }

    pub fn check(&self, mats: &ConstantMatrixSet) -> Result<()> {
        if self.pmu.len() != mats.n_buses
            || self.scada_injection.len() != mats.n_buses
            || self.scada_flow.len() != mats.n_directed()
        {
            return Err(Error::Dimension("placement vectors do not match grid".into()));
        }
        Ok(())
    }
}

/// Render a binary vector as `0101...`.
pub fn bitstring(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Diagonal of `J_A`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    pub diag: Vec<bool>,
}

impl SelectionMask {
    pub fn all(len: usize) -> Self {
        SelectionMask { diag: vec![true; len] }
    }

    pub fn none(len: usize) -> Self {
        SelectionMask { diag: vec![false; len] }
    }

    /// PMUs select their bus voltage and every current measured at the bus.
    pub fn from_placement(p: &Placement, mats: &ConstantMatrixSet) -> Result<Self> {
        p.check(mats)?;
        let lay = Layout::new(mats);
        let (n, nd) = (lay.n_buses, lay.n_directed);
        let mut diag = vec![false; lay.len()];
        for bus in 0..n {
            if p.pmu[bus] {
                diag[bus] = true;
                diag[n + bus] = true;
                for ell in mats.outgoing(bus) {
                    diag[lay.current() + ell] = true;
                    diag[lay.current() + nd + ell] = true;
                }
            }
            if p.scada_injection[bus] {
                diag[lay.injection() + bus] = true;
                diag[lay.injection() + n + bus] = true;
            }
        }
        for ell in 0..nd {
            if p.scada_flow[ell] {
                diag[lay.flow() + ell] = true;
                diag[lay.flow() + nd + ell] = true;
            }
        }
        Ok(SelectionMask { diag })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn count(&self) -> usize {
        self.diag.iter().filter(|&&b| b).count()
    }
}

/// Per-type noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_v: f64,
    pub sigma_c: f64,
    pub sigma_i: f64,
    pub sigma_f: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::uniform(1e-2)
    }
}

impl NoiseModel {
    pub fn uniform(sigma: f64) -> Self {
        NoiseModel { sigma_v: sigma, sigma_c: sigma, sigma_i: sigma, sigma_f: sigma }
    }

    pub fn sigma(&self, block: Block) -> f64 {
        match block {
            Block::V => self.sigma_v,
            Block::C => self.sigma_c,
            Block::I => self.sigma_i,
            Block::F => self.sigma_f,
        }
    }

    /// Inverse variance `1 / sigma^2` of a block.
    pub fn weight(&self, block: Block) -> f64 {
        let s = self.sigma(block);
        1.0 / (s * s)
    }

    pub fn sigma_diag(&self, lay: &Layout) -> DVector<f64> {
        DVector::from_fn(lay.len(), |r, _| self.sigma(lay.block_of(r)))
    }
}

/// Measurement vector with its mask and noise model.
#[derive(Debug, Clone)]
pub struct MeasurementEnsemble {
    pub z: DVector<f64>,
    pub mask: SelectionMask,
    pub noise: NoiseModel,
}

impl MeasurementEnsemble {
    /// The PMU voltage block `z_V`.
    pub fn voltage_block(&self, n: usize) -> DVector<f64> {
        self.z.rows(0, 2 * n).into_owned()
    }
}

/// Evaluate all `2M` measurement functions at `v`.
pub fn eval_f(v: &StateVector, mats: &ConstantMatrixSet) -> DVector<f64> {
    let lay = Layout::new(mats);
    let (n, nd) = (lay.n_buses, lay.n_directed);
    let x = v.as_slice();
    assert_eq!(x.len(), 2 * n, "state length must be 2N");
    let mut f = DVector::zeros(lay.len());
    f.rows_mut(0, 2 * n).copy_from(&v.0);
    for ell in 0..nd {
        f[lay.current() + ell] = mats.current_re[ell].dot(x);
        f[lay.current() + nd + ell] = mats.current_im[ell].dot(x);
        f[lay.flow() + ell] = mats.e_p[ell].quad(x);
        f[lay.flow() + nd + ell] = mats.e_q[ell].quad(x);
    }
    for bus in 0..n {
        f[lay.injection() + bus] = mats.n_p[bus].quad(x);
        f[lay.injection() + n + bus] = mats.n_q[bus].quad(x);
    }
    f
}

/// Row `r` of the Jacobian as a sparse vector.
pub fn jacobian_row(r: usize, x: &[f64], mats: &ConstantMatrixSet, lay: &Layout) -> SparseRow {
    let (n, nd) = (lay.n_buses, lay.n_directed);
    match lay.block_of(r) {
        Block::V => SparseRow::new(vec![r], vec![1.0]),
        Block::C => {
            let k = r - lay.current();
            if k < nd {
                mats.current_re[k].clone()
            } else {
                mats.current_im[k - nd].clone()
            }
        }
        Block::I => {
            let k = r - lay.injection();
            if k < n {
                mats.h_inj_p[k].apply(x)
            } else {
                mats.h_inj_q[k - n].apply(x)
            }
        }
        Block::F => {
            let k = r - lay.flow();
            if k < nd {
                mats.h_flow_p[k].apply(x)
            } else {
                mats.h_flow_q[k - nd].apply(x)
            }
        }
    }
}

/// Dense `2M x 2N` Jacobian.
pub fn eval_jacobian(v: &StateVector, mats: &ConstantMatrixSet) -> DMatrix<f64> {
    let lay = Layout::new(mats);
    let x = v.as_slice();
    let mut jac = DMatrix::zeros(lay.len(), 2 * lay.n_buses);
    for r in 0..lay.len() {
        let row = jacobian_row(r, x, mats, &lay);
        for (&c, &a) in row.idx.iter().zip(&row.vals) {
            jac[(r, c)] += a;
        }
    }
    jac
}

/// Selected, whitened Jacobian rows `R^{-1/2} J_A F(v)` in sparse form,
/// paired with their row index.
pub fn selected_rows(
    v: &StateVector,
    mats: &ConstantMatrixSet,
    mask: &SelectionMask,
    noise: &NoiseModel,
) -> Vec<(usize, SparseRow)> {
    let lay = Layout::new(mats);
    let x = v.as_slice();
    (0..lay.len())
        .filter(|&r| mask.diag[r])
        .map(|r| {
            let mut row = jacobian_row(r, x, mats, &lay);
            let s = 1.0 / noise.sigma(lay.block_of(r));
            row.vals.iter_mut().for_each(|a| *a *= s);
            (r, row)
        })
        .collect()
}

fn check_dims(mask: &SelectionMask, lay: &Layout, len: usize) -> Result<()> {
    if mask.len() != len || lay.len() != len {
        return Err(Error::Dimension(format!(
            "mask length {}, layout length {}, data length {len}",
            mask.len(),
            lay.len()
        )));
    }
    Ok(())
}

fn row_scale(r: usize, mask: &SelectionMask, noise: &NoiseModel, lay: &Layout) -> f64 {
    if mask.diag[r] {
        1.0 / noise.sigma(lay.block_of(r))
    } else {
        0.0
    }
}

/// `R^{-1/2} J_A z`.
pub fn apply_mask_vec(z: &DVector<f64>, mask: &SelectionMask, noise: &NoiseModel, lay: &Layout) -> Result<DVector<f64>> {
    check_dims(mask, lay, z.len())?;
    Ok(DVector::from_fn(z.len(), |r, _| row_scale(r, mask, noise, lay) * z[r]))
}

/// `R^{-1/2} J_A F` for a matrix with `2M` rows.
pub fn apply_mask_mat(f: &DMatrix<f64>, mask: &SelectionMask, noise: &NoiseModel, lay: &Layout) -> Result<DMatrix<f64>> {
    check_dims(mask, lay, f.nrows())?;
    let mut out = f.clone();
    for r in 0..f.nrows() {
        out.row_mut(r).scale_mut(row_scale(r, mask, noise, lay));
    }
    Ok(out)
}

/// `z = f(v_true) + r` with `r ~ N(0, R)`.
pub fn synthesize_measurements<R: Rng>(
    v_true: &StateVector,
    mats: &ConstantMatrixSet,
    mask: SelectionMask,
    noise: NoiseModel,
    rng: &mut R,
) -> MeasurementEnsemble {
    let lay = Layout::new(mats);
    let mut z = eval_f(v_true, mats);
    for r in 0..z.len() {
        let e: f64 = StandardNormal.sample(rng);
        z[r] += noise.sigma(lay.block_of(r)) * e;
    }
    MeasurementEnsemble { z, mask, noise }
}

/// Pick `ceil(fraction * (2N + 4L))` SCADA sites among the `N` injection
/// sites and `2L` directed-flow sites, without replacement. Each site
/// carries its P and Q together.
pub fn sample_scada<R: Rng>(grid: &Grid, fraction: f64, rng: &mut R) -> Result<(Vec<bool>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("SCADA fraction {fraction} outside [0, 1]")));
    }
    let n = grid.n_buses();
    let nd = grid.directed_lines().len();
    let sites = n + nd;
    let k = scada_site_count(n, grid.n_lines(), fraction).min(sites);
    let mut inj = vec![false; n];
    let mut flow = vec![false; nd];
    for s in sample(rng, sites, k).into_vec() {
        if s < n {
            inj[s] = true;
        } else {
            flow[s - n] = true;
        }
    }
    Ok((inj, flow))
}

pub fn scada_site_count(n: usize, l: usize, fraction: f64) -> usize {
    (fraction * (2 * n + 4 * l) as f64 - 1e-9).ceil() as usize
}

/// Write the ensemble as CSV: `row,block,item,part,selected,sigma,value`.
pub fn write_ensemble_csv<W: Write>(out: W, ens: &MeasurementEnsemble, lay: &Layout) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "block", "item", "part", "selected", "sigma", "value"])?;
    let (n, nd) = (lay.n_buses, lay.n_directed);
    for r in 0..lay.len() {
        let block = lay.block_of(r);
        let (item, part) = match block {
            Block::V => (r % n, if r < n { "re" } else { "im" }),
            Block::C => {
                let k = r - lay.current();
                (k % nd, if k < nd { "re" } else { "im" })
            }
            Block::I => {
                let k = r - lay.injection();
                (k % n, if k < n { "p" } else { "q" })
            }
            Block::F => {
                let k = r - lay.flow();
                (k % nd, if k < nd { "p" } else { "q" })
            }
        };
        w.write_record([
            r.to_string(),
            format!("{block:?}"),
            item.to_string(),
            part.to_string(),
            u8::from(ens.mask.diag[r]).to_string(),
            format!("{:e}", ens.noise.sigma(block)),
            format!("{:.17e}", ens.z[r]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::grid::{build_admittance, build_constant_matrices};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(grid: &Grid) -> ConstantMatrixSet {
        build_constant_matrices(grid, &build_admittance(grid))
    }

    #[test]
    fn zero_state_gives_zero_measurements() {
        let g = cases::load("ieee14").unwrap();
        let mats = model(&g);
        let f = eval_f(&StateVector(DVector::zeros(28)), &mats);
        assert_eq!(f.len(), 4 * 14 + 8 * 20);
        assert!(f.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flat_two_bus_carries_no_power() {
        let g = cases::two_bus();
        let mats = model(&g);
        let f = eval_f(&StateVector::flat(2), &mats);
        let lay = Layout::new(&mats);
        assert!(f[lay.injection()].abs() < 1e-12);
        assert!(f.rows(lay.flow(), 4).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn two_bus_flow_matches_polar_formula() {
        let g = cases::two_bus();
        let mats = model(&g);
        let v = StateVector(DVector::from_vec(vec![1.0, 0.95, 0.0, -0.05]));
        let f = eval_f(&v, &mats);
        let lay = Layout::new(&mats);
        // P_12 = |V1|^2 g - |V1||V2| (g cos t12 + b sin t12), with y = g + jb
        let y = g.lines()[0].series;
        let (gs, bs) = (y.re, y.im);
        let (v1, t1) = (1.0f64, 0.0f64);
        let v2c = Complex64::new(0.95, -0.05);
        let (v2, t2) = (v2c.norm(), v2c.arg());
        let t12 = t1 - t2;
        let p12 = v1 * v1 * gs - v1 * v2 * (gs * t12.cos() + bs * t12.sin());
        let q12 = -v1 * v1 * bs - v1 * v2 * (gs * t12.sin() - bs * t12.cos());
        let ell = g.directed_index(0, 1).unwrap();
        assert_relative_eq!(f[lay.flow() + ell], p12, epsilon = 1e-12);
        assert_relative_eq!(f[lay.flow() + lay.n_directed + ell], q12, epsilon = 1e-12);
    }

    #[test]
    fn voltage_rows_of_jacobian_are_identity() {
        let g = cases::load("ieee14").unwrap();
        let mats = model(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_true_state(14, &mut rng);
        let jac = eval_jacobian(&v, &mats);
        assert_eq!(jac.rows(0, 28).into_owned(), DMatrix::identity(28, 28));
    }

    #[test]
    fn current_rows_do_not_depend_on_state() {
        let g = cases::load("ieee14").unwrap();
        let mats = model(&g);
        let lay = Layout::new(&mats);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = eval_jacobian(&random_true_state(14, &mut rng), &mats);
        let b = eval_jacobian(&random_true_state(14, &mut rng), &mats);
        let rows = 2 * lay.n_directed;
        assert_eq!(a.rows(lay.current(), rows), b.rows(lay.current(), rows));
    }

    #[test]
    fn mask_identity_zero_and_scaling() {
        let g = cases::two_bus();
        let mats = model(&g);
        let lay = Layout::new(&mats);
        let z = DVector::from_fn(lay.len(), |r, _| r as f64 + 1.0);
        let unit = NoiseModel::uniform(1.0);
        assert_eq!(apply_mask_vec(&z, &SelectionMask::all(lay.len()), &unit, &lay).unwrap(), z);
        assert!(apply_mask_vec(&z, &SelectionMask::none(lay.len()), &unit, &lay).unwrap().iter().all(|&x| x == 0.0));
        let scaled = apply_mask_vec(&z, &SelectionMask::all(lay.len()), &NoiseModel::uniform(1e-2), &lay).unwrap();
        assert_relative_eq!(scaled[3], 100.0 * z[3], epsilon = 1e-9);
        assert!(apply_mask_vec(&z.rows(0, 3).into_owned(), &SelectionMask::all(lay.len()), &unit, &lay).is_err());
    }

    #[test]
    fn pmu_mask_selects_incident_currents() {
        let g = cases::load("ieee14").unwrap();
        let mats = model(&g);
        let lay = Layout::new(&mats);
        let mut p = Placement::empty(14, lay.n_directed);
        p.pmu[1] = true;
        let m = SelectionMask::from_placement(&p, &mats).unwrap();
        assert_eq!(m.count(), 2 + 2 * g.neighbors(1).len());
        for ell in g.outgoing(1) {
            assert!(m.diag[lay.current() + ell]);
        }
    }

    #[test]
    fn zero_noise_reproduces_f() {
        let g = cases::load("ieee14").unwrap();
        let mats = model(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_true_state(14, &mut rng);
        let ens = synthesize_measurements(&v, &mats, SelectionMask::all(Layout::new(&mats).len()), NoiseModel::uniform(0.0), &mut rng);
        assert_eq!(ens.z, eval_f(&v, &mats));
    }

    #[test]
    fn synthesis_is_seeded() {
        let g = cases::load("ieee14").unwrap();
        let mats = model(&g);
        let v = StateVector::flat(14);
        let all = SelectionMask::all(Layout::new(&mats).len());
        let a = synthesize_measurements(&v, &mats, all.clone(), NoiseModel::default(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = synthesize_measurements(&v, &mats, all, NoiseModel::default(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn scada_site_counts() {
        assert_eq!(scada_site_count(14, 20, 0.15), 17);
        assert_eq!(scada_site_count(30, 41, 0.15), 34);
        let g = cases::load("ieee14").unwrap();
        let (inj, flow) = sample_scada(&g, 0.15, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let k = inj.iter().chain(&flow).filter(|&&b| b).count();
        assert_eq!(k, 17);
        assert!(sample_scada(&g, 1.5, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn ensemble_csv_has_one_row_per_measurement() {
        let g = cases::two_bus();
        let mats = model(&g);
        let lay = Layout::new(&mats);
        let ens = MeasurementEnsemble { z: DVector::zeros(lay.len()), mask: SelectionMask::all(lay.len()), noise: NoiseModel::default() };
        let mut buf = Vec::new();
        write_ensemble_csv(&mut buf, &ens, &lay).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), lay.len() + 1);
    }

    #[test]
    fn physical_magnitude_check() {
        assert!(StateVector::flat(3).check_physical(1.2).is_ok());
        assert!(StateVector(DVector::from_vec(vec![1.3, 0.0])).check_physical(1.2).is_err());
        assert!(StateVector::new(DVector::from_vec(vec![1.0, 2.0, 3.0])).is_err());
    }
}
