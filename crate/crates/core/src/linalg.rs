//! Dense symmetric linear algebra.
//!
//! Eigendecomposition is Householder tridiagonalization followed by the
//! implicit-shift QL iteration, the same scheme as EISPACK `tred2`/`tql2`.
//! Matrices at desk scale stay below a few hundred rows, so everything is
//! dense and `O(d^3)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative threshold below which eigenvalues are treated as zero.
pub const EIG_REL_TOL: f64 = 1e-9;

const SYMMETRY_TOL: f64 = 1e-12;

/// A real symmetric matrix.
///
/// Construction checks `||A - A^T||_inf < 1e-12 ||A||_inf` and then
/// symmetrizes the stored entries exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension(format!(
                "symmetric matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("symmetric matrix input"));
        }
        let norm = inf_norm(&a);
        let asym = inf_norm(&(&a - a.transpose()));
        if asym > SYMMETRY_TOL * norm {
            return Err(Error::NotSymmetric { asym, norm });
        }
        Ok(Self::symmetrized(a))
    }

    /// Wraps `(a + a^T) / 2` without the tolerance check.
    pub fn symmetrized(a: DMatrix<f64>) -> Self {
        let t = a.transpose();
        SymMatrix((a + t) * 0.5)
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix(DMatrix::identity(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

fn inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Eigenvalues in ascending order with orthonormal eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    /// `Q diag(g(lambda)) Q^T`.
    pub fn map(&self, g: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..d {
            let s = g(self.values[j]);
            scaled.column_mut(j).scale_mut(s);
        }
        scaled * self.vectors.transpose()
    }
}

pub fn eig_sym(a: &SymMatrix) -> Result<SymEigen> {
    let (values, vectors) = tridiag_ql(a.as_matrix(), true)?;
    Ok(SymEigen {
        values,
        vectors: vectors.expect("vectors requested"),
    })
}

/// Ascending eigenvalues of a symmetric matrix (only the lower triangle is
/// trusted implicitly through symmetry; callers pass symmetric input).
pub fn eigvals_sym(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(tridiag_ql(a, false)?.0)
}

pub fn lambda_min(a: &DMatrix<f64>) -> Result<f64> {
    Ok(eigvals_sym(a)?.first().copied().unwrap_or(0.0))
}

pub fn lambda_max(a: &DMatrix<f64>) -> Result<f64> {
    Ok(eigvals_sym(a)?.last().copied().unwrap_or(0.0))
}

/// Clamp `x` to zero when it is below `EIG_REL_TOL * scale`.
pub fn clamp_eig(x: f64, scale: f64) -> f64 {
    if x <= EIG_REL_TOL * scale.abs() {
        0.0
    } else {
        x
    }
}

fn tridiag_ql(a: &DMatrix<f64>, want_vectors: bool) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Dimension("eigendecomposition of non-square matrix".into()));
    }
    if n == 0 {
        return Ok((Vec::new(), want_vectors.then(|| DMatrix::zeros(0, 0))));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("eigendecomposition input"));
    }
    // row-major working copy
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            v[i * n + j] = a[(i, j)];
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(n, &mut v, &mut d, &mut e, want_vectors);
    tql2(n, &mut v, &mut d, &mut e, want_vectors)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]));
    let values: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let vectors = want_vectors.then(|| DMatrix::from_fn(n, n, |r, c| v[r * n + order[c]]));
    Ok((values, vectors))
}

fn tred2(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64], accumulate: bool) {
    let at = |r: usize, c: usize| r * n + c;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for j in 0..i {
                e[j] = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }

    if !accumulate {
        for j in 0..n {
            d[j] = v[at(j, j)];
        }
        e[0] = 0.0;
        return;
    }

    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

fn tql2(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64], vectors: bool) -> Result<()> {
    let at = |r: usize, c: usize| r * n + c;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    let max_sweeps = 60 * n.max(1);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m == n {
            m = n - 1;
        }
        if m > l {
            let mut sweeps = 0;
            loop {
                sweeps += 1;
                if sweeps > max_sweeps {
                    return Err(Error::NoConvergence("tridiagonal QL"));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    if vectors {
                        for k in 0..n {
                            let hk = v[at(k, i + 1)];
                            v[at(k, i + 1)] = s * v[at(k, i)] + c * hk;
                            v[at(k, i)] = c * v[at(k, i)] - s * hk;
                        }
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Lower-triangular Cholesky factor `A = L L^T`, stored row-major.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Returns `None` when a pivot is not strictly positive.
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                l[i * n + j] = a[(i, j)];
            }
        }
        for j in 0..n {
            let (head, tail) = l.split_at_mut(j * n + n);
            let row_j = &mut head[j * n..j * n + n];
            let diag = row_j[j] - dot(&row_j[..j], &row_j[..j]);
            if !(diag > 0.0) || !diag.is_finite() {
                return None;
            }
            let ljj = diag.sqrt();
            row_j[j] = ljj;
            let row_j = &head[j * n..j * n + j];
            for i in (j + 1)..n {
                let off = (i - j - 1) * n;
                let row_i = &mut tail[off..off + n];
                row_i[j] = (row_i[j] - dot(&row_i[..j], row_j)) / ljj;
            }
        }
        Some(Cholesky { n, l })
    }

    /// The factor as a dense lower-triangular matrix.
    pub fn l(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| if j <= i { self.l[i * self.n + j] } else { 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn diag(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.l[i * self.n + i])
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.diag().map(f64::ln).sum::<f64>()
    }

    /// Cheap condition estimate `(max L_ii / min L_ii)^2`.
    pub fn condition_estimate(&self) -> f64 {
        let (lo, hi) = self
            .diag()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), x| (lo.min(x), hi.max(x)));
        (hi / lo).powi(2)
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = self.solve_lower(b);
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }

    /// `L^{-1} b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut y = b.clone();
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s = y[i] - dot(row, &y.as_slice()[..i]);
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    /// `L^{-1}` as a dense lower-triangular matrix.
    pub fn inverse_factor(&self) -> DMatrix<f64> {
        let n = self.n;
        // row-major lower-triangular inverse
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            let lii = self.l[i * n + i];
            inv[i * n + i] = 1.0 / lii;
            for j in 0..i {
                let mut s = 0.0;
                for k in j..i {
                    s += self.l[i * n + k] * inv[k * n + j];
                }
                inv[i * n + j] = -s / lii;
            }
        }
        DMatrix::from_fn(n, n, |i, j| inv[i * n + j])
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let linv = self.inverse_factor();
        let inv = linv.transpose() * &linv;
        SymMatrix::symmetrized(inv).into_matrix()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let ch = Cholesky::new(a).ok_or(Error::NotPositiveDefinite)?;
    Ok(ch.solve(b))
}

/// Principal square root of a PSD matrix; negative eigenvalues within
/// `EIG_REL_TOL * lambda_max` are clamped to zero.
pub fn sqrt_psd(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = eig_sym(a)?;
    let scale = eig.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if eig.min() < -EIG_REL_TOL * scale {
        return Err(Error::Indefinite { lambda_min: eig.min(), scale });
    }
    Ok(SymMatrix::symmetrized(eig.map(|x| x.max(0.0).sqrt())))
}

/// Nearest PSD matrix in Frobenius norm (negative eigenvalues zeroed).
pub fn project_psd(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = eig_sym(a)?;
    Ok(SymMatrix::symmetrized(eig.map(|x| x.max(0.0))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        (&b + b.transpose()) * 0.5
    }

    #[test]
    fn identity_and_diagonal() {
        let e = eig_sym(&SymMatrix::identity(5)).unwrap();
        assert!(e.values.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let e = eig_sym(&SymMatrix::from_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_relative_eq!(e.values[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(e.values[1], 2.0, epsilon = 1e-14);
        assert_relative_eq!(e.values[2], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &d in &[1usize, 2, 3, 10, 57, 256] {
            let a = random_sym(d, &mut rng);
            let e = eig_sym(&SymMatrix::new(a.clone()).unwrap()).unwrap();
            let rec = e.map(|x| x);
            assert!((&rec - &a).norm() < 1e-9 * a.norm().max(1e-300), "d={d}");
            let qtq = e.vectors.transpose() * &e.vectors;
            assert!((qtq - DMatrix::identity(d, d)).norm() < 1e-10 * (d as f64));
            let aq = &a * &e.vectors;
            let ql = &e.vectors * DMatrix::from_diagonal(&DVector::from_vec(e.values.clone()));
            assert!((aq - ql).norm() < 1e-10 * a.norm());
            let vals = eigvals_sym(&a).unwrap();
            for (x, y) in vals.iter().zip(&e.values) {
                assert_relative_eq!(x, y, epsilon = 1e-10 * a.norm());
            }
        }
    }

    #[test]
    fn eigenvalues_match_singular_values_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &d in &[4usize, 17, 40] {
            let b = DMatrix::from_fn(d + 3, d, |_, _| rng.random_range(-1.0..1.0));
            let a = b.transpose() * &b;
            let vals = eigvals_sym(&a).unwrap();
            let mut sv: Vec<f64> = b.clone().svd(false, false).singular_values.iter().map(|s| s * s).collect();
            sv.sort_by(f64::total_cmp);
            for (x, y) in vals.iter().zip(&sv) {
                assert!((x - y).abs() < 1e-8 * sv.last().unwrap(), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn rejects_asymmetric_and_nonfinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(SymMatrix::new(a), Err(Error::NotSymmetric { .. })));
        let a = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, f64::NAN, 1.0]);
        assert!(matches!(SymMatrix::new(a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cholesky_solve_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = DMatrix::from_fn(12, 12, |_, _| rng.random_range(-1.0..1.0));
        let a = b.transpose() * &b + DMatrix::identity(12, 12);
        let ch = Cholesky::new(&a).unwrap();
        let x = DVector::from_fn(12, |i, _| i as f64 - 3.0);
        let rhs = &a * &x;
        assert!((ch.solve(&rhs) - &x).norm() < 1e-10);
        assert!((&a * ch.inverse() - DMatrix::identity(12, 12)).norm() < 1e-10);
        let vals = eigvals_sym(&a).unwrap();
        let ld: f64 = vals.iter().map(|x| x.ln()).sum();
        assert_relative_eq!(ch.log_det(), ld, epsilon = 1e-9);
        assert!(Cholesky::new(&(-a)).is_none());
    }

    #[test]
    fn sqrt_of_diagonal_and_identity() {
        let s = sqrt_psd(&SymMatrix::from_diagonal(&[4.0, 9.0])).unwrap();
        assert_relative_eq!(s.as_matrix()[(0, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(s.as_matrix()[(1, 1)], 3.0, epsilon = 1e-14);
        assert!(s.as_matrix()[(0, 1)].abs() < 1e-15);
        let s = sqrt_psd(&SymMatrix::identity(4)).unwrap();
        assert!((s.as_matrix() - DMatrix::identity(4, 4)).norm() < 1e-14);
        assert!(sqrt_psd(&SymMatrix::from_diagonal(&[1.0, -0.5])).is_err());
    }

    #[test]
    fn weyl_lower_bound_on_psd_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let b1 = DMatrix::from_fn(9, 9, |_, _| rng.random_range(-1.0..1.0));
            let b2 = DMatrix::from_fn(9, 9, |_, _| rng.random_range(-1.0..1.0));
            let a1 = b1.transpose() * &b1;
            let a2 = b2.transpose() * &b2;
            let lhs = lambda_min(&(&a1 + &a2)).unwrap();
            let rhs = lambda_min(&a1).unwrap() + lambda_min(&a2).unwrap();
            assert!(lhs >= rhs - 1e-12);
        }
    }

    #[test]
    fn psd_projection_zeroes_negative_part() {
        let a = SymMatrix::from_diagonal(&[2.0, -1.0, 0.5]);
        let p = project_psd(&a).unwrap();
        assert_relative_eq!(p.as_matrix()[(1, 1)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(p.as_matrix()[(0, 0)], 2.0, epsilon = 1e-15);
    }
}
