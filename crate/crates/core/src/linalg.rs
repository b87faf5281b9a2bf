//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::not_pd(what));
    }
    nalgebra::Cholesky::new(m.clone()).ok_or_else(|| Error::not_pd(what))
}

/// log det of an SPD matrix via Cholesky.
pub fn logdet_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let c = cholesky(m, what)?;
    Ok(logdet_from_chol(&c))
}

pub fn logdet_from_chol(c: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn inv_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(m, what)?.inverse()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 2 {
        // closed form keeps 2x2 blocks cheap in the inner loops
        let (a, b, d) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        return mid - rad;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Maps the eigenvalues of a symmetric matrix through `f`.
pub fn eig_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    if m.nrows() == 2 {
        // f(M) = [f1 (M − λ2 I) − f2 (M − λ1 I)] / (λ1 − λ2)
        let (a, b, d) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        if rad == 0.0 {
            return DMatrix::identity(2, 2) * f(mid);
        }
        let (l1, l2) = (mid + rad, mid - rad);
        let (f1, f2) = (f(l1), f(l2));
        let (p, q) = (f1 / (2.0 * rad), f2 / (2.0 * rad));
        let off = (p - q) * b;
        return DMatrix::from_row_slice(
            2,
            2,
            &[
                p * (a - l2) - q * (a - l1),
                off,
                off,
                p * (d - l2) - q * (d - l1),
            ],
        );
    }
    let e = symmetrize(m).symmetric_eigen();
    let d = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|&x| f(x)));
    let v = &e.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&d) * v.transpose()))
}

/// Floors the spectrum at `floor`; returns the input unchanged when it is
/// already above the floor so exact zeros survive.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    if min_eigenvalue(m) >= floor {
        return m.clone();
    }
    eig_map(m, |x| x.max(floor))
}

pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.transpose().iter()).map(|(x, y)| x * y).sum()
}

/// Orthonormal basis for the column space of `m` (which must have full column
/// rank) via thin QR.
pub fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Random `n × k` matrix with orthonormal columns: QR of a Gaussian draw.
pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    orthonormalize(g)
}

/// Replaces columns `from..` of `u` with an orthonormal completion of the
/// first `from` columns (modified Gram–Schmidt against canonical vectors).
pub fn complete_orthonormal(u: &mut DMatrix<f64>, from: usize) {
    let n = u.nrows();
    let mut next_axis = 0;
    for j in from..u.ncols() {
        loop {
            assert!(next_axis < n, "cannot complete an orthonormal set");
            let mut v = DVector::zeros(n);
            v[next_axis] = 1.0;
            next_axis += 1;
            for _ in 0..2 {
                for i in 0..j {
                    let c = u.column(i).dot(&v);
                    v.axpy(-c, &u.column(i).into_owned(), 1.0);
                }
            }
            let norm = v.norm();
            if norm > 1e-6 {
                u.set_column(j, &(v / norm));
                break;
            }
        }
    }
}
