//! Sufficient statistics and the two equivalent forms of the Gaussian
//! negative log-likelihood `log det Σ + tr(S Σ⁻¹)` with
//! `Σ = (I_p ⊗ Φ) Q⁻¹ (I_p ⊗ Φ)ᵀ + diag(τ²) ⊗ I_n`.
//!
//! Coefficient vectors use level-major ordering: entry `l·p + j` belongs to
//! level `l` and process `j`. Stacked residual vectors are process-major.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Everything the likelihood needs from the training residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    p: usize,
    n: usize,
    nobs: usize,
    /// `L` diagonal blocks of `coef`, one `p × p` matrix per level.
    levels: Vec<DMatrix<f64>>,
    /// `(pL × pL)` second moments of the coefficient projections `Φᵀ e_jt`.
    coef: DMatrix<f64>,
    /// `ΦᵀΦ`.
    gram: DMatrix<f64>,
    /// `tr(S_jj)`.
    energy: Vec<f64>,
    /// `tr((I − P_Φ) S_jj)`, the energy outside the span of `Φ`.
    outside: Vec<f64>,
    orthonormal: bool,
}

const ORTHO_TOL: f64 = 1e-10;

fn is_orthonormal(gram: &DMatrix<f64>) -> bool {
    let l = gram.nrows();
    (gram - DMatrix::identity(l, l))
        .iter()
        .all(|x| x.abs() <= ORTHO_TOL)
}

impl SampleStats {
    /// Statistics from per-process residual matrices, each `[T × n]`.
    pub fn from_processes(processes: &[&DMatrix<f64>], phi: &DMatrix<f64>) -> Result<Self> {
        let p = processes.len();
        if p == 0 {
            return Err(Error::InsufficientData("no processes".into()));
        }
        let (t, n) = processes[0].shape();
        if t == 0 {
            return Err(Error::InsufficientData("no training months".into()));
        }
        for e in processes {
            if e.shape() != (t, n) {
                return Err(Error::ShapeMismatch(format!(
                    "process matrix {:?} vs {:?}",
                    e.shape(),
                    (t, n)
                )));
            }
        }
        if phi.nrows() != n {
            return Err(Error::dims("basis rows", n, phi.nrows()));
        }
        let l = phi.ncols();
        let gram = linalg::symmetrize(&(phi.transpose() * phi));
        let orthonormal = is_orthonormal(&gram);
        let inv_gram = if orthonormal || l == 0 {
            DMatrix::identity(l, l)
        } else {
            linalg::inv_spd(&gram, "basis Gram matrix")?
        };
        let tf = t as f64;
        let proj: Vec<DMatrix<f64>> = processes.iter().map(|e| *e * phi).collect();
        let mut coef = DMatrix::zeros(p * l, p * l);
        for i in 0..p {
            for j in i..p {
                let block = proj[i].transpose() * &proj[j] / tf;
                for a in 0..l {
                    for b in 0..l {
                        coef[(a * p + i, b * p + j)] = block[(a, b)];
                        coef[(b * p + j, a * p + i)] = block[(a, b)];
                    }
                }
            }
        }
        let energy: Vec<f64> = processes.iter().map(|e| e.norm_squared() / tf).collect();
        let outside: Vec<f64> = processes
            .iter()
            .zip(&proj)
            .map(|(e, a)| {
                let fitted = a * &inv_gram * phi.transpose();
                (*e - fitted).norm_squared() / tf
            })
            .collect();
        Ok(Self::assemble(
            p,
            n,
            t,
            coef,
            gram,
            energy,
            outside,
            orthonormal,
        ))
    }

    /// Statistics from a dense process-major second-moment matrix `S`
    /// (`pn × pn`). Intended for small test instances.
    pub fn from_second_moment(
        s: &DMatrix<f64>,
        phi: &DMatrix<f64>,
        p: usize,
        nobs: usize,
    ) -> Result<Self> {
        let n = phi.nrows();
        if s.shape() != (p * n, p * n) {
            return Err(Error::dims("second moment size", p * n, s.nrows()));
        }
        let l = phi.ncols();
        let gram = linalg::symmetrize(&(phi.transpose() * phi));
        let orthonormal = is_orthonormal(&gram);
        let mut coef = DMatrix::zeros(p * l, p * l);
        let mut energy = vec![0.0; p];
        let mut outside = vec![0.0; p];
        let proj = if l == 0 {
            DMatrix::zeros(n, n)
        } else {
            phi * linalg::inv_spd(&gram, "basis Gram matrix")? * phi.transpose()
        };
        for i in 0..p {
            for j in 0..p {
                let sij = s.view((i * n, j * n), (n, n));
                let block = phi.transpose() * sij * phi;
                for a in 0..l {
                    for b in 0..l {
                        coef[(a * p + i, b * p + j)] = block[(a, b)];
                    }
                }
                if i == j {
                    energy[i] = sij.trace();
                    outside[i] = energy[i] - linalg::trace_product(&proj, &sij.into_owned());
                }
            }
        }
        Ok(Self::assemble(
            p,
            n,
            nobs.max(1),
            linalg::symmetrize(&coef),
            gram,
            energy,
            outside,
            orthonormal,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        p: usize,
        n: usize,
        nobs: usize,
        coef: DMatrix<f64>,
        gram: DMatrix<f64>,
        energy: Vec<f64>,
        outside: Vec<f64>,
        orthonormal: bool,
    ) -> Self {
        let l = gram.nrows();
        let levels = (0..l)
            .map(|a| coef.view((a * p, a * p), (p, p)).into_owned())
            .collect();
        Self {
            p,
            n,
            nobs,
            levels,
            coef,
            gram,
            energy,
            outside,
            orthonormal,
        }
    }

    pub fn processes(&self) -> usize {
        self.p
    }
    pub fn levels(&self) -> usize {
        self.levels.len()
    }
    pub fn pixels(&self) -> usize {
        self.n
    }
    pub fn nobs(&self) -> usize {
        self.nobs
    }
    /// Per-level `p × p` coefficient second moments.
    pub fn cross_products(&self) -> &[DMatrix<f64>] {
        &self.levels
    }
    pub fn coefficient_moments(&self) -> &DMatrix<f64> {
        &self.coef
    }
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }
    pub fn energy(&self) -> &[f64] {
        &self.energy
    }
    pub fn outside_energy(&self) -> &[f64] {
        &self.outside
    }
    pub fn is_orthonormal(&self) -> bool {
        self.orthonormal
    }
}

fn check_inputs(q: &[DMatrix<f64>], tau2: &[f64], p: usize, l: usize) -> Result<()> {
    if q.len() != l {
        return Err(Error::dims("precision blocks", l, q.len()));
    }
    if tau2.len() != p {
        return Err(Error::dims("noise variances", p, tau2.len()));
    }
    if let Some(b) = q.iter().find(|b| b.shape() != (p, p)) {
        return Err(Error::ShapeMismatch(format!(
            "precision block {:?}, expected {p}x{p}",
            b.shape()
        )));
    }
    if tau2.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::not_pd("noise covariance D"));
    }
    Ok(())
}

/// Block-diagonal `Q` in level-major ordering.
pub fn block_diag(q: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p = q.first().map_or(0, |b| b.nrows());
    let mut out = DMatrix::zeros(p * q.len(), p * q.len());
    for (l, b) in q.iter().enumerate() {
        out.view_mut((l * p, l * p), (p, p)).copy_from(b);
    }
    out
}

/// Dense `(pn × pn)` model covariance, process-major.
pub fn dense_covariance(
    q: &[DMatrix<f64>],
    tau2: &[f64],
    phi: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = tau2.len();
    let n = phi.nrows();
    check_inputs(q, tau2, p, phi.ncols())?;
    let mut sigma = DMatrix::zeros(p * n, p * n);
    for (l, block) in q.iter().enumerate() {
        let cov = linalg::inv_spd(block, &format!("Q block {l}"))?;
        let f = phi.column(l);
        let outer = f * f.transpose();
        for i in 0..p {
            for j in 0..p {
                let mut v = sigma.view_mut((i * n, j * n), (n, n));
                v += &outer * cov[(i, j)];
            }
        }
    }
    for (j, &t) in tau2.iter().enumerate() {
        for s in 0..n {
            sigma[(j * n + s, j * n + s)] += t;
        }
    }
    Ok(sigma)
}

/// `log det Σ + tr(S Σ⁻¹)` by a dense Cholesky factorisation of Σ.
pub fn nll_direct(
    q: &[DMatrix<f64>],
    tau2: &[f64],
    phi: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Result<f64> {
    let sigma = dense_covariance(q, tau2, phi)?;
    if s.shape() != sigma.shape() {
        return Err(Error::dims("second moment size", sigma.nrows(), s.nrows()));
    }
    let chol = linalg::cholesky(&sigma, "model covariance")?;
    let solved = chol.solve(s);
    Ok(linalg::logdet_from_chol(&chol) + solved.trace())
}

/// Per-level part of the likelihood for an orthonormal basis:
/// `log det Σ_l + tr(M_l Σ_l⁻¹)` with `Σ_l = Q_l⁻¹ + diag(τ²)`.
pub fn level_nll(q: &DMatrix<f64>, tau2: &[f64], m: &DMatrix<f64>) -> Result<f64> {
    let mut sigma = linalg::inv_spd(q, "Q block")?;
    for (j, t) in tau2.iter().enumerate() {
        sigma[(j, j)] += t;
    }
    let chol = linalg::cholesky(&sigma, "level covariance")?;
    Ok(linalg::logdet_from_chol(&chol) + chol.solve(m).trace())
}

/// The `Q`-independent part of the likelihood for an orthonormal basis.
pub fn constant_part(tau2: &[f64], stats: &SampleStats) -> f64 {
    let extra = (stats.pixels() - stats.levels()) as f64;
    tau2.iter()
        .zip(stats.outside_energy())
        .map(|(t, r)| extra * t.ln() + r / t)
        .sum()
}

/// Same value as [`nll_direct`] from the sufficient statistics, using the
/// Sherman–Morrison–Woodbury reduction. Splits into `L` independent `p × p`
/// computations when the basis is orthonormal; otherwise works with the
/// `pL × pL` capacitance matrix.
pub fn nll_smw(q: &[DMatrix<f64>], tau2: &[f64], stats: &SampleStats) -> Result<f64> {
    let p = stats.processes();
    let l = stats.levels();
    check_inputs(q, tau2, p, l)?;
    if stats.is_orthonormal() {
        let mut total = constant_part(tau2, stats);
        for (block, m) in q.iter().zip(stats.cross_products()) {
            total += level_nll(block, tau2, m)?;
        }
        return Ok(total);
    }
    let n = stats.pixels() as f64;
    let qfull = block_diag(q);
    let mut k = qfull.clone();
    for a in 0..l {
        for b in 0..l {
            for j in 0..p {
                k[(a * p + j, b * p + j)] += stats.gram()[(a, b)] / tau2[j];
            }
        }
    }
    let w = DMatrix::from_fn(p * l, p * l, |r, c| {
        stats.coef[(r, c)] / (tau2[r % p] * tau2[c % p])
    });
    let kchol = linalg::cholesky(&linalg::symmetrize(&k), "capacitance matrix")?;
    let logdet_q: f64 = q
        .iter()
        .enumerate()
        .map(|(i, b)| linalg::logdet_spd(b, &format!("Q block {i}")))
        .sum::<Result<f64>>()?;
    let tr_sd: f64 = stats.energy().iter().zip(tau2).map(|(e, t)| e / t).sum();
    let tr_wk = kchol.solve(&w).trace();
    Ok(
        n * tau2.iter().map(|t| t.ln()).sum::<f64>() + linalg::logdet_from_chol(&kchol) - logdet_q
            + tr_sd
            - tr_wk,
    )
}

/// `λ Σ_l Σ_{i≠j} |Q_l[i,j]| + ρ Σ_l Σ_{i≠j} |Q_l[i,j] − Q_{l+1}[i,j]|`.
pub fn penalty(q: &[DMatrix<f64>], lambda: f64, rho: f64) -> f64 {
    let off = |m: &DMatrix<f64>, i: usize, j: usize| if i == j { 0.0 } else { m[(i, j)] };
    let mut total = 0.0;
    for (l, b) in q.iter().enumerate() {
        let p = b.nrows();
        for i in 0..p {
            for j in 0..p {
                total += lambda * off(b, i, j).abs();
                if let Some(next) = q.get(l + 1) {
                    total += rho * (off(b, i, j) - off(next, i, j)).abs();
                }
            }
        }
    }
    total
}
