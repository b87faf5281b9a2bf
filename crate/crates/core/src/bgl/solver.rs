//! Difference-of-convex outer loop with graphical-lasso type inner problems.
//!
//! Writing `K = Q + BᵀD⁻¹B` and `W = BᵀD⁻¹SD⁻¹B`, the `Q`-dependent part of
//! the likelihood is `−log det Q + [log det K − tr(W K⁻¹)]`. The bracket is
//! concave in `Q`; linearising it at the current iterate leaves the convex
//! problem `−log det Q + tr(S̃ Q) + P(Q)` with
//! `S̃ = K⁻¹ + K⁻¹ W K⁻¹`, which separates into `p × p` blocks.

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use super::stats::{self, SampleStats};
use super::tv;
use crate::error::{Error, Result};
use crate::linalg;
use crate::par::Exec;

/// Tuning knobs for [`fit_precision`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Stop when the relative decrease of the penalised objective drops below.
    pub tol: f64,
    pub max_outer: usize,
    pub inner_tol: f64,
    pub max_inner: usize,
    pub eig_floor: f64,
    /// Noise variance floor relative to the marginal variance of each process.
    pub tau_floor: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_outer: 50,
            inner_tol: 1e-5,
            max_inner: 10_000,
            eig_floor: 1e-8,
            tau_floor: 1e-8,
            exec: Exec::default(),
        }
    }
}

/// Objective history of one fit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitTrace {
    /// Penalised objective after initialisation and after every accepted
    /// outer iteration.
    pub objectives: Vec<f64>,
    pub converged: bool,
}

impl FitTrace {
    pub fn iterations(&self) -> usize {
        self.objectives.len().saturating_sub(1)
    }
}

/// Penalised objective `nll + P(Q)`.
pub fn objective(
    q: &[DMatrix<f64>],
    tau2: &[f64],
    st: &SampleStats,
    lambda: f64,
    rho: f64,
) -> Result<f64> {
    Ok(stats::nll_smw(q, tau2, st)? + stats::penalty(q, lambda, rho))
}

/// Smallest `λ` that is guaranteed to zero every off-diagonal of every
/// inner-problem solution, whatever the current iterate.
pub fn lambda_max(st: &SampleStats, tau2: &[f64]) -> Result<f64> {
    let p = st.processes();
    let mut cross = 0.0f64;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                cross = cross.max((tau2[i] * tau2[j]).sqrt());
            }
        }
    }
    if st.levels() == 0 || p < 2 {
        return Ok(0.0);
    }
    if st.is_orthonormal() {
        let mut worst = 0.0f64;
        for m in st.cross_products() {
            let scaled = DMatrix::from_fn(p, p, |i, j| m[(i, j)] / (tau2[i] * tau2[j]).sqrt());
            let norm = linalg::symmetrize(&scaled)
                .symmetric_eigenvalues()
                .iter()
                .fold(0.0f64, |a, x| a.max(x.abs()));
            worst = worst.max(1.0 + norm);
        }
        return Ok(cross * worst);
    }
    // general basis: bound through H = BᵀD⁻¹B ⪯ K
    let (h, w) = capacitance_parts(st, tau2);
    let eig = h.clone().symmetric_eigen();
    let inv_sqrt = linalg::eig_map(&h, |x| 1.0 / x.max(f64::MIN_POSITIVE).sqrt());
    let hmin = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let scaled = &inv_sqrt * w * &inv_sqrt;
    let norm = linalg::symmetrize(&scaled)
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |a, x| a.max(x.abs()));
    Ok((1.0 + norm) / hmin)
}

/// `BᵀD⁻¹B` and `BᵀD⁻¹SD⁻¹B` in level-major ordering.
fn capacitance_parts(st: &SampleStats, tau2: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = st.processes();
    let l = st.levels();
    let mut h = DMatrix::zeros(p * l, p * l);
    for a in 0..l {
        for b in 0..l {
            for j in 0..p {
                h[(a * p + j, b * p + j)] = st.gram()[(a, b)] / tau2[j];
            }
        }
    }
    let c = st.coefficient_moments();
    let w = DMatrix::from_fn(p * l, p * l, |r, col| {
        c[(r, col)] / (tau2[r % p] * tau2[col % p])
    });
    (h, w)
}

/// Linearisation point blocks `S̃_l` at the iterate `q`.
pub fn surrogate_moments(
    q: &[DMatrix<f64>],
    tau2: &[f64],
    st: &SampleStats,
    exec: Exec,
) -> Result<Vec<DMatrix<f64>>> {
    let p = st.processes();
    if st.is_orthonormal() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(tau2));
        return exec.try_map(q.len(), |l| {
            // B = (I + D Q)⁻¹, K⁻¹ = B D, K⁻¹WK⁻¹ = B M Bᵀ
            let a = DMatrix::identity(p, p) + &d * &q[l];
            let b = a
                .try_inverse()
                .ok_or_else(|| Error::SingularSystem(format!("I + DQ at level {l}")))?;
            let m = &st.cross_products()[l];
            Ok(linalg::symmetrize(&(&b * &d + &b * m * b.transpose())))
        });
    }
    let (h, w) = capacitance_parts(st, tau2);
    let k = stats::block_diag(q) + h;
    let kinv = linalg::inv_spd(&linalg::symmetrize(&k), "capacitance matrix")?;
    let full = &kinv + &kinv * w * &kinv;
    Ok((0..q.len())
        .map(|l| linalg::symmetrize(&full.view((l * p, l * p), (p, p)).into_owned()))
        .collect())
}

fn surrogate_value(
    q: &[DMatrix<f64>],
    st_blocks: &[DMatrix<f64>],
    lambda: f64,
    rho: f64,
) -> Result<f64> {
    let mut total = stats::penalty(q, lambda, rho);
    for (b, s) in q.iter().zip(st_blocks) {
        total += -linalg::logdet_spd(b, "Q block")? + linalg::trace_product(s, b);
    }
    Ok(total)
}

/// Regularised inverse of each level's coefficient second moment.
pub fn initial_precision(st: &SampleStats) -> Result<Vec<DMatrix<f64>>> {
    let p = st.processes();
    let scale = st.energy().iter().sum::<f64>() / (p.max(1) * st.pixels().max(1)) as f64;
    st.cross_products()
        .iter()
        .enumerate()
        .map(|(l, m)| {
            let ridge = (0.01 * m.trace() / p as f64)
                .max(1e-12 * scale)
                .max(f64::MIN_POSITIVE);
            linalg::inv_spd(
                &(m + DMatrix::identity(p, p) * ridge),
                &format!("initial Q block {l}"),
            )
        })
        .collect()
}

/// Closed-form 2×2 graphical lasso: the optimal covariance keeps the
/// diagonal of `s` and soft-thresholds its off-diagonal.
fn glasso_2x2(s: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let off = tv::soft_threshold(0.5 * (s[(0, 1)] + s[(1, 0)]), lambda);
    let (a, d) = (s[(0, 0)], s[(1, 1)]);
    let det = a * d - off * off;
    if !(det > 0.0) || !(a > 0.0) {
        return Err(Error::not_pd("surrogate second moment"));
    }
    Ok(DMatrix::from_row_slice(
        2,
        2,
        &[d / det, -off / det, -off / det, a / det],
    ))
}

/// Solves `min Σ_l [−log det Q_l + tr(S̃_l Q_l)] + P(Q)`.
pub fn solve_inner(
    st_blocks: &[DMatrix<f64>],
    warm: &[DMatrix<f64>],
    lambda: f64,
    rho: f64,
    opts: &FitOptions,
) -> Result<Vec<DMatrix<f64>>> {
    solve_inner_warm(st_blocks, warm, lambda, rho, opts, &mut None)
}

fn solve_inner_warm(
    st_blocks: &[DMatrix<f64>],
    warm: &[DMatrix<f64>],
    lambda: f64,
    rho: f64,
    opts: &FitOptions,
    state: &mut Option<AdmmState>,
) -> Result<Vec<DMatrix<f64>>> {
    let p = st_blocks.first().map_or(0, |b| b.nrows());
    if p == 2 && (rho == 0.0 || st_blocks.len() == 1) {
        return opts
            .exec
            .try_map(st_blocks.len(), |l| glasso_2x2(&st_blocks[l], lambda));
    }
    let mut s = state.take().unwrap_or_else(|| AdmmState::cold(warm));
    let out = admm(st_blocks, &mut s, lambda, rho, opts);
    *state = Some(s);
    Ok(out)
}

fn sum_sq(ms: &[DMatrix<f64>]) -> f64 {
    ms.iter().map(|m| m.norm_squared()).sum()
}

/// ADMM iterate kept between outer iterations: successive surrogates are
/// close, so the previous consensus, scaled dual and step size are a good
/// start for the next solve.
#[derive(Debug, Clone)]
struct AdmmState {
    z: Vec<DMatrix<f64>>,
    u: Vec<DMatrix<f64>>,
    mu: Option<f64>,
}

impl AdmmState {
    fn cold(warm: &[DMatrix<f64>]) -> Self {
        let p = warm.first().map_or(0, |b| b.nrows());
        Self {
            z: warm.to_vec(),
            u: vec![DMatrix::zeros(p, p); warm.len()],
            mu: None,
        }
    }
}

fn admm(
    st_blocks: &[DMatrix<f64>],
    state: &mut AdmmState,
    lambda: f64,
    rho: f64,
    opts: &FitOptions,
) -> Vec<DMatrix<f64>> {
    let levels = st_blocks.len();
    let p = st_blocks.first().map_or(0, |b| b.nrows());
    if p == 2 {
        return admm_2x2(st_blocks, state, lambda, rho, opts);
    }
    let mean_diag = st_blocks.iter().map(|s| s.trace()).sum::<f64>() / (levels * p).max(1) as f64;
    let mu0 = (mean_diag * mean_diag).max(1e-300);
    let (mu_lo, mu_hi) = (mu0 * 1e-6, mu0 * 1e6);
    let mut mu = state.mu.map_or(mu0, |m| m.clamp(mu_lo, mu_hi));
    if let Some(prev) = state.mu {
        let ratio = prev / mu;
        state.u.iter_mut().for_each(|m| *m *= ratio);
    }
    let AdmmState { z, u, .. } = state;
    for iter in 0..opts.max_inner {
        let q: Vec<DMatrix<f64>> = opts.exec.map(levels, |l| {
            let a = (&z[l] - &u[l]) * mu - &st_blocks[l];
            linalg::eig_map(&a, |d| {
                let root = (d * d + 4.0 * mu).sqrt();
                if d >= 0.0 {
                    (d + root) / (2.0 * mu)
                } else {
                    2.0 / (root - d)
                }
            })
        });
        let z_old = std::mem::take(z);
        *z = (0..levels).map(|l| &q[l] + &u[l]).collect();
        for i in 0..p {
            for j in (i + 1)..p {
                let a: Vec<f64> = z.iter().map(|m| 0.5 * (m[(i, j)] + m[(j, i)])).collect();
                let fused = tv::fused_lasso(&a, lambda / mu, rho / mu);
                for (m, v) in z.iter_mut().zip(fused) {
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
        }
        for l in 0..levels {
            u[l] += &q[l] - &z[l];
        }
        let primal = q
            .iter()
            .zip(z.iter())
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt();
        let dual = mu
            * z.iter()
                .zip(&z_old)
                .map(|(a, b)| (a - b).norm_squared())
                .sum::<f64>()
                .sqrt();
        let eps_pri = opts.inner_tol
            * sum_sq(&q)
                .sqrt()
                .max(sum_sq(z).sqrt())
                .max(f64::MIN_POSITIVE);
        let eps_dual = opts.inner_tol * (mu * sum_sq(u).sqrt()).max(f64::MIN_POSITIVE);
        if primal <= eps_pri && dual <= eps_dual {
            log::trace!("admm converged after {} iterations", iter + 1);
            break;
        }
        if iter % 10 == 9 {
            if primal > 10.0 * dual && mu < mu_hi {
                mu *= 2.0;
                u.iter_mut().for_each(|m| *m /= 2.0);
            } else if dual > 10.0 * primal && mu > mu_lo {
                mu /= 2.0;
                u.iter_mut().for_each(|m| *m *= 2.0);
            }
        }
    }
    state.mu = Some(mu);
    state
        .z
        .iter()
        .map(|m| linalg::floor_eigenvalues(m, opts.eig_floor))
        .collect()
}

/// Closed-form `f(M)` for a symmetric 2×2 matrix.
fn eig_map_2x2(m: &Matrix2<f64>, f: impl Fn(f64) -> f64) -> Matrix2<f64> {
    let (a, b, d) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
    let mid = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    if rad == 0.0 {
        return Matrix2::identity() * f(mid);
    }
    let (l1, l2) = (mid + rad, mid - rad);
    let (p, q) = (f(l1) / (2.0 * rad), f(l2) / (2.0 * rad));
    let off = (p - q) * b;
    Matrix2::new(
        p * (a - l2) - q * (a - l1),
        off,
        off,
        p * (d - l2) - q * (d - l1),
    )
}

/// The same iteration as the general path on stack-allocated blocks.
fn admm_2x2(
    st_blocks: &[DMatrix<f64>],
    state: &mut AdmmState,
    lambda: f64,
    rho: f64,
    opts: &FitOptions,
) -> Vec<DMatrix<f64>> {
    let levels = st_blocks.len();
    let fix = |m: &DMatrix<f64>| Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let s: Vec<Matrix2<f64>> = st_blocks.iter().map(fix).collect();
    let mean_diag = s.iter().map(|m| m.trace()).sum::<f64>() / (2 * levels).max(1) as f64;
    let mu0 = (mean_diag * mean_diag).max(1e-300);
    let (mu_lo, mu_hi) = (mu0 * 1e-6, mu0 * 1e6);
    let mut mu = state.mu.map_or(mu0, |m| m.clamp(mu_lo, mu_hi));
    let ratio = state.mu.map_or(1.0, |prev| prev / mu);
    let mut z: Vec<Matrix2<f64>> = state.z.iter().map(fix).collect();
    let mut u: Vec<Matrix2<f64>> = state.u.iter().map(|m| fix(m) * ratio).collect();
    let mut q = vec![Matrix2::zeros(); levels];
    let mut offdiag = vec![0.0; levels];
    for iter in 0..opts.max_inner {
        let z_old = z.clone();
        for l in 0..levels {
            let a = (z[l] - u[l]) * mu - s[l];
            q[l] = eig_map_2x2(&a, |d| {
                let root = (d * d + 4.0 * mu).sqrt();
                if d >= 0.0 {
                    (d + root) / (2.0 * mu)
                } else {
                    2.0 / (root - d)
                }
            });
            z[l] = q[l] + u[l];
            offdiag[l] = 0.5 * (z[l][(0, 1)] + z[l][(1, 0)]);
        }
        let fused = tv::fused_lasso(&offdiag, lambda / mu, rho / mu);
        let (mut primal, mut dual, mut nq, mut nz, mut nu) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for l in 0..levels {
            z[l][(0, 1)] = fused[l];
            z[l][(1, 0)] = fused[l];
            u[l] += q[l] - z[l];
            primal += (q[l] - z[l]).norm_squared();
            dual += (z[l] - z_old[l]).norm_squared();
            nq += q[l].norm_squared();
            nz += z[l].norm_squared();
            nu += u[l].norm_squared();
        }
        let (primal, dual) = (primal.sqrt(), mu * dual.sqrt());
        let eps_pri = opts.inner_tol * nq.sqrt().max(nz.sqrt()).max(f64::MIN_POSITIVE);
        let eps_dual = opts.inner_tol * (mu * nu.sqrt()).max(f64::MIN_POSITIVE);
        if primal <= eps_pri && dual <= eps_dual {
            log::trace!("admm converged after {} iterations", iter + 1);
            break;
        }
        if iter % 10 == 9 {
            if primal > 10.0 * dual && mu < mu_hi {
                mu *= 2.0;
                u.iter_mut().for_each(|m| *m /= 2.0);
            } else if dual > 10.0 * primal && mu > mu_lo {
                mu /= 2.0;
                u.iter_mut().for_each(|m| *m *= 2.0);
            }
        }
    }
    let dynamic = |m: &Matrix2<f64>| {
        DMatrix::from_row_slice(2, 2, &[m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]])
    };
    state.z = z.iter().map(dynamic).collect();
    state.u = u.iter().map(dynamic).collect();
    state.mu = Some(mu);
    state
        .z
        .iter()
        .map(|m| linalg::floor_eigenvalues(m, opts.eig_floor))
        .collect()
}

/// Minimises the penalised objective over block-diagonal `Q` with `τ²` held
/// fixed. Every accepted iterate lowers the objective.
pub fn fit_precision(
    st: &SampleStats,
    tau2: &[f64],
    lambda: f64,
    rho: f64,
    opts: &FitOptions,
) -> Result<(Vec<DMatrix<f64>>, FitTrace)> {
    if !(lambda >= 0.0 && rho >= 0.0) {
        return Err(Error::Config(format!(
            "penalties must be nonnegative, got lambda={lambda}, rho={rho}"
        )));
    }
    let mut q = initial_precision(st)?;
    let mut f = objective(&q, tau2, st, lambda, rho)?;
    let offset = if st.is_orthonormal() {
        stats::constant_part(tau2, st)
    } else {
        0.0
    };
    let mut trace = FitTrace {
        objectives: vec![f],
        converged: false,
    };
    if q.is_empty() {
        trace.converged = true;
        return Ok((q, trace));
    }
    let mut state = None;
    for iteration in 1..=opts.max_outer {
        let blocks = surrogate_moments(&q, tau2, st, opts.exec)?;
        let candidate = solve_inner_warm(&blocks, &q, lambda, rho, opts, &mut state)?;
        let f_new = objective(&candidate, tau2, st, lambda, rho)?;
        if !(f_new <= f) {
            let slack = 1e-9 * f.abs().max(1.0);
            let before = surrogate_value(&q, &blocks, lambda, rho)?;
            let after = surrogate_value(&candidate, &blocks, lambda, rho)?;
            if f_new - f > slack && after < before - 1e-12 * before.abs().max(1.0) {
                return Err(Error::Diverged {
                    iteration,
                    previous: f,
                    current: f_new,
                });
            }
            // no progress the inner solver can certify: keep the last iterate
            trace.converged = true;
            break;
        }
        let decrease = (f - f_new) / (f - offset).abs().max(1.0);
        q = candidate;
        f = f_new;
        trace.objectives.push(f);
        log::trace!("outer iteration {iteration}: objective {f}");
        if decrease < opts.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((q, trace))
}
