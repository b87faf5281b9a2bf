//! Synthetic scenarios drawn from the model's own generative assumptions,
//! plus dense Gaussian conditioning oracles for tests.
//!
//! Fine-scale residuals are `e_j = Φ ω_j + δ_j` with `(ω_1l, ω_2l) ~ N(0, Q_l⁻¹)`
//! and white noise `δ_j`. The fine "GCM truth" is a climatology plus warming
//! plus `e1`; the coarse model field is its block mean plus a coarse bias.
//! Observations add `e2` to the observed climatology and the interpolated
//! large-scale anomaly, so Stage 1 recovers everything except `e2`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bgl;
use crate::error::{Error, Result};
use crate::grid::{Field, GridKind, GridSpec, TimeIndex, YearMonth};
use crate::linalg;
use crate::trend::Interpolator;

/// Fine-grid block excluded from the observational outputs (land).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskBlock {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub coarse_cols: usize,
    pub coarse_rows: usize,
    pub lon0: f64,
    pub lat0: f64,
    pub dlon: f64,
    pub dlat: f64,
    /// Fine cells per coarse cell along each axis.
    pub refine: usize,
    pub start_year: i32,
    pub train_years: usize,
    pub holdout_years: usize,
    pub future_years: usize,
    /// Number of true stochastic basis functions.
    pub levels: usize,
    /// Geometric decay of the level variances.
    pub level_decay: f64,
    /// Per-pixel standard deviation of `Φ ω_j` for each process.
    pub signal_sd: [f64; 2],
    /// Correlation of `ω_1l` and `ω_2l`, shared by all levels.
    pub correlation: f64,
    pub tau2: [f64; 2],
    pub warming_per_year: f64,
    pub seasonal_amplitude: f64,
    /// Amplitude of the smooth coarse model bias.
    pub model_bias: f64,
    pub mask: Option<MaskBlock>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self::standard(1)
    }
}

impl ScenarioSpec {
    /// Strongly dependent processes.
    pub fn standard(seed: u64) -> Self {
        Self {
            seed,
            coarse_cols: 8,
            coarse_rows: 8,
            lon0: 145.5,
            lat0: -10.5,
            dlon: 1.0,
            dlat: -1.0,
            refine: 5,
            start_year: 1990,
            train_years: 25,
            holdout_years: 3,
            future_years: 2,
            levels: 8,
            level_decay: 0.75,
            signal_sd: [0.5, 0.5],
            correlation: 0.85,
            tau2: [0.02, 0.02],
            warming_per_year: 0.02,
            seasonal_amplitude: 1.5,
            model_bias: 0.8,
            mask: None,
        }
    }

    /// Independent processes: every `Q_l` is diagonal.
    pub fn independent(seed: u64) -> Self {
        Self {
            correlation: 0.0,
            ..Self::standard(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scenario: {m}")));
        if self.coarse_cols < 2 || self.coarse_rows < 2 || self.refine == 0 {
            return bad("grid needs at least 2x2 coarse cells and refine >= 1");
        }
        if self.train_years == 0 {
            return bad("train_years must be positive");
        }
        let features = feature_pairs(self).len();
        if self.levels == 0 || self.levels > features {
            return bad(&format!("levels must be in 1..={features}"));
        }
        if self.signal_sd.iter().chain(&self.tau2).any(|&v| !(v > 0.0)) {
            return bad("variance parameters must be positive");
        }
        if !(self.correlation.abs() < 1.0) {
            return bad("correlation must lie in (-1, 1)");
        }
        if !(self.level_decay > 0.0 && self.level_decay <= 1.0) {
            return bad("level_decay must lie in (0, 1]");
        }
        if let Some(m) = self.mask {
            if m.row0 + m.rows > self.fine_rows() || m.col0 + m.cols > self.fine_cols() {
                return bad("mask block outside the fine grid");
            }
        }
        Ok(())
    }

    pub fn fine_cols(&self) -> usize {
        self.coarse_cols * self.refine
    }
    pub fn fine_rows(&self) -> usize {
        self.coarse_rows * self.refine
    }

    pub fn coarse_spec(&self) -> Result<GridSpec> {
        GridSpec::full(
            GridKind::Coarse,
            self.lon0,
            self.lat0,
            self.dlon,
            self.dlat,
            self.coarse_cols,
            self.coarse_rows,
        )
    }

    /// Fine grid tiling the coarse cells exactly.
    pub fn fine_spec_full(&self) -> Result<GridSpec> {
        let r = self.refine as f64;
        GridSpec::full(
            GridKind::Fine,
            self.lon0 - self.dlon / 2.0 + self.dlon / (2.0 * r),
            self.lat0 - self.dlat / 2.0 + self.dlat / (2.0 * r),
            self.dlon / r,
            self.dlat / r,
            self.fine_cols(),
            self.fine_rows(),
        )
    }

    /// Fine grid with the optional land block masked.
    pub fn fine_spec(&self) -> Result<GridSpec> {
        let full = self.fine_spec_full()?;
        let Some(m) = self.mask else { return Ok(full) };
        let cols = self.fine_cols();
        let mask = (0..cols * self.fine_rows())
            .map(|i| {
                let (r, c) = (i / cols, i % cols);
                !(r >= m.row0 && r < m.row0 + m.rows && c >= m.col0 && c < m.col0 + m.cols)
            })
            .collect();
        GridSpec::new(
            GridKind::Fine,
            full.lon0(),
            full.lat0(),
            full.dlon(),
            full.dlat(),
            cols,
            self.fine_rows(),
            mask,
        )
    }

    pub fn start(&self) -> YearMonth {
        YearMonth {
            year: self.start_year,
            month: 1,
        }
    }
    pub fn total_months(&self) -> usize {
        12 * (self.train_years + self.holdout_years + self.future_years)
    }
    pub fn training_end(&self) -> YearMonth {
        YearMonth {
            year: self.start_year + self.train_years as i32 - 1,
            month: 12,
        }
    }
    /// First and last month of the hold-out window.
    pub fn holdout(&self) -> Option<(YearMonth, YearMonth)> {
        (self.holdout_years > 0).then(|| {
            let first = self.training_end().plus(1);
            (first, first.plus(12 * self.holdout_years as i64 - 1))
        })
    }

    /// Variance of each process coefficient at level `l`.
    fn level_variances(&self, l: usize, n: usize) -> [f64; 2] {
        let weights: Vec<f64> = (0..self.levels)
            .map(|k| self.level_decay.powi(k as i32))
            .collect();
        let total: f64 = weights.iter().sum();
        let share = weights[l] / total;
        [0, 1].map(|j| self.signal_sd[j].powi(2) * n as f64 * share)
    }

    /// True precision blocks.
    pub fn true_precision(&self) -> Result<Vec<DMatrix<f64>>> {
        let n = self.fine_cols() * self.fine_rows();
        (0..self.levels)
            .map(|l| {
                let [v1, v2] = self.level_variances(l, n);
                let c = self.correlation * (v1 * v2).sqrt();
                let cov = DMatrix::from_row_slice(2, 2, &[v1, c, c, v2]);
                linalg::inv_spd(&cov, "true level covariance")
            })
            .collect()
    }
}

fn feature_pairs(spec: &ScenarioSpec) -> Vec<(usize, usize)> {
    let fmax = 4.min(spec.coarse_cols).min(spec.coarse_rows);
    let mut pairs = Vec::new();
    for a in 0..fmax {
        for b in 0..fmax {
            if a + b > 0 {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

/// Smooth orthonormal basis on the full fine grid: random combinations of
/// low-order cosine modes, which are all orthogonal to the constant field.
pub fn smooth_basis<R: Rng + ?Sized>(rng: &mut R, spec: &ScenarioSpec) -> DMatrix<f64> {
    let (cols, rows) = (spec.fine_cols(), spec.fine_rows());
    let pairs = feature_pairs(spec);
    let features = DMatrix::from_fn(cols * rows, pairs.len(), |i, k| {
        let x = ((i % cols) as f64 + 0.5) / cols as f64;
        let y = ((i / cols) as f64 + 0.5) / rows as f64;
        let (a, b) = pairs[k];
        (std::f64::consts::PI * a as f64 * x).cos() * (std::f64::consts::PI * b as f64 * y).cos()
    });
    let mix = DMatrix::from_fn(pairs.len(), spec.levels, |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    linalg::orthonormalize(features * mix)
}

/// Draws `months` pairs of residual fields `e_j = Φ ω_j + δ_j`, returned as
/// `[months × n]` matrices.
pub fn sample_residuals<R: Rng + ?Sized>(
    rng: &mut R,
    phi: &DMatrix<f64>,
    q: &[DMatrix<f64>],
    tau2: [f64; 2],
    months: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = phi.nrows();
    let l = q.len();
    let chols = q
        .iter()
        .enumerate()
        .map(|(i, b)| {
            linalg::cholesky(
                &linalg::inv_spd(b, &format!("Q block {i}"))?,
                "level covariance",
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut e1 = DMatrix::zeros(months, n);
    let mut e2 = DMatrix::zeros(months, n);
    let (s1, s2) = (tau2[0].sqrt(), tau2[1].sqrt());
    for t in 0..months {
        let mut w1 = DVector::zeros(l);
        let mut w2 = DVector::zeros(l);
        for (lvl, c) in chols.iter().enumerate() {
            let z = nalgebra::dvector![
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal)
            ];
            let draw = c.l() * z;
            w1[lvl] = draw[0];
            w2[lvl] = draw[1];
        }
        let (f1, f2) = (phi * w1, phi * w2);
        for s in 0..n {
            e1[(t, s)] = f1[s] + s1 * rng.sample::<f64, _>(StandardNormal);
        }
        for s in 0..n {
            e2[(t, s)] = f2[s] + s2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((e1, e2))
}

/// Ground truth behind a generated scenario, on the full fine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTruth {
    pub spec: ScenarioSpec,
    pub basis: DMatrix<f64>,
    pub q: Vec<DMatrix<f64>>,
    pub tau2: [f64; 2],
    /// `[months × n_full]` residuals for every generated month.
    pub e1: DMatrix<f64>,
    pub e2: DMatrix<f64>,
    /// Fine model-scale truth whose block means form the coarse field.
    pub gcm_fine: DMatrix<f64>,
    /// Coarse bias added after block averaging.
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Coarse model field for every month.
    pub coarse: Field,
    /// Fine observations for the training months.
    pub obs: Field,
    /// Fine observations after the training window (hold-out and beyond).
    pub truth: Field,
    pub details: ScenarioTruth,
}

fn obs_climatology(x: f64, y: f64) -> f64 {
    24.0 + 2.0 * x - 1.5 * y + 0.8 * x * y
}

/// Block mean of a full fine row onto the coarse grid.
pub fn block_mean(spec: &ScenarioSpec, fine: &[f64]) -> Vec<f64> {
    let r = spec.refine;
    let cols = spec.fine_cols();
    let area = (r * r) as f64;
    (0..spec.coarse_rows * spec.coarse_cols)
        .map(|k| {
            let (br, bc) = (k / spec.coarse_cols, k % spec.coarse_cols);
            let mut total = 0.0;
            for i in 0..r {
                for j in 0..r {
                    total += fine[(br * r + i) * cols + bc * r + j];
                }
            }
            total / area
        })
        .collect()
}

/// Draws a scenario. Every random number comes from one ChaCha stream
/// seeded by `spec.seed`, so equal specs give bit-identical output.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coarse_spec = spec.coarse_spec()?;
    let full = spec.fine_spec_full()?;
    let fine = spec.fine_spec()?;
    let n = full.active_count();
    let (cols, rows) = (spec.fine_cols(), spec.fine_rows());
    let basis = smooth_basis(&mut rng, spec);
    let q = spec.true_precision()?;
    let months = spec.total_months();
    let (e1, e2) = sample_residuals(&mut rng, &basis, &q, spec.tau2, months)?;
    let interp = Interpolator::new(&coarse_spec, &full)?;
    let bias: Vec<f64> = (0..spec.coarse_rows * spec.coarse_cols)
        .map(|k| {
            let x = ((k % spec.coarse_cols) as f64 + 0.5) / spec.coarse_cols as f64;
            let y = ((k / spec.coarse_cols) as f64 + 0.5) / spec.coarse_rows as f64;
            spec.model_bias * (1.0 + x - 0.5 * y)
        })
        .collect();
    let clim: Vec<f64> = (0..n)
        .map(|i| {
            obs_climatology(
                ((i % cols) as f64 + 0.5) / cols as f64,
                ((i / cols) as f64 + 0.5) / rows as f64,
            )
        })
        .collect();
    let time = TimeIndex::monthly(spec.start(), months);
    let mut coarse = DMatrix::zeros(months, coarse_spec.active_count());
    let mut obs_full = DMatrix::zeros(months, n);
    let mut gcm_fine = DMatrix::zeros(months, n);
    for (t, m) in time.entries().iter().enumerate() {
        let cycle = spec.seasonal_amplitude
            * (2.0 * std::f64::consts::PI * (m.month as f64 - 1.0) / 12.0).cos();
        let warming = spec.warming_per_year * t as f64 / 12.0;
        let anomaly: Vec<f64> = (0..n).map(|s| warming + e1[(t, s)]).collect();
        let large = interp.apply_row(&block_mean(spec, &anomaly));
        let g: Vec<f64> = (0..n).map(|s| clim[s] + cycle + anomaly[s]).collect();
        for (k, v) in block_mean(spec, &g).into_iter().enumerate() {
            coarse[(t, k)] = v + bias[k];
        }
        for s in 0..n {
            gcm_fine[(t, s)] = g[s];
            obs_full[(t, s)] = clim[s] + cycle + large[s] + e2[(t, s)];
        }
    }
    let active = fine.active_indices().to_vec();
    let train_len = 12 * spec.train_years;
    let cut = |rows: std::ops::Range<usize>| -> Result<Field> {
        let entries = time.entries()[rows.clone()].to_vec();
        let values = DMatrix::from_fn(rows.len(), active.len(), |t, a| {
            obs_full[(rows.start + t, active[a])]
        });
        Field::new(fine.clone(), TimeIndex::new(entries)?, values)
    };
    let obs = cut(0..train_len)?;
    let truth = if months > train_len {
        cut(train_len..months)?
    } else {
        Field::new(
            fine.clone(),
            TimeIndex::monthly(spec.training_end().plus(1), 0),
            DMatrix::zeros(0, active.len()),
        )?
    };
    Ok(Scenario {
        coarse: Field::new(coarse_spec, time, coarse)?,
        obs,
        truth,
        details: ScenarioTruth {
            spec: spec.clone(),
            basis,
            q,
            tau2: spec.tau2,
            e1,
            e2,
            gcm_fine,
            bias,
        },
    })
}

#[derive(Serialize)]
struct TruthSidecar<'a> {
    spec: &'a ScenarioSpec,
    training_end: YearMonth,
    holdout: Option<(YearMonth, YearMonth)>,
    tau2: [f64; 2],
    q: Vec<[[f64; 2]; 2]>,
    basis_file: &'a str,
}

impl ScenarioTruth {
    /// Writes the truth as JSON plus the true basis as a `.gsf` basis file.
    pub fn write(&self, json_path: &Path, basis_path: &Path) -> Result<()> {
        let grid = self.spec.fine_spec_full()?;
        let l = self.basis.ncols();
        let basis = crate::basis::BasisSet::from_columns(
            self.basis.clone(),
            vec![1.0; l],
            crate::grid::Season::Summer,
        )?;
        basis.write(basis_path, &grid)?;
        let name = basis_path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("truth_basis.gsf");
        let sidecar = TruthSidecar {
            spec: &self.spec,
            training_end: self.spec.training_end(),
            holdout: self.spec.holdout(),
            tau2: self.tau2,
            q: self
                .q
                .iter()
                .map(|b| [[b[(0, 0)], b[(0, 1)]], [b[(1, 0)], b[(1, 1)]]])
                .collect(),
            basis_file: name,
        };
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::MalformedInput(format!("truth serialisation: {e}")))?;
        std::fs::write(json_path, text + "\n").map_err(|e| Error::io(json_path, e))
    }
}

/// Mean and covariance of `ω2` given `E1 = e1`, by dense Schur-complement
/// conditioning of the joint Gaussian of `(E1, ω2)` with
/// `E1 = Φ ω1 + δ1`.
pub fn dense_conditional_oracle(
    phi: &DMatrix<f64>,
    q: &[DMatrix<f64>],
    tau2_1: f64,
    e1: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = phi.nrows();
    let l = q.len();
    let covs = q
        .iter()
        .enumerate()
        .map(|(i, b)| linalg::inv_spd(b, &format!("Q block {i}")))
        .collect::<Result<Vec<_>>>()?;
    let c11 = DMatrix::from_fn(l, l, |a, b| if a == b { covs[a][(0, 0)] } else { 0.0 });
    let c21 = DMatrix::from_fn(l, l, |a, b| if a == b { covs[a][(1, 0)] } else { 0.0 });
    let c22 = DMatrix::from_fn(l, l, |a, b| if a == b { covs[a][(1, 1)] } else { 0.0 });
    let s11 = phi * &c11 * phi.transpose() + DMatrix::identity(n, n) * tau2_1;
    let s21 = &c21 * phi.transpose();
    let chol = linalg::cholesky(&s11, "Var(E1)")?;
    let mean = &s21 * chol.solve(e1);
    let cov = &c22 - &s21 * chol.solve(&s21.transpose());
    Ok((mean, linalg::symmetrize(&cov)))
}

/// Mean and pointwise variance of `E2` given `E1 = e1` from the dense
/// `(2n × 2n)` joint covariance.
pub fn dense_residual_oracle(
    phi: &DMatrix<f64>,
    q: &[DMatrix<f64>],
    tau2: [f64; 2],
    e1: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = phi.nrows();
    let sigma = bgl::dense_covariance(q, &tau2, phi)?;
    let s11 = sigma.view((0, 0), (n, n)).into_owned();
    let s21 = sigma.view((n, 0), (n, n)).into_owned();
    let s22 = sigma.view((n, n), (n, n)).into_owned();
    let chol = linalg::cholesky(&s11, "Var(E1)")?;
    let mean = &s21 * chol.solve(e1);
    let cov = s22 - &s21 * chol.solve(&s21.transpose());
    Ok((mean, cov.diagonal()))
}
