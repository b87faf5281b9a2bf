//! Bivariate graphical lasso on EOF coefficients.
//!
//! The stochastic coefficients `(ω_1l, ω_2l)` of each level are bivariate
//! normal with precision `Q_l`; levels are independent, so the coefficient
//! precision is block diagonal. `Q` is estimated by penalised maximum
//! likelihood with an ℓ1 sparsity penalty and a fusion penalty tying
//! neighbouring levels together.

mod select;
mod solver;
mod stats;
mod tv;

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::basis::{self, BasisSet, DeterministicFit, ResidualPair};
use crate::error::{Error, Result};
use crate::grid::{Season, SeasonMap};
use crate::gsf::{self, Document};
use crate::linalg;

pub use select::{select_penalties, CvOutcome, PenaltyGrid};
pub use solver::{
    fit_precision, initial_precision, lambda_max, objective, solve_inner, surrogate_moments,
    FitOptions, FitTrace,
};
pub use stats::{
    block_diag, dense_covariance, level_nll, nll_direct, nll_smw, penalty, SampleStats,
};
pub use tv::{fused_lasso, soft_threshold, tv_denoise};

/// A fitted seasonal Stage-2 model.
#[derive(Debug, Clone, PartialEq)]
pub struct BglModel {
    q: Vec<DMatrix<f64>>,
    tau2: Vec<f64>,
    lambda: f64,
    rho: f64,
    season: Season,
    seasons: SeasonMap,
    basis: BasisSet,
    deterministic: DeterministicFit,
    e1_mean: DVector<f64>,
    trace: FitTrace,
}

impl BglModel {
    /// Assembles a model from its parts and checks the invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        q: Vec<DMatrix<f64>>,
        tau2: Vec<f64>,
        lambda: f64,
        rho: f64,
        basis: BasisSet,
        deterministic: DeterministicFit,
        e1_mean: DVector<f64>,
        seasons: SeasonMap,
    ) -> Result<Self> {
        let model = Self {
            q,
            tau2,
            lambda,
            rho,
            season: basis.season(),
            seasons,
            basis,
            deterministic,
            e1_mean,
            trace: FitTrace::default(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn q(&self) -> &[DMatrix<f64>] {
        &self.q
    }
    pub fn tau2(&self) -> &[f64] {
        &self.tau2
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn rho(&self) -> f64 {
        self.rho
    }
    pub fn season(&self) -> Season {
        self.season
    }
    pub fn season_map(&self) -> &SeasonMap {
        &self.seasons
    }
    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }
    pub fn deterministic(&self) -> &DeterministicFit {
        &self.deterministic
    }
    /// Pooled seasonal mean subtracted from interpolated model fields before
    /// they enter Stage 2.
    pub fn e1_mean(&self) -> &DVector<f64> {
        &self.e1_mean
    }
    pub fn trace(&self) -> &FitTrace {
        &self.trace
    }
    pub fn processes(&self) -> usize {
        self.tau2.len()
    }
    pub fn levels(&self) -> usize {
        self.q.len()
    }

    pub fn with_e1_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        if mean.len() != self.basis.pixels() {
            return Err(Error::dims(
                "model-field mean",
                self.basis.pixels(),
                mean.len(),
            ));
        }
        self.e1_mean = mean;
        Ok(self)
    }

    pub fn with_season_map(mut self, seasons: SeasonMap) -> Self {
        self.seasons = seasons;
        self
    }

    /// Prior covariance `Q_l⁻¹` of level `l`.
    pub fn level_covariance(&self, l: usize) -> Result<DMatrix<f64>> {
        linalg::inv_spd(&self.q[l], &format!("Q block {l}"))
    }

    /// Checks every structural and numerical invariant of the model.
    pub fn validate(&self) -> Result<()> {
        let p = self.tau2.len();
        let l = self.basis.nstoch();
        if self.q.len() != l {
            return Err(Error::dims("precision blocks", l, self.q.len()));
        }
        for (i, b) in self.q.iter().enumerate() {
            if b.shape() != (p, p) || b.iter().any(|x| !x.is_finite()) {
                return Err(Error::not_pd(format!("Q block {i}")));
            }
            if (b - b.transpose()).iter().any(|x| *x != 0.0) || linalg::min_eigenvalue(b) <= 0.0 {
                return Err(Error::not_pd(format!("Q block {i}")));
            }
        }
        if self.tau2.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::not_pd("noise variances"));
        }
        if !(self.lambda >= 0.0 && self.rho >= 0.0) {
            return Err(Error::Config("negative penalty".into()));
        }
        let ndet = self.basis.total() - l;
        if self.deterministic.nu().shape() != (p, ndet) {
            return Err(Error::ShapeMismatch(format!(
                "deterministic coefficients {:?}, expected {:?}",
                self.deterministic.nu().shape(),
                (p, ndet)
            )));
        }
        if self.e1_mean.len() != self.basis.pixels() {
            return Err(Error::dims(
                "model-field mean",
                self.basis.pixels(),
                self.e1_mean.len(),
            ));
        }
        Ok(())
    }

    /// Serialises the model; `basis_ref` names the basis file written next
    /// to it.
    pub fn to_document(&self, basis_ref: &str) -> Document {
        let mut doc = Document::new("bgl-model");
        let p = self.processes();
        doc.push("season", self.season);
        doc.push("p", p);
        doc.push("levels", self.levels());
        doc.push("ndet", self.deterministic.nu().ncols());
        doc.push("npix", self.basis.pixels());
        doc.push_f64("lambda", self.lambda);
        doc.push_f64("rho", self.rho);
        doc.push(
            "tau2",
            self.tau2
                .iter()
                .map(|&t| gsf::fmt_f64(t))
                .collect::<Vec<_>>()
                .join(","),
        );
        doc.push("basis", basis_ref);
        doc.push("seasons", self.seasons.encode());
        doc.push("iterations", self.trace.iterations());
        doc.push("converged", self.trace.converged);
        let payload = doc.payload_mut();
        for b in &self.q {
            gsf::push_matrix(payload, b);
        }
        gsf::push_matrix(payload, self.deterministic.nu());
        payload.extend(self.e1_mean.iter());
        doc
    }

    pub fn write(&self, path: &Path, basis_ref: &str) -> Result<()> {
        self.to_document(basis_ref).write(path)
    }

    /// Reads a model and the basis file it references (resolved relative to
    /// the model file's directory).
    pub fn read(path: &Path) -> Result<Self> {
        let doc = Document::read(path)?;
        if doc.kind() != "bgl-model" {
            return Err(Error::MalformedHeader(format!(
                "expected kind=bgl-model, got {}",
                doc.kind()
            )));
        }
        let basis_path = path
            .parent()
            .unwrap_or(Path::new("."))
            .join(doc.get("basis")?);
        let (basis, _) = BasisSet::read(&basis_path)?;
        let season: Season = doc.get("season")?.parse()?;
        let p = doc.get_usize("p")?;
        let levels = doc.get_usize("levels")?;
        let ndet = doc.get_usize("ndet")?;
        let npix = doc.get_usize("npix")?;
        if levels > basis.total() {
            return Err(Error::MalformedHeader(format!(
                "levels={levels} exceeds basis size {}",
                basis.total()
            )));
        }
        let basis = basis::split_basis(&basis, basis::SplitRule::FixedL(levels.max(1)))?;
        if season != basis.season() || npix != basis.pixels() || levels + ndet != basis.total() {
            return Err(Error::MalformedHeader(format!(
                "model header does not match basis file {}",
                basis_path.display()
            )));
        }
        let tau2 = doc.get_f64_list("tau2")?;
        if tau2.len() != p {
            return Err(Error::dims("tau2 entries", p, tau2.len()));
        }
        doc.expect_payload("bgl-model payload", levels * p * p + p * ndet + npix)?;
        let data = doc.payload();
        let q = (0..levels)
            .map(|l| gsf::take_matrix(&data[l * p * p..], p, p))
            .collect();
        let off = levels * p * p;
        let nu = gsf::take_matrix(&data[off..], p, ndet);
        let e1_mean = DVector::from_column_slice(&data[off + p * ndet..off + p * ndet + npix]);
        let converged = doc.get("converged")? == "true";
        let model = Self {
            q,
            tau2,
            lambda: doc.get_f64("lambda")?,
            rho: doc.get_f64("rho")?,
            season,
            seasons: SeasonMap::decode(doc.get("seasons")?)?,
            basis,
            deterministic: DeterministicFit::new(nu),
            e1_mean,
            trace: FitTrace {
                objectives: Vec::new(),
                converged,
            },
        };
        model.validate()?;
        Ok(model)
    }
}

/// White-noise variances: energy of each process left after removing its
/// stochastic-basis projection and its deterministic mean, per residual
/// degree of freedom `T (n − L)`, floored at `floor × marginal variance`.
///
/// Only the `L` stochastic columns are projected out. When the EOFs come
/// from the same residuals, the full `T`-column span reproduces them
/// exactly and would leave nothing to estimate the noise from.
pub fn estimate_noise(residuals: &ResidualPair, basis: &BasisSet, floor: f64) -> Result<Vec<f64>> {
    let n = residuals.pixels();
    if basis.pixels() != n {
        return Err(Error::dims("basis pixels", n, basis.pixels()));
    }
    let t = residuals.months();
    if t == 0 {
        return Err(Error::InsufficientData("no training months".into()));
    }
    let phi = basis.phi();
    let psi = basis.psi();
    let dof = (t * n.saturating_sub(phi.ncols()).max(1)) as f64;
    Ok((0..2)
        .map(|j| {
            let e = residuals.process(j);
            let mean = residuals.time_mean(j);
            let det = &psi * (psi.transpose() * &mean);
            let mut raw = 0.0;
            for row in e.row_iter() {
                let r = row.transpose() - &det;
                let inside = phi.transpose() * &r;
                raw += (r.norm_squared() - inside.norm_squared()).max(0.0);
            }
            raw /= dof;
            let var = e
                .row_iter()
                .map(|row| {
                    row.iter()
                        .zip(mean.iter())
                        .map(|(x, m)| (x - m) * (x - m))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / (t * n) as f64;
            let lower = if var > 0.0 { floor * var } else { floor };
            raw.max(lower).max(f64::MIN_POSITIVE)
        })
        .collect())
}

/// Fits `Q` with `τ²` from [`estimate_noise`].
pub fn fit(
    residuals: &ResidualPair,
    basis: &BasisSet,
    lambda: f64,
    rho: f64,
    opts: &FitOptions,
) -> Result<BglModel> {
    let tau2 = estimate_noise(residuals, basis, opts.tau_floor)?;
    fit_with_noise(residuals, basis, tau2, lambda, rho, opts)
}

/// Fits `Q` with the given noise variances held fixed.
pub fn fit_with_noise(
    residuals: &ResidualPair,
    basis: &BasisSet,
    tau2: Vec<f64>,
    lambda: f64,
    rho: f64,
    opts: &FitOptions,
) -> Result<BglModel> {
    if residuals.season() != basis.season() {
        return Err(Error::GroupMismatch(format!(
            "residuals for {} but basis for {}",
            residuals.season(),
            basis.season()
        )));
    }
    if residuals.pixels() != basis.pixels() {
        return Err(Error::dims(
            "basis pixels",
            residuals.pixels(),
            basis.pixels(),
        ));
    }
    let deterministic = basis::fit_deterministic(residuals, basis)?;
    let phi = basis.phi();
    let st = SampleStats::from_processes(&[residuals.e1(), residuals.e2()], &phi)?;
    let (q, trace) = fit_precision(&st, &tau2, lambda, rho, opts)?;
    log::debug!(
        "{}: {} outer iterations, objective {:?}",
        basis.season(),
        trace.iterations(),
        trace.objectives.last()
    );
    let mut model = BglModel::from_parts(
        q,
        tau2,
        lambda,
        rho,
        basis.clone(),
        deterministic,
        DVector::zeros(residuals.pixels()),
        SeasonMap::default(),
    )?;
    model.trace = trace;
    Ok(model)
}
