//! EOF basis for the Stage-2 residuals.
//!
//! EOFs are the left singular vectors of the time-centred `[n × T]` training
//! residual matrix. The leading `L` columns are the stochastic basis `φ`, the
//! remaining `T − L` the deterministic basis `ψ` whose coefficients are fitted
//! by least squares against the removed time mean.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridKind, GridSpec, Season};
use crate::gsf::{self, Document};
use crate::linalg;

/// Training residuals of one season, one row per training month.
///
/// `e1` is the interpolated model field minus its pooled seasonal mean and
/// `e2` the observations minus the Stage-1 trend.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPair {
    e1: DMatrix<f64>,
    e2: DMatrix<f64>,
    season: Season,
}

impl ResidualPair {
    pub fn new(e1: DMatrix<f64>, e2: DMatrix<f64>, season: Season) -> Result<Self> {
        if e1.shape() != e2.shape() {
            return Err(Error::ShapeMismatch(format!(
                "e1 is {:?} but e2 is {:?}",
                e1.shape(),
                e2.shape()
            )));
        }
        if let Some(i) = e1.iter().chain(e2.iter()).position(|x| !x.is_finite()) {
            let rows = e1.nrows().max(1);
            return Err(Error::NonFiniteValue {
                row: i % rows,
                cell: (i / rows) % e1.ncols().max(1),
            });
        }
        Ok(Self { e1, e2, season })
    }

    pub fn e1(&self) -> &DMatrix<f64> {
        &self.e1
    }
    pub fn e2(&self) -> &DMatrix<f64> {
        &self.e2
    }
    /// Residual matrix of process `j` (0 for the model, 1 for observations).
    pub fn process(&self, j: usize) -> &DMatrix<f64> {
        match j {
            0 => &self.e1,
            1 => &self.e2,
            _ => panic!("process index {j} out of range"),
        }
    }
    pub fn season(&self) -> Season {
        self.season
    }
    pub fn months(&self) -> usize {
        self.e1.nrows()
    }
    pub fn pixels(&self) -> usize {
        self.e1.ncols()
    }

    /// Rows `rows` of both processes.
    pub fn select_rows(&self, rows: &[usize]) -> ResidualPair {
        let pick =
            |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), m.ncols(), |i, c| m[(rows[i], c)]);
        ResidualPair {
            e1: pick(&self.e1),
            e2: pick(&self.e2),
            season: self.season,
        }
    }

    /// Time mean of process `j`, one value per pixel.
    pub fn time_mean(&self, j: usize) -> DVector<f64> {
        let m = self.process(j);
        let t = m.nrows().max(1) as f64;
        DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / t))
    }
}

/// Which residual field the EOFs are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EofSource {
    #[default]
    Obs,
    Pooled,
}

/// How many leading EOFs are treated as stochastic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRule {
    FixedL(usize),
    VarianceThreshold(f64),
}

impl Default for SplitRule {
    fn default() -> Self {
        SplitRule::VarianceThreshold(0.95)
    }
}

/// Orthonormal EOF columns `[φ | ψ]` with their singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    columns: DMatrix<f64>,
    singular_values: Vec<f64>,
    nstoch: usize,
    rank: usize,
    season: Season,
}

impl BasisSet {
    /// Wraps explicit orthonormal columns, all stochastic. Mostly useful for
    /// tests and synthetic truth.
    pub fn from_columns(
        columns: DMatrix<f64>,
        singular_values: Vec<f64>,
        season: Season,
    ) -> Result<Self> {
        if singular_values.len() != columns.ncols() {
            return Err(Error::dims(
                "singular values",
                columns.ncols(),
                singular_values.len(),
            ));
        }
        let nstoch = columns.ncols();
        Ok(Self {
            rank: singular_values.iter().filter(|&&s| s > 0.0).count(),
            columns,
            singular_values,
            nstoch,
            season,
        })
    }

    /// All `T` columns.
    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }
    /// Stochastic columns `φ` (`n × L`).
    pub fn phi(&self) -> DMatrix<f64> {
        self.columns.columns(0, self.nstoch).into_owned()
    }
    /// Deterministic columns `ψ` (`n × (T − L)`).
    pub fn psi(&self) -> DMatrix<f64> {
        self.columns
            .columns(self.nstoch, self.columns.ncols() - self.nstoch)
            .into_owned()
    }
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }
    /// `L`.
    pub fn nstoch(&self) -> usize {
        self.nstoch
    }
    /// `T`.
    pub fn total(&self) -> usize {
        self.columns.ncols()
    }
    pub fn pixels(&self) -> usize {
        self.columns.nrows()
    }
    /// Number of singular values treated as non-zero. Columns beyond it were
    /// completed to an orthonormal set.
    pub fn rank(&self) -> usize {
        self.rank
    }
    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.total()
    }
    pub fn season(&self) -> Season {
        self.season
    }

    /// Fraction of variance carried by each column.
    pub fn variance_fractions(&self) -> Vec<f64> {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        self.singular_values
            .iter()
            .map(|s| if total > 0.0 { s * s / total } else { 0.0 })
            .collect()
    }

    pub fn to_document(&self, grid: &GridSpec) -> Document {
        let mut doc = Document::new("basis");
        gsf::push_grid(&mut doc, grid);
        doc.push("season", self.season);
        doc.push("ncomp", self.total());
        doc.push("nstoch", self.nstoch);
        doc.push("rank", self.rank);
        gsf::push_mask(&mut doc, grid);
        // payload: T singular values, then the n × T column matrix row-major
        let payload = doc.payload_mut();
        payload.extend_from_slice(&self.singular_values);
        gsf::push_matrix(payload, &self.columns);
        doc
    }

    pub fn from_document(doc: &Document) -> Result<(Self, GridSpec)> {
        if doc.kind() != "basis" {
            return Err(Error::MalformedHeader(format!(
                "expected kind=basis, got {}",
                doc.kind()
            )));
        }
        let grid = gsf::read_grid(doc, GridKind::Fine)?;
        let season: Season = doc.get("season")?.parse()?;
        let t = doc.get_usize("ncomp")?;
        let nstoch = doc.get_usize("nstoch")?;
        let rank = doc.get_usize("rank")?;
        if nstoch > t || rank > t {
            return Err(Error::MalformedHeader(format!(
                "nstoch={nstoch}, rank={rank} exceed ncomp={t}"
            )));
        }
        let n = grid.active_count();
        doc.expect_payload("basis payload", t + n * t)?;
        let data = doc.payload();
        let singular_values = data[..t].to_vec();
        let columns = gsf::take_matrix(&data[t..], n, t);
        Ok((
            Self {
                columns,
                singular_values,
                nstoch,
                rank,
                season,
            },
            grid,
        ))
    }

    pub fn write(&self, path: &Path, grid: &GridSpec) -> Result<()> {
        self.to_document(grid).write(path)
    }

    pub fn read(path: &Path) -> Result<(Self, GridSpec)> {
        Self::from_document(&Document::read(path)?)
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.columns.transpose() * &self.columns;
        (g - DMatrix::identity(self.total(), self.total()))
            .iter()
            .fold(0.0f64, |a, x| a.max(x.abs()))
    }
}

/// Left singular vectors of the time-centred `[n × T]` residual matrix,
/// ordered by non-increasing singular value. Columns for zero singular
/// values are completed to an orthonormal set and reported through
/// [`BasisSet::rank`]. All `T` columns are marked stochastic; use
/// [`split_basis`] to choose `L`.
pub fn compute_eofs(residuals: &ResidualPair, source: EofSource) -> Result<BasisSet> {
    let t = residuals.months();
    let n = residuals.pixels();
    if t < 2 {
        return Err(Error::InsufficientData(format!(
            "{t} training months, need at least 2"
        )));
    }
    if n < t {
        return Err(Error::InsufficientData(format!(
            "{n} pixels fewer than {t} training months"
        )));
    }
    let centred = |j: usize| -> DMatrix<f64> {
        let e = residuals.process(j);
        let mean = residuals.time_mean(j);
        DMatrix::from_fn(n, t, |s, k| e[(k, s)] - mean[s])
    };
    let x = match source {
        EofSource::Obs => centred(1),
        EofSource::Pooled => {
            let (a, b) = (centred(0), centred(1));
            let mut x = DMatrix::zeros(n, 2 * t);
            x.columns_mut(0, t).copy_from(&a);
            x.columns_mut(t, t).copy_from(&b);
            x
        }
    };
    // Singular pairs from the small Gram matrix: nalgebra's bidiagonal SVD
    // loses accuracy on the trailing values when the centred matrix is
    // rank-deficient, which it always is.
    let gram = linalg::symmetrize(&(x.transpose() * &x));
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });
    order.truncate(t);
    let sv: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    let smax = sv.first().copied().unwrap_or(0.0);
    let tol = smax * 1e-7;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let mut columns = DMatrix::zeros(n, t);
    for (j, &i) in order.iter().enumerate().take(rank) {
        let mut u = &x * eig.eigenvectors.column(i) / sv[j];
        for _ in 0..2 {
            for k in 0..j {
                let c = columns.column(k).dot(&u);
                u.axpy(-c, &columns.column(k).into_owned(), 1.0);
            }
        }
        // sign fixed so the largest-magnitude entry is positive
        let pivot = u
            .iter()
            .copied()
            .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        let norm = u.norm() * if pivot < 0.0 { -1.0 } else { 1.0 };
        columns.set_column(j, &(u / norm));
    }
    let singular_values: Vec<f64> = sv.iter().map(|&s| if s > tol { s } else { 0.0 }).collect();
    if rank < t {
        linalg::complete_orthonormal(&mut columns, rank);
    }
    Ok(BasisSet {
        columns,
        singular_values,
        nstoch: t,
        rank,
        season: residuals.season(),
    })
}

/// Chooses the number of stochastic columns.
///
/// `VarianceThreshold(f)` picks the smallest `L` whose cumulative variance
/// fraction reaches `f`.
pub fn split_basis(full: &BasisSet, rule: SplitRule) -> Result<BasisSet> {
    let t = full.total();
    let l = match rule {
        SplitRule::FixedL(l) => {
            if l == 0 || l > t {
                return Err(Error::InvalidRule(format!("L={l} outside 1..={t}")));
            }
            l
        }
        SplitRule::VarianceThreshold(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidRule(format!(
                    "variance fraction {f} outside (0, 1]"
                )));
            }
            let energy: Vec<f64> = full.singular_values.iter().map(|s| s * s).collect();
            let total: f64 = energy.iter().sum();
            if total == 0.0 {
                1
            } else {
                let target = f * total * (1.0 - 1e-12);
                let mut cum = 0.0;
                let mut l = t;
                for (i, e) in energy.iter().enumerate() {
                    cum += e;
                    if cum >= target {
                        l = i + 1;
                        break;
                    }
                }
                l
            }
        }
    };
    Ok(BasisSet {
        nstoch: l,
        ..full.clone()
    })
}

/// Least-squares coefficients of the deterministic columns, one row per
/// process.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicFit {
    nu: DMatrix<f64>,
}

impl DeterministicFit {
    pub fn new(nu: DMatrix<f64>) -> Self {
        Self { nu }
    }
    pub fn empty(processes: usize) -> Self {
        Self {
            nu: DMatrix::zeros(processes, 0),
        }
    }
    /// `p × (T − L)`.
    pub fn nu(&self) -> &DMatrix<f64> {
        &self.nu
    }
    /// Deterministic part `ψ ν_j` of process `j`.
    pub fn field(&self, psi: &DMatrix<f64>, j: usize) -> DVector<f64> {
        if self.nu.ncols() == 0 {
            return DVector::zeros(psi.nrows());
        }
        psi * self.nu.row(j).transpose()
    }
}

/// `ν_j = ψᵀ ē_j` for orthonormal `ψ`, where `ē_j` is the time-mean training
/// residual of process `j`.
pub fn fit_deterministic(residuals: &ResidualPair, basis: &BasisSet) -> Result<DeterministicFit> {
    if residuals.pixels() != basis.pixels() {
        return Err(Error::dims(
            "basis pixels",
            residuals.pixels(),
            basis.pixels(),
        ));
    }
    let psi = basis.psi();
    if psi.ncols() == 0 {
        return Ok(DeterministicFit::empty(2));
    }
    let mut nu = DMatrix::zeros(2, psi.ncols());
    for j in 0..2 {
        let coef = psi.transpose() * residuals.time_mean(j);
        nu.set_row(j, &coef.transpose());
    }
    Ok(DeterministicFit { nu })
}
