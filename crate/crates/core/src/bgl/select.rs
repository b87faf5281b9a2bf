//! Cross-validated choice of `(λ, ρ)`.

use crate::basis::{BasisSet, ResidualPair};
use crate::error::{Error, Result};
use crate::predict::{PredictOptions, Predictor};

use super::{fit, FitOptions};

pub type PenaltyGrid = Vec<(f64, f64)>;

/// Selected penalties with the held-out score of every grid entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub lambda: f64,
    pub rho: f64,
    /// Position of the selected pair in the grid.
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Contiguous month blocks: fold `k` holds rows `⌊kT/K⌋..⌊(k+1)T/K⌋`.
pub fn fold_rows(months: usize, folds: usize) -> Vec<Vec<usize>> {
    (0..folds)
        .map(|k| (k * months / folds..(k + 1) * months / folds).collect())
        .collect()
}

/// K-fold cross-validation over training months. Each fold refits the
/// model on the remaining months (same basis) and scores the predicted
/// observation residual of the held-out months by mean squared error. The
/// first grid entry wins ties.
pub fn select_penalties(
    residuals: &ResidualPair,
    basis: &BasisSet,
    grid: &[(f64, f64)],
    folds: usize,
    opts: &FitOptions,
) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(Error::Config("empty penalty grid".into()));
    }
    let t = residuals.months();
    if folds < 2 || t < folds {
        return Err(Error::InsufficientData(format!(
            "{t} months for {folds} folds"
        )));
    }
    if grid.len() == 1 {
        return Ok(CvOutcome {
            lambda: grid[0].0,
            rho: grid[0].1,
            index: 0,
            scores: vec![f64::NAN],
        });
    }
    let blocks = fold_rows(t, folds);
    let inner = FitOptions {
        exec: crate::par::Exec::Sequential,
        ..*opts
    };
    let jobs = grid.len() * folds;
    let errors = opts.exec.try_map(jobs, |job| -> Result<(f64, usize)> {
        let (g, k) = (job / folds, job % folds);
        let held = &blocks[k];
        let train: Vec<usize> = (0..t).filter(|r| !held.contains(r)).collect();
        let model = fit(
            &residuals.select_rows(&train),
            basis,
            grid[g].0,
            grid[g].1,
            &inner,
        )?;
        let predictor = Predictor::new(&model)?;
        let mut sse = 0.0;
        for &row in held {
            let e1 = residuals.e1().row(row).transpose();
            let (pred, _, _) = predictor.residual(&e1, PredictOptions::default())?;
            let truth = residuals.e2().row(row);
            sse += pred
                .iter()
                .zip(truth.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok((sse, held.len() * residuals.pixels()))
    })?;
    let scores: Vec<f64> = (0..grid.len())
        .map(|g| {
            let (sse, count) = errors[g * folds..(g + 1) * folds]
                .iter()
                .fold((0.0, 0usize), |(a, c), (s, n)| (a + s, c + n));
            sse / count as f64
        })
        .collect();
    let mut best = 0;
    for (g, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = g;
        }
    }
    log::debug!("penalty CV scores {scores:?}, selected {:?}", grid[best]);
    Ok(CvOutcome {
        lambda: grid[best].0,
        rho: grid[best].1,
        index: best,
        scores,
    })
}
