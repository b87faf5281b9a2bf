//! Stage-2 prediction for months without observations.
//!
//! The model-field residual `e1` of a future month is projected onto the
//! stochastic basis (GLS, which coincides with OLS under the fitted
//! covariance), turned into the posterior of `ω1`, and pushed through the
//! per-level bivariate normal to obtain `ω2`. The observation-scale residual
//! estimate is `Φ ω̂2 + ψ ν2`.

use nalgebra::{DMatrix, DVector};

use crate::bgl::BglModel;
use crate::error::{Error, Result};
use crate::grid::YearMonth;
use crate::linalg;

/// GLS estimate of `ω1` and its sampling covariance `(ΦᵀΣ1⁻¹Φ)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlsEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Posterior of `ω1` given the model-field residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Omega1Posterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Omega1Posterior {
    /// A point value with no uncertainty.
    pub fn exact(mean: DVector<f64>) -> Self {
        let l = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(l, l),
        }
    }
}

/// Predicted observation-process coefficients for one month.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPrediction {
    pub omega2_mean: DVector<f64>,
    pub omega2_cov: DMatrix<f64>,
    pub month: Option<YearMonth>,
}

impl CoefficientPrediction {
    /// `Var[ω2l | e1]` per level.
    pub fn omega2_var(&self) -> DVector<f64> {
        self.omega2_cov.diagonal()
    }
}

/// Predicted fine-scale field for one month.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthPrediction {
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
    pub coefficients: CoefficientPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictOptions {
    /// Add `τ2²` to the predictive variance.
    pub nugget_in_sd: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { nugget_in_sd: true }
    }
}

/// Per-model quantities shared by every predicted month.
#[derive(Debug, Clone)]
pub struct Predictor<'a> {
    model: &'a BglModel,
    phi: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    orthonormal: bool,
    det: [DVector<f64>; 2],
    /// prior variance of ω1 per level
    c: DVector<f64>,
    /// regression coefficient of ω2 on ω1 per level
    beta: DVector<f64>,
    /// Var[ω2 | ω1] per level
    cond_var: DVector<f64>,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a BglModel) -> Result<Self> {
        if model.processes() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "prediction needs two processes, model has {}",
                model.processes()
            )));
        }
        let basis = model.basis();
        let phi = basis.phi();
        let l = phi.ncols();
        let gram = linalg::symmetrize(&(phi.transpose() * &phi));
        let orthonormal = (&gram - DMatrix::identity(l, l))
            .iter()
            .all(|x| x.abs() <= 1e-10);
        let gram_inv = if orthonormal {
            DMatrix::identity(l, l)
        } else {
            linalg::inv_spd(&gram, "basis Gram matrix")
                .map_err(|_| Error::SingularSystem("basis Gram matrix".into()))?
        };
        let psi = basis.psi();
        let det = [
            model.deterministic().field(&psi, 0),
            model.deterministic().field(&psi, 1),
        ];
        let mut c = DVector::zeros(l);
        let mut beta = DVector::zeros(l);
        let mut cond_var = DVector::zeros(l);
        for (i, q) in model.q().iter().enumerate() {
            if !(q[(1, 1)] > 0.0) {
                return Err(Error::not_pd(format!("Q block {i}")));
            }
            c[i] = model.level_covariance(i)?[(0, 0)];
            beta[i] = -q[(1, 0)] / q[(1, 1)];
            cond_var[i] = 1.0 / q[(1, 1)];
        }
        Ok(Self {
            model,
            phi,
            gram_inv,
            orthonormal,
            det,
            c,
            beta,
            cond_var,
        })
    }

    pub fn model(&self) -> &BglModel {
        self.model
    }

    /// Deterministic part `ψ ν_j` of process `j`.
    pub fn deterministic(&self, j: usize) -> &DVector<f64> {
        &self.det[j]
    }

    pub fn gls_omega1(&self, e1: &DVector<f64>) -> Result<GlsEstimate> {
        if e1.len() != self.phi.nrows() {
            return Err(Error::dims(
                "model residual length",
                self.phi.nrows(),
                e1.len(),
            ));
        }
        if e1.iter().any(|x| !x.is_finite()) {
            return Err(Error::MalformedInput("non-finite model residual".into()));
        }
        let centred = e1 - &self.det[0];
        let mean = &self.gram_inv * (self.phi.transpose() * centred);
        let cov = DMatrix::from_diagonal(&self.c) + &self.gram_inv * self.model.tau2()[0];
        Ok(GlsEstimate { mean, cov })
    }

    /// Posterior of `ω1` from its GLS estimate: with `M = C + τ1² G⁻¹` the
    /// posterior mean is `C M⁻¹ ω̂1` and the covariance `C − C M⁻¹ C`.
    pub fn omega1_posterior(&self, gls: &GlsEstimate) -> Result<Omega1Posterior> {
        let l = self.c.len();
        if l == 0 {
            return Ok(Omega1Posterior::exact(DVector::zeros(0)));
        }
        if self.orthonormal {
            let tau = self.model.tau2()[0];
            let shrink = DVector::from_fn(l, |i, _| self.c[i] / (self.c[i] + tau));
            let mean = gls.mean.component_mul(&shrink);
            let var = DVector::from_fn(l, |i, _| self.c[i] * tau / (self.c[i] + tau));
            return Ok(Omega1Posterior {
                mean,
                cov: DMatrix::from_diagonal(&var),
            });
        }
        let cmat = DMatrix::from_diagonal(&self.c);
        let chol = linalg::cholesky(&linalg::symmetrize(&gls.cov), "GLS covariance")
            .map_err(|_| Error::SingularSystem("GLS covariance".into()))?;
        let mean = &cmat * chol.solve(&gls.mean);
        let cov = linalg::symmetrize(&(&cmat - &cmat * chol.solve(&cmat)));
        Ok(Omega1Posterior { mean, cov })
    }

    /// Law of total expectation and variance per level:
    /// `E[ω2] = β m`, `Var[ω2] = (Q_l)_22⁻¹ + β² Var[ω1]` with
    /// `β = −(Q_l)_21 / (Q_l)_22`.
    pub fn condition_on_omega1(
        &self,
        posterior: &Omega1Posterior,
    ) -> Result<CoefficientPrediction> {
        let l = self.beta.len();
        if posterior.mean.len() != l || posterior.cov.shape() != (l, l) {
            return Err(Error::dims("omega1 levels", l, posterior.mean.len()));
        }
        let mean = posterior.mean.component_mul(&self.beta);
        let cov = DMatrix::from_fn(l, l, |a, b| {
            let prior = if a == b { self.cond_var[a] } else { 0.0 };
            prior + self.beta[a] * self.beta[b] * posterior.cov[(a, b)]
        });
        Ok(CoefficientPrediction {
            omega2_mean: mean,
            omega2_cov: cov,
            month: None,
        })
    }

    pub fn condition_omega2(&self, gls: &GlsEstimate) -> Result<CoefficientPrediction> {
        self.condition_on_omega1(&self.omega1_posterior(gls)?)
    }

    /// Predicted observation-process residual `Φ ω̂2 + ψ ν2` and its
    /// pointwise variance.
    pub fn residual(
        &self,
        e1: &DVector<f64>,
        opts: PredictOptions,
    ) -> Result<(DVector<f64>, DVector<f64>, CoefficientPrediction)> {
        let coef = self.condition_omega2(&self.gls_omega1(e1)?)?;
        let mean = &self.phi * &coef.omega2_mean + &self.det[1];
        let nugget = if opts.nugget_in_sd {
            self.model.tau2()[1]
        } else {
            0.0
        };
        let var = if self.orthonormal {
            let v = coef.omega2_var();
            DVector::from_fn(self.phi.nrows(), |s, _| {
                self.phi
                    .row(s)
                    .iter()
                    .zip(v.iter())
                    .map(|(f, w)| f * f * w)
                    .sum::<f64>()
                    + nugget
            })
        } else {
            let pc = &self.phi * &coef.omega2_cov;
            DVector::from_fn(self.phi.nrows(), |s, _| {
                pc.row(s).dot(&self.phi.row(s)) + nugget
            })
        };
        Ok((mean, var, coef))
    }

    /// `ŷ = μ̂ + Φ ω̂2 + ψ ν2` with predictive standard deviation.
    pub fn downscale_month(
        &self,
        trend_month: &[f64],
        e1: &DVector<f64>,
        month: Option<YearMonth>,
        opts: PredictOptions,
    ) -> Result<MonthPrediction> {
        if trend_month.len() != self.phi.nrows() {
            return Err(Error::dims(
                "trend length",
                self.phi.nrows(),
                trend_month.len(),
            ));
        }
        let (resid, var, mut coefficients) = self.residual(e1, opts)?;
        coefficients.month = month;
        let mean = DVector::from_fn(resid.len(), |s, _| trend_month[s] + resid[s]);
        let sd = var.map(|v| v.max(0.0).sqrt());
        Ok(MonthPrediction {
            mean,
            sd,
            coefficients,
        })
    }
}

pub fn gls_omega1(e1_future: &DVector<f64>, model: &BglModel) -> Result<GlsEstimate> {
    Predictor::new(model)?.gls_omega1(e1_future)
}

pub fn condition_omega2(gls: &GlsEstimate, model: &BglModel) -> Result<CoefficientPrediction> {
    Predictor::new(model)?.condition_omega2(gls)
}

pub fn condition_on_omega1(
    posterior: &Omega1Posterior,
    model: &BglModel,
) -> Result<CoefficientPrediction> {
    Predictor::new(model)?.condition_on_omega1(posterior)
}

pub fn downscale_month(
    trend_month: &[f64],
    e1_future: &DVector<f64>,
    model: &BglModel,
    opts: PredictOptions,
) -> Result<MonthPrediction> {
    Predictor::new(model)?.downscale_month(trend_month, e1_future, None, opts)
}
