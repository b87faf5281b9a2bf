//! Config-driven end-to-end pipeline: simulate, fit, predict, validate.
//!
//! Output layout under `paths.output`:
//!
//! ```text
//! config.resolved.toml
//! trend/obs_clim.gsf, trend/model_clim.gsf
//! models/basis_<season>.gsf, models/bgl_<season>.gsf
//! models/fit_trace_<season>.csv, models/cv_<season>.csv
//! predict/mean_YYYY-MM.gsf, predict/sd_YYYY-MM.gsf, predict/provenance.json
//! validate/report.csv, validate/mse_<method>.{csv,pgm}
//! validate/ratio_bgl_standard.{csv,pgm}
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{self, EofSource, ResidualPair, SplitRule};
use crate::bgl::{self, BglModel, FitOptions, SampleStats};
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, Season, SeasonMap, TimeIndex, YearMonth};
use crate::gsf;
use crate::metrics::{self, GroupBy, RangeSource, Region, SsimParams, ValidationReport};
use crate::par::Exec;
use crate::predict::{PredictOptions, Predictor};
use crate::synthetic::{self, ScenarioSpec};
use crate::trend::{self, Climatology, Grouping, Interpolator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Coarse model field covering training, hold-out and future months.
    pub coarse: PathBuf,
    /// Fine observations; only months up to `training_end` are used for fitting.
    pub obs: PathBuf,
    /// Fine truth for the hold-out window; defaults to `obs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub training_end: YearMonth,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_start: Option<YearMonth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_end: Option<YearMonth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeasonsConfig {
    pub summer: Vec<u8>,
    pub autumn: Vec<u8>,
    pub winter: Vec<u8>,
    pub spring: Vec<u8>,
}

impl Default for SeasonsConfig {
    fn default() -> Self {
        let map = SeasonMap::default();
        Self {
            summer: map.months_of(Season::Summer),
            autumn: map.months_of(Season::Autumn),
            winter: map.months_of(Season::Winter),
            spring: map.months_of(Season::Spring),
        }
    }
}

impl SeasonsConfig {
    pub fn map(&self) -> Result<SeasonMap> {
        SeasonMap::from_lists(&[
            (Season::Summer, self.summer.clone()),
            (Season::Autumn, self.autumn.clone()),
            (Season::Winter, self.winter.clone()),
            (Season::Spring, self.spring.clone()),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub source: EofSource,
    pub split: SplitRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyMode {
    Fixed,
    #[default]
    Grid,
}

/// Penalties are either fixed or chosen by blocked cross-validation over
/// `lambdas × rhos`. With `relative`, every value is a multiple of the
/// season's data-driven `λ_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub mode: PenaltyMode,
    pub lambda: f64,
    pub rho: f64,
    pub lambdas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub relative: bool,
    pub folds: usize,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            mode: PenaltyMode::Grid,
            lambda: 0.0,
            rho: 0.0,
            lambdas: vec![0.0, 0.01, 0.05, 0.2, 1.0],
            rhos: vec![0.0, 0.05],
            relative: true,
            folds: 5,
        }
    }
}

impl PenaltyConfig {
    fn grid(&self, scale: f64) -> Vec<(f64, f64)> {
        let s = if self.relative { scale } else { 1.0 };
        match self.mode {
            PenaltyMode::Fixed => vec![(self.lambda * s, self.rho * s)],
            PenaltyMode::Grid => self
                .lambdas
                .iter()
                .flat_map(|&l| self.rhos.iter().map(move |&r| (l * s, r * s)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub enabled: bool,
    pub nugget_in_sd: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            enabled: true,
            nugget_in_sd: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    /// Sub-grid scored by SSIM; the whole grid when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    pub window: usize,
    pub range: RangeSource,
}

impl Default for SsimConfig {
    fn default() -> Self {
        let d = SsimParams::default();
        Self {
            region: None,
            window: d.window,
            range: d.range,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    pub window: WindowConfig,
    #[serde(default)]
    pub seasons: SeasonsConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub ssim: SsimConfig,
    /// Synthetic scenario written by `simulate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSpec>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Config whose paths point into `dir` and whose windows follow the
    /// scenario's calendar.
    pub fn for_scenario(spec: ScenarioSpec, dir: &Path) -> Self {
        let holdout = spec.holdout();
        Self {
            seed: spec.seed,
            paths: PathsConfig {
                coarse: dir.join("coarse.gsf"),
                obs: dir.join("obs.gsf"),
                truth: Some(dir.join("truth.gsf")),
                output: dir.join("out"),
            },
            window: WindowConfig {
                training_end: spec.training_end(),
                holdout_start: holdout.map(|h| h.0),
                holdout_end: holdout.map(|h| h.1),
            },
            seasons: SeasonsConfig::default(),
            basis: BasisConfig::default(),
            penalty: PenaltyConfig::default(),
            fit: FitOptions::default(),
            stage2: Stage2Config::default(),
            ssim: SsimConfig::default(),
            scenario: Some(spec),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.seasons.map()?;
        let w = &self.window;
        match (w.holdout_start, w.holdout_end) {
            (Some(a), Some(b)) => {
                if a <= w.training_end {
                    return Err(Error::Config(format!(
                        "hold-out start {a} overlaps the training window ending {}",
                        w.training_end
                    )));
                }
                if b < a {
                    return Err(Error::Config(format!(
                        "hold-out end {b} precedes its start {a}"
                    )));
                }
            }
            (None, None) => {}
            _ => return Err(Error::Config("hold-out needs both start and end".into())),
        }
        let p = &self.penalty;
        let values = [p.lambda, p.rho]
            .into_iter()
            .chain(p.lambdas.iter().copied())
            .chain(p.rhos.iter().copied());
        if values.into_iter().any(|v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(
                "penalties must be finite and non-negative".into(),
            ));
        }
        if p.mode == PenaltyMode::Grid && (p.lambdas.is_empty() || p.rhos.is_empty()) {
            return Err(Error::Config(
                "penalty grid needs at least one lambda and one rho".into(),
            ));
        }
        if self.ssim.window == 0 {
            return Err(Error::Config("ssim window must be positive".into()));
        }
        if let Some(s) = &self.scenario {
            s.validate()?;
        }
        Ok(())
    }

    pub fn season_map(&self) -> SeasonMap {
        self.seasons.map().unwrap_or_default()
    }

    pub fn ssim_params(&self) -> SsimParams {
        SsimParams {
            window: self.ssim.window,
            range: self.ssim.range,
            ..SsimParams::default()
        }
    }

    fn holdout_contains(&self, m: YearMonth) -> bool {
        match (self.window.holdout_start, self.window.holdout_end) {
            (Some(a), Some(b)) => a <= m && m <= b,
            _ => false,
        }
    }
}

/// A loaded config together with the directory its relative paths resolve
/// against and the execution mode.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    root: PathBuf,
    exec: Exec,
}

/// Everything `fit` produces.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub obs_clim: Climatology,
    pub model_clim: Climatology,
    /// Seasonal Stage-2 models in season order; empty with Stage 2 off.
    pub models: Vec<BglModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationOutcome {
    pub report: ValidationReport,
    /// Invariant violations; empty when every check passed.
    pub failures: Vec<String>,
}

impl ValidationOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// One predicted month across every method.
struct MonthRow {
    gcm: Vec<f64>,
    standard: Vec<f64>,
    bgl: Option<(DVector<f64>, DVector<f64>)>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            root: root.into(),
            exec: Exec::default(),
        })
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config =
            PipelineConfig::from_toml(&text).map_err(|e| e.context(path.display().to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, root)
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut PipelineConfig {
        &mut self.config
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.output)
    }

    fn out(&self, sub: &str) -> Result<PathBuf> {
        let dir = self.output_dir().join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            exec: self.exec,
            ..self.config.fit
        }
    }

    fn write_resolved_config(&self) -> Result<()> {
        let dir = self.out("")?;
        let path = dir.join("config.resolved.toml");
        std::fs::write(&path, self.config.to_toml()?).map_err(|e| Error::io(&path, e))
    }

    /// Generates the configured synthetic scenario and writes the coarse
    /// field, training observations, hold-out truth and truth sidecar.
    pub fn simulate(&self) -> Result<synthetic::Scenario> {
        let spec = ScenarioSpec {
            seed: self.config.seed,
            ..self
                .config
                .scenario
                .clone()
                .ok_or_else(|| Error::Config("simulate needs a [scenario] table".into()))?
        };
        let scenario = synthetic::generate(&spec)?;
        let paths = &self.config.paths;
        let truth_path = self.resolve(paths.truth.as_ref().unwrap_or(&paths.obs));
        for path in [
            self.resolve(&paths.coarse),
            self.resolve(&paths.obs),
            truth_path.clone(),
        ] {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        gsf::write_field(&scenario.coarse, &self.resolve(&paths.coarse))?;
        if paths.truth.is_some() {
            gsf::write_field(&scenario.obs, &self.resolve(&paths.obs))?;
            gsf::write_field(&scenario.truth, &truth_path)?;
        } else {
            gsf::write_field(&concat_time(&scenario.obs, &scenario.truth)?, &truth_path)?;
        }
        scenario.details.write(
            &truth_path.with_extension("json"),
            &sibling(&truth_path, "_basis.gsf"),
        )?;
        Ok(scenario)
    }

    fn read_inputs(&self) -> Result<(Field, Field)> {
        let coarse = gsf::read_field(&self.resolve(&self.config.paths.coarse))?;
        let obs = gsf::read_field(&self.resolve(&self.config.paths.obs))?;
        let end = self.config.window.training_end;
        let obs = obs.select(|m| m <= end)?;
        if obs.time().is_empty() {
            return Err(Error::InsufficientData(format!(
                "no observations up to {end}"
            )));
        }
        if let Some(m) = obs
            .time()
            .entries()
            .iter()
            .find(|&&m| coarse.time().position(m).is_none())
        {
            return Err(Error::MonthOutOfRange(format!(
                "{m}: observed but absent from the coarse field"
            )));
        }
        Ok((coarse, obs))
    }

    /// Stage 1 climatologies plus (unless disabled) four seasonal Stage-2
    /// models, all persisted under the output directory.
    pub fn fit(&self) -> Result<Fitted> {
        let (coarse, obs) = self.read_inputs()?;
        self.write_resolved_config()?;
        let train_months = obs.time().entries().to_vec();
        let coarse_train = coarse.select(|m| obs.time().position(m).is_some())?;
        let obs_clim = trend::climatology(&obs, Grouping::CalendarMonth, None)?;
        let model_clim = trend::climatology(&coarse_train, Grouping::CalendarMonth, None)?;
        let trend_dir = self.out("trend")?;
        obs_clim.write(&trend_dir.join("obs_clim.gsf"))?;
        model_clim.write(&trend_dir.join("model_clim.gsf"))?;
        if !self.config.stage2.enabled {
            return Ok(Fitted {
                obs_clim,
                model_clim,
                models: Vec::new(),
            });
        }
        let fine = obs.spec().clone();
        let interp = Interpolator::new(coarse.spec(), &fine)?;
        let trend_train =
            trend::estimate_trend_with(&interp, &coarse_train, &obs_clim, &model_clim, self.exec)?;
        let w_train = interp.apply(&coarse_train, self.exec)?;
        let seasons = self.config.season_map();
        let models = self.exec.try_map(Season::ALL.len(), |k| {
            let season = Season::ALL[k];
            let rows: Vec<usize> = (0..train_months.len())
                .filter(|&t| seasons.season_of(train_months[t].month) == season)
                .collect();
            self.fit_season(season, &rows, &w_train, &obs, &trend_train, &seasons)
                .map_err(|e| e.context(format!("season {season}")))
        })?;
        let dir = self.out("models")?;
        for m in &models {
            let s = m.season();
            m.basis()
                .write(&dir.join(format!("basis_{s}.gsf")), &fine)?;
            m.write(&dir.join(format!("bgl_{s}.gsf")), &format!("basis_{s}.gsf"))?;
            let mut trace = String::from("iteration,objective\n");
            for (i, f) in m.trace().objectives.iter().enumerate() {
                let _ = writeln!(trace, "{i},{f:?}");
            }
            let path = dir.join(format!("fit_trace_{s}.csv"));
            std::fs::write(&path, trace).map_err(|e| Error::io(&path, e))?;
            log::info!(
                "{s}: L={}, lambda={:.3e}, rho={:.3e}, {} outer iterations",
                m.levels(),
                m.lambda(),
                m.rho(),
                m.trace().iterations()
            );
        }
        Ok(Fitted {
            obs_clim,
            model_clim,
            models,
        })
    }

    fn fit_season(
        &self,
        season: Season,
        rows: &[usize],
        w_train: &Field,
        obs: &Field,
        trend_train: &Field,
        seasons: &SeasonMap,
    ) -> Result<BglModel> {
        if rows.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "{} training months",
                rows.len()
            )));
        }
        let n = obs.spec().active_count();
        let w = DMatrix::from_fn(rows.len(), n, |r, s| w_train.values()[(rows[r], s)]);
        let e1_mean = DVector::from_fn(n, |s, _| w.column(s).mean());
        let e1 = DMatrix::from_fn(rows.len(), n, |r, s| w[(r, s)] - e1_mean[s]);
        let e2 = DMatrix::from_fn(rows.len(), n, |r, s| {
            obs.values()[(rows[r], s)] - trend_train.values()[(rows[r], s)]
        });
        let residuals = ResidualPair::new(e1, e2, season)?;
        let full = basis::compute_eofs(&residuals, self.config.basis.source)?;
        if full.is_rank_deficient() {
            log::warn!(
                "{season}: residual matrix is rank deficient (rank {})",
                full.rank()
            );
        }
        let split = basis::split_basis(&full, self.config.basis.split)?;
        let opts = self.fit_options();
        let tau2 = bgl::estimate_noise(&residuals, &split, opts.tau_floor)?;
        let st = SampleStats::from_processes(&[residuals.e1(), residuals.e2()], &split.phi())?;
        let scale = bgl::lambda_max(&st, &tau2)?;
        let grid = self.config.penalty.grid(scale);
        let cv =
            bgl::select_penalties(&residuals, &split, &grid, self.config.penalty.folds, &opts)?;
        let mut table = String::from("lambda,rho,score\n");
        for (&(l, r), s) in grid.iter().zip(&cv.scores) {
            let _ = writeln!(table, "{l:?},{r:?},{s:?}");
        }
        let path = self.out("models")?.join(format!("cv_{season}.csv"));
        std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
        let model = bgl::fit_with_noise(&residuals, &split, tau2, cv.lambda, cv.rho, &opts)?;
        Ok(model
            .with_e1_mean(e1_mean)?
            .with_season_map(seasons.clone()))
    }

    /// Reads the persisted climatologies and models.
    pub fn load_fitted(&self) -> Result<Fitted> {
        let trend_dir = self.output_dir().join("trend");
        let read_clim = |name: &str| {
            let path = trend_dir.join(name);
            if !path.exists() {
                return Err(Error::ModelMissing(format!(
                    "{} (run fit first)",
                    path.display()
                )));
            }
            Climatology::read(&path)
        };
        let obs_clim = read_clim("obs_clim.gsf")?;
        let model_clim = read_clim("model_clim.gsf")?;
        let mut models = Vec::new();
        if self.config.stage2.enabled {
            for s in Season::ALL {
                let path = self
                    .output_dir()
                    .join("models")
                    .join(format!("bgl_{s}.gsf"));
                if !path.exists() {
                    return Err(Error::ModelMissing(format!(
                        "{} (run fit first)",
                        path.display()
                    )));
                }
                models.push(
                    BglModel::read(&path).map_err(|e| e.context(path.display().to_string()))?,
                );
            }
        }
        Ok(Fitted {
            obs_clim,
            model_clim,
            models,
        })
    }

    /// Predictions of every method for `months`, computed in parallel.
    fn predict_rows(
        &self,
        fitted: &Fitted,
        coarse: &Field,
        fine: &GridSpec,
        months: &[YearMonth],
    ) -> Result<Vec<MonthRow>> {
        let selected = coarse.select(|m| months.contains(&m))?;
        if let Some(m) = months
            .iter()
            .find(|&&m| selected.time().position(m).is_none())
        {
            return Err(Error::MonthOutOfRange(m.to_string()));
        }
        let interp = Interpolator::new(coarse.spec(), fine)?;
        let trend = trend::estimate_trend_with(
            &interp,
            &selected,
            &fitted.obs_clim,
            &fitted.model_clim,
            self.exec,
        )?;
        let predictors = fitted
            .models
            .iter()
            .map(Predictor::new)
            .collect::<Result<Vec<_>>>()?;
        let seasons = self.config.season_map();
        let opts = PredictOptions {
            nugget_in_sd: self.config.stage2.nugget_in_sd,
        };
        let entries = selected.time().entries();
        let rows = self.exec.try_map(entries.len(), |t| -> Result<MonthRow> {
            let m = entries[t];
            let gcm = interp.apply_row(&selected.row_vec(t));
            let standard = trend.row_vec(t);
            let bgl = match predictors.get(seasons.season_of(m.month).index()) {
                Some(p) => {
                    let e1 = DVector::from_fn(gcm.len(), |s, _| gcm[s] - p.model().e1_mean()[s]);
                    let out = p
                        .downscale_month(&standard, &e1, Some(m), opts)
                        .map_err(|e| e.context(format!("month {m}")))?;
                    Some((out.mean, out.sd))
                }
                None => None,
            };
            Ok(MonthRow { gcm, standard, bgl })
        })?;
        // restore the caller's month order
        Ok(months
            .iter()
            .map(|m| selected.time().position(*m).unwrap_or(0))
            .map(|t| {
                let r = &rows[t];
                MonthRow {
                    gcm: r.gcm.clone(),
                    standard: r.standard.clone(),
                    bgl: r.bgl.clone(),
                }
            })
            .collect())
    }

    /// Months predicted when none are requested: every coarse month after
    /// the training window.
    pub fn default_months(&self) -> Result<Vec<YearMonth>> {
        let coarse = gsf::read_field(&self.resolve(&self.config.paths.coarse))?;
        let end = self.config.window.training_end;
        Ok(coarse
            .time()
            .entries()
            .iter()
            .copied()
            .filter(|&m| m > end)
            .collect())
    }

    /// Writes mean (and, with Stage 2, sd) files per month; returns the
    /// written paths.
    pub fn predict(&self, months: Option<&[YearMonth]>) -> Result<Vec<PathBuf>> {
        let fitted = self.load_fitted()?;
        let coarse = gsf::read_field(&self.resolve(&self.config.paths.coarse))?;
        let fine = fitted.obs_clim.grid().clone();
        let months = match months {
            Some(m) => m.to_vec(),
            None => self.default_months()?,
        };
        let rows = self.predict_rows(&fitted, &coarse, &fine, &months)?;
        let dir = self.out("predict")?;
        let mut written = Vec::new();
        for (m, row) in months.iter().zip(&rows) {
            let single = |values: &[f64]| {
                Field::new(
                    fine.clone(),
                    TimeIndex::new(vec![*m])?,
                    DMatrix::from_row_slice(1, values.len(), values),
                )
            };
            let mean_path = dir.join(format!("mean_{m}.gsf"));
            match &row.bgl {
                Some((mean, sd)) => {
                    gsf::write_field(&single(mean.as_slice())?, &mean_path)?;
                    let sd_path = dir.join(format!("sd_{m}.gsf"));
                    gsf::write_field(&single(sd.as_slice())?, &sd_path)?;
                    written.push(mean_path);
                    written.push(sd_path);
                }
                None => {
                    gsf::write_field(&single(&row.standard)?, &mean_path)?;
                    written.push(mean_path);
                }
            }
        }
        let provenance = serde_json::json!({
            "seed": self.config.seed,
            "stage2": self.config.stage2.enabled,
            "nugget_in_sd": self.config.stage2.nugget_in_sd,
            "training_end": self.config.window.training_end,
            "months": months,
            "models": fitted.models.iter().map(|m| serde_json::json!({
                "season": m.season().as_str(),
                "levels": m.levels(),
                "lambda": m.lambda(),
                "rho": m.rho(),
                "tau2": m.tau2(),
            })).collect::<Vec<_>>(),
        });
        let path = dir.join("provenance.json");
        let text =
            serde_json::to_string_pretty(&provenance).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(written)
    }

    /// Scores GCM interpolation, Stage 1 only and the full model on the
    /// hold-out window, writes the report and maps, and checks model
    /// invariants.
    pub fn validate(&self) -> Result<ValidationOutcome> {
        let fitted = self.load_fitted()?;
        let mut failures = check_models(&fitted.models);
        let coarse = gsf::read_field(&self.resolve(&self.config.paths.coarse))?;
        let paths = &self.config.paths;
        let truth = gsf::read_field(&self.resolve(paths.truth.as_ref().unwrap_or(&paths.obs)))?;
        let truth = truth
            .select(|m| self.config.holdout_contains(m) && coarse.time().position(m).is_some())?;
        if truth.time().is_empty() {
            return Err(Error::InsufficientData(
                "no hold-out months with truth and model data".into(),
            ));
        }
        let months = truth.time().entries().to_vec();
        let fine = truth.spec().clone();
        let rows = self.predict_rows(&fitted, &coarse, &fine, &months)?;
        let n = fine.active_count();
        let as_field = |f: &dyn Fn(&MonthRow) -> Vec<f64>| -> Result<Field> {
            let mut values = DMatrix::zeros(rows.len(), n);
            for (t, r) in rows.iter().enumerate() {
                values.row_mut(t).copy_from_slice(&f(r));
            }
            Field::new(fine.clone(), truth.time().clone(), values)
        };
        let mut methods = vec![
            ("gcm", as_field(&|r| r.gcm.clone())?),
            ("standard", as_field(&|r| r.standard.clone())?),
        ];
        if !fitted.models.is_empty() {
            methods.push((
                "bgl",
                as_field(&|r| {
                    r.bgl
                        .as_ref()
                        .map(|b| b.0.as_slice().to_vec())
                        .unwrap_or_default()
                })?,
            ));
            for (m, r) in months.iter().zip(&rows) {
                if let Some((_, sd)) = &r.bgl {
                    if sd.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                        failures.push(format!("{m}: predictive sd not finite and non-negative"));
                    }
                }
            }
        }
        let region = self
            .config
            .ssim
            .region
            .unwrap_or_else(|| Region::whole(&fine));
        let params = self.config.ssim_params();
        let seasons = self.config.season_map();
        let dir = self.out("validate")?;
        let mut report = ValidationReport::default();
        let mut pixel_mse = BTreeMap::new();
        for (name, field) in &methods {
            report.push_method(name, field, &truth, &seasons, &region, &params, self.exec)?;
            let map = metrics::mse(field, &truth, &GroupBy::Pixel)?;
            metrics::write_map_csv(&dir.join(format!("mse_{name}.csv")), &fine, &map)?;
            metrics::write_pgm(&dir.join(format!("mse_{name}.pgm")), &fine, &map)?;
            pixel_mse.insert(*name, map);
        }
        if let (Some(b), Some(s)) = (pixel_mse.get("bgl"), pixel_mse.get("standard")) {
            let ratio = metrics::mse_ratio_map(b, s)?;
            metrics::write_map_csv(&dir.join("ratio_bgl_standard.csv"), &fine, &ratio.values)?;
            metrics::write_pgm(&dir.join("ratio_bgl_standard.pgm"), &fine, &ratio.values)?;
        }
        report.write_csv(&dir.join("report.csv"))?;
        Ok(ValidationOutcome { report, failures })
    }
}

/// Structural checks on reloaded models: invariants, orthonormal basis and
/// conditional variances no larger than prior variances.
pub fn check_models(models: &[BglModel]) -> Vec<String> {
    let mut failures = Vec::new();
    for m in models {
        let s = m.season();
        if let Err(e) = m.validate() {
            failures.push(format!("{s}: {e}"));
            continue;
        }
        let err = m.basis().orthonormality_error();
        if err > 1e-10 {
            failures.push(format!("{s}: basis orthonormality error {err:e}"));
        }
        for (l, q) in m.q().iter().enumerate() {
            let prior = match m.level_covariance(l) {
                Ok(c) => c[(1, 1)],
                Err(e) => {
                    failures.push(format!("{s}: {e}"));
                    continue;
                }
            };
            let conditional = 1.0 / q[(1, 1)];
            if conditional > prior + 1e-10 * prior.abs().max(1.0) {
                failures.push(format!(
                    "{s}: level {l} conditional variance {conditional} exceeds prior {prior}"
                ));
            }
        }
    }
    failures
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("truth");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn concat_time(a: &Field, b: &Field) -> Result<Field> {
    let entries: Vec<YearMonth> = a
        .time()
        .entries()
        .iter()
        .chain(b.time().entries())
        .copied()
        .collect();
    let n = a.spec().active_count();
    let mut values = DMatrix::zeros(entries.len(), n);
    values.rows_mut(0, a.time().len()).copy_from(a.values());
    values
        .rows_mut(a.time().len(), b.time().len())
        .copy_from(b.values());
    Field::new(a.spec().clone(), TimeIndex::new(entries)?, values)
}
