//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use bgl_downscale::basis::{self, BasisSet, DeterministicFit, EofSource, ResidualPair, SplitRule};
use bgl_downscale::bgl::{self, BglModel, FitOptions, SampleStats};
use bgl_downscale::grid::{Field, GridKind, GridSpec, Season, SeasonMap, TimeIndex, YearMonth};
use bgl_downscale::linalg;
use bgl_downscale::metrics::{self, GroupBy, SsimParams};
use bgl_downscale::par::Exec;
use bgl_downscale::pipeline::{self, Pipeline, PipelineConfig};
use bgl_downscale::predict::{PredictOptions, Predictor};
use bgl_downscale::synthetic::{self, ScenarioSpec};
use bgl_downscale::trend::{self, Grouping};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn random_q(r: &mut ChaCha8Rng, levels: usize) -> Vec<DMatrix<f64>> {
    (0..levels)
        .map(|_| {
            let a = DMatrix::from_fn(2, 3, |_, _| normal(r));
            &a * a.transpose() / 3.0 + DMatrix::identity(2, 2) * 0.2
        })
        .collect()
}

fn random_basis(r: &mut ChaCha8Rng, n: usize, l: usize, orthonormal: bool) -> DMatrix<f64> {
    if orthonormal {
        linalg::random_orthonormal(r, n, l)
    } else {
        DMatrix::from_fn(n, l, |_, _| normal(r) / (n as f64).sqrt())
    }
}

/// Dense process-major second moment of `months` draws.
fn sample_moment(e1: &DMatrix<f64>, e2: &DMatrix<f64>) -> DMatrix<f64> {
    let (t, n) = e1.shape();
    let mut stacked = DMatrix::zeros(2 * n, t);
    stacked.view_mut((0, 0), (n, t)).copy_from(&e1.transpose());
    stacked.view_mut((n, 0), (n, t)).copy_from(&e2.transpose());
    &stacked * stacked.transpose() / t as f64
}

fn smw_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..120u64 {
        let mut r = rng(100 + i);
        let n = r.random_range(6..=50);
        let l = r.random_range(1..=5);
        let phi = random_basis(&mut r, n, l, i % 2 == 0);
        let q = random_q(&mut r, l);
        let tau2 = [r.random_range(0.05..1.0), r.random_range(0.05..1.0)];
        let months = r.random_range(3..40);
        let (e1, e2) = synthetic::sample_residuals(&mut r, &phi, &q, tau2, months)
            .map_err(|e| e.to_string())?;
        let s = sample_moment(&e1, &e2);
        let direct = bgl::nll_direct(&q, &tau2, &phi, &s).map_err(|e| e.to_string())?;
        let st = SampleStats::from_processes(&[&e1, &e2], &phi).map_err(|e| e.to_string())?;
        let smw = bgl::nll_smw(&q, &tau2, &st).map_err(|e| e.to_string())?;
        worst = worst.max((direct - smw).abs() / direct.abs());
    }
    let elapsed = start.elapsed();
    ensure(worst < 1e-8, || format!("max relative gap {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "120 instances, max relative gap {worst:.1e}, {elapsed:.1?}"
    ))
}

fn dc_descent() -> Outcome {
    let mut max_iter = 0;
    for i in 0..24u64 {
        let mut r = rng(200 + i);
        let n = r.random_range(20..60);
        let l = r.random_range(2..7);
        let phi = random_basis(&mut r, n, l, i % 3 != 0);
        let q = random_q(&mut r, l);
        let tau2 = [r.random_range(0.05..0.5), r.random_range(0.05..0.5)];
        let (e1, e2) =
            synthetic::sample_residuals(&mut r, &phi, &q, tau2, 60).map_err(|e| e.to_string())?;
        let st = SampleStats::from_processes(&[&e1, &e2], &phi).map_err(|e| e.to_string())?;
        let scale = bgl::lambda_max(&st, &tau2).map_err(|e| e.to_string())?;
        let lambda = scale * r.random_range(0.0..0.3);
        let rho = scale * r.random_range(0.0..0.3);
        let (_, trace) = bgl::fit_precision(&st, &tau2, lambda, rho, &FitOptions::default())
            .map_err(|e| format!("fit {i}: {e}"))?;
        for w in trace.objectives.windows(2) {
            ensure(w[1] <= w[0] + 1e-9, || {
                format!("fit {i}: objective rose from {} to {}", w[0], w[1])
            })?;
        }
        ensure(trace.iterations() <= 50, || {
            format!("fit {i}: {} outer iterations", trace.iterations())
        })?;
        max_iter = max_iter.max(trace.iterations());
    }
    Ok(format!(
        "24 fits nonincreasing, at most {max_iter} outer iterations"
    ))
}

fn limits() -> Outcome {
    let mut r = rng(300);
    let (n, l) = (40, 5);
    let phi = linalg::random_orthonormal(&mut r, n, l);
    let q = random_q(&mut r, l);
    let tau2 = [0.2, 0.3];
    let (e1, e2) =
        synthetic::sample_residuals(&mut r, &phi, &q, tau2, 80).map_err(|e| e.to_string())?;
    let st = SampleStats::from_processes(&[&e1, &e2], &phi).map_err(|e| e.to_string())?;
    let lmax = bgl::lambda_max(&st, &tau2).map_err(|e| e.to_string())?;
    for rho in [0.0, 0.5] {
        let (qh, _) = bgl::fit_precision(&st, &tau2, 1.01 * lmax, rho, &FitOptions::default())
            .map_err(|e| e.to_string())?;
        ensure(
            qh.iter().all(|b| b[(0, 1)] == 0.0 && b[(1, 0)] == 0.0),
            || format!("nonzero off-diagonal above lambda_max with rho={rho}"),
        )?;
    }
    let (qf, _) = bgl::fit_precision(&st, &tau2, 0.0, 1e6, &FitOptions::default())
        .map_err(|e| e.to_string())?;
    let spread = qf
        .windows(2)
        .map(|w| (w[0][(0, 1)] - w[1][(0, 1)]).abs())
        .fold(0.0, f64::max);
    ensure(spread <= 1e-6, || {
        format!("fused off-diagonals differ by {spread:e}")
    })?;
    Ok(format!(
        "exact zeros above lambda_max={lmax:.3}; fused spread {spread:.1e}"
    ))
}

fn conditioning_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let rel = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm() / b.norm().max(1e-300);
    for i in 0..40u64 {
        let mut r = rng(400 + i);
        let n = r.random_range(8..=30);
        let l = r.random_range(1..=5);
        let phi = random_basis(&mut r, n, l, i % 2 == 0);
        let q: Vec<_> = random_q(&mut r, l)
            .into_iter()
            .map(|b| linalg::symmetrize(&b))
            .collect();
        let tau2 = [r.random_range(0.05..0.8), r.random_range(0.05..0.8)];
        let basis = BasisSet::from_columns(phi.clone(), vec![1.0; l], Season::Summer)
            .map_err(|e| e.to_string())?;
        let model = BglModel::from_parts(
            q.clone(),
            tau2.to_vec(),
            0.0,
            0.0,
            basis,
            DeterministicFit::empty(2),
            DVector::zeros(n),
            SeasonMap::default(),
        )
        .map_err(|e| e.to_string())?;
        let e1 = DVector::from_fn(n, |_, _| normal(&mut r));
        let predictor = Predictor::new(&model).map_err(|e| e.to_string())?;
        let (mean, var, coef) = predictor
            .residual(&e1, PredictOptions::default())
            .map_err(|e| e.to_string())?;
        let (om, oc) = synthetic::dense_conditional_oracle(&phi, &q, tau2[0], &e1)
            .map_err(|e| e.to_string())?;
        let (rm, rv) =
            synthetic::dense_residual_oracle(&phi, &q, tau2, &e1).map_err(|e| e.to_string())?;
        let cov_gap = (&coef.omega2_cov - &oc).norm() / oc.norm();
        worst = worst
            .max(rel(&coef.omega2_mean, &om))
            .max(cov_gap)
            .max(rel(&mean, &rm))
            .max(rel(&var, &rv));
    }
    ensure(worst < 1e-6, || format!("max relative gap {worst:e}"))?;
    Ok(format!(
        "40 instances (n <= 30), max relative gap {worst:.1e}"
    ))
}

struct Run {
    bgl: f64,
    standard: f64,
    elapsed: Duration,
    pipeline: Pipeline,
    _dir: tempfile::TempDir,
}

fn run_scenario(spec: ScenarioSpec) -> Result<Run, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::for_scenario(spec, dir.path());
    let p = Pipeline::new(cfg, dir.path()).map_err(|e| e.to_string())?;
    let start = Instant::now();
    p.simulate().map_err(|e| e.to_string())?;
    p.fit().map_err(|e| e.to_string())?;
    let outcome = p.validate().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(outcome.passed(), || {
        format!("invariant failures: {:?}", outcome.failures)
    })?;
    let get = |m: &str| {
        outcome
            .report
            .get(m, "overall")
            .map(|r| r.mse)
            .ok_or(format!("no {m} row"))
    };
    Ok(Run {
        bgl: get("bgl")?,
        standard: get("standard")?,
        elapsed,
        pipeline: p,
        _dir: dir,
    })
}

fn skill(runs: &[Run]) -> Outcome {
    let ratios: Vec<f64> = runs.iter().map(|r| r.bgl / r.standard).collect();
    let wins = ratios.iter().filter(|&&x| x < 1.0).count();
    let total_bgl: f64 = runs.iter().map(|r| r.bgl).sum();
    let total_std: f64 = runs.iter().map(|r| r.standard).sum();
    let reduction = 1.0 - total_bgl / total_std;
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap_or_default();
    ensure(reduction >= 0.05, || {
        format!("mean MSE reduction {:.1}%", 100.0 * reduction)
    })?;
    ensure(wins >= 8, || format!("BGL won {wins}/10 seeds"))?;
    ensure(slowest < Duration::from_secs(120), || {
        format!("slowest seed {slowest:?}")
    })?;
    Ok(format!(
        "MSE {:.1}% below Standard, wins {wins}/10, ratios {:.3}..{:.3}, slowest seed {slowest:.1?}",
        100.0 * reduction,
        ratios.iter().copied().fold(f64::INFINITY, f64::min),
        ratios.iter().copied().fold(0.0, f64::max)
    ))
}

fn independence(runs: &[Run]) -> Outcome {
    let ratios: Vec<f64> = runs.iter().map(|r| r.bgl / r.standard).collect();
    let worst = ratios.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
    ensure(worst <= 0.02, || format!("ratios {ratios:?}"))?;
    Ok(format!(
        "max |BGL/Standard - 1| = {:.2}% over 10 seeds",
        100.0 * worst
    ))
}

fn trend_exactness() -> Outcome {
    let mut r = rng(700);
    let coarse = GridSpec::full(GridKind::Coarse, 140.0, -10.0, 1.0, -1.0, 7, 6)
        .map_err(|e| e.to_string())?;
    let fine = GridSpec::full(GridKind::Fine, 139.55, -9.55, 0.1, -0.1, 70, 60)
        .map_err(|e| e.to_string())?;
    let months = 5;
    let coefs: Vec<[f64; 4]> = (0..months)
        .map(|_| {
            [
                normal(&mut r),
                normal(&mut r),
                normal(&mut r),
                normal(&mut r),
            ]
        })
        .collect();
    let poly = |c: &[f64; 4], (x, y): (f64, f64)| c[0] + c[1] * x + c[2] * y + c[3] * x * y;
    let cvals = DMatrix::from_fn(months, coarse.active_count(), |t, k| {
        poly(&coefs[t], coarse.center(k))
    });
    let time = TimeIndex::monthly(
        YearMonth {
            year: 2000,
            month: 1,
        },
        months,
    );
    let cfield = Field::new(coarse.clone(), time, cvals).map_err(|e| e.to_string())?;
    let interp = trend::interpolate_bilinear(&cfield, &fine).map_err(|e| e.to_string())?;
    let (lon_lo, lon_hi) = (140.0, 146.0);
    let (lat_lo, lat_hi) = (-15.0, -10.0);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (a, &idx) in fine.active_indices().iter().enumerate() {
        let (x, y) = fine.center(idx);
        if x < lon_lo || x > lon_hi || y < lat_lo || y > lat_hi {
            continue;
        }
        checked += 1;
        for (t, c) in coefs.iter().enumerate() {
            let exact = poly(c, (x, y));
            worst = worst.max((interp.values()[(t, a)] - exact).abs() / exact.abs().max(1.0));
        }
    }
    ensure(worst <= 1e-12, || format!("bilinear error {worst:e}"))?;

    // zero anomaly: the model field equals its own climatology
    let years = 3;
    let time = TimeIndex::monthly(
        YearMonth {
            year: 2001,
            month: 1,
        },
        12 * years,
    );
    let base = DMatrix::from_fn(12, coarse.active_count(), |_, _| normal(&mut r));
    let model_vals = DMatrix::from_fn(12 * years, coarse.active_count(), |t, k| base[(t % 12, k)]);
    let model = Field::new(coarse.clone(), time.clone(), model_vals).map_err(|e| e.to_string())?;
    let obs_vals = DMatrix::from_fn(12 * years, fine.active_count(), |_, _| {
        25.0 + normal(&mut r)
    });
    let obs = Field::new(fine.clone(), time, obs_vals).map_err(|e| e.to_string())?;
    let obs_clim =
        trend::climatology(&obs, Grouping::CalendarMonth, None).map_err(|e| e.to_string())?;
    let model_clim =
        trend::climatology(&model, Grouping::CalendarMonth, None).map_err(|e| e.to_string())?;
    let tr =
        trend::estimate_trend(&model, &obs_clim, &model_clim, &fine).map_err(|e| e.to_string())?;
    for (t, m) in tr.time().entries().iter().enumerate() {
        let row = obs_clim.row_of(*m).ok_or("missing climatology month")?;
        for s in 0..fine.active_count() {
            ensure(tr.values()[(t, s)] == obs_clim.means()[(row, s)], || {
                format!("trend differs at {m}, pixel {s}")
            })?;
        }
    }
    Ok(format!(
        "bilinear error {worst:.1e} on {checked} interior pixels; zero-anomaly trend exact"
    ))
}

/// Mean SSIM from raw window moments, written independently of the library.
fn ssim_oracle(x: &DMatrix<f64>, y: &DMatrix<f64>, w: usize, k1: f64, k2: f64) -> f64 {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (c1, c2) = ((k1 * (hi - lo)).powi(2), (k2 * (hi - lo)).powi(2));
    let (nr, nc) = (x.nrows() - w + 1, x.ncols() - w + 1);
    let mut total = 0.0;
    for r0 in 0..nr {
        for c0 in 0..nc {
            let wx = x.view((r0, c0), (w, w));
            let wy = y.view((r0, c0), (w, w));
            let a = (w * w) as f64;
            let (mx, my) = (wx.sum() / a, wy.sum() / a);
            let sxx = wx.component_mul(&wx).sum() / a - mx * mx;
            let syy = wy.component_mul(&wy).sum() / a - my * my;
            let sxy = wx.component_mul(&wy).sum() / a - mx * my;
            total += (2.0 * mx * my + c1) * (2.0 * sxy + c2)
                / ((mx * mx + my * my + c1) * (sxx + syy + c2));
        }
    }
    total / (nr * nc) as f64
}

fn metric_identities() -> Outcome {
    let mut r = rng(800);
    let spec =
        GridSpec::full(GridKind::Fine, 0.0, 0.0, 1.0, 1.0, 40, 36).map_err(|e| e.to_string())?;
    let time = TimeIndex::monthly(
        YearMonth {
            year: 2000,
            month: 1,
        },
        6,
    );
    let vals = DMatrix::from_fn(6, spec.active_count(), |_, _| normal(&mut r));
    let field = Field::new(spec, time, vals).map_err(|e| e.to_string())?;
    for g in [
        GroupBy::Overall,
        GroupBy::Pixel,
        GroupBy::Season(SeasonMap::default()),
    ] {
        let m = metrics::mse(&field, &field, &g).map_err(|e| e.to_string())?;
        ensure(m.iter().all(|v| *v == 0.0 || v.is_nan()), || {
            format!("mse(x,x) = {m:?}")
        })?;
    }
    let x = DMatrix::from_fn(40, 40, |_, _| normal(&mut r));
    let y = DMatrix::from_fn(40, 40, |i, j| x[(i, j)] + 0.5 * normal(&mut r));
    let params = SsimParams {
        window: 32,
        ..SsimParams::default()
    };
    let same = metrics::ssim(&x, &x, &params).map_err(|e| e.to_string())?;
    ensure(same == 1.0, || format!("ssim(x,x) = {same}"))?;
    let lib = metrics::ssim(&x, &y, &params).map_err(|e| e.to_string())?;
    let oracle = ssim_oracle(&x, &y, 32, params.k1, params.k2);
    ensure((lib - oracle).abs() <= 1e-10, || {
        format!("ssim {lib} vs oracle {oracle}")
    })?;
    Ok(format!(
        "mse(x,x)=0, ssim(x,x)=1, 32x32 ssim gap {:.1e}",
        (lib - oracle).abs()
    ))
}

fn uncertainty(run: &Run) -> Outcome {
    let p = &run.pipeline;
    let fitted = p.load_fitted().map_err(|e| e.to_string())?;
    let failures = pipeline::check_models(&fitted.models);
    ensure(failures.is_empty(), || format!("{failures:?}"))?;
    let mut levels = 0;
    for m in &fitted.models {
        let predictor = Predictor::new(m).map_err(|e| e.to_string())?;
        let mut r = rng(900);
        for _ in 0..5 {
            let e1 = DVector::from_fn(m.basis().pixels(), |_, _| normal(&mut r));
            let (_, _, coef) = predictor
                .residual(&e1, PredictOptions::default())
                .map_err(|e| e.to_string())?;
            for (l, v) in coef.omega2_var().iter().enumerate() {
                let prior = m.level_covariance(l).map_err(|e| e.to_string())?[(1, 1)];
                ensure(*v <= prior + 1e-10, || {
                    format!("{} level {l}: {v} > prior {prior}", m.season())
                })?;
                levels += 1;
            }
        }
    }
    let written = p.predict(None).map_err(|e| e.to_string())?;
    let mut sd_maps = 0;
    for path in written.iter().filter(|w| {
        w.file_name()
            .is_some_and(|f| f.to_string_lossy().starts_with("sd_"))
    }) {
        let sd = bgl_downscale::gsf::read_field(path).map_err(|e| e.to_string())?;
        let row = sd.values().row(0);
        let (lo, hi) = (row.min(), row.max());
        ensure(hi > lo, || format!("{} is constant", path.display()))?;
        sd_maps += 1;
    }
    ensure(sd_maps > 0, || "no sd maps written".into())?;
    Ok(format!(
        "{levels} level checks, {sd_maps} non-constant sd maps"
    ))
}

fn scale() -> Outcome {
    let mut r = rng(1000);
    let (n, l, months) = (10_000, 50, 120);
    let phi = linalg::random_orthonormal(&mut r, n, l);
    let q: Vec<_> = (0..l)
        .map(|k| {
            let v = 2.0 * 0.95f64.powi(k as i32);
            linalg::inv_spd(
                &DMatrix::from_row_slice(2, 2, &[v, 0.7 * v, 0.7 * v, v]),
                "cov",
            )
            .unwrap()
        })
        .collect();
    let (e1, e2) = synthetic::sample_residuals(&mut r, &phi, &q, [0.05, 0.05], months)
        .map_err(|e| e.to_string())?;
    let residuals = ResidualPair::new(e1, e2, Season::Summer).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let full = basis::compute_eofs(&residuals, EofSource::Obs).map_err(|e| e.to_string())?;
    let split = basis::split_basis(&full, SplitRule::FixedL(l)).map_err(|e| e.to_string())?;
    let opts = FitOptions::default();
    let tau2 =
        bgl::estimate_noise(&residuals, &split, opts.tau_floor).map_err(|e| e.to_string())?;
    let st = SampleStats::from_processes(&[residuals.e1(), residuals.e2()], &split.phi())
        .map_err(|e| e.to_string())?;
    let lmax = bgl::lambda_max(&st, &tau2).map_err(|e| e.to_string())?;
    let model = bgl::fit_with_noise(&residuals, &split, tau2, 0.02 * lmax, 0.02 * lmax, &opts)
        .map_err(|e| e.to_string())?;
    let fit_time = start.elapsed();
    ensure(fit_time < Duration::from_secs(300), || {
        format!("fit took {fit_time:?}")
    })?;
    let start = Instant::now();
    let predictor = Predictor::new(&model).map_err(|e| e.to_string())?;
    let trend_row = vec![0.0; n];
    let preds = Exec::default()
        .try_map(100, |t| {
            let e1 = residuals.e1().row(t).transpose();
            predictor.downscale_month(&trend_row, &e1, None, PredictOptions::default())
        })
        .map_err(|e| e.to_string())?;
    let predict_time = start.elapsed();
    ensure(preds.len() == 100, || "missing predictions".into())?;
    ensure(predict_time < Duration::from_secs(60), || {
        format!("predict took {predict_time:?}")
    })?;
    Ok(format!(
        "n={n}, L={l}: fit {fit_time:.1?} ({} outer iterations), 100-month predict {predict_time:.1?}",
        model.trace().iterations()
    ))
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["models", "trend", "validate", "predict"] {
        let dir = root.join(sub);
        let Ok(entries) = std::fs::read_dir(&dir) else {
            continue;
        };
        let mut names: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        names.sort();
        for path in names {
            let name = format!("{sub}/{}", path.file_name().unwrap().to_string_lossy());
            out.push((name, std::fs::read(&path).unwrap()));
        }
    }
    out.push((
        "config.resolved.toml".into(),
        std::fs::read(root.join("config.resolved.toml")).unwrap_or_default(),
    ));
    out
}

fn determinism() -> Outcome {
    let mut trees = Vec::new();
    let mut dirs = Vec::new();
    for exec in [Exec::Parallel, Exec::Sequential] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = PipelineConfig::for_scenario(ScenarioSpec::standard(11), Path::new(""));
        let p = Pipeline::new(cfg, dir.path())
            .map_err(|e| e.to_string())?
            .with_exec(exec);
        p.simulate().map_err(|e| e.to_string())?;
        p.fit().map_err(|e| e.to_string())?;
        p.predict(None).map_err(|e| e.to_string())?;
        p.validate().map_err(|e| e.to_string())?;
        trees.push(tree_bytes(&p.output_dir()));
        dirs.push(dir);
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure(a.len() == b.len(), || {
        format!("{} vs {} files", a.len(), b.len())
    })?;
    for ((na, ba), (nb, bb)) in a.iter().zip(b) {
        ensure(na == nb && ba == bb, || format!("{na} differs from {nb}"))?;
    }
    ensure(a.iter().any(|(n, _)| n.starts_with("models/bgl_")), || {
        "no model files".into()
    })?;
    Ok(format!(
        "{} output files byte-identical across two runs",
        a.len()
    ))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let guard = |f: &dyn Fn() -> Outcome| -> Outcome {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        })
    };
    results.push((1, "SMW equivalence", guard(&smw_equivalence)));
    results.push((2, "DC descent", guard(&dc_descent)));
    results.push((3, "sparsity and fusion limits", guard(&limits)));
    results.push((4, "conditioning oracle", guard(&conditioning_oracle)));
    let standard: Result<Vec<Run>, String> = (1..=10)
        .map(|s| run_scenario(ScenarioSpec::standard(s)))
        .collect();
    let independent: Result<Vec<Run>, String> = (1..=10)
        .map(|s| run_scenario(ScenarioSpec::independent(s)))
        .collect();
    results.push((
        5,
        "skill on dependent scenario",
        standard
            .as_ref()
            .map_err(Clone::clone)
            .and_then(|runs| guard(&|| skill(runs))),
    ));
    results.push((
        6,
        "independence null",
        independent
            .as_ref()
            .map_err(Clone::clone)
            .and_then(|runs| guard(&|| independence(runs))),
    ));
    results.push((7, "trend exactness", guard(&trend_exactness)));
    results.push((8, "metric identities", guard(&metric_identities)));
    results.push((
        9,
        "uncertainty sanity",
        standard
            .as_ref()
            .map_err(Clone::clone)
            .and_then(|runs| guard(&|| uncertainty(&runs[0]))),
    ));
    results.push((10, "scale and tractability", guard(&scale)));
    results.push((11, "determinism", guard(&determinism)));

    let mut failed = 0;
    println!();
    for (id, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("[PASS] criterion {id:>2} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] criterion {id:>2} {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
