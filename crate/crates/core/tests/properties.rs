use bgl_downscale::basis::{BasisSet, DeterministicFit};
use bgl_downscale::bgl::{self, BglModel, FitOptions, SampleStats};
use bgl_downscale::grid::{Season, SeasonMap, YearMonth};
use bgl_downscale::linalg;
use bgl_downscale::predict::{PredictOptions, Predictor};
use bgl_downscale::synthetic;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn spd_blocks(r: &mut ChaCha8Rng, l: usize) -> Vec<DMatrix<f64>> {
    (0..l)
        .map(|_| {
            let a = DMatrix::from_fn(2, 3, |_, _| r.sample::<f64, _>(StandardNormal));
            linalg::symmetrize(&(&a * a.transpose() / 3.0 + DMatrix::identity(2, 2) * 0.1))
        })
        .collect()
}

fn stats(seed: u64, n: usize, l: usize) -> (SampleStats, [f64; 2]) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let phi = linalg::random_orthonormal(&mut r, n, l);
    let q = spd_blocks(&mut r, l);
    let tau2 = [0.1, 0.2];
    let (e1, e2) = synthetic::sample_residuals(&mut r, &phi, &q, tau2, 30).unwrap();
    (
        SampleStats::from_processes(&[&e1, &e2], &phi).unwrap(),
        tau2,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fitted_precision_is_spd_and_symmetric(seed in 0u64..10_000, l in 1usize..6, lam in 0.0f64..0.5, rho in 0.0f64..0.5) {
        let (st, tau2) = stats(seed, 25, l);
        let scale = bgl::lambda_max(&st, &tau2).unwrap();
        let (q, _) = bgl::fit_precision(&st, &tau2, lam * scale, rho * scale, &FitOptions::default()).unwrap();
        prop_assert_eq!(q.len(), l);
        for b in &q {
            prop_assert_eq!(b[(0, 1)], b[(1, 0)]);
            prop_assert!(linalg::min_eigenvalue(b) > 0.0);
        }
    }

    #[test]
    fn penalties_only_shrink_coupling(seed in 0u64..10_000, l in 1usize..6) {
        let (st, tau2) = stats(seed, 25, l);
        let scale = bgl::lambda_max(&st, &tau2).unwrap();
        let opts = FitOptions::default();
        let coupling = |lam: f64| -> f64 {
            let (q, _) = bgl::fit_precision(&st, &tau2, lam, 0.0, &opts).unwrap();
            q.iter().map(|b| b[(0, 1)].abs()).sum()
        };
        prop_assert!(coupling(1.01 * scale) == 0.0);
        prop_assert!(coupling(0.5 * scale) <= coupling(0.0) + 1e-8);
    }

    #[test]
    fn conditioning_never_inflates_variance(seed in 0u64..10_000, n in 6usize..30, l in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let phi = DMatrix::from_fn(n, l, |_, _| r.sample::<f64, _>(StandardNormal) / (n as f64).sqrt());
        let q = spd_blocks(&mut r, l);
        let basis = BasisSet::from_columns(phi, vec![1.0; l], Season::Winter).unwrap();
        let model = BglModel::from_parts(
            q.clone(), vec![0.3, 0.4], 0.0, 0.0, basis,
            DeterministicFit::empty(2), DVector::zeros(n), SeasonMap::default(),
        ).unwrap();
        let e1 = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
        let predictor = Predictor::new(&model).unwrap();
        let (_, var, coef) = predictor.residual(&e1, PredictOptions::default()).unwrap();
        for (k, v) in coef.omega2_var().iter().enumerate() {
            let prior = linalg::inv_spd(&q[k], "q").unwrap()[(1, 1)];
            prop_assert!(*v <= prior + 1e-10);
        }
        prop_assert!(var.iter().all(|v| v.is_finite() && *v >= 0.4 - 1e-12));
    }

    #[test]
    fn year_month_text_round_trips(year in 1800i32..2300, month in 1u8..=12, k in -500i64..500) {
        let m = YearMonth::new(year, month).unwrap();
        prop_assert_eq!(m.to_string().parse::<YearMonth>().unwrap(), m);
        prop_assert_eq!(m.plus(k).plus(-k), m);
    }
}
