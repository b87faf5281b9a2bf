//! Validation metrics: grouped MSE, windowed SSIM and MSE ratio maps.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, Season, SeasonMap};
use crate::par::Exec;

/// How squared errors are averaged.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupBy {
    /// One value per season in [`Season::ALL`] order; NaN where a season has
    /// no months.
    Season(SeasonMap),
    Overall,
    /// One value per active pixel.
    Pixel,
}

fn check_pair(pred: &Field, truth: &Field) -> Result<()> {
    if pred.spec() != truth.spec() {
        return Err(Error::ShapeMismatch(
            "prediction and truth grids differ".into(),
        ));
    }
    if pred.time() != truth.time() {
        return Err(Error::ShapeMismatch(
            "prediction and truth time indices differ".into(),
        ));
    }
    Ok(())
}

pub fn mse(pred: &Field, truth: &Field, group: &GroupBy) -> Result<Vec<f64>> {
    check_pair(pred, truth)?;
    let (p, t) = (pred.values(), truth.values());
    let (rows, cols) = p.shape();
    let sq = |r: usize, c: usize| (p[(r, c)] - t[(r, c)]).powi(2);
    Ok(match group {
        GroupBy::Overall => {
            let total: f64 = (0..rows)
                .map(|r| (0..cols).map(|c| sq(r, c)).sum::<f64>())
                .sum();
            vec![total / (rows * cols) as f64]
        }
        GroupBy::Pixel => (0..cols)
            .map(|c| (0..rows).map(|r| sq(r, c)).sum::<f64>() / rows as f64)
            .collect(),
        GroupBy::Season(map) => {
            let mut sums = [0.0; 4];
            let mut counts = [0usize; 4];
            for (r, m) in pred.time().entries().iter().enumerate() {
                let k = map.season_of(m.month).index();
                sums[k] += (0..cols).map(|c| sq(r, c)).sum::<f64>();
                counts[k] += cols;
            }
            (0..4)
                .map(|k| {
                    if counts[k] == 0 {
                        f64::NAN
                    } else {
                        sums[k] / counts[k] as f64
                    }
                })
                .collect()
        }
    })
}

/// Where the SSIM dynamic range comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeSource {
    /// Range of the truth map only (not symmetric in the arguments).
    #[default]
    Truth,
    /// Range of both maps together (symmetric).
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub range: RangeSource,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 8,
            k1: 0.01,
            k2: 0.03,
            range: RangeSource::Truth,
        }
    }
}

fn first_masked(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if !m[(r, c)].is_finite() {
                return Some((r, c));
            }
        }
    }
    None
}

fn range_of<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
        (a.min(x), b.max(x))
    });
    hi - lo
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 && num == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Mean SSIM over all `w × w` windows at stride 1. Maps are row-major
/// `rows × cols` matrices; non-finite entries mark masked pixels.
pub fn ssim(pred: &DMatrix<f64>, truth: &DMatrix<f64>, params: &SsimParams) -> Result<f64> {
    ssim_with(pred, truth, params, Exec::Sequential)
}

pub fn ssim_with(
    pred: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    params: &SsimParams,
    exec: Exec,
) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "maps {:?} and {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let (rows, cols) = truth.shape();
    let w = params.window;
    if w == 0 || w > rows || w > cols {
        return Err(Error::WindowTooLarge {
            window: w,
            rows,
            cols,
        });
    }
    if let Some((row, col)) = first_masked(truth).or_else(|| first_masked(pred)) {
        return Err(Error::MaskedPixel { row, col });
    }
    let range = match params.range {
        RangeSource::Truth => range_of(truth.iter()),
        RangeSource::Pooled => range_of(truth.iter().chain(pred.iter())),
    };
    let c1 = (params.k1 * range).powi(2);
    let c2 = (params.k2 * range).powi(2);
    let nwin_r = rows - w + 1;
    let nwin_c = cols - w + 1;
    let area = (w * w) as f64;
    let row_sums = exec.map(nwin_r, |r0| {
        let mut total = 0.0;
        for c0 in 0..nwin_c {
            let (mut mx, mut my) = (0.0, 0.0);
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    mx += pred[(r, c)];
                    my += truth[(r, c)];
                }
            }
            mx /= area;
            my /= area;
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    let dx = pred[(r, c)] - mx;
                    let dy = truth[(r, c)] - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
            }
            vx /= area;
            vy /= area;
            cxy /= area;
            let lum = ratio(2.0 * mx * my + c1, mx * mx + my * my + c1);
            let con = ratio(2.0 * cxy + c2, vx + vy + c2);
            total += lum * con;
        }
        total
    });
    Ok(row_sums.iter().sum::<f64>() / (nwin_r * nwin_c) as f64)
}

/// Rectangular block of grid cells, in row/column index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Region {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn whole(spec: &GridSpec) -> Self {
        Self {
            row0: 0,
            col0: 0,
            rows: spec.nrows(),
            cols: spec.ncols(),
        }
    }
}

/// Cuts `region` out of one time row of a field; masked cells become NaN.
pub fn extract_region(field: &Field, t: usize, region: &Region) -> Result<DMatrix<f64>> {
    let spec = field.spec();
    if region.row0 + region.rows > spec.nrows() || region.col0 + region.cols > spec.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "region {region:?} exceeds {}x{} grid",
            spec.nrows(),
            spec.ncols()
        )));
    }
    let pos = spec.active_position();
    Ok(DMatrix::from_fn(region.rows, region.cols, |r, c| {
        let idx = (region.row0 + r) * spec.ncols() + region.col0 + c;
        pos[idx].map_or(f64::NAN, |a| field.values()[(t, a)])
    }))
}

/// Elementwise `a / b` with `0 / 0 = 1`; pixels with `b = 0 < a` are `+inf`
/// and listed in `flagged`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioMap {
    pub values: Vec<f64>,
    pub flagged: Vec<usize>,
}

pub fn mse_ratio_map(a: &[f64], b: &[f64]) -> Result<RatioMap> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "ratio inputs {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut flagged = Vec::new();
    let values = a
        .iter()
        .zip(b)
        .enumerate()
        .map(|(i, (&x, &y))| {
            if y == 0.0 {
                if x == 0.0 {
                    1.0
                } else {
                    flagged.push(i);
                    f64::INFINITY
                }
            } else {
                x / y
            }
        })
        .collect();
    Ok(RatioMap { values, flagged })
}

/// One row of the validation table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    /// Season name or `overall`.
    pub season: String,
    pub months: usize,
    pub mse: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "method,season,months,mse,ssim";

impl ValidationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:?},{:?}",
                r.method, r.season, r.months, r.mse, r.ssim
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, method: &str, season: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.season == season)
    }

    /// Scores one method against the truth per season and overall. SSIM is
    /// computed per month on `region` and averaged.
    pub fn push_method(
        &mut self,
        method: &str,
        pred: &Field,
        truth: &Field,
        seasons: &SeasonMap,
        region: &Region,
        params: &SsimParams,
        exec: Exec,
    ) -> Result<()> {
        check_pair(pred, truth)?;
        let by_season = mse(pred, truth, &GroupBy::Season(seasons.clone()))?;
        let overall = mse(pred, truth, &GroupBy::Overall)?[0];
        let months = pred.time().entries();
        let per_month = exec.try_map(months.len(), |t| {
            ssim(
                &extract_region(pred, t, region)?,
                &extract_region(truth, t, region)?,
                params,
            )
        })?;
        let mean_of =
            |rows: &[usize]| rows.iter().map(|&t| per_month[t]).sum::<f64>() / rows.len() as f64;
        for s in Season::ALL {
            let rows: Vec<usize> = (0..months.len())
                .filter(|&t| seasons.season_of(months[t].month) == s)
                .collect();
            if rows.is_empty() {
                continue;
            }
            self.rows.push(ReportRow {
                method: method.to_string(),
                season: s.to_string(),
                months: rows.len(),
                mse: by_season[s.index()],
                ssim: mean_of(&rows),
            });
        }
        let all: Vec<usize> = (0..months.len()).collect();
        self.rows.push(ReportRow {
            method: method.to_string(),
            season: "overall".into(),
            months: months.len(),
            mse: overall,
            ssim: mean_of(&all),
        });
        Ok(())
    }
}

/// Writes a per-pixel map over the full grid as CSV rows (`row,col,value`;
/// masked cells omitted).
pub fn write_map_csv(path: &Path, spec: &GridSpec, values: &[f64]) -> Result<()> {
    if values.len() != spec.active_count() {
        return Err(Error::dims("map values", spec.active_count(), values.len()));
    }
    let mut out = String::from("row,col,lon,lat,value\n");
    for (a, &idx) in spec.active_indices().iter().enumerate() {
        let (lon, lat) = spec.center(idx);
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?}",
            idx / spec.ncols(),
            idx % spec.ncols(),
            lon,
            lat,
            values[a]
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Plain (ASCII) PGM heatmap. Finite values are scaled linearly to 1..=255;
/// masked and non-finite cells are 0.
pub fn write_pgm(path: &Path, spec: &GridSpec, values: &[f64]) -> Result<()> {
    if values.len() != spec.active_count() {
        return Err(Error::dims("map values", spec.active_count(), values.len()));
    }
    let finite = values.iter().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
        (a.min(x), b.max(x))
    });
    let pos = spec.active_position();
    let mut out = format!("P2\n{} {}\n255\n", spec.ncols(), spec.nrows());
    for r in 0..spec.nrows() {
        let line: Vec<String> = (0..spec.ncols())
            .map(|c| {
                let level = pos[r * spec.ncols() + c]
                    .map(|a| values[a])
                    .filter(|v| v.is_finite())
                    .map_or(0, |v| {
                        if hi > lo {
                            1 + ((v - lo) / (hi - lo) * 254.0).round() as u32
                        } else {
                            128
                        }
                    });
                level.to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridKind, TimeIndex, YearMonth};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn field(values: DMatrix<f64>, start: YearMonth) -> Field {
        let spec = GridSpec::full(GridKind::Fine, 0.0, 0.0, 1.0, 1.0, values.ncols(), 1).unwrap();
        Field::new(spec, TimeIndex::monthly(start, values.nrows()), values).unwrap()
    }

    fn random(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
        let mut g = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| g.random::<f64>())
    }

    #[test]
    fn mse_basics() {
        let start = YearMonth::new(2000, 1).unwrap();
        let x = field(random(1, 24, 5), start);
        assert_eq!(mse(&x, &x, &GroupBy::Overall).unwrap(), vec![0.0]);
        let shifted = field(x.values().add_scalar(0.5), start);
        assert!((mse(&shifted, &x, &GroupBy::Overall).unwrap()[0] - 0.25).abs() < 1e-15);
        let other = field(random(2, 20, 5), start);
        assert!(matches!(
            mse(&other, &x, &GroupBy::Overall),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mse_groupings_match_summation() {
        let start = YearMonth::new(2001, 11).unwrap();
        let (a, b) = (random(3, 17, 6), random(4, 17, 6));
        let (fa, fb) = (field(a.clone(), start), field(b.clone(), start));
        let map = SeasonMap::default();
        let seasons = mse(&fa, &fb, &GroupBy::Season(map.clone())).unwrap();
        let pixels = mse(&fa, &fb, &GroupBy::Pixel).unwrap();
        let overall = mse(&fa, &fb, &GroupBy::Overall).unwrap()[0];
        let months = fa.time().entries();
        let mut weighted = 0.0;
        for s in Season::ALL {
            let mut total = 0.0;
            let mut count = 0;
            for t in 0..17 {
                if map.season_of(months[t].month) == s {
                    for c in 0..6 {
                        total += (a[(t, c)] - b[(t, c)]).powi(2);
                        count += 1;
                    }
                }
            }
            assert!((seasons[s.index()] - total / count as f64).abs() < 1e-12);
            weighted += total;
        }
        assert!((overall - weighted / 102.0).abs() < 1e-12);
        for c in 0..6 {
            let direct: f64 = (0..17)
                .map(|t| (a[(t, c)] - b[(t, c)]).powi(2))
                .sum::<f64>()
                / 17.0;
            assert!((pixels[c] - direct).abs() < 1e-12);
        }
    }

    /// Independent SSIM: window moments from running sums of x, x², xy.
    fn ssim_oracle(x: &DMatrix<f64>, y: &DMatrix<f64>, w: usize) -> f64 {
        let r = y.max() - y.min();
        let (c1, c2) = ((0.01 * r).powi(2), (0.03 * r).powi(2));
        let n = (w * w) as f64;
        let mut acc = Vec::new();
        for r0 in 0..=x.nrows() - w {
            for c0 in 0..=x.ncols() - w {
                let bx = x.view((r0, c0), (w, w));
                let by = y.view((r0, c0), (w, w));
                let (sx, sy) = (bx.sum(), by.sum());
                let sxx = bx.component_mul(&bx).sum();
                let syy = by.component_mul(&by).sum();
                let sxy = bx.component_mul(&by).sum();
                let (mx, my) = (sx / n, sy / n);
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cov = sxy / n - mx * my;
                acc.push(
                    (2.0 * mx * my + c1) * (2.0 * cov + c2)
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)),
                );
            }
        }
        acc.iter().sum::<f64>() / acc.len() as f64
    }

    #[test]
    fn ssim_matches_oracle() {
        let (x, y) = (random(5, 32, 32), random(6, 32, 32));
        let v = ssim(&x, &y, &SsimParams::default()).unwrap();
        assert!((v - ssim_oracle(&x, &y, 8)).abs() < 1e-10);
        let par = ssim_with(&x, &y, &SsimParams::default(), Exec::Parallel).unwrap();
        assert_eq!(v, par);
    }

    #[test]
    fn ssim_constant_maps() {
        let a = DMatrix::from_element(10, 10, 2.0);
        let b = DMatrix::from_element(10, 10, 5.0);
        let v = ssim(&b, &a, &SsimParams::default()).unwrap();
        assert!((v - 2.0 * 2.0 * 5.0 / (4.0 + 25.0)).abs() < 1e-15);
        assert_eq!(ssim(&a, &a, &SsimParams::default()).unwrap(), 1.0);
    }

    #[test]
    fn ssim_errors() {
        let a = DMatrix::from_element(6, 10, 1.0);
        assert!(matches!(
            ssim(&a, &a, &SsimParams::default()),
            Err(Error::WindowTooLarge { .. })
        ));
        let mut m = random(7, 10, 10);
        m[(3, 4)] = f64::NAN;
        assert!(matches!(
            ssim(&m, &random(8, 10, 10), &SsimParams::default()),
            Err(Error::MaskedPixel { row: 3, col: 4 })
        ));
    }

    #[test]
    fn pooled_range_is_symmetric() {
        let (x, y) = (random(9, 12, 12), random(10, 12, 12) * 3.0);
        let p = SsimParams {
            range: RangeSource::Pooled,
            ..SsimParams::default()
        };
        assert!((ssim(&x, &y, &p).unwrap() - ssim(&y, &x, &p).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn ratio_maps() {
        let a = [1.0, 2.0, 0.0, 3.0];
        assert!(mse_ratio_map(&a[..2], &a[..2])
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 1.0));
        let b = [0.5, 1.0, 0.0, 0.0];
        let r = mse_ratio_map(&a, &b).unwrap();
        assert_eq!(r.values[..3], [2.0, 2.0, 1.0]);
        assert!(r.values[3].is_infinite());
        assert_eq!(r.flagged, vec![3]);
        let (x, y) = (random(11, 1, 30), random(12, 1, 30));
        let r = mse_ratio_map(x.as_slice(), y.as_slice()).unwrap();
        for i in 0..30 {
            assert_eq!(r.values[i], x[i] / y[i]);
        }
    }

    #[test]
    fn report_csv_schema() {
        let start = YearMonth::new(2010, 1).unwrap();
        let spec = GridSpec::full(GridKind::Fine, 0.0, 0.0, 1.0, 1.0, 8, 8).unwrap();
        let vals = random(13, 12, 64);
        let f = Field::new(spec.clone(), TimeIndex::monthly(start, 12), vals).unwrap();
        let mut rep = ValidationReport::default();
        rep.push_method(
            "bgl",
            &f,
            &f,
            &SeasonMap::default(),
            &Region::whole(&spec),
            &SsimParams::default(),
            Exec::Sequential,
        )
        .unwrap();
        let csv = rep.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(REPORT_HEADER));
        assert_eq!(csv.lines().count(), 6);
        let overall = rep.get("bgl", "overall").unwrap();
        assert_eq!((overall.months, overall.mse, overall.ssim), (12, 0.0, 1.0));
    }

    #[test]
    fn pgm_output() {
        let spec = GridSpec::new(
            GridKind::Fine,
            0.0,
            0.0,
            1.0,
            1.0,
            3,
            2,
            vec![true, false, true, true, true, true],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &spec, &[0.0, 1.0, 0.5, 0.25, f64::INFINITY]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "P2\n3 2\n255\n1 0 255\n128 65 0\n");
    }

    proptest! {
        #[test]
        fn identities(vals in proptest::collection::vec(-100.0f64..100.0, 64)) {
            let m = DMatrix::from_row_slice(8, 8, &vals);
            prop_assert_eq!(ssim(&m, &m, &SsimParams::default()).unwrap(), 1.0);
            let f = field(DMatrix::from_row_slice(2, 32, &vals), YearMonth::new(1990, 3).unwrap());
            prop_assert_eq!(mse(&f, &f, &GroupBy::Overall).unwrap()[0], 0.0);
        }
    }
}
