//! Stage 1: large-scale trend from climatologies and bilinear interpolation.
//!
//! The trend at fine pixel `s` and month `t` (calendar month `i`) is the
//! observational climatology of month `i` plus the interpolated model anomaly
//! `W_t − W̄_i`.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{Field, GridKind, GridSpec, SeasonMap, TimeIndex, YearMonth};
use crate::gsf::{self, Document};
use crate::par::Exec;

/// How time entries are pooled into climatology groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Grouping {
    CalendarMonth,
    Season(SeasonMap),
}

impl Grouping {
    /// Group key of a month: the calendar month (1–12) or the season index.
    pub fn key(&self, m: YearMonth) -> u8 {
        match self {
            Grouping::CalendarMonth => m.month,
            Grouping::Season(map) => map.season_of(m.month).index() as u8,
        }
    }

    fn label(&self, key: u8) -> String {
        match self {
            Grouping::CalendarMonth => format!("month {key}"),
            Grouping::Season(_) => crate::grid::Season::ALL[key as usize].to_string(),
        }
    }
}

/// Per-group temporal means of a field.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    grid: GridSpec,
    grouping: Grouping,
    groups: Vec<u8>,
    means: DMatrix<f64>,
}

impl Climatology {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn grouping(&self) -> &Grouping {
        &self.grouping
    }
    /// Group keys, ascending, one per row of [`Climatology::means`].
    pub fn groups(&self) -> &[u8] {
        &self.groups
    }
    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn row_of(&self, m: YearMonth) -> Option<usize> {
        self.groups.binary_search(&self.grouping.key(m)).ok()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut doc = Document::new("climatology");
        doc.push("grid", self.grid.kind().as_str());
        gsf::push_grid(&mut doc, &self.grid);
        match &self.grouping {
            Grouping::CalendarMonth => doc.push("grouping", "month"),
            Grouping::Season(map) => {
                doc.push("grouping", "season");
                doc.push("seasons", map.encode());
            }
        }
        let groups: Vec<String> = self.groups.iter().map(|g| g.to_string()).collect();
        doc.push("groups", groups.join(","));
        gsf::push_mask(&mut doc, &self.grid);
        gsf::push_matrix(doc.payload_mut(), &self.means);
        doc.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let doc = Document::read(path)?;
        if doc.kind() != "climatology" {
            return Err(Error::MalformedHeader(format!(
                "expected kind=climatology, got {}",
                doc.kind()
            )));
        }
        let kind: GridKind = doc.get("grid")?.parse()?;
        let grid = gsf::read_grid(&doc, kind)?;
        let grouping = match doc.get("grouping")? {
            "month" => Grouping::CalendarMonth,
            "season" => Grouping::Season(SeasonMap::decode(doc.get("seasons")?)?),
            other => {
                return Err(Error::MalformedHeader(format!(
                    "unknown grouping `{other}`"
                )))
            }
        };
        let groups = doc
            .get("groups")?
            .split(',')
            .map(|g| {
                g.parse::<u8>()
                    .map_err(|_| Error::MalformedHeader(format!("bad group `{g}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = grid.active_count();
        doc.expect_payload("climatology payload", groups.len() * n)?;
        let means = gsf::take_matrix(doc.payload(), groups.len(), n);
        Ok(Self {
            grid,
            grouping,
            groups,
            means,
        })
    }
}

/// Per-group means over the entries up to and including `window_end`
/// (all entries when `None`). Every group present anywhere in the field's
/// time index must have at least one entry inside the window.
pub fn climatology(
    field: &Field,
    grouping: Grouping,
    window_end: Option<YearMonth>,
) -> Result<Climatology> {
    let entries = field.time().entries();
    let mut groups: Vec<u8> = entries.iter().map(|&m| grouping.key(m)).collect();
    groups.sort_unstable();
    groups.dedup();
    if groups.is_empty() {
        return Err(Error::EmptyGroup("field has no time entries".into()));
    }
    let n = field.spec().active_count();
    let mut sums = DMatrix::<f64>::zeros(groups.len(), n);
    let mut counts = vec![0usize; groups.len()];
    let values = field.values();
    for (t, &m) in entries.iter().enumerate() {
        if window_end.is_some_and(|end| m > end) {
            continue;
        }
        let g = groups
            .binary_search(&grouping.key(m))
            .expect("group collected above");
        counts[g] += 1;
        for c in 0..n {
            sums[(g, c)] += values[(t, c)];
        }
    }
    for (g, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyGroup(grouping.label(groups[g])));
        }
        let inv = count as f64;
        sums.row_mut(g).iter_mut().for_each(|x| *x /= inv);
    }
    Ok(Climatology {
        grid: field.spec().clone(),
        grouping,
        groups,
        means: sums,
    })
}

/// Field minus its climatology, row by row.
pub fn anomaly(field: &Field, clim: &Climatology) -> Result<Field> {
    let n = field.spec().active_count();
    if clim.grid.active_count() != n {
        return Err(Error::dims(
            "climatology cells",
            n,
            clim.grid.active_count(),
        ));
    }
    let mut out = field.values().clone();
    for (t, &m) in field.time().entries().iter().enumerate() {
        let g = clim
            .row_of(m)
            .ok_or_else(|| Error::GroupMismatch(format!("no climatology row for {m}")))?;
        for c in 0..n {
            out[(t, c)] -= clim.means[(g, c)];
        }
    }
    Field::new(field.spec().clone(), field.time().clone(), out)
}

/// Precomputed bilinear stencils from a coarse grid onto fine pixels.
#[derive(Debug, Clone)]
pub struct Interpolator {
    fine: GridSpec,
    coarse_cells: usize,
    // per fine pixel: (coarse active index, weight), weights sum to 1
    stencils: Vec<Vec<(usize, f64)>>,
}

const EDGE_EPS: f64 = 1e-9;

impl Interpolator {
    /// Builds stencils for every active fine pixel.
    ///
    /// Pixels up to half a coarse cell beyond the outermost cell centres use
    /// clamped coordinates. When some of the four surrounding centres are
    /// masked the weights are renormalised over the active ones.
    pub fn new(coarse: &GridSpec, fine: &GridSpec) -> Result<Self> {
        let pos = coarse.active_position();
        let (nc, nr) = (coarse.ncols(), coarse.nrows());
        let mut stencils = Vec::with_capacity(fine.active_count());
        for (pixel, &idx) in fine.active_indices().iter().enumerate() {
            let (lon, lat) = fine.center(idx);
            let u = (lon - coarse.lon0()) / coarse.dlon();
            let v = (lat - coarse.lat0()) / coarse.dlat();
            let outside =
                |x: f64, len: usize| x < -0.5 - EDGE_EPS || x > len as f64 - 0.5 + EDGE_EPS;
            if outside(u, nc) || outside(v, nr) {
                return Err(Error::OutOfDomain { pixel, lon, lat });
            }
            let (c0, fu) = axis_split(u, nc);
            let (r0, fv) = axis_split(v, nr);
            let c1 = (c0 + 1).min(nc - 1);
            let r1 = (r0 + 1).min(nr - 1);
            let corners = [
                (r0, c0, (1.0 - fu) * (1.0 - fv)),
                (r0, c1, fu * (1.0 - fv)),
                (r1, c0, (1.0 - fu) * fv),
                (r1, c1, fu * fv),
            ];
            let mut stencil: Vec<(usize, f64)> = Vec::with_capacity(4);
            let mut any_active = false;
            for &(r, c, w) in &corners {
                let Some(k) = pos[r * nc + c] else { continue };
                any_active = true;
                if w > 0.0 {
                    match stencil.iter_mut().find(|(j, _)| *j == k) {
                        Some(e) => e.1 += w,
                        None => stencil.push((k, w)),
                    }
                }
            }
            let total: f64 = stencil.iter().map(|(_, w)| w).sum();
            if stencil.is_empty() {
                return Err(if any_active {
                    Error::MissingNeighbor { pixel }
                } else {
                    Error::OutOfDomain { pixel, lon, lat }
                });
            }
            if total != 1.0 {
                stencil.iter_mut().for_each(|(_, w)| *w /= total);
            }
            stencils.push(stencil);
        }
        Ok(Self {
            fine: fine.clone(),
            coarse_cells: coarse.active_count(),
            stencils,
        })
    }

    pub fn fine_spec(&self) -> &GridSpec {
        &self.fine
    }

    /// Interpolates one coarse row (active-cell order) onto the fine pixels.
    pub fn apply_row(&self, coarse: &[f64]) -> Vec<f64> {
        debug_assert_eq!(coarse.len(), self.coarse_cells);
        self.stencils
            .iter()
            .map(|s| s.iter().map(|&(k, w)| w * coarse[k]).sum())
            .collect()
    }

    pub fn apply(&self, coarse: &Field, exec: Exec) -> Result<Field> {
        if coarse.spec().active_count() != self.coarse_cells {
            return Err(Error::dims(
                "coarse cells",
                self.coarse_cells,
                coarse.spec().active_count(),
            ));
        }
        let rows = exec.map(coarse.time().len(), |t| self.apply_row(&coarse.row_vec(t)));
        let n = self.fine.active_count();
        let values = DMatrix::from_fn(rows.len(), n, |t, s| rows[t][s]);
        Field::new(
            self.fine.with_kind(GridKind::Fine),
            coarse.time().clone(),
            values,
        )
    }
}

// index of the lower neighbour and fractional offset along one axis,
// clamping into the cell-centre hull
fn axis_split(x: f64, len: usize) -> (usize, f64) {
    if len == 1 {
        return (0, 0.0);
    }
    let x = x.clamp(0.0, (len - 1) as f64);
    let i = (x.floor() as usize).min(len - 2);
    (i, x - i as f64)
}

/// Bilinear interpolation of every time row of `coarse` onto `fine_spec`.
pub fn interpolate_bilinear(coarse: &Field, fine_spec: &GridSpec) -> Result<Field> {
    Interpolator::new(coarse.spec(), fine_spec)?.apply(coarse, Exec::default())
}

/// Trend `ȳ_i + Interp(W_t − W̄_i)` for every month of `model`.
pub fn estimate_trend(
    model: &Field,
    obs_clim: &Climatology,
    model_clim: &Climatology,
    fine_spec: &GridSpec,
) -> Result<Field> {
    let interp = Interpolator::new(model.spec(), fine_spec)?;
    estimate_trend_with(&interp, model, obs_clim, model_clim, Exec::default())
}

pub fn estimate_trend_with(
    interp: &Interpolator,
    model: &Field,
    obs_clim: &Climatology,
    model_clim: &Climatology,
    exec: Exec,
) -> Result<Field> {
    if obs_clim.grouping != model_clim.grouping {
        return Err(Error::GroupMismatch(
            "observation and model climatologies use different groupings".into(),
        ));
    }
    if obs_clim.grid.active_count() != interp.fine.active_count() {
        return Err(Error::dims(
            "observation climatology pixels",
            interp.fine.active_count(),
            obs_clim.grid.active_count(),
        ));
    }
    if model_clim.grid.active_count() != model.spec().active_count() {
        return Err(Error::dims(
            "model climatology cells",
            model.spec().active_count(),
            model_clim.grid.active_count(),
        ));
    }
    let entries = model.time().entries();
    let mut rows_idx = Vec::with_capacity(entries.len());
    for &m in entries {
        let go = obs_clim
            .row_of(m)
            .ok_or_else(|| Error::GroupMismatch(format!("observation climatology lacks {m}")))?;
        let gm = model_clim
            .row_of(m)
            .ok_or_else(|| Error::GroupMismatch(format!("model climatology lacks {m}")))?;
        rows_idx.push((go, gm));
    }
    let k = model.spec().active_count();
    let rows = exec.map(entries.len(), |t| {
        let (go, gm) = rows_idx[t];
        let anom: Vec<f64> = (0..k)
            .map(|c| model.values()[(t, c)] - model_clim.means[(gm, c)])
            .collect();
        let mut out = interp.apply_row(&anom);
        for (s, v) in out.iter_mut().enumerate() {
            *v += obs_clim.means[(go, s)];
        }
        out
    });
    let n = interp.fine.active_count();
    let values = DMatrix::from_fn(rows.len(), n, |t, s| rows[t][s]);
    Field::new(
        interp.fine.with_kind(GridKind::Fine),
        TimeIndex::new(entries.to_vec())?,
        values,
    )
}
