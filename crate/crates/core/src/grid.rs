//! Grid and time data model shared by every stage of the pipeline.
//!
//! Active cells are ordered row-major over `(row, col)` with masked cells
//! skipped. Two fields built on equal [`GridSpec`]s therefore always agree on
//! pixel ordering.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Coarse,
    Fine,
}

impl GridKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GridKind::Coarse => "coarse",
            GridKind::Fine => "fine",
        }
    }
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(GridKind::Coarse),
            "fine" => Ok(GridKind::Fine),
            other => Err(Error::MalformedHeader(format!(
                "unknown grid kind `{other}`"
            ))),
        }
    }
}

/// Regular lon/lat grid with an activity mask.
///
/// `lon0`/`lat0` are the coordinates of the centre of cell `(row 0, col 0)`;
/// cell `(r, c)` is centred at `(lon0 + c·dlon, lat0 + r·dlat)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    kind: GridKind,
    lon0: f64,
    lat0: f64,
    dlon: f64,
    dlat: f64,
    ncols: usize,
    nrows: usize,
    mask: Vec<bool>,
    active: Vec<usize>,
}

impl GridSpec {
    pub fn new(
        kind: GridKind,
        lon0: f64,
        lat0: f64,
        dlon: f64,
        dlat: f64,
        ncols: usize,
        nrows: usize,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if !(dlon > 0.0) || !dlon.is_finite() {
            return Err(Error::MalformedInput(format!(
                "dlon must be > 0, got {dlon}"
            )));
        }
        if dlat == 0.0 || !dlat.is_finite() {
            return Err(Error::MalformedInput(
                "dlat must be finite and non-zero".into(),
            ));
        }
        if !lon0.is_finite() || !lat0.is_finite() {
            return Err(Error::MalformedInput("grid origin must be finite".into()));
        }
        if ncols == 0 || nrows == 0 {
            return Err(Error::MalformedInput(
                "grid needs at least one row and column".into(),
            ));
        }
        if mask.len() != ncols * nrows {
            return Err(Error::dims("grid mask", ncols * nrows, mask.len()));
        }
        let active = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        Ok(Self {
            kind,
            lon0,
            lat0,
            dlon,
            dlat,
            ncols,
            nrows,
            mask,
            active,
        })
    }

    /// Grid with every cell active.
    pub fn full(
        kind: GridKind,
        lon0: f64,
        lat0: f64,
        dlon: f64,
        dlat: f64,
        ncols: usize,
        nrows: usize,
    ) -> Result<Self> {
        Self::new(
            kind,
            lon0,
            lat0,
            dlon,
            dlat,
            ncols,
            nrows,
            vec![true; ncols * nrows],
        )
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }
    pub fn lon0(&self) -> f64 {
        self.lon0
    }
    pub fn lat0(&self) -> f64 {
        self.lat0
    }
    pub fn dlon(&self) -> f64 {
        self.dlon
    }
    pub fn dlat(&self) -> f64 {
        self.dlat
    }
    pub fn ncols(&self) -> usize {
        self.ncols
    }
    pub fn nrows(&self) -> usize {
        self.nrows
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Number of active cells (K for coarse grids, n for fine grids).
    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    /// Flat `row * ncols + col` index of each active cell, in payload order.
    pub fn active_indices(&self) -> &[usize] {
        &self.active
    }

    pub fn is_active(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.ncols + col]
    }

    /// Cell-centre coordinates of flat index `idx`.
    pub fn center(&self, idx: usize) -> (f64, f64) {
        let (r, c) = (idx / self.ncols, idx % self.ncols);
        (
            self.lon0 + c as f64 * self.dlon,
            self.lat0 + r as f64 * self.dlat,
        )
    }

    /// Coordinates of the active cells in payload order.
    pub fn active_centers(&self) -> Vec<(f64, f64)> {
        self.active.iter().map(|&i| self.center(i)).collect()
    }

    /// Position of a flat index inside the active ordering, if active.
    pub fn active_position(&self) -> Vec<Option<usize>> {
        let mut pos = vec![None; self.mask.len()];
        for (k, &i) in self.active.iter().enumerate() {
            pos[i] = Some(k);
        }
        pos
    }

    /// Same geometry, different kind.
    pub fn with_kind(&self, kind: GridKind) -> Self {
        Self {
            kind,
            ..self.clone()
        }
    }
}

/// A calendar month of a given year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u8,
}

impl YearMonth {
    pub fn new(year: i32, month: u8) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::MalformedInput(format!(
                "month {month} outside 1..=12"
            )));
        }
        Ok(Self { year, month })
    }

    /// The month `k` months after this one.
    pub fn plus(self, k: i64) -> Self {
        let idx = self.year as i64 * 12 + (self.month as i64 - 1) + k;
        YearMonth {
            year: idx.div_euclid(12) as i32,
            month: (idx.rem_euclid(12) + 1) as u8,
        }
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::MalformedInput(format!("expected YYYY-MM, got `{s}`"));
        let (y, m) = s.trim().rsplit_once('-').ok_or_else(bad)?;
        if m.len() != 2 {
            return Err(bad());
        }
        let year = y.parse::<i32>().map_err(|_| bad())?;
        let month = m.parse::<u8>().map_err(|_| bad())?;
        YearMonth::new(year, month)
    }
}

impl Serialize for YearMonth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Strictly increasing sequence of months.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TimeIndex {
    entries: Vec<YearMonth>,
}

impl TimeIndex {
    pub fn new(entries: Vec<YearMonth>) -> Result<Self> {
        if let Some(w) = entries.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::MalformedInput(format!(
                "time index not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(Self { entries })
    }

    /// `count` consecutive months starting at `start`.
    pub fn monthly(start: YearMonth, count: usize) -> Self {
        Self {
            entries: (0..count as i64).map(|k| start.plus(k)).collect(),
        }
    }

    pub fn entries(&self) -> &[YearMonth] {
        &self.entries
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn position(&self, m: YearMonth) -> Option<usize> {
        self.entries.binary_search(&m).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Summer,
    Autumn,
    Winter,
    Spring,
}

impl Season {
    pub const ALL: [Season; 4] = [
        Season::Summer,
        Season::Autumn,
        Season::Winter,
        Season::Spring,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Season::Summer => "summer",
            Season::Autumn => "autumn",
            Season::Winter => "winter",
            Season::Spring => "spring",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Season {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Season::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::MalformedInput(format!("unknown season `{s}`")))
    }
}

/// Month → season assignment with exactly three months per season.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeasonMap {
    by_month: [Season; 12],
}

impl Default for SeasonMap {
    /// Southern-hemisphere convention: summer is Dec–Feb.
    fn default() -> Self {
        use Season::*;
        Self {
            by_month: [
                Summer, Summer, Autumn, Autumn, Autumn, Winter, Winter, Winter, Spring, Spring,
                Spring, Summer,
            ],
        }
    }
}

impl SeasonMap {
    pub fn new(by_month: [Season; 12]) -> Result<Self> {
        for s in Season::ALL {
            let c = by_month.iter().filter(|&&x| x == s).count();
            if c != 3 {
                return Err(Error::Config(format!(
                    "season {s} has {c} months, expected 3"
                )));
            }
        }
        Ok(Self { by_month })
    }

    /// Builds a map from explicit month lists per season.
    pub fn from_lists(lists: &[(Season, Vec<u8>)]) -> Result<Self> {
        let mut by_month: [Option<Season>; 12] = [None; 12];
        for (s, months) in lists {
            for &m in months {
                if !(1..=12).contains(&m) {
                    return Err(Error::Config(format!("month {m} outside 1..=12")));
                }
                if by_month[m as usize - 1].replace(*s).is_some() {
                    return Err(Error::Config(format!("month {m} assigned twice")));
                }
            }
        }
        let mut out = [Season::Summer; 12];
        for (i, s) in by_month.iter().enumerate() {
            out[i] = s.ok_or_else(|| Error::Config(format!("month {} has no season", i + 1)))?;
        }
        Self::new(out)
    }

    pub fn season_of(&self, month: u8) -> Season {
        self.by_month[month as usize - 1]
    }

    pub fn months_of(&self, season: Season) -> Vec<u8> {
        (1..=12).filter(|&m| self.season_of(m) == season).collect()
    }

    /// Compact textual form, e.g. `summer:12/1/2;autumn:3/4/5;...`.
    pub fn encode(&self) -> String {
        Season::ALL
            .iter()
            .map(|&s| {
                let ms: Vec<String> = self.months_of(s).iter().map(|m| m.to_string()).collect();
                format!("{}:{}", s, ms.join("/"))
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lists = Vec::new();
        for part in text.split(';') {
            let (name, months) = part
                .split_once(':')
                .ok_or_else(|| Error::MalformedHeader(format!("bad season map entry `{part}`")))?;
            let months = months
                .split('/')
                .map(|m| {
                    m.parse::<u8>()
                        .map_err(|_| Error::MalformedHeader(format!("bad month `{m}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            lists.push((name.parse::<Season>()?, months));
        }
        Self::from_lists(&lists)
    }
}

/// Gridded space–time values, `values[(t, c)]` for time row `t` and active
/// cell `c`. Used for both coarse model output and fine fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    spec: GridSpec,
    time: TimeIndex,
    values: DMatrix<f64>,
}

pub type CoarseField = Field;
pub type FineField = Field;

impl Field {
    pub fn new(spec: GridSpec, time: TimeIndex, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != time.len() {
            return Err(Error::dims("field time rows", time.len(), values.nrows()));
        }
        if values.ncols() != spec.active_count() {
            return Err(Error::dims(
                "field active cells",
                spec.active_count(),
                values.ncols(),
            ));
        }
        for c in 0..values.ncols() {
            for r in 0..values.nrows() {
                if !values[(r, c)].is_finite() {
                    return Err(Error::NonFiniteValue { row: r, cell: c });
                }
            }
        }
        Ok(Self { spec, time, values })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
    pub fn time(&self) -> &TimeIndex {
        &self.time
    }
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    /// Values of one time row as an owned vector.
    pub fn row_vec(&self, t: usize) -> Vec<f64> {
        self.values.row(t).iter().copied().collect()
    }

    /// Rows whose months satisfy `keep`, in order.
    pub fn select(&self, keep: impl Fn(YearMonth) -> bool) -> Result<Field> {
        let rows: Vec<usize> = (0..self.time.len())
            .filter(|&t| keep(self.time.entries()[t]))
            .collect();
        self.select_rows(&rows)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Field> {
        let entries = rows.iter().map(|&t| self.time.entries()[t]).collect();
        let n = self.spec.active_count();
        let values = DMatrix::from_fn(rows.len(), n, |i, c| self.values[(rows[i], c)]);
        Field::new(self.spec.clone(), TimeIndex::new(entries)?, values)
    }
}
