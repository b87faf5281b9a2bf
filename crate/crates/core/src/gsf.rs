//! The `.gsf` gridded space–time container.
//!
//! A file is a text header of `key=value` lines, one blank line, then a
//! payload of little-endian `f64` values. For fields the header keys are, in
//! order: `kind`, `lon0`, `lat0`, `dlon`, `dlat`, `ncols`, `nrows`, `ntime`,
//! `months` (comma list of `YYYY-MM`) and `mask`; the payload holds
//! `ntime × active` values in row-major (time, cell) order with masked cells
//! omitted.
//!
//! The mask is run-length encoded as comma-separated `bit:count` runs over
//! the row-major cell order, e.g. `1:12,0:3,1:5`. Reals in the header use the
//! shortest representation that parses back to the same `f64`.
//!
//! Other artifacts (climatologies, bases, fitted models) reuse the same
//! container with their own `kind=` and extra keys.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{Field, GridKind, GridSpec, TimeIndex, YearMonth};

/// Parsed header plus raw payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    header: Vec<(String, String)>,
    payload: Vec<f64>,
}

impl Document {
    pub fn new(kind: &str) -> Self {
        Self {
            header: vec![("kind".to_string(), kind.to_string())],
            payload: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.header.push((key.to_string(), value.to_string()));
    }

    pub fn push_f64(&mut self, key: &str, value: f64) {
        self.push(key, fmt_f64(value));
    }

    pub fn payload_mut(&mut self) -> &mut Vec<f64> {
        &mut self.payload
    }

    pub fn payload(&self) -> &[f64] {
        &self.payload
    }

    pub fn kind(&self) -> &str {
        &self.header[0].1
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::MalformedHeader(format!("missing key `{key}`")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::MalformedHeader(format!("`{key}={v}` is not a count")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let v = self.get(key)?;
        parse_f64(key, v)
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.get(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|x| parse_f64(key, x)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(256 + self.payload.len() * 8);
        for (k, v) in &self.header {
            out.extend_from_slice(k.as_bytes());
            out.push(b'=');
            out.extend_from_slice(v.as_bytes());
            out.push(b'\n');
        }
        out.push(b'\n');
        for x in &self.payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::MalformedHeader("no blank line ending the header".into()))?;
        let text = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
        let mut header: Vec<(String, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::MalformedHeader(format!("line {}: expected key=value", lineno + 1))
            })?;
            if header.iter().any(|(hk, _)| hk == k) {
                return Err(Error::MalformedHeader(format!("duplicate key `{k}`")));
            }
            header.push((k.to_string(), v.to_string()));
        }
        if header.first().map(|(k, _)| k.as_str()) != Some("kind") {
            return Err(Error::MalformedHeader("first key must be `kind`".into()));
        }
        let body = &bytes[split + 2..];
        if !body.len().is_multiple_of(8) {
            return Err(Error::dims(
                "payload bytes (multiple of 8)",
                body.len() / 8 * 8 + 8,
                body.len(),
            ));
        }
        let payload = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self { header, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    /// Checks the payload length against an expected count.
    pub fn expect_payload(&self, context: &str, expected: usize) -> Result<()> {
        if self.payload.len() != expected {
            return Err(Error::dims(context, expected, self.payload.len()));
        }
        Ok(())
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("`{key}={v}` is not a real")))?;
    if !x.is_finite() {
        return Err(Error::MalformedHeader(format!("`{key}={v}` is not finite")));
    }
    Ok(x)
}

pub fn encode_mask(mask: &[bool]) -> String {
    let mut runs: Vec<String> = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        let bit = mask[i];
        let start = i;
        while i < mask.len() && mask[i] == bit {
            i += 1;
        }
        runs.push(format!("{}:{}", u8::from(bit), i - start));
    }
    runs.join(",")
}

pub fn decode_mask(text: &str, expected: usize) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(expected);
    if !text.is_empty() {
        for run in text.split(',') {
            let (bit, count) = run
                .split_once(':')
                .ok_or_else(|| Error::MalformedHeader(format!("bad mask run `{run}`")))?;
            let bit = match bit {
                "0" => false,
                "1" => true,
                _ => return Err(Error::MalformedHeader(format!("bad mask bit `{bit}`"))),
            };
            let count: usize = count
                .parse()
                .map_err(|_| Error::MalformedHeader(format!("bad mask count `{count}`")))?;
            mask.extend(std::iter::repeat_n(bit, count));
        }
    }
    if mask.len() != expected {
        return Err(Error::dims("mask cells", expected, mask.len()));
    }
    Ok(mask)
}

/// Appends the grid geometry keys (everything but `kind`, `ntime`, `months`).
pub fn push_grid(doc: &mut Document, spec: &GridSpec) {
    doc.push_f64("lon0", spec.lon0());
    doc.push_f64("lat0", spec.lat0());
    doc.push_f64("dlon", spec.dlon());
    doc.push_f64("dlat", spec.dlat());
    doc.push("ncols", spec.ncols());
    doc.push("nrows", spec.nrows());
}

pub fn push_mask(doc: &mut Document, spec: &GridSpec) {
    doc.push("mask", encode_mask(spec.mask()));
}

pub fn read_grid(doc: &Document, kind: GridKind) -> Result<GridSpec> {
    let ncols = doc.get_usize("ncols")?;
    let nrows = doc.get_usize("nrows")?;
    let mask = decode_mask(doc.get("mask")?, ncols * nrows)?;
    GridSpec::new(
        kind,
        doc.get_f64("lon0")?,
        doc.get_f64("lat0")?,
        doc.get_f64("dlon")?,
        doc.get_f64("dlat")?,
        ncols,
        nrows,
        mask,
    )
    .map_err(|e| Error::MalformedHeader(e.to_string()))
}

pub fn encode_months(months: &[YearMonth]) -> String {
    months
        .iter()
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn decode_months(text: &str) -> Result<Vec<YearMonth>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|m| {
            m.parse()
                .map_err(|e: Error| Error::MalformedHeader(e.to_string()))
        })
        .collect()
}

/// Row-major flattening of a matrix into a payload.
pub fn push_matrix(payload: &mut Vec<f64>, m: &DMatrix<f64>) {
    payload.reserve(m.len());
    for r in 0..m.nrows() {
        payload.extend(m.row(r).iter());
    }
}

pub fn take_matrix(data: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, &data[..rows * cols])
}

pub fn encode_field(field: &Field) -> Result<Vec<u8>> {
    if field.time().is_empty() {
        return Err(Error::MalformedInput(
            "cannot write a field with an empty time index".into(),
        ));
    }
    let spec = field.spec();
    let mut doc = Document::new(spec.kind().as_str());
    push_grid(&mut doc, spec);
    doc.push("ntime", field.time().len());
    doc.push("months", encode_months(field.time().entries()));
    push_mask(&mut doc, spec);
    push_matrix(doc.payload_mut(), field.values());
    Ok(doc.to_bytes())
}

pub fn decode_field(bytes: &[u8]) -> Result<Field> {
    let doc = Document::parse(bytes)?;
    let kind: GridKind = doc.kind().parse()?;
    let spec = read_grid(&doc, kind)?;
    let ntime = doc.get_usize("ntime")?;
    let months = decode_months(doc.get("months")?)?;
    if months.len() != ntime {
        return Err(Error::dims("months entries", ntime, months.len()));
    }
    let time = TimeIndex::new(months).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let n = spec.active_count();
    doc.expect_payload("field payload values", ntime * n)?;
    let values = take_matrix(doc.payload(), ntime, n);
    Field::new(spec, time, values)
}

pub fn write_field(field: &Field, path: &Path) -> Result<()> {
    let bytes = encode_field(field)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path) -> Result<Field> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes)
}
