//! CSV ingestion and the standardization that maps inputs onto the unit cube
//! and responses to zero mean and unit variance.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Result, SagpError};
use crate::linalg::Points;

/// Numeric table with input columns `x1..xd` and an optional `y` column.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub x: Points,
    pub y: Option<Vec<f64>>,
}

impl RawTable {
    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn y(&self) -> Result<&[f64]> {
        self.y.as_deref().ok_or_else(|| SagpError::MissingColumn("y".into()))
    }

    pub fn select(&self, idx: &[usize]) -> RawTable {
        RawTable {
            x: self.x.select(idx),
            y: self.y.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect()),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, require_y: bool) -> Result<RawTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| SagpError::io(path, e))?;
    parse_csv(file, require_y)
}

/// Read named numeric columns from a CSV file, in the order requested.
pub fn load_columns(path: impl AsRef<Path>, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| SagpError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = headers(&mut reader)?;
    let pos: Vec<usize> = names
        .iter()
        .map(|n| find(&header, n).ok_or_else(|| SagpError::MissingColumn(n.to_string())))
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); names.len()];
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        for (c, &p) in pos.iter().enumerate() {
            out[c].push(cell(&rec, p, r + 1, names[c])?);
        }
    }
    if out.first().is_some_and(|c| c.is_empty()) {
        return Err(SagpError::Empty("data rows"));
    }
    Ok(out)
}

pub fn parse_csv<R: Read>(input: R, require_y: bool) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = headers(&mut reader)?;
    let mut x_cols = Vec::new();
    while let Some(p) = find(&header, &format!("x{}", x_cols.len() + 1)) {
        x_cols.push(p);
    }
    if x_cols.is_empty() {
        return Err(SagpError::MissingColumn("x1".into()));
    }
    let y_col = find(&header, "y");
    if require_y && y_col.is_none() {
        return Err(SagpError::MissingColumn("y".into()));
    }
    let d = x_cols.len();
    let mut x = Points::new(d);
    let mut y = y_col.map(|_| Vec::new());
    let mut row = vec![0.0; d];
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        for (k, &p) in x_cols.iter().enumerate() {
            row[k] = cell(&rec, p, r + 1, &header[p])?;
        }
        x.push(&row)?;
        if let (Some(p), Some(ys)) = (y_col, y.as_mut()) {
            ys.push(cell(&rec, p, r + 1, "y")?);
        }
    }
    if x.is_empty() {
        return Err(SagpError::Empty("data rows"));
    }
    Ok(RawTable { x, y })
}

fn headers<R: Read>(reader: &mut csv::Reader<R>) -> Result<Vec<String>> {
    let h = reader.headers().map_err(csv_error)?;
    if h.is_empty() || (h.len() == 1 && h[0].is_empty()) {
        return Err(SagpError::Empty("header row"));
    }
    Ok(h.iter().map(str::to_string).collect())
}

fn find(header: &[String], name: &str) -> Option<usize> {
    header.iter().position(|h| h == name)
}

/// `row` is 1-based, counting data rows after the header.
fn cell(rec: &csv::StringRecord, pos: usize, row: usize, column: &str) -> Result<f64> {
    let raw = rec.get(pos).ok_or_else(|| SagpError::Parse {
        row,
        column: column.to_string(),
        message: "missing cell".into(),
    })?;
    let v: f64 = raw.parse().map_err(|_| SagpError::Parse {
        row,
        column: column.to_string(),
        message: format!("`{raw}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(SagpError::Parse {
            row,
            column: column.to_string(),
            message: format!("`{raw}` is not finite"),
        });
    }
    Ok(v)
}

fn csv_error(e: csv::Error) -> SagpError {
    let row = e.position().map_or(0, |p| p.line() as usize);
    SagpError::Parse {
        row,
        column: String::new(),
        message: e.to_string(),
    }
}

/// Per-dimension min-max map for inputs and mean/sd scaling for the response.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
}

impl Transform {
    pub fn fit(x: &Points, y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n < 2 {
            return Err(SagpError::DatasetTooSmall { n, required: 2 });
        }
        if y.len() != n {
            return Err(SagpError::DimensionMismatch { expected: n, got: y.len() });
        }
        let d = x.dim();
        let mut x_min = vec![f64::INFINITY; d];
        let mut x_max = vec![f64::NEG_INFINITY; d];
        for row in x.iter() {
            for k in 0..d {
                x_min[k] = x_min[k].min(row[k]);
                x_max[k] = x_max[k].max(row[k]);
            }
        }
        for k in 0..d {
            if !(x_max[k] > x_min[k]) {
                return Err(SagpError::Degenerate(format!("column x{} is constant", k + 1)));
            }
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let y_sd = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        if !(y_sd > 0.0) {
            return Err(SagpError::Degenerate("column y is constant".into()));
        }
        Ok(Transform { x_min, x_max, y_mean, y_sd })
    }

    pub fn dim(&self) -> usize {
        self.x_min.len()
    }

    /// Map inputs onto the unit cube. Points outside the training range are
    /// clipped onto the boundary, with a warning.
    pub fn apply_x(&self, x: &Points) -> Result<Points> {
        if x.dim() != self.dim() {
            return Err(SagpError::DimensionMismatch { expected: self.dim(), got: x.dim() });
        }
        let mut clipped = 0usize;
        let coords = x
            .as_flat()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let k = i % self.dim();
                let u = (v - self.x_min[k]) / (self.x_max[k] - self.x_min[k]);
                if !(0.0..=1.0).contains(&u) {
                    clipped += 1;
                }
                u.clamp(0.0, 1.0)
            })
            .collect();
        if clipped > 0 {
            log::warn!("{clipped} input coordinates outside the training range were clipped onto it");
        }
        Points::from_flat(coords, self.dim())
    }

    pub fn apply_y(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(y.len(), y.iter().map(|v| (v - self.y_mean) / self.y_sd))
    }

    pub fn invert_y(&self, v: f64) -> f64 {
        self.y_mean + self.y_sd * v
    }
}

/// Training data on the standardized scale, with the transform that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Points,
    pub y: DVector<f64>,
    pub transform: Transform,
}

impl Dataset {
    pub fn standardize(raw: &RawTable) -> Result<Self> {
        let y = raw.y()?;
        let transform = Transform::fit(&raw.x, y)?;
        Ok(Dataset {
            x: transform.apply_x(&raw.x)?,
            y: transform.apply_y(y),
            transform,
        })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }
}

/// Write a table with a header row. Floats use the shortest representation
/// that reads back to the same value.
pub fn write_table<W: Write>(out: W, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.write_record(&r).map_err(csv_error)?;
    }
    w.flush().map_err(|e| SagpError::io("<output>", e))
}

pub fn write_raw_csv<W: Write>(out: W, table: &RawTable) -> Result<()> {
    let d = table.dim();
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    if table.y.is_some() {
        header.push("y".into());
    }
    let rows = (0..table.n()).map(|i| {
        let mut r: Vec<String> = table.x.row(i).iter().map(f64::to_string).collect();
        if let Some(y) = &table.y {
            r.push(y[i].to_string());
        }
        r
    });
    write_table(out, &header, rows)
}
