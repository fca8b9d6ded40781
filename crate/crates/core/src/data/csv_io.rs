//! Point-table CSV: header `x0,x1[,...]` plus optional extra numeric columns.

use std::fmt::Write as _;

use crate::autodiff::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CsvError {
    #[error("empty CSV (no header)")]
    Empty,
    #[error("no coordinate columns (expected x0, x1, ...)")]
    NoCoordinates,
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("duplicate column '{0}'")]
    DuplicateColumn(String),
    #[error("row {row}, column '{column}': {detail}")]
    BadValue {
        row: usize,
        column: String,
        detail: String,
    },
    #[error("row {row}: expected {expected} fields, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("no data rows")]
    NoRows,
    #[error("malformed CSV: {0}")]
    Malformed(String),
}

/// Parsed point table: coordinates as an `n × d` matrix plus any other columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTable {
    pub points: Tensor,
    pub extra: Vec<(String, Vec<f64>)>,
}

impl PointTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.extra
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

/// 17 significant digits, which round-trips every finite `f64`.
pub fn format_fixed17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `points` with optional trailing integer-valued columns.
pub fn write_points_csv(points: &Tensor, extra: &[(&str, &[f64])]) -> String {
    let (n, d) = (points.shape()[0], points.shape()[1]);
    let mut out = String::new();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend(extra.iter().map(|(name, _)| name.to_string()));
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..n {
        let row = points.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format_fixed17(*v));
        }
        for (_, col) in extra {
            let v = col[i];
            if v.fract() == 0.0 && v.abs() < 1e15 {
                let _ = write!(out, ",{}", v as i64);
            } else {
                let _ = write!(out, ",{v}");
            }
        }
        out.push('\n');
    }
    out
}

fn coordinate_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('x')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    digits.parse().ok()
}

/// Parses a point table, validating that `x0..x{d-1}` are all present and
/// every value is a finite float.
pub fn parse_points_csv(text: &str) -> Result<PointTable, CsvError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CsvError::Malformed(e.to_string()))?
        .clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(CsvError::Empty);
    }
    let names: Vec<String> = headers.iter().map(str::to_string).collect();
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(CsvError::DuplicateColumn(n.clone()));
        }
    }
    let coords: Vec<(usize, usize)> = names
        .iter()
        .enumerate()
        .filter_map(|(col, n)| coordinate_index(n).map(|k| (k, col)))
        .collect();
    if coords.is_empty() {
        return Err(CsvError::NoCoordinates);
    }
    let d = coords.iter().map(|(k, _)| k + 1).max().unwrap();
    if d > 4096 {
        return Err(CsvError::Malformed(format!("coordinate index x{} too large", d - 1)));
    }
    let mut coord_col = vec![usize::MAX; d];
    for &(k, col) in &coords {
        coord_col[k] = col;
    }
    if let Some(k) = coord_col.iter().position(|&c| c == usize::MAX) {
        return Err(CsvError::MissingColumn(format!("x{k}")));
    }
    let extra_cols: Vec<usize> = (0..names.len())
        .filter(|c| !coord_col.contains(c))
        .collect();

    let mut data = Vec::new();
    let mut extra: Vec<Vec<f64>> = vec![Vec::new(); extra_cols.len()];
    let mut rows = 0usize;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CsvError::Malformed(e.to_string()))?;
        let row = i + 1;
        if rec.len() != names.len() {
            return Err(CsvError::Ragged {
                row,
                expected: names.len(),
                found: rec.len(),
            });
        }
        let parse = |col: usize| -> Result<f64, CsvError> {
            let raw = &rec[col];
            let v: f64 = raw.parse().map_err(|_| CsvError::BadValue {
                row,
                column: names[col].clone(),
                detail: format!("invalid number '{raw}'"),
            })?;
            if !v.is_finite() {
                return Err(CsvError::BadValue {
                    row,
                    column: names[col].clone(),
                    detail: "non-finite value".into(),
                });
            }
            Ok(v)
        };
        for &col in &coord_col {
            data.push(parse(col)?);
        }
        for (slot, &col) in extra.iter_mut().zip(&extra_cols) {
            slot.push(parse(col)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CsvError::NoRows);
    }
    Ok(PointTable {
        points: Tensor::from_vec(&[rows, d], data),
        extra: extra_cols
            .iter()
            .map(|&c| names[c].clone())
            .zip(extra)
            .collect(),
    })
}
