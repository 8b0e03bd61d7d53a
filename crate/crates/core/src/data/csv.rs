use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnKind {
    Int,
    Float,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    /// A missing value, written as an empty field.
    Empty,
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_owned())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

/// Ordered, typed column list.
#[derive(Clone, Debug, PartialEq)]
pub struct Schema {
    columns: Vec<(String, ColumnKind)>,
}

impl Schema {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = (S, ColumnKind)>) -> Self {
        Schema {
            columns: columns.into_iter().map(|(n, k)| (n.into(), k)).collect(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// Format with 9 significant digits: fixed notation for moderate
/// magnitudes, scientific otherwise.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let e = v.abs().log10().floor() as i32;
    if (-5..9).contains(&e) {
        format!("{:.*}", (8 - e) as usize, v)
    } else {
        format!("{v:.8e}")
    }
}

fn render(cell: &Cell, kind: ColumnKind, col: &str, row: usize) -> Result<String> {
    match (cell, kind) {
        (Cell::Empty, _) => Ok(String::new()),
        (Cell::Int(v), ColumnKind::Int) => Ok(v.to_string()),
        (Cell::Int(v), ColumnKind::Float) => Ok(format_float(*v as f64)),
        (Cell::Float(v), ColumnKind::Float) => Ok(format_float(*v)),
        (Cell::Text(s), ColumnKind::Text) => Ok(s.clone()),
        _ => Err(Error::Contract(format!(
            "row {row}, column {col}: {cell:?} does not fit a {kind:?} column"
        ))),
    }
}

/// Render rows to CSV text with a header line.
pub fn csv_string(rows: &[Vec<Cell>], schema: &Schema) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::Format {
        context: "csv".into(),
        detail: e.to_string(),
    };
    w.write_record(schema.names()).map_err(wrap)?;
    for (i, row) in rows.iter().enumerate() {
        if row.len() != schema.len() {
            return Err(Error::Contract(format!(
                "row {i} has {} fields, schema has {}",
                row.len(),
                schema.len()
            )));
        }
        let fields = row
            .iter()
            .zip(&schema.columns)
            .map(|(c, (name, kind))| render(c, *kind, name, i))
            .collect::<Result<Vec<_>>>()?;
        w.write_record(&fields).map_err(wrap)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        context: "csv".into(),
        detail: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_csv(rows: &[Vec<Cell>], schema: &Schema, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, csv_string(rows, schema)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::new([("id", ColumnKind::Int), ("name", ColumnKind::Text), ("v", ColumnKind::Float)])
    }

    #[test]
    fn header_only() {
        assert_eq!(csv_string(&[], &schema()).unwrap(), "id,name,v\n");
    }

    #[test]
    fn quoting_and_formatting() {
        let rows = vec![vec![Cell::from(3usize), Cell::from("a,b"), Cell::from(0.1)]];
        assert_eq!(csv_string(&rows, &schema()).unwrap(), "id,name,v\n3,\"a,b\",0.100000000\n");
    }

    #[test]
    fn schema_violations() {
        let short = vec![vec![Cell::from(1usize)]];
        assert!(matches!(csv_string(&short, &schema()), Err(Error::Contract(_))));
        let typed = vec![vec![Cell::from("x"), Cell::from("y"), Cell::from(1.0)]];
        assert!(matches!(csv_string(&typed, &schema()), Err(Error::Contract(_))));
    }

    #[test]
    fn float_digits() {
        assert_eq!(format_float(1234.5), "1234.50000");
        assert_eq!(format_float(-2.5e-7), "-2.50000000e-7");
        assert_eq!(format_float(1.0 / 3.0), "0.333333333");
        assert_eq!(format_float(f64::INFINITY), "inf");
    }
}
