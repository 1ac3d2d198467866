//! CSV design files: one header row, one observation per row, one feature per column.
//! Values are taken as-is; nothing is centered or scaled.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Load a rectangular numeric CSV. Error locations are 1-based file lines and columns.
pub fn load_design_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);

    let width = reader
        .headers()
        .map_err(|e| Error::Ingest { row: 1, col: 0, msg: e.to_string() })?
        .len();
    if width == 0 {
        return Err(Error::Ingest { row: 1, col: 0, msg: "empty file".into() });
    }

    let mut values = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Ingest { row: line, col: 0, msg: e.to_string() })?;
        if record.len() != width {
            return Err(Error::Ingest {
                row: line,
                col: record.len().min(width) + 1,
                msg: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Ingest { row: line, col: j + 1, msg: format!("not a finite number: '{cell}'") })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Ingest { row: 2, col: 0, msg: "no data rows".into() });
    }
    Ok(DMatrix::from_row_slice(rows, width, &values))
}

/// Write a matrix with headers `x1..xd`, using round-trip float formatting.
pub fn write_design_csv(path: impl AsRef<Path>, x: &DMatrix<f64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for row in x.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn parses_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "a,b\n1,2\n3,4\n").unwrap();
        let m = load_design_csv(&p).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn reports_bad_cell_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "a,b\n1,2\n3,x\n").unwrap();
        match load_design_csv(&p) {
            Err(Error::Ingest { row, col, .. }) => assert_eq!((row, col), (3, 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_and_empty_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        fs::write(&p, "a,b\n1,2\n3\n").unwrap();
        assert!(matches!(load_design_csv(&p), Err(Error::Ingest { row: 3, .. })));
        fs::write(&p, "").unwrap();
        assert!(matches!(load_design_csv(&p), Err(Error::Ingest { .. })));
        fs::write(&p, "a,b\n").unwrap();
        assert!(matches!(load_design_csv(&p), Err(Error::Ingest { .. })));
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = DMatrix::from_fn(5, 3, |i, j| (i as f64 + 0.1) / (j as f64 + 3.7) - 0.25);
        write_design_csv(&p, &m).unwrap();
        assert_eq!(load_design_csv(&p).unwrap(), m);
    }
}
