//! Headerless numeric CSV reading and writing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Writes `m` row by row, comma-separated, using round-trip float formatting.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a rectangular numeric CSV. Blank lines and lines starting with `#`
/// are skipped; errors carry 1-based line numbers.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path)?;
    let name = path.display().to_string();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let row = trimmed
            .split(',')
            .map(|tok| {
                let tok = tok.trim();
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    file: name.clone(),
                    line: lineno,
                    message: format!("not a number: {tok:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse {
                file: name,
                line: lineno,
                message: format!("non-finite value {v}"),
            });
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    file: name,
                    line: lineno,
                    message: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            file: name,
            line: 0,
            message: "no data rows".into(),
        });
    }
    let ncols = rows[0].len();
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.into_iter().flatten(),
    ))
}
