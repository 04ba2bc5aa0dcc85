//! Nodal fields as CSV grids with a JSON header.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mesh::Mesh;
use crate::error::{Error, Result};
use crate::io::{read_matrix_csv, write_matrix_csv};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldHeader {
    nx: usize,
    ny: usize,
    bbox: [[f64; 2]; 2],
    /// Row `j` of the grid holds the nodes at `y = j / ny`.
    layout: String,
}

fn header_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `values` as an `(ny+1) × (nx+1)` grid plus `<path>.json`.
pub fn write_field(path: &Path, mesh: &Mesh, values: &[f64]) -> Result<()> {
    if values.len() != mesh.num_nodes() {
        return Err(Error::mismatch("field length", mesh.num_nodes(), values.len()));
    }
    let grid = DMatrix::from_row_slice(mesh.ny() + 1, mesh.nx() + 1, values);
    write_matrix_csv(path, &grid)?;
    let header = FieldHeader {
        nx: mesh.nx(),
        ny: mesh.ny(),
        bbox: [[0.0, 1.0], [0.0, 1.0]],
        layout: "row j holds y = j/ny, bottom first".into(),
    };
    std::fs::write(header_path(path), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

/// Reads a field written by [`write_field`].
pub fn read_field(path: &Path) -> Result<(Mesh, DVector<f64>)> {
    let header: FieldHeader = serde_json::from_str(&std::fs::read_to_string(header_path(path))?)?;
    let grid = read_matrix_csv(path)?;
    if grid.nrows() != header.ny + 1 || grid.ncols() != header.nx + 1 {
        return Err(Error::Parse {
            file: path.display().to_string(),
            line: 0,
            message: format!(
                "grid is {}×{}, header says {}×{}",
                grid.nrows(),
                grid.ncols(),
                header.ny + 1,
                header.nx + 1
            ),
        });
    }
    let mesh = Mesh::new(header.nx, header.ny)?;
    let values = DVector::from_iterator(mesh.num_nodes(), grid.transpose().iter().copied());
    Ok((mesh, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mesh = Mesh::new(3, 2).unwrap();
        let v = mesh.interpolate(|x, y| x + 10.0 * y + 0.1);
        write_field(&p, &mesh, &v).unwrap();
        let (m2, back) = read_field(&p).unwrap();
        assert_eq!((m2.nx(), m2.ny()), (3, 2));
        assert_eq!(back.as_slice(), v.as_slice());
    }
}
