//! CSV and JSON reading and writing. Numbers are parsed with Rust's own
//! float parser, so input is locale-independent (decimal point only).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Bytes of an input file plus its digest, kept for the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_input(path: &Path, digests: &mut Vec<FileDigest>) -> CliResult<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    digests.push(FileDigest { path: path.to_path_buf(), sha256: sha256_hex(&bytes), bytes: bytes.len() });
    Ok(bytes)
}

pub fn write_output(path: &Path, contents: &[u8], digests: &mut Vec<FileDigest>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    digests.push(FileDigest { path: path.to_path_buf(), sha256: sha256_hex(contents), bytes: contents.len() });
    Ok(())
}

pub struct Table<T> {
    pub header: Vec<String>,
    pub rows: Vec<Vec<T>>,
}

/// Parse a CSV with a header row. `parse` receives each cell and returns an
/// error message; the location is added here. Lines are 1-based and count
/// the header.
pub fn parse_table<T, F>(bytes: &[u8], name: &str, parse: F) -> CliResult<Table<T>>
where
    F: Fn(&str) -> Result<T, String>,
{
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(bytes);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::input(format!("{name}: cannot read header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(CliError::input(format!("{name}: empty header")));
    }
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| CliError::input(format!("{name} line {line}: {e}")))?;
        if record.len() != header.len() {
            return Err(CliError::input(format!(
                "{name} line {line}: expected {} columns, found {}",
                header.len(),
                record.len()
            )));
        }
        let mut row = Vec::with_capacity(header.len());
        for (c, cell) in record.iter().enumerate() {
            let v = parse(cell).map_err(|m| CliError::input(format!("{name} line {line}, column {} ('{}'): {m}", c + 1, header[c])))?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::input(format!("{name}: no data rows")));
    }
    Ok(Table { header, rows })
}

pub fn parse_count(cell: &str) -> Result<u64, String> {
    if cell.starts_with('-') {
        return Err("negative count".into());
    }
    cell.parse::<u64>().map_err(|_| "not a non-negative integer count".into())
}

pub fn parse_real(cell: &str) -> Result<f64, String> {
    let v: f64 = cell.parse().map_err(|_| "not a number".to_string())?;
    if !v.is_finite() {
        return Err("non-finite value".into());
    }
    Ok(v)
}

pub fn table_matrix<T: Copy + nalgebra::Scalar>(t: &Table<T>) -> DMatrix<T> {
    DMatrix::from_fn(t.rows.len(), t.header.len(), |i, j| t.rows[i][j])
}

pub fn matrix_csv<T: std::fmt::Display + nalgebra::Scalar>(header: &[String], m: &DMatrix<T>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parameter file: `b` has one row per covariate and one column per species.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    #[serde(default)]
    pub schema_version: Option<u32>,
    #[serde(default)]
    pub species: Option<Vec<String>>,
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    pub b: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

pub fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> CliResult<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(CliError::input(format!("{what}: expected a non-empty rectangular array")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(value).map_err(|e| CliError::numeric(format!("serialization failed: {e}")))?;
    s.push(b'\n');
    Ok(s)
}
