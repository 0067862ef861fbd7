//! CSV matrices and JSON files.
//!
//! Numbers in CSV files are written with 17 significant digits; JSON uses the
//! shortest representation that parses back to the same `f64`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tppgw::{KernelMatrix, Mat, TransportPlan};

use crate::error::{CliError, Result};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn parse_f64(path: &Path, row: usize, cell: &str) -> Result<f64> {
    cell.trim()
        .parse()
        .map_err(|_| CliError::Data(format!("{}: row {row}: not a number: {cell:?}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("output types serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads a user-supplied config; parse failures are configuration errors.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Reads a data artifact (checkpoint, report); parse failures are data errors.
pub fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Square matrix with a header row `id, <ids...>` and the id in the first column.
pub fn write_kernel_csv(path: &Path, ids: &[String], k: &Mat<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["id".to_string()];
    header.extend(ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(k.row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_kernel_csv(path: &Path) -> Result<(Vec<String>, KernelMatrix<f64>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = ids.len();
    let mut values = Vec::with_capacity(n * n);
    let mut rows = 0;
    for (i, record) in r.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        if record.len() != n + 1 {
            return Err(CliError::Data(format!(
                "{}: row {} has {} cells, expected {}",
                path.display(),
                i + 1,
                record.len(),
                n + 1
            )));
        }
        if i >= n || record[0] != ids[i] {
            return Err(CliError::Data(format!(
                "{}: row {} id {:?} does not match the header order",
                path.display(),
                i + 1,
                &record[0]
            )));
        }
        for cell in record.iter().skip(1) {
            values.push(parse_f64(path, i + 1, cell)?);
        }
        rows += 1;
    }
    if rows != n {
        return Err(CliError::Data(format!("{}: {rows} rows for {n} columns", path.display())));
    }
    let m = Mat::from_vec(n, n, values)?;
    let k = KernelMatrix::new(m).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((ids, k))
}

/// Transport plan as CSV. Comment lines above the header carry the squared
/// discrepancy and both marginals.
pub fn write_plan_csv(
    path: &Path,
    row_ids: &[String],
    col_ids: &[String],
    plan: &TransportPlan<f64>,
    gw_squared: f64,
) -> Result<()> {
    let join = |v: &[f64]| v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(";");
    let mut text = format!(
        "# gw_squared={}\n# mu={}\n# nu={}\n",
        fmt_f64(gw_squared),
        join(plan.mu()),
        join(plan.nu())
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(col_ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, id) in row_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(plan.matrix().row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    let body = w.into_inner().map_err(|e| CliError::io(path, e.into_error()))?;
    text.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub struct PlanFile {
    pub gw_squared: f64,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub plan: TransportPlan<f64>,
}

pub fn read_plan_csv(path: &Path) -> Result<PlanFile> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut gw_squared = None;
    let mut mu = None;
    let mut nu = None;
    let list = |s: &str| -> Result<Vec<f64>> { s.split(';').map(|c| parse_f64(path, 0, c)).collect() };
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        let body = line.trim_start_matches('#').trim();
        if let Some(v) = body.strip_prefix("gw_squared=") {
            gw_squared = Some(parse_f64(path, 0, v)?);
        } else if let Some(v) = body.strip_prefix("mu=") {
            mu = Some(list(v)?);
        } else if let Some(v) = body.strip_prefix("nu=") {
            nu = Some(list(v)?);
        }
    }
    let missing = |what: &str| CliError::Data(format!("{}: missing `{what}` metadata line", path.display()));
    let (gw_squared, mu, nu) = (
        gw_squared.ok_or_else(|| missing("gw_squared"))?,
        mu.ok_or_else(|| missing("mu"))?,
        nu.ok_or_else(|| missing("nu"))?,
    );
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let col_ids: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().skip(1).map(str::to_string).collect();
    let mut row_ids = Vec::new();
    let mut values = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        row_ids.push(record[0].to_string());
        for cell in record.iter().skip(1) {
            values.push(parse_f64(path, i + 1, cell)?);
        }
    }
    let matrix = Mat::from_vec(row_ids.len(), col_ids.len(), values)?;
    let plan = TransportPlan::new(matrix, mu, nu).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(PlanFile {
        gw_squared,
        row_ids,
        col_ids,
        plan,
    })
}
