use std::fs;
use std::path::Path;

use balsens::nalgebra::DMatrix;
use balsens::Dataset;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Reads a CSV with a header row. `y` and `z` are required; every other
/// column is a numeric covariate, in file order.
pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Schema(format!("bad header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| -> CliResult<usize> {
        let hits: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| h.as_str() == name).map(|(i, _)| i).collect();
        match hits.as_slice() {
            [i] => Ok(*i),
            [] => Err(CliError::Schema(format!("missing required column `{name}`"))),
            _ => Err(CliError::Schema(format!("column `{name}` appears more than once"))),
        }
    };
    let (yc, zc) = (find("y")?, find("z")?);
    let covariates: Vec<usize> = (0..headers.len()).filter(|&i| i != yc && i != zc).collect();
    if covariates.is_empty() {
        return Err(CliError::Schema("no covariate columns besides `y` and `z`".into()));
    }
    let (mut y, mut z, mut values) = (Vec::new(), Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Schema(format!("data row {row}: {e}")))?;
        if record.len() != headers.len() {
            return Err(CliError::Schema(format!(
                "data row {row} has {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        let cell = |c: usize| -> CliResult<f64> {
            record[c].parse::<f64>().map_err(|_| {
                CliError::Schema(format!("data row {row}, column `{}`: `{}` is not a number", headers[c], &record[c]))
            })
        };
        y.push(cell(yc)?);
        z.push(cell(zc)?);
        for &c in &covariates {
            values.push(cell(c)?);
        }
    }
    let n = y.len();
    let x = DMatrix::from_row_slice(n, covariates.len(), &values);
    let names = covariates.iter().map(|&c| headers[c].clone()).collect();
    Ok(Dataset::new(y, z, x, names)?)
}

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let io = |e: csv::Error| CliError::Io(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

pub fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("creating {}: {e}", path.display())))
}
