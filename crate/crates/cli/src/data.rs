//! Dataset CSV files for the simulated models.
//!
//! - stochastic volatility: `t, y, x_true`
//! - Cox process: `i, j, y, x_true` with 1-based row-major cell indices
//! - ODE observations: `t, y_1..y_N` followed by optional `x_1..x_N`

use std::path::Path;

use geomc_models::gpode::OdeData;
use geomc_models::lgcp::LgcpData;
use geomc_models::stochvol::SvData;
use geomc_models::DataError;
use nalgebra::DMatrix;

use crate::error::CliError;

/// Seventeen significant digits: enough to reload the exact double.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn invalid(path: &Path, message: impl std::fmt::Display) -> CliError {
    CliError::Data(DataError::Invalid(format!("{}: {message}", path.display())))
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| invalid(path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| invalid(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| invalid(path, e))?;
        rows.push(record.iter().map(|s| s.trim().to_string()).collect());
    }
    Ok((headers, rows))
}

fn column(path: &Path, headers: &[String], name: &str) -> Result<usize, CliError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| invalid(path, format!("missing column `{name}`")))
}

fn parse_cell<T: std::str::FromStr>(path: &Path, row: usize, name: &str, s: &str) -> Result<T, CliError> {
    // Row numbers count the header as row 1.
    s.parse()
        .map_err(|_| invalid(path, format!("row {}: `{name}` is not a valid number: `{s}`", row + 2)))
}

pub fn serialize_sv(data: &SvData) -> String {
    let mut out = String::from("t,y,x_true\n");
    for (t, (y, x)) in data.y.iter().zip(&data.x).enumerate() {
        out += &format!("{},{},{}\n", t + 1, fmt_real(*y), fmt_real(*x));
    }
    out
}

/// The `y` column.
pub fn read_sv(path: &Path) -> Result<Vec<f64>, CliError> {
    let (headers, rows) = read_table(path)?;
    let yc = column(path, &headers, "y")?;
    let y: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(r, row)| parse_cell(path, r, "y", &row[yc]))
        .collect::<Result<_, _>>()?;
    if y.len() < 2 {
        return Err(invalid(path, "need at least two observations"));
    }
    Ok(y)
}

pub fn serialize_lgcp(n: usize, data: &LgcpData) -> String {
    let mut out = String::from("i,j,y,x_true\n");
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            out += &format!("{},{},{},{}\n", i + 1, j + 1, data.y[k], fmt_real(data.x_true[k]));
        }
    }
    out
}

/// Counts in row-major order for an `n × n` grid.
pub fn read_lgcp(path: &Path, n: usize) -> Result<Vec<u64>, CliError> {
    let (headers, rows) = read_table(path)?;
    let (ic, jc, yc) = (
        column(path, &headers, "i")?,
        column(path, &headers, "j")?,
        column(path, &headers, "y")?,
    );
    if rows.len() != n * n {
        return Err(invalid(path, format!("expected {} cells for n = {n}, found {}", n * n, rows.len())));
    }
    let mut y = vec![None; n * n];
    for (r, row) in rows.iter().enumerate() {
        let i: usize = parse_cell(path, r, "i", &row[ic])?;
        let j: usize = parse_cell(path, r, "j", &row[jc])?;
        if !(1..=n).contains(&i) || !(1..=n).contains(&j) {
            return Err(invalid(path, format!("row {}: cell ({i}, {j}) outside the {n}×{n} grid", r + 2)));
        }
        y[(i - 1) * n + (j - 1)] = Some(parse_cell(path, r, "y", &row[yc])?);
    }
    y.into_iter()
        .collect::<Option<Vec<u64>>>()
        .ok_or_else(|| invalid(path, "some cells appear twice"))
}

pub fn serialize_ode(data: &OdeData) -> String {
    let n = data.y.nrows();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|k| format!("y_{k}")));
    header.extend((1..=n).map(|k| format!("x_{k}")));
    let mut out = header.join(",") + "\n";
    for (i, t) in data.times.iter().enumerate() {
        let mut row = vec![fmt_real(*t)];
        row.extend((0..n).map(|k| fmt_real(data.y[(k, i)])));
        row.extend((0..n).map(|k| fmt_real(data.x_true[(k, i)])));
        out += &(row.join(",") + "\n");
    }
    out
}

/// Observation times and the `N × T` observation matrix.
pub fn read_ode(path: &Path, n_states: usize) -> Result<(Vec<f64>, DMatrix<f64>), CliError> {
    let (headers, rows) = read_table(path)?;
    let tc = column(path, &headers, "t")?;
    let cols: Vec<usize> = (1..=n_states)
        .map(|k| column(path, &headers, &format!("y_{k}")))
        .collect::<Result<_, _>>()?;
    let mut times = Vec::with_capacity(rows.len());
    let mut y = DMatrix::zeros(n_states, rows.len());
    for (r, row) in rows.iter().enumerate() {
        times.push(parse_cell(path, r, "t", &row[tc])?);
        for (k, c) in cols.iter().enumerate() {
            y[(k, r)] = parse_cell(path, r, &headers[*c], &row[*c])?;
        }
    }
    if times.len() < 2 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid(path, "times must be strictly increasing with at least two points"));
    }
    Ok((times, y))
}
