//! Particle snapshots (CSV), JSON documents and diagnostics files.
//!
//! Snapshot files have the header `iter,idx,x0,...,x{m-1}` and one row per
//! particle; floats carry 17 significant digits so a write/read round trip
//! is exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{invalid, EptError, Result};
use crate::metrics::{fmt_float, DiagnosticsTable};
use crate::tensor::Tensor;

pub fn snapshot_file_name(iteration: usize) -> String {
    format!("snapshot_{iteration:06}.csv")
}

pub fn write_snapshot(path: &Path, iteration: usize, points: &Tensor) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    let m = points.ncols();
    let mut header = vec!["iter".to_string(), "idx".to_string()];
    header.extend((0..m).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (i, row) in points.rows().enumerate() {
        let mut rec = vec![iteration.to_string(), i.to_string()];
        rec.extend(row.iter().map(|&v| fmt_float(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_float(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| invalid(format!("not a number: `{s}`")))
}

/// Read a snapshot; returns its iteration and the `n x m` points.
pub fn read_snapshot(path: &Path) -> Result<(usize, Tensor)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let m = header.len().saturating_sub(2);
    let expected: Vec<String> = ["iter".to_string(), "idx".to_string()]
        .into_iter()
        .chain((0..m).map(|j| format!("x{j}")))
        .collect();
    if m == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(invalid(format!("{}: unexpected snapshot header", path.display())));
    }
    let mut iteration = None;
    let mut data = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        let it: usize = rec[0]
            .parse()
            .map_err(|_| invalid("snapshot iteration is not an integer"))?;
        if *iteration.get_or_insert(it) != it {
            return Err(invalid("snapshot mixes iterations"));
        }
        if rec[1].parse::<usize>().ok() != Some(n) {
            return Err(invalid("snapshot particle indices are not consecutive"));
        }
        for j in 0..m {
            data.push(parse_float(&rec[2 + j])?);
        }
        n += 1;
    }
    Ok((iteration.unwrap_or(0), Tensor::new(vec![n, m], data)?))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&s)?)
}

pub fn write_diagnostics(path: &Path, table: &DiagnosticsTable) -> Result<()> {
    fs::write(path, table.to_csv())?;
    Ok(())
}

/// Read a CSV of floats with a header row.
pub fn read_table(path: &Path) -> Result<DiagnosticsTable> {
    let mut r = csv::Reader::from_path(path)?;
    let columns: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec.iter().map(parse_float).collect::<Result<Vec<_>>>()?;
        if row.len() != columns.len() {
            return Err(EptError::Shape("ragged table".into()));
        }
        rows.push(row);
    }
    Ok(DiagnosticsTable { columns, rows })
}
