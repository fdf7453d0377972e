//! On-disk formats.
//!
//! Datasets are a CSV with header `x0,...,x{d-1},y,s,m` plus a JSON sidecar
//! (`<stem>.meta.json`) holding `L, d, role, seed, n, spec_digest`. Unknown
//! attributes and group tags are written as `-1`. Floats are written with 17
//! significant digits so every value round-trips exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetRole, Group, Sample};
use crate::error::{DbaError, Result};

/// 17 significant digits in scientific notation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "L")]
    pub n_classes: usize,
    pub d: usize,
    pub role: DatasetRole,
    pub seed: u64,
    pub n: usize,
    pub spec_digest: Option<String>,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

pub fn write_dataset(dataset: &Dataset, csv_path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(csv_path)?);
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    header.extend(["y".into(), "s".into(), "m".into()]);
    writeln!(w, "{}", header.join(","))?;
    for sample in dataset.samples() {
        let mut row: Vec<String> = sample.x.iter().map(|&v| fmt_f64(v)).collect();
        row.push(sample.y.to_string());
        row.push(sample.s.map_or("-1".to_string(), |s| s.to_string()));
        row.push(sample.m.map_or(-1, Group::code).to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;

    let meta = DatasetMeta {
        n_classes: dataset.n_classes(),
        d: dataset.dim(),
        role: dataset.role(),
        seed: dataset.seed(),
        n: dataset.len(),
        spec_digest: dataset.spec_digest().map(str::to_owned),
    };
    write_json(&meta, &sidecar_path(csv_path))
}

pub fn read_dataset(csv_path: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = read_json(&sidecar_path(csv_path))?;
    let file = File::open(csv_path)?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    if headers.len() != meta.d + 3 {
        return Err(DbaError::InvalidData(format!(
            "{}: {} columns but metadata says d = {}",
            csv_path.display(),
            headers.len(),
            meta.d
        )));
    }
    let mut samples = Vec::with_capacity(meta.n);
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let bad = |what: &str| {
            DbaError::InvalidData(format!(
                "{} row {}: bad {what}",
                csv_path.display(),
                line + 1
            ))
        };
        let x = (0..meta.d)
            .map(|j| record[j].trim().parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<Vec<_>>>()?;
        let y: usize = record[meta.d].trim().parse().map_err(|_| bad("label"))?;
        let s: i64 = record[meta.d + 1]
            .trim()
            .parse()
            .map_err(|_| bad("attribute"))?;
        let m: i64 = record[meta.d + 2]
            .trim()
            .parse()
            .map_err(|_| bad("group"))?;
        let s = match s {
            -1 => None,
            v if v >= 0 => Some(v as usize),
            _ => return Err(bad("attribute")),
        };
        samples.push(Sample::new(x, y, s, Group::from_code(m)?));
    }
    if samples.len() != meta.n {
        return Err(DbaError::InvalidData(format!(
            "{}: {} rows but metadata says n = {}",
            csv_path.display(),
            samples.len(),
            meta.n
        )));
    }
    Dataset::new(
        samples,
        meta.role,
        meta.n_classes,
        meta.d,
        meta.seed,
        meta.spec_digest,
    )
}

/// Single-column CSV (`g` for weights, `rho` for spurious posteriors).
pub fn write_column(values: &[f64], header: &str, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for &v in values {
        writeln!(w, "{}", fmt_f64(v))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_column(path: &Path, header: &str) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let headers = reader.headers()?;
    if headers.len() != 1 || &headers[0] != header {
        return Err(DbaError::InvalidData(format!(
            "{}: expected single column `{header}`",
            path.display()
        )));
    }
    reader
        .records()
        .map(|r| {
            let r = r?;
            r[0].trim().parse::<f64>().map_err(|_| {
                DbaError::InvalidData(format!("{}: bad value `{}`", path.display(), &r[0]))
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}
