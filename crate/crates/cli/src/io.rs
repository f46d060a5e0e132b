//! CSV input and output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::{Array2, ArrayView2};

/// Feature matrix plus the optional `label` column.
pub struct Dataset {
    pub data: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

/// Reads a headed CSV. Every column except one named `label` is a feature.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open data file {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let label_col = headers.iter().position(|h| h.eq_ignore_ascii_case("label"));
    let features: Vec<usize> = (0..headers.len()).filter(|&c| Some(c) != label_col).collect();
    if features.is_empty() {
        bail!("{} has no feature columns", path.display());
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: row {}", path.display(), r + 1))?;
        for &c in &features {
            let cell = record.get(c).unwrap_or("");
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).with_context(|| {
                format!("{}: row {}, column {:?}: {cell:?} is not a finite number", path.display(), r + 1, &headers[c])
            })?;
            values.push(v);
        }
        if let Some(c) = label_col {
            let cell = record.get(c).unwrap_or("");
            let l: usize = cell
                .parse()
                .with_context(|| format!("{}: row {}, column \"label\": {cell:?} is not a label", path.display(), r + 1))?;
            labels.push(l);
        }
    }
    let n = values.len() / features.len();
    if n == 0 {
        bail!("{} contains no observations", path.display());
    }
    Ok(Dataset {
        data: Array2::from_shape_vec((n, features.len()), values)?,
        labels: label_col.map(|_| labels),
    })
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

/// Writes `x1..xd,label`.
pub fn write_dataset(path: &Path, data: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    let mut out = create(path)?;
    let header: Vec<String> = (1..=data.ncols()).map(|k| format!("x{k}")).collect();
    writeln!(out, "{},label", header.join(","))?;
    for (row, label) in data.rows().into_iter().zip(labels) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{label}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}
