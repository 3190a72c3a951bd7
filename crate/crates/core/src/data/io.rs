use std::fs;
use std::path::Path;

use super::{ObsColumns, Observation, PerturbDataset, Split};
use crate::error::{Error, Result};
use crate::ndcore::{Scalar, Tensor};

const CONTROL_PREFIX: &str = "control=";

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path, text: &str) -> Result<Table> {
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Format {
            what: "csv header",
            detail: format!("{file}: {e}"),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format {
            what: "csv record",
            detail: format!("{file}: {e}"),
        })?;
        if rec.len() != header.len() {
            return Err(Error::RaggedRow {
                file,
                row: i + 1,
                found: rec.len(),
                expected: header.len(),
            });
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

fn read_file(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

/// Reads `X.csv`, `D.csv` and the optional `obs.csv` from `dir`.
///
/// `D.csv` may start with a metadata line `#control=NAME` naming the
/// control perturbation column. Observations are treated as counts unless
/// any field of `X.csv` is written with a decimal point or exponent.
pub fn load_dataset<S: Scalar>(dir: &Path) -> Result<PerturbDataset<S>> {
    let x_path = dir.join("X.csv");
    let d_path = dir.join("D.csv");
    let x_text = read_file(&x_path)?;
    let d_text = read_file(&d_path)?;

    let mut control = None;
    let d_body = match d_text.split_once('\n') {
        Some((first, rest)) if first.starts_with('#') => {
            let meta = first.trim_start_matches('#').trim();
            if let Some(name) = meta.strip_prefix(CONTROL_PREFIX) {
                control = Some(name.trim().to_string());
            }
            rest
        }
        _ => d_text.as_str(),
    };

    let xt = read_table(&x_path, &x_text)?;
    let dt = read_table(&d_path, d_body)?;
    if xt.rows.len() != dt.rows.len() {
        return Err(Error::Format {
            what: "dataset",
            detail: format!("X.csv has {} rows but D.csv has {}", xt.rows.len(), dt.rows.len()),
        });
    }

    let real = xt
        .rows
        .iter()
        .flatten()
        .any(|f| f.contains(['.', 'e', 'E']));
    let observation = if real { Observation::Real } else { Observation::Counts };

    let n = xt.rows.len();
    let mut xs = Vec::with_capacity(n * xt.header.len());
    for (i, row) in xt.rows.iter().enumerate() {
        for (j, f) in row.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                file: "X.csv".into(),
                row: i + 1,
                col: j + 1,
                value: f.clone(),
            })?;
            if observation == Observation::Counts && v < 0.0 {
                return Err(Error::NegativeCount {
                    file: "X.csv".into(),
                    row: i + 1,
                    col: j + 1,
                    value: v,
                });
            }
            xs.push(S::lit(v));
        }
    }
    let mut ds_ = Vec::with_capacity(n * dt.header.len());
    for (i, row) in dt.rows.iter().enumerate() {
        for (j, f) in row.iter().enumerate() {
            let v = match f.trim() {
                "0" => S::zero(),
                "1" => S::one(),
                other => {
                    return Err(Error::NonBinaryDosage {
                        file: "D.csv".into(),
                        row: i + 1,
                        col: j + 1,
                        value: other.to_string(),
                    })
                }
            };
            ds_.push(v);
        }
    }
    let x = Tensor::new(vec![n, xt.header.len()], xs)?;
    let dosage = Tensor::new(vec![n, dt.header.len()], ds_)?;
    let mut ds = PerturbDataset::new(x, dosage, xt.header, dt.header, observation).map_err(|e| match e {
        Error::EmptyRow { row, .. } => Error::EmptyRow {
            file: "X.csv".into(),
            row,
        },
        other => other,
    })?;
    if let Some(c) = &control {
        ds.perturbation_index(c)?;
    }
    ds.control = control;

    let obs_path = dir.join("obs.csv");
    if obs_path.is_file() {
        let text = read_file(&obs_path)?;
        let ot = read_table(&obs_path, &text)?;
        if ot.rows.len() != n {
            return Err(Error::Format {
                what: "obs.csv",
                detail: format!("{} rows, expected {n}", ot.rows.len()),
            });
        }
        if let Some(col) = ot.header.iter().position(|h| h == "split") {
            for (i, row) in ot.rows.iter().enumerate() {
                ds.split[i] = Split::parse(&row[col]).ok_or_else(|| Error::Parse {
                    file: "obs.csv".into(),
                    row: i + 1,
                    col: col + 1,
                    value: row[col].clone(),
                })?;
            }
        }
        ds.obs = ObsColumns {
            header: ot.header,
            rows: ot.rows,
        };
    }
    Ok(ds)
}

fn format_value<S: Scalar>(v: S, observation: Observation) -> String {
    match observation {
        Observation::Counts => format!("{}", v.as_f64().round() as i64),
        Observation::Real => format!("{:?}", v.as_f64()),
    }
}

/// Writes a labeled matrix: optional leading label column, then values.
pub fn write_matrix_csv<S: Scalar>(
    path: &Path,
    header: &[String],
    labels: Option<(&str, &[String])>,
    m: &Tensor<S>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_path(path).map_err(csv_err)?;
    let mut head: Vec<&str> = Vec::new();
    if let Some((name, _)) = labels {
        head.push(name);
    }
    head.extend(header.iter().map(String::as_str));
    w.write_record(&head).map_err(csv_err)?;
    for i in 0..m.rows() {
        let mut rec: Vec<String> = Vec::with_capacity(m.cols() + 1);
        if let Some((_, names)) = labels {
            rec.push(names[i].clone());
        }
        rec.extend(m.row(i).iter().map(|v| format!("{:?}", v.as_f64())));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format {
            what: "csv",
            detail: format!("{other:?}"),
        },
    }
}

/// Writes the dataset in the directory layout read by [`load_dataset`].
pub fn save_dataset<S: Scalar>(ds: &PerturbDataset<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::WriterBuilder::new().from_path(dir.join("X.csv")).map_err(csv_err)?;
    w.write_record(&ds.feature_names).map_err(csv_err)?;
    for i in 0..ds.n_cells() {
        let rec: Vec<String> = ds.x.row(i).iter().map(|&v| format_value(v, ds.observation)).collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;

    let mut text = String::new();
    if let Some(c) = &ds.control {
        text.push_str(&format!("#{CONTROL_PREFIX}{c}\n"));
    }
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(&ds.perturbation_names).map_err(csv_err)?;
    for i in 0..ds.n_cells() {
        let rec: Vec<&str> = ds
            .dosage
            .row(i)
            .iter()
            .map(|&v| if v > S::zero() { "1" } else { "0" })
            .collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    text.push_str(&String::from_utf8_lossy(&bytes));
    fs::write(dir.join("D.csv"), text)?;

    let mut w = csv::WriterBuilder::new().from_path(dir.join("obs.csv")).map_err(csv_err)?;
    let split_col = ds.obs.header.iter().position(|h| h == "split");
    let mut header = ds.obs.header.clone();
    if split_col.is_none() {
        header.push("split".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.n_cells() {
        let mut rec = ds.obs.rows.get(i).cloned().unwrap_or_default();
        match split_col {
            Some(c) => rec[c] = ds.split[i].as_str().into(),
            None => rec.push(ds.split[i].as_str().into()),
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
