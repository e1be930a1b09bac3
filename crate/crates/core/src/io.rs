//! Long-format CSV datasets and JSON parameter files.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::dec::TimeVector;
use crate::error::{Error, Result};
use crate::model::{Dataset, Subject, Theta};

fn column_layout(header: &csv::StringRecord) -> Result<(usize, usize)> {
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names.len() < 4 || names[0] != "subject_id" || names[1] != "time" {
        return Err(Error::Data("header must start with subject_id,time followed by y_1..y_p,x_1..x_q".into()));
    }
    let p = names[2..].iter().take_while(|n| n.starts_with("y_")).count();
    let q = names.len() - 2 - p;
    let expected: Vec<String> = (1..=p)
        .map(|j| format!("y_{j}"))
        .chain((1..=q).map(|j| format!("x_{j}")))
        .collect();
    if p == 0 || q == 0 || names[2..] != expected.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        return Err(Error::Data(format!("unexpected response/covariate columns {:?}", &names[2..])));
    }
    Ok((p, q))
}

struct Rows {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

fn parse_field(raw: &str, column: &str, id: &str, line: u64) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| {
        Error::Data(format!("subject {id}: cannot parse {column}={raw:?} on line {line}"))
    })
}

/// Parses a long-format dataset: one row per observation, rows of a subject contiguous.
pub fn parse_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let (p, q) = column_layout(&header)?;
    let width = header.len();
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Rows> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |pos| pos.line());
        let id = record.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::Data(format!("missing subject_id on line {line}")));
        }
        if record.len() != width {
            return Err(Error::Data(format!(
                "subject {id}: row on line {line} has {} fields, expected {width}",
                record.len()
            )));
        }
        if order.last() != Some(&id) {
            if groups.contains_key(&id) {
                return Err(Error::Data(format!("subject {id}: rows are not contiguous (line {line})")));
            }
            order.push(id.clone());
            groups.insert(id.clone(), Rows { times: Vec::new(), values: Vec::new() });
        }
        let rows = groups.get_mut(&id).expect("group inserted above");
        rows.times.push(parse_field(&record[1], "time", &id, line)?);
        let values = (2..width)
            .map(|c| parse_field(&record[c], &header[c], &id, line))
            .collect::<Result<Vec<_>>>()?;
        rows.values.push(values);
    }
    if order.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    let subjects = order
        .into_iter()
        .map(|id| {
            let rows = groups.remove(&id).expect("every id has a group");
            let mut idx: Vec<usize> = (0..rows.times.len()).collect();
            idx.sort_by(|&a, &b| rows.times[a].total_cmp(&rows.times[b]));
            let n = idx.len();
            let y = DMatrix::from_fn(n, p, |i, j| rows.values[idx[i]][j]);
            let x = DMatrix::from_fn(n, q, |i, j| rows.values[idx[i]][p + j]);
            let t = TimeVector::new(idx.iter().map(|&i| rows.times[i]).collect()).map_err(|e| e.for_subject(&id))?;
            Subject::new(id.clone(), y, x, t).map_err(|e| e.for_subject(&id))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(subjects)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_dataset(std::io::BufReader::new(file))
}

/// Writes the dataset in long format; floats use the shortest representation
/// that parses back to the identical value.
pub fn write_dataset<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> = ["subject_id".to_string(), "time".to_string()]
        .into_iter()
        .chain((1..=data.p).map(|j| format!("y_{j}")))
        .chain((1..=data.q).map(|j| format!("x_{j}")))
        .collect();
    w.write_record(&header)?;
    for s in &data.subjects {
        for (i, t) in s.t.as_slice().iter().enumerate() {
            let mut row = vec![s.id.clone(), t.to_string()];
            row.extend(s.y.row(i).iter().map(f64::to_string));
            row.extend(s.x.row(i).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_dataset(data, std::io::BufWriter::new(file))
}

pub fn theta_to_json(theta: &Theta) -> Result<String> {
    Ok(serde_json::to_string_pretty(theta)?)
}

pub fn theta_from_json(text: &str) -> Result<Theta> {
    Ok(serde_json::from_str(text)?)
}

pub fn read_theta(path: impl AsRef<Path>) -> Result<Theta> {
    theta_from_json(&std::fs::read_to_string(path.as_ref())?)
}

pub fn write_theta(theta: &Theta, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), theta_to_json(theta)? + "\n")?;
    Ok(())
}
