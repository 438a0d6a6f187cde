//! Reading longitudinal observations from CSV.

use std::path::Path;

use splinemix::model::{LongitudinalDataset, Subject};

use crate::error::{AppError, AppResult};

/// Reads a `subject_id,t,x` file. Subjects keep the order of their first
/// appearance and rows of one subject keep file order. Every malformed
/// row is reported with its line number.
pub fn read_dataset(path: &Path) -> AppResult<LongitudinalDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| AppError::Parse(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| AppError::Parse(format!("{}: {e}", path.display())))?;
    let expected = ["subject_id", "t", "x"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(AppError::Parse(format!(
            "{}: header must be subject_id,t,x (found {})",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut order: Vec<String> = Vec::new();
    let mut subjects: std::collections::HashMap<String, Subject> = Default::default();
    for record in reader.records() {
        let record = record.map_err(|e| AppError::Parse(format!("{}: {e}", path.display())))?;
        let line = record
            .position()
            .map(|p| p.line().to_string())
            .unwrap_or_else(|| "?".into());
        if record.len() != 3 {
            return Err(AppError::Parse(format!(
                "{}: line {line}: expected 3 fields, found {}",
                path.display(),
                record.len()
            )));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(AppError::Parse(format!(
                "{}: line {line}: empty subject_id",
                path.display()
            )));
        }
        let t: f64 = record[1].parse().map_err(|_| {
            AppError::Parse(format!(
                "{}: line {line}: cannot parse t {:?} as a number",
                path.display(),
                &record[1]
            ))
        })?;
        let x: f64 = record[2].parse().map_err(|_| {
            AppError::Parse(format!(
                "{}: line {line}: cannot parse x {:?} as a number",
                path.display(),
                &record[2]
            ))
        })?;
        let subject = subjects.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Subject {
                id,
                times: Vec::new(),
                values: Vec::new(),
            }
        });
        subject.times.push(t);
        subject.values.push(x);
    }
    if order.is_empty() {
        return Err(AppError::Parse(format!(
            "{}: no observation rows",
            path.display()
        )));
    }
    let subjects: Vec<Subject> = order
        .into_iter()
        .map(|id| subjects.remove(&id).expect("grouped above"))
        .collect();
    Ok(LongitudinalDataset::new(subjects)?)
}
