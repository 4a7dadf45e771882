use std::path::Path;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Reads a headed CSV whose `label_column` holds integer labels in `0..C`
/// and whose other columns are numeric features. Row numbers in errors are
/// 1-based data rows (the header is row 0).
pub fn load_external_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let headers = reader.headers()?.clone();
    let label_at = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Data(format!("{}: no column named {label_column:?}", path.display())))?;
    let n_features = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {row} has {} fields, expected {}",
                path.display(),
                record.len(),
                headers.len()
            )));
        }
        for (c, field) in record.iter().enumerate() {
            let column = &headers[c];
            let text = field.trim();
            if c == label_at {
                let y: usize = text.parse().map_err(|_| {
                    Error::Data(format!(
                        "{}: row {row}, column {column:?}: label {text:?} is not a nonnegative integer",
                        path.display()
                    ))
                })?;
                labels.push(y);
                continue;
            }
            let value: f64 = text.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {row}, column {column:?}: {text:?} is not a number",
                    path.display()
                ))
            })?;
            if !value.is_finite() {
                return Err(Error::Data(format!(
                    "{}: row {row}, column {column:?}: missing or non-finite value {text:?}",
                    path.display()
                )));
            }
            data.push(value);
        }
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: dataset is empty", path.display())));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::from_vec(labels.len(), n_features, data)?, labels, n_classes)
}

/// Writes `f0..f{D-1},label` with shortest round-trip float formatting.
pub fn export_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let mut header: Vec<String> = (0..dataset.n_features()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    writer.write_record(&header)?;
    for (row, &y) in dataset.features().iter_rows().zip(dataset.labels()) {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        fields.push(y.to_string());
        writer.write_record(&fields)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
