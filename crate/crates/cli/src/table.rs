//! Reading and writing the CSV files exchanged between commands.

use std::collections::BTreeMap;
use std::path::Path;

use sparseprior_core::ndgrad::Matrix;

use crate::CliError;

/// A numeric table with row ids and column names.
pub struct Table {
    pub row_ids: Vec<String>,
    pub columns: Vec<String>,
    pub values: Matrix,
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>, CliError> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?.clone();
    if header.len() < 2 {
        return Err(CliError::Input(format!("{}: header needs an id column and at least one value column", path.display())));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut row_ids = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::Input(format!("{}:{line}: {e}", path.display())))?;
        if rec.len() != header.len() {
            return Err(CliError::Input(format!(
                "{}:{line}: expected {} fields, found {}",
                path.display(),
                header.len(),
                rec.len()
            )));
        }
        row_ids.push(rec[0].to_owned());
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| CliError::Input(format!("{}:{line}: not a number: {field:?}", path.display())))?;
            data.push(v);
        }
    }
    if row_ids.is_empty() {
        return Err(CliError::Input(format!("{}: no rows", path.display())));
    }
    let values = Matrix::new([row_ids.len(), columns.len()], data).expect("row lengths checked");
    Ok(Table { row_ids, columns, values })
}

/// `cell_id,label` rows; a cell listed twice must carry the same label.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut rdr = reader(path)?;
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::Input(format!("{}:{line}: {e}", path.display())))?;
        if rec.len() != 2 {
            return Err(CliError::Input(format!("{}:{line}: expected cell_id,label", path.display())));
        }
        let (cell, label) = (rec[0].to_owned(), rec[1].to_owned());
        if let Some(prev) = out.get(&cell) {
            if prev != &label {
                return Err(CliError::Input(format!(
                    "{}:{line}: cell {cell} has more than one label ({prev}, {label})",
                    path.display()
                )));
            }
        }
        out.insert(cell, label);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, rows: &[(String, String)]) -> Result<(), CliError> {
    let mut s = String::from("cell_id,label\n");
    for (c, l) in rows {
        s.push_str(c);
        s.push(',');
        s.push_str(l);
        s.push('\n');
    }
    sparseprior_core::io::write_atomic(path, s.as_bytes())?;
    Ok(())
}

/// Labels for `cells` in order, as dense class indices over the sorted set
/// of label strings, plus that set.
pub fn align_labels(cells: &[String], labels: &BTreeMap<String, String>) -> Result<(Vec<usize>, Vec<String>), CliError> {
    let missing: Vec<&str> = cells.iter().filter(|c| !labels.contains_key(*c)).map(String::as_str).collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(5).copied().collect();
        return Err(CliError::Input(format!(
            "{} cells have no label (first: {})",
            missing.len(),
            shown.join(", ")
        )));
    }
    let mut names: Vec<String> = cells.iter().map(|c| labels[c].clone()).collect();
    names.sort();
    names.dedup();
    let idx = cells
        .iter()
        .map(|c| names.binary_search(&labels[c]).expect("present"))
        .collect();
    Ok((idx, names))
}
