//! Square-matrix CSV: a header row of class names followed by K rows of K
//! values. Used for confusion matrices (integers) and affinities (reals).

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class_{c}")).collect()
}

pub fn write<T: Display>(names: &[String], n: usize, values: &[T]) -> Result<String> {
    if names.len() != n || values.len() != n * n {
        return Err(Error::Shape(format!(
            "{} names and {} values for a {n}x{n} matrix",
            names.len(),
            values.len()
        )));
    }
    if let Some(bad) = names.iter().find(|s| s.contains([',', '\n', '\r'])) {
        return Err(Error::InvalidArgument(format!("class name {bad:?} contains a separator")));
    }
    let mut out = names.join(",");
    out.push('\n');
    for row in values.chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn parse<T>(text: &str) -> Result<(Vec<String>, Vec<T>)>
where
    T: FromStr,
    T::Err: Display,
{
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header row".into(),
    })?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let n = names.len();
    let mut values = Vec::with_capacity(n * n);
    let mut rows = 0;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if rows == n {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("unexpected extra row; header declares {n} classes"),
            });
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("row {} has {} fields, expected {n}", rows + 1, cells.len()),
            });
        }
        for (col, cell) in cells.iter().enumerate() {
            let v = cell.trim().parse::<T>().map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("column {}: {cell:?}: {e}", col + 1),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows < n {
        return Err(Error::Parse {
            line: text.lines().count() + 1,
            msg: format!("row {} of {n} missing (file truncated)", rows + 1),
        });
    }
    Ok((names, values))
}
