//! Comma-separated offset tables: `module_id,k,dx,dy`, one row per
//! shifting channel, values written with 9 significant digits.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Real;

use super::ShiftOffsets;

pub const OFFSET_HEADER: &str = "module_id,k,dx,dy";

#[derive(Clone, Debug, PartialEq)]
pub struct OffsetRow {
    pub module_id: String,
    pub k: usize,
    pub dx: f64,
    pub dy: f64,
}

pub fn offset_rows<T: Real>(module_id: &str, offsets: &ShiftOffsets<T>) -> Vec<OffsetRow> {
    offsets
        .dx
        .iter()
        .zip(&offsets.dy)
        .enumerate()
        .map(|(k, (&dx, &dy))| OffsetRow {
            module_id: module_id.to_string(),
            k,
            dx: dx.to_f64(),
            dy: dy.to_f64(),
        })
        .collect()
}

/// Formats with 9 significant digits in scientific notation.
pub fn fmt_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn write_offset_csv(rows: &[OffsetRow]) -> String {
    let mut out = String::from(OFFSET_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.module_id, r.k, fmt_sig9(r.dx), fmt_sig9(r.dy));
    }
    out
}

pub fn parse_offset_csv(text: &str) -> Result<Vec<OffsetRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == OFFSET_HEADER => {}
        other => {
            return Err(Error::Argument(format!(
                "offset table header must be `{OFFSET_HEADER}`, found {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::Argument(format!(
                "offset table line {}: expected 4 columns, found {}",
                i + 2,
                cols.len()
            )));
        }
        let bad = |what: &str| Error::Argument(format!("offset table line {}: bad {what}", i + 2));
        rows.push(OffsetRow {
            module_id: cols[0].to_string(),
            k: cols[1].trim().parse().map_err(|_| bad("k"))?,
            dx: cols[2].trim().parse().map_err(|_| bad("dx"))?,
            dy: cols[3].trim().parse().map_err(|_| bad("dy"))?,
        });
    }
    Ok(rows)
}
