//! Training-log CSV: fixed header, `\n` line endings, reals in scientific
//! notation with 9 significant digits.

use std::io::{BufRead, Write};

use crate::error::{LabError, Result};
use crate::metrics::{MetricsRecord, LOG_COLUMNS};

pub fn header() -> String {
    LOG_COLUMNS.join(",")
}

/// 9 significant digits.
pub fn real(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn row(r: &MetricsRecord) -> String {
    let mut fields = vec![r.step.to_string()];
    fields.extend(
        LOG_COLUMNS[1..]
            .iter()
            .map(|c| real(r.value(c).expect("known column"))),
    );
    fields.join(",")
}

pub fn write_header<W: Write>(out: &mut W) -> Result<()> {
    out.write_all(header().as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_row<W: Write>(out: &mut W, r: &MetricsRecord) -> Result<()> {
    out.write_all(row(r).as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_log<W: Write>(out: &mut W, records: &[MetricsRecord]) -> Result<()> {
    write_header(out)?;
    for r in records {
        write_row(out, r)?;
    }
    Ok(())
}

/// Reads a log written by [`write_log`].
pub fn read_log<R: BufRead>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut lines = input.lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    if first != header() {
        return Err(LabError::Config(format!("unexpected CSV header {first:?}")));
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let bad = |what: String| LabError::Config(format!("CSV line {}: {what}", idx + 2));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != LOG_COLUMNS.len() {
            return Err(bad(format!("{} fields", fields.len())));
        }
        let step = fields[0].parse().map_err(|e| bad(format!("step: {e}")))?;
        let mut vals = [0.0; 10];
        for (slot, text) in vals.iter_mut().zip(&fields[1..]) {
            *slot = text.parse().map_err(|e| bad(format!("{text:?}: {e}")))?;
        }
        let [loss_h, loss_aux, loss_o, loss_v, total, maxvio, expert_overlap, routing_variance, score_variance, silhouette] =
            vals;
        records.push(MetricsRecord {
            step,
            loss_h,
            loss_aux,
            loss_o,
            loss_v,
            total,
            maxvio,
            expert_overlap,
            routing_variance,
            score_variance,
            silhouette,
            rmse: None,
        });
    }
    Ok(records)
}
