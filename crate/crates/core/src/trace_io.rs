//! CSV encoding of traces.
//!
//! Columns: `time_s, cycle`, then for each cell `i` (0-based)
//! `soc_i, v_i, i_i, theta1_i, theta2_i, theta3_i`, then
//! `candidate_bits, std_v, charger_a`. Inactive steps write `----` as the
//! candidate. Floats use the shortest representation that round-trips.

use std::io::{Read, Write};

use thiserror::Error;

use crate::controller::Candidate;
use crate::summary::{CellSample, Trace, TraceRecord};

const PER_CELL: [&str; 6] = ["soc", "v", "i", "theta1", "theta2", "theta3"];
pub const INACTIVE_BITS: &str = "----";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
}

pub fn header(n_cells: usize) -> Vec<String> {
    let mut cols = vec!["time_s".to_string(), "cycle".to_string()];
    for j in 0..n_cells {
        cols.extend(PER_CELL.iter().map(|name| format!("{name}_{j}")));
    }
    cols.extend(["candidate_bits", "std_v", "charger_a"].map(String::from));
    cols
}

pub fn write_trace<W: Write>(out: W, trace: &Trace) -> Result<(), TraceError> {
    write_trace_for(out, trace, trace.n_cells())
}

/// Like [`write_trace`], with the column layout fixed to `n_cells` so that an
/// empty trace still gets the full header.
pub fn write_trace_for<W: Write>(out: W, trace: &Trace, n_cells: usize) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(n_cells))?;
    for (k, row) in trace.rows.iter().enumerate() {
        if row.cells.len() != n_cells {
            return Err(TraceError::Malformed {
                line: k as u64 + 2,
                message: format!("row has {} cells, expected {n_cells}", row.cells.len()),
            });
        }
        let mut rec = Vec::with_capacity(5 + 6 * row.cells.len());
        rec.push(row.time.to_string());
        rec.push(row.cycle.to_string());
        for c in &row.cells {
            rec.extend([c.soc, c.voltage, c.current, c.theta[0], c.theta[1], c.theta[2]].map(|v| v.to_string()));
        }
        rec.push(row.candidate.map_or_else(|| INACTIVE_BITS.to_string(), |c| c.bits()));
        rec.push(row.std_v.to_string());
        rec.push(row.charger_current.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<Trace, TraceError> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let head = r.headers()?.clone();
    let width = head.len();
    if width < 5 || (width - 5) % 6 != 0 {
        return Err(TraceError::Malformed { line: 1, message: format!("unexpected column count {width}") });
    }
    let n = (width - 5) / 6;
    let expected = header(n);
    if head.iter().ne(expected.iter().map(String::as_str)) {
        return Err(TraceError::Malformed {
            line: 1,
            message: format!("header does not match the trace layout for {n} cells"),
        });
    }

    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| TraceError::Malformed { line, message };
        if rec.len() != width {
            return Err(bad(format!("expected {width} fields, found {}", rec.len())));
        }
        let num = |k: usize| -> Result<f64, TraceError> {
            rec[k].trim().parse::<f64>().map_err(|_| bad(format!("column `{}`: not a number: `{}`", expected[k], &rec[k])))
        };
        let cycle = rec[1]
            .trim()
            .parse::<u64>()
            .map_err(|_| bad(format!("column `cycle`: not an integer: `{}`", &rec[1])))?;
        let mut cells = Vec::with_capacity(n);
        for j in 0..n {
            let b = 2 + 6 * j;
            cells.push(CellSample {
                soc: num(b)?,
                voltage: num(b + 1)?,
                current: num(b + 2)?,
                theta: [num(b + 3)?, num(b + 4)?, num(b + 5)?],
            });
        }
        let bits = rec[width - 3].trim();
        let candidate = if bits == INACTIVE_BITS {
            None
        } else {
            Some(Candidate::parse_bits(bits).ok_or_else(|| bad(format!("bad candidate bits `{bits}`")))?)
        };
        rows.push(TraceRecord {
            time: num(0)?,
            cycle,
            cells,
            candidate,
            std_v: num(width - 2)?,
            charger_current: num(width - 1)?,
        });
    }
    Ok(Trace { rows })
}
