//! Trace records and scalar run summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::Candidate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSample {
    pub soc: f64,
    /// Measured terminal voltage.
    pub voltage: f64,
    /// Average cell current over the interval that starts at this row.
    pub current: f64,
    pub theta: [f64; 3],
}

/// One control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: f64,
    pub cycle: u64,
    pub cells: Vec<CellSample>,
    pub candidate: Option<Candidate>,
    pub std_v: f64,
    pub charger_current: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRecord>,
}

impl Trace {
    pub fn n_cells(&self) -> usize {
        self.rows.first().map_or(0, |r| r.cells.len())
    }

    pub fn voltages(&self, row: usize) -> Vec<f64> {
        self.rows[row].cells.iter().map(|c| c.voltage).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Time of the earliest row after which the voltage gap stays within
    /// the threshold; `None` if the run ends unbalanced.
    pub completion_time_s: Option<f64>,
    pub end_time_s: f64,
    /// Control steps taken.
    pub steps: u64,
    /// Steps that ran a balancing cycle.
    pub balancing_cycles: u64,
    pub initial_voltage_spread: f64,
    pub final_voltage_spread: f64,
    pub initial_soc_spread: f64,
    pub final_soc_spread: f64,
    pub final_std_v: f64,
    /// Time-weighted mean of the voltage std.
    pub mean_std_v: f64,
    /// Time-weighted mean of the std of consecutive sorted-voltage gaps.
    pub gap_uniformity: f64,
    /// Net charge moved out of cells by the converter, coulombs.
    pub converter_coulombs: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum SummaryError {
    #[error("trace has no rows")]
    Empty,
}

pub fn spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Std of the gaps between consecutive voltages after sorting.
pub fn gap_std(voltages: &[f64]) -> f64 {
    let mut sorted = voltages.to_vec();
    sorted.sort_by(f64::total_cmp);
    let gaps: Vec<f64> = sorted.windows(2).map(|w| w[1] - w[0]).collect();
    population_std(&gaps)
}

struct RowMetrics {
    time: f64,
    std_v: f64,
    gap_std: f64,
    converter_rate: f64,
}

/// Streaming summary over trace rows in time order.
pub struct SummaryBuilder {
    threshold: f64,
    first: Option<(f64, f64)>,
    start_time: Option<f64>,
    prev: Option<RowMetrics>,
    last: Option<(f64, f64, f64)>,
    last_step: u64,
    completion: Option<f64>,
    balancing_cycles: u64,
    weighted_std: f64,
    weighted_gap: f64,
    converter_coulombs: f64,
}

impl SummaryBuilder {
    pub fn new(gap_threshold: f64) -> Self {
        Self {
            threshold: gap_threshold,
            first: None,
            start_time: None,
            prev: None,
            last: None,
            last_step: 0,
            completion: None,
            balancing_cycles: 0,
            weighted_std: 0.0,
            weighted_gap: 0.0,
            converter_coulombs: 0.0,
        }
    }

    pub fn push(&mut self, row: &TraceRecord) {
        let volts: Vec<f64> = row.cells.iter().map(|c| c.voltage).collect();
        let socs: Vec<f64> = row.cells.iter().map(|c| c.soc).collect();
        let v_spread = spread(&volts);
        let s_spread = spread(&socs);

        if let Some(prev) = &self.prev {
            let dt = row.time - prev.time;
            self.weighted_std += prev.std_v * dt;
            self.weighted_gap += prev.gap_std * dt;
            self.converter_coulombs += prev.converter_rate * dt;
        }
        if self.first.is_none() {
            self.first = Some((v_spread, s_spread));
        }
        if v_spread > self.threshold {
            self.completion = None;
        } else if self.completion.is_none() {
            self.completion = Some(row.time);
        }
        if row.candidate.is_some() {
            self.balancing_cycles += 1;
        }
        let converter_rate = row
            .cells
            .iter()
            .map(|c| (c.current - row.charger_current).max(0.0))
            .sum();
        self.prev = Some(RowMetrics {
            time: row.time,
            std_v: row.std_v,
            gap_std: gap_std(&volts),
            converter_rate,
        });
        self.last = Some((v_spread, s_spread, row.std_v));
        self.last_step = row.cycle;
        if self.start_time.is_none() {
            self.start_time = Some(row.time);
        }
    }

    pub fn finish(self) -> Result<Summary, SummaryError> {
        let (first, last, prev) = match (self.first, self.last, self.prev) {
            (Some(f), Some(l), Some(p)) => (f, l, p),
            _ => return Err(SummaryError::Empty),
        };
        let start = self.start_time.unwrap_or(prev.time);
        let span = prev.time - start;
        let (mean_std_v, gap_uniformity) = if span > 0.0 {
            (self.weighted_std / span, self.weighted_gap / span)
        } else {
            (prev.std_v, prev.gap_std)
        };
        Ok(Summary {
            completion_time_s: self.completion,
            end_time_s: prev.time,
            steps: self.last_step,
            balancing_cycles: self.balancing_cycles,
            initial_voltage_spread: first.0,
            final_voltage_spread: last.0,
            initial_soc_spread: first.1,
            final_soc_spread: last.1,
            final_std_v: last.2,
            mean_std_v,
            gap_uniformity,
            converter_coulombs: self.converter_coulombs,
        })
    }
}

pub fn summarize(trace: &Trace, gap_threshold: f64) -> Result<Summary, SummaryError> {
    let mut b = SummaryBuilder::new(gap_threshold);
    for row in &trace.rows {
        b.push(row);
    }
    b.finish()
}
