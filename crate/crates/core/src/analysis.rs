//! Offline processing of recorded traces: identification replay and the
//! plot-ready time series.

use std::io::Write;

use crate::ecm::CellParams;
use crate::rls::{Regressor, RlsError, RlsEstimator};
use crate::scenario::ControllerSettings;
use crate::summary::Trace;

/// Estimator state after each replayed row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRow {
    pub time: f64,
    pub cycle: u64,
    pub theta: Vec<[f64; 3]>,
    /// A-priori prediction error `v - theta_prev . x` per cell.
    pub error: Vec<f64>,
}

/// Re-runs per-cell identification over a trace.
///
/// Each row is treated as a sample taken under the charger current of the
/// previous row, with the cumulative charge integrated from the recorded
/// cell currents. For an undecimated trace this reproduces the online
/// estimates up to the rounding of the recorded times.
pub fn replay_identification(
    trace: &Trace,
    params: &[CellParams],
    settings: &ControllerSettings,
) -> Result<Vec<ReplayRow>, RlsError> {
    let n = trace.n_cells();
    let mut estimators = (0..n)
        .map(|j| {
            let p = params.get(j).cloned().unwrap_or_default();
            let est = if settings.warm_start {
                RlsEstimator::warm_start(&p, settings.p0_scale, settings.forgetting_factor)?
            } else {
                RlsEstimator::new([0.0; 3], settings.p0_scale, settings.forgetting_factor)?
            };
            Ok(match settings.covariance_trace_limit {
                Some(limit) => est.with_trace_limit(limit),
                None => est,
            })
        })
        .collect::<Result<Vec<_>, RlsError>>()?;

    let mut cum = vec![0.0; n];
    let mut out = Vec::with_capacity(trace.rows.len());
    for (k, row) in trace.rows.iter().enumerate() {
        if k > 0 {
            let prev = &trace.rows[k - 1];
            let dt = row.time - prev.time;
            for (c, cell) in cum.iter_mut().zip(&prev.cells) {
                *c += cell.current * dt;
            }
        }
        let current = if k > 0 { trace.rows[k - 1].charger_current } else { 0.0 };
        let mut theta = Vec::with_capacity(n);
        let mut error = Vec::with_capacity(n);
        for j in 0..n {
            let capacity = params.get(j).map_or(CellParams::default().capacity_coulombs, |p| p.capacity_coulombs);
            let x = Regressor::new(current, cum[j], capacity)?;
            error.push(estimators[j].update(&x, row.cells[j].voltage)?);
            theta.push(estimators[j].theta());
        }
        out.push(ReplayRow { time: row.time, cycle: row.cycle, theta, error });
    }
    Ok(out)
}

/// A table of named columns, written as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Wide table: `time_s, cycle, theta1_0, theta2_0, theta3_0, theta1_1, ...`.
pub fn theta_history(replay: &[ReplayRow]) -> Table {
    let n = replay.first().map_or(0, |r| r.theta.len());
    let mut t = Table::new(&["time_s", "cycle"]);
    for j in 0..n {
        t.columns.extend((1..=3).map(|k| format!("theta{k}_{j}")));
    }
    for r in replay {
        let mut row = vec![r.time.to_string(), r.cycle.to_string()];
        row.extend(r.theta.iter().flatten().map(|v| v.to_string()));
        t.rows.push(row);
    }
    t
}

/// Wide table: `time_s, cycle, error_0, error_1, ...`.
pub fn prediction_error(replay: &[ReplayRow]) -> Table {
    let n = replay.first().map_or(0, |r| r.error.len());
    let mut t = Table::new(&["time_s", "cycle"]);
    t.columns.extend((0..n).map(|j| format!("error_{j}")));
    for r in replay {
        let mut row = vec![r.time.to_string(), r.cycle.to_string()];
        row.extend(r.error.iter().map(|v| v.to_string()));
        t.rows.push(row);
    }
    t
}

/// Long table `time_s, cell, soc`.
pub fn soc_series(trace: &Trace) -> Table {
    let mut t = Table::new(&["time_s", "cell", "soc"]);
    for r in &trace.rows {
        for (j, c) in r.cells.iter().enumerate() {
            t.rows.push(vec![r.time.to_string(), j.to_string(), c.soc.to_string()]);
        }
    }
    t
}

/// Long table `time_s, cell, balancing_current_a`: the converter's share of
/// each cell current (cell current minus charger current).
pub fn balancing_current_series(trace: &Trace) -> Table {
    let mut t = Table::new(&["time_s", "cell", "balancing_current_a"]);
    for r in &trace.rows {
        for (j, c) in r.cells.iter().enumerate() {
            let b = c.current - r.charger_current;
            t.rows.push(vec![r.time.to_string(), j.to_string(), b.to_string()]);
        }
    }
    t
}

/// Indices of the highest and lowest cell in the first row (first index on ties).
pub fn initial_extremes(trace: &Trace) -> Option<(usize, usize)> {
    let first = trace.rows.first()?;
    let v: Vec<f64> = first.cells.iter().map(|c| c.voltage).collect();
    let hi = (0..v.len()).fold(0, |b, j| if v[j] > v[b] { j } else { b });
    let lo = (0..v.len()).fold(0, |b, j| if v[j] < v[b] { j } else { b });
    Some((hi, lo))
}

/// Long table `time_s, cell, role, voltage_v` for the initially highest and
/// lowest cells.
pub fn extreme_voltage_series(trace: &Trace) -> Table {
    let mut t = Table::new(&["time_s", "cell", "role", "voltage_v"]);
    if let Some((hi, lo)) = initial_extremes(trace) {
        for r in &trace.rows {
            for (j, role) in [(hi, "highest"), (lo, "lowest")] {
                t.rows.push(vec![
                    r.time.to_string(),
                    j.to_string(),
                    role.to_string(),
                    r.cells[j].voltage.to_string(),
                ]);
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::summary::{CellSample, TraceRecord};

    fn trace() -> Trace {
        let row = |t: f64, v: [f64; 4], chg: f64| TraceRecord {
            time: t,
            cycle: t as u64,
            cells: v
                .iter()
                .map(|&x| CellSample { soc: x - 3.2, voltage: x, current: chg + 0.5, theta: [0.0; 3] })
                .collect(),
            candidate: None,
            std_v: 0.0,
            charger_current: chg,
        };
        Trace { rows: vec![row(0.0, [3.7, 3.9, 3.6, 3.8], -0.8), row(1.0, [3.71, 3.88, 3.62, 3.8], -0.8)] }
    }

    #[test]
    fn extreme_series_tracks_initial_extremes() {
        let s = extreme_voltage_series(&trace());
        assert_eq!(s.columns, vec!["time_s", "cell", "role", "voltage_v"]);
        assert_eq!(s.rows.len(), 4);
        assert_eq!(s.rows[2], vec!["1", "1", "highest", "3.88"]);
        assert_eq!(s.rows[3], vec!["1", "2", "lowest", "3.62"]);
    }

    #[test]
    fn balancing_series_subtracts_charger() {
        let s = balancing_current_series(&trace());
        assert_eq!(s.rows.len(), 8);
        assert!(s.rows.iter().all(|r| (r[2].parse::<f64>().unwrap() - 0.5).abs() < 1e-15));
        assert_eq!(soc_series(&trace()).rows.len(), 8);
    }

    #[test]
    fn replay_first_error_is_against_the_initial_guess() {
        let settings = ControllerSettings { warm_start: false, ..Default::default() };
        let params = vec![CellParams::default(); 4];
        let replay = replay_identification(&trace(), &params, &settings).unwrap();
        assert_eq!(replay.len(), 2);
        assert_eq!(replay[0].error, vec![3.7, 3.9, 3.6, 3.8]);
        let th = theta_history(&replay);
        assert_eq!(th.columns.len(), 14);
        assert_eq!(prediction_error(&replay).rows[0].len(), 6);
        assert_eq!(th.rows[0][0], "0");
    }
}
