//! Closed-form model of one balancing cycle of the multi-winding flyback.
//!
//! Each cell owns a primary winding with magnetizing inductance `L_m`; the
//! secondaries are diode-OR'ed across the whole series stack. A cycle has
//! three stages:
//!
//! * stage I `[t0, t1)`: the target winding ramps, plus the second/third
//!   ranked windings selected for stage I;
//! * stage II `[t1, t2)`: the target keeps ramping, stage-II windings ramp,
//!   and any winding switched off at `t1` freewheels into the stack;
//! * stage III `[t2, t3]`: every switch is off and all stored current
//!   freewheels until it reaches zero.
//!
//! Cell voltages are frozen for the duration of a cycle, so every current is
//! piecewise linear and every charge is a closed-form triangle area.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::waveform::Waveform;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlybackError {
    #[error("cell {cell} voltage must be positive, got {voltage}")]
    NonPositiveVoltage { cell: usize, voltage: f64 },
    #[error("stack voltage must be positive, got {0}")]
    NonPositiveStack(f64),
    #[error("invalid converter parameter: {0}")]
    InvalidParams(String),
    #[error("invalid switch plan: {0}")]
    InvalidPlan(String),
    #[error("length mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
}

/// Converter parameters. The default is a representative design (5 mH per
/// primary, 4 A peak, 1:4 primary-to-secondary turns, ideal diode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConverterParams {
    /// Magnetizing inductance of each primary winding, henries.
    pub magnetizing_inductance: f64,
    pub turns_primary: u32,
    pub turns_secondary: u32,
    /// Target winding current at the end of the on-time, amperes.
    pub peak_current: f64,
    /// Constant forward drop of the secondary diode, volts.
    pub diode_drop: f64,
}

impl Default for ConverterParams {
    fn default() -> Self {
        Self {
            magnetizing_inductance: 5.0e-3,
            turns_primary: 1,
            turns_secondary: 4,
            peak_current: 4.0,
            diode_drop: 0.0,
        }
    }
}

impl ConverterParams {
    /// N1 / N2.
    pub fn turns_ratio(&self) -> f64 {
        f64::from(self.turns_primary) / f64::from(self.turns_secondary)
    }

    /// Checks the parameters. A zero peak current is accepted and yields an
    /// empty cycle.
    pub fn validate(&self) -> Result<(), FlybackError> {
        if !(self.magnetizing_inductance.is_finite() && self.magnetizing_inductance > 0.0) {
            return Err(FlybackError::InvalidParams(format!(
                "magnetizing_inductance must be positive, got {}",
                self.magnetizing_inductance
            )));
        }
        if self.turns_primary == 0 || self.turns_secondary == 0 {
            return Err(FlybackError::InvalidParams("turn counts must be at least 1".into()));
        }
        if !(self.peak_current.is_finite() && self.peak_current >= 0.0) {
            return Err(FlybackError::InvalidParams(format!(
                "peak_current must be non-negative, got {}",
                self.peak_current
            )));
        }
        if !(self.diode_drop.is_finite() && self.diode_drop >= 0.0) {
            return Err(FlybackError::InvalidParams(format!(
                "diode_drop must be non-negative, got {}",
                self.diode_drop
            )));
        }
        Ok(())
    }

    /// Primary-referred decay rate of a freewheeling winding, A/s.
    pub fn freewheel_slope(&self, v_stack: f64) -> f64 {
        self.turns_ratio() * (v_stack + self.diode_drop) / self.magnetizing_inductance
    }
}

/// Which windings conduct in each stage. The target conducts in stages I
/// and II; `c11`/`c21` select the second/third ranked cells for stage I and
/// `c12`/`c22` for stage II.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SwitchPlan {
    pub target_cell: usize,
    pub second_cell: usize,
    pub third_cell: usize,
    pub c11: bool,
    pub c21: bool,
    pub c12: bool,
    pub c22: bool,
}

impl SwitchPlan {
    pub fn validate(&self, n_cells: usize) -> Result<(), FlybackError> {
        let idx = [self.target_cell, self.second_cell, self.third_cell];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_cells) {
            return Err(FlybackError::InvalidPlan(format!(
                "cell index {bad} out of range for {n_cells} cells"
            )));
        }
        if idx[0] == idx[1] || idx[0] == idx[2] || idx[1] == idx[2] {
            return Err(FlybackError::InvalidPlan(format!("indices {idx:?} are not distinct")));
        }
        Ok(())
    }

    /// Stage I / stage II conduction of cell `j`.
    pub fn stages(&self, j: usize) -> [bool; 2] {
        if j == self.target_cell {
            [true, true]
        } else if j == self.second_cell {
            [self.c11, self.c12]
        } else if j == self.third_cell {
            [self.c21, self.c22]
        } else {
            [false, false]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleTiming {
    pub t_on: f64,
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    /// Instant the last freewheeling current reaches zero.
    pub t3: f64,
}

impl CycleTiming {
    pub fn duration(&self) -> f64 {
        self.t3 - self.t0
    }
}

/// Everything one cycle does to the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleResult {
    pub timing: CycleTiming,
    pub stack_voltage: f64,
    /// Net charge added to each cell, coulombs (positive = charged).
    pub delta_q: Vec<f64>,
    /// Charge drawn from each cell through its primary switch.
    pub discharge_charge: Vec<f64>,
    /// Charge delivered by the secondary to every cell of the stack.
    pub secondary_charge: f64,
    /// Winding current when its switch opened (0 for windings never on).
    pub peak_currents: Vec<f64>,
    /// Switch-off instant of each winding that conducted.
    pub switch_off: Vec<Option<f64>>,
    /// Magnetizing current of each winding (continuous).
    pub magnetizing: Vec<Waveform>,
    /// Current drawn from each cell through its primary switch.
    pub switch_currents: Vec<Waveform>,
    /// Primary-referred freewheeling current of each winding.
    pub freewheel: Vec<Waveform>,
    /// Secondary current i_T into the stack.
    pub secondary: Waveform,
}

impl CycleResult {
    pub fn n_cells(&self) -> usize {
        self.delta_q.len()
    }

    pub fn duration(&self) -> f64 {
        self.timing.duration()
    }

    /// Net current into cell `j` over the cycle: `i_T - i_switch,j`.
    pub fn balancing_current(&self, j: usize) -> Waveform {
        Waveform::sum([&self.secondary, &self.switch_currents[j].scaled(-1.0)])
    }

    /// Magnetizing energy of each winding at the instant its switch opened.
    pub fn stored_energy(&self, magnetizing_inductance: f64) -> f64 {
        self.peak_currents
            .iter()
            .map(|i| 0.5 * magnetizing_inductance * i * i)
            .sum()
    }

    /// Energy the secondary pushes into the stack (diode drop excluded).
    pub fn delivered_energy(&self) -> f64 {
        self.stack_voltage * self.secondary.integral()
    }
}

pub fn compute_t_on(conv: &ConverterParams, v_cell: f64) -> Result<f64, FlybackError> {
    if !(v_cell > 0.0) {
        return Err(FlybackError::NonPositiveVoltage { cell: 0, voltage: v_cell });
    }
    Ok(conv.magnetizing_inductance * conv.peak_current / v_cell)
}

pub fn on_ramp_current(v: f64, magnetizing_inductance: f64, elapsed: f64) -> f64 {
    v * elapsed / magnetizing_inductance
}

pub fn decay_current(
    i0: f64,
    v_stack: f64,
    conv: &ConverterParams,
    elapsed: f64,
) -> Result<f64, FlybackError> {
    if !(v_stack > 0.0) {
        return Err(FlybackError::NonPositiveStack(v_stack));
    }
    let slope = conv.turns_ratio() * v_stack / conv.magnetizing_inductance;
    Ok((i0 - slope * elapsed).max(0.0))
}

/// Time for a freewheeling winding to drain from `i0` into a stack at `v_stack`.
pub fn decay_time(i0: f64, v_stack: f64, conv: &ConverterParams) -> Result<f64, FlybackError> {
    if !(v_stack > 0.0) {
        return Err(FlybackError::NonPositiveStack(v_stack));
    }
    Ok(i0 * conv.magnetizing_inductance / (conv.turns_ratio() * v_stack))
}

/// Secondary current reflected from the freewheeling windings.
pub fn secondary_current(off_winding_currents: &[f64], conv: &ConverterParams) -> f64 {
    conv.turns_ratio() * off_winding_currents.iter().sum::<f64>()
}

/// Instantaneous net current into each cell: the secondary current minus the
/// winding current of every cell whose switch is conducting.
pub fn balancing_currents(
    winding_currents: &[f64],
    conducting: &[bool],
    i_t: f64,
) -> Result<Vec<f64>, FlybackError> {
    if winding_currents.len() != conducting.len() {
        return Err(FlybackError::SizeMismatch(winding_currents.len(), conducting.len()));
    }
    Ok(winding_currents
        .iter()
        .zip(conducting)
        .map(|(&i, &on)| if on { i_t - i } else { i_t })
        .collect())
}

pub fn simulate_cycle(
    conv: &ConverterParams,
    cell_voltages: &[f64],
    plan: &SwitchPlan,
) -> Result<CycleResult, FlybackError> {
    conv.validate()?;
    let n = cell_voltages.len();
    if n < 2 {
        return Err(FlybackError::InvalidPlan(format!("need at least 2 cells, got {n}")));
    }
    plan.validate(n)?;
    for (cell, &voltage) in cell_voltages.iter().enumerate() {
        if !(voltage.is_finite() && voltage > 0.0) {
            return Err(FlybackError::NonPositiveVoltage { cell, voltage });
        }
    }

    let v_stack: f64 = cell_voltages.iter().sum();
    let l_m = conv.magnetizing_inductance;
    let ratio = conv.turns_ratio();
    let slope_off = conv.freewheel_slope(v_stack);

    let t_on = compute_t_on(conv, cell_voltages[plan.target_cell])?;
    let half = 0.5 * t_on;
    let (t0, t1, t2) = (0.0, half, t_on);

    let mut magnetizing = Vec::with_capacity(n);
    let mut switch_currents = Vec::with_capacity(n);
    let mut freewheel = Vec::with_capacity(n);
    let mut discharge_charge = vec![0.0; n];
    let mut peak_currents = vec![0.0; n];
    let mut switch_off = vec![None; n];
    let mut t3 = t2;
    let mut freewheel_charge = 0.0;

    for j in 0..n {
        let interval = match plan.stages(j) {
            [true, true] => Some((t0, t2)),
            [true, false] => Some((t0, t1)),
            [false, true] => Some((t1, t2)),
            [false, false] => None,
        };
        let Some((on, off)) = interval.filter(|_| t_on > 0.0) else {
            magnetizing.push(Waveform::zero());
            switch_currents.push(Waveform::zero());
            freewheel.push(Waveform::zero());
            continue;
        };
        let peak = on_ramp_current(cell_voltages[j], l_m, off - on);
        let zero_at = off + peak / slope_off;
        t3 = t3.max(zero_at);

        magnetizing.push(Waveform::from_points(vec![(on, 0.0), (off, peak), (zero_at, 0.0)]));
        switch_currents.push(Waveform::from_points(vec![(on, 0.0), (off, peak), (off, 0.0)]));
        freewheel.push(Waveform::from_points(vec![(off, 0.0), (off, peak), (zero_at, 0.0)]));
        discharge_charge[j] = 0.5 * peak * (off - on);
        peak_currents[j] = peak;
        switch_off[j] = Some(off);
        freewheel_charge += 0.5 * peak * peak / slope_off;
    }

    let secondary_charge = ratio * freewheel_charge;
    let secondary = Waveform::sum(freewheel.iter()).scaled(ratio);
    let delta_q = discharge_charge.iter().map(|q| secondary_charge - q).collect();

    Ok(CycleResult {
        timing: CycleTiming { t_on, t0, t1, t2, t3 },
        stack_voltage: v_stack,
        delta_q,
        discharge_charge,
        secondary_charge,
        peak_currents,
        switch_off,
        magnetizing,
        switch_currents,
        freewheel,
        secondary,
    })
}
