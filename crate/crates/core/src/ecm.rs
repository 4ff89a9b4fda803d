//! Two-RC equivalent-circuit model of a Li-ion cell.
//!
//! Sign convention used throughout the crate: positive current discharges
//! the cell, negative current charges it.
//!
//! State equations (SOC as a fraction, self-discharge optional):
//!
//! ```text
//! dSOC/dt = -SOC / (R_sd C_b) - I / C_b
//! dV1/dt  = -V1 / (R1 C1) + I / C1
//! dV2/dt  = -V2 / (R2 C2) + I / C2
//! V_B     = OCV(SOC) - V1 - V2 - R0 I
//! ```
//!
//! With the current held constant over a step the system is linear and
//! time-invariant, so [`step_exact`] uses the zero-order-hold solution rather
//! than a numerical integrator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of grid points used to check that the OCV curve is increasing.
pub const OCV_MONOTONICITY_GRID: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EcmError {
    #[error("state of charge {0} is outside [0, 1]")]
    SocOutOfRange(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid cell parameter: {0}")]
    InvalidParams(String),
}

/// Open-circuit voltage curve `a0 + a1 s + a2 s^2 + a3 s^3 + a4 exp(-beta s)`.
///
/// The curve itself makes no monotonicity promise; [`CellParams::validate`]
/// is where non-increasing curves get rejected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcvCurve {
    pub coeffs: [f64; 5],
    pub exponent: f64,
}

impl OcvCurve {
    pub fn new(coeffs: [f64; 5], exponent: f64) -> Self {
        Self { coeffs, exponent }
    }

    pub fn eval(&self, soc: f64) -> Result<f64, EcmError> {
        check_soc(soc)?;
        Ok(self.eval_unchecked(soc))
    }

    /// dOCV/dSOC.
    pub fn slope(&self, soc: f64) -> Result<f64, EcmError> {
        check_soc(soc)?;
        let [_, a1, a2, a3, a4] = self.coeffs;
        Ok(a1 + 2.0 * a2 * soc + 3.0 * a3 * soc * soc
            - self.exponent * a4 * (-self.exponent * soc).exp())
    }

    fn eval_unchecked(&self, soc: f64) -> f64 {
        let [a0, a1, a2, a3, a4] = self.coeffs;
        a0 + soc * (a1 + soc * (a2 + soc * a3)) + a4 * (-self.exponent * soc).exp()
    }

    /// True when the curve is strictly increasing on an evenly spaced grid
    /// of `OCV_MONOTONICITY_GRID` points spanning [0, 1].
    pub fn is_increasing(&self) -> bool {
        let n = OCV_MONOTONICITY_GRID;
        let mut prev = self.eval_unchecked(0.0);
        for k in 1..n {
            let v = self.eval_unchecked(k as f64 / (n - 1) as f64);
            if !(v > prev) {
                return false;
            }
            prev = v;
        }
        true
    }
}

/// Equivalent-circuit parameters of one cell.
///
/// The [`Default`] set is a representative 800 mAh cell, not a measured one:
/// C_b = 2880 C, R0 = 70 mOhm, R1 = 40 mOhm / C1 = 1000 F,
/// R2 = 30 mOhm / C2 = 4000 F, OCV coefficients (3.2, 0.8, -0.2, 0.1, -0.15)
/// with beta = 20, safety band 3.0 V to 4.2 V. Self-discharge is off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellParams {
    /// Capacity C_b in coulombs.
    pub capacity_coulombs: f64,
    /// Self-discharge resistance R_sd in ohms; `None` disables the branch.
    pub self_discharge_resistance: Option<f64>,
    /// Series resistance R0 in ohms.
    pub series_resistance: f64,
    pub rc1_resistance: f64,
    pub rc1_capacitance: f64,
    pub rc2_resistance: f64,
    pub rc2_capacitance: f64,
    /// OCV polynomial and exponential coefficients a0..a4, volts.
    pub ocv_coeffs: [f64; 5],
    /// OCV exponential rate beta.
    pub ocv_exponent: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for CellParams {
    fn default() -> Self {
        Self {
            capacity_coulombs: 2880.0,
            self_discharge_resistance: None,
            series_resistance: 0.070,
            rc1_resistance: 0.040,
            rc1_capacitance: 1000.0,
            rc2_resistance: 0.030,
            rc2_capacitance: 4000.0,
            ocv_coeffs: [3.2, 0.8, -0.2, 0.1, -0.15],
            ocv_exponent: 20.0,
            v_min: 3.0,
            v_max: 4.2,
        }
    }
}

impl CellParams {
    pub fn ocv_curve(&self) -> OcvCurve {
        OcvCurve::new(self.ocv_coeffs, self.ocv_exponent)
    }

    pub fn validate(&self) -> Result<(), EcmError> {
        let positive = [
            ("capacity_coulombs", self.capacity_coulombs),
            ("series_resistance", self.series_resistance),
            ("rc1_resistance", self.rc1_resistance),
            ("rc1_capacitance", self.rc1_capacitance),
            ("rc2_resistance", self.rc2_resistance),
            ("rc2_capacitance", self.rc2_capacitance),
            ("ocv_exponent", self.ocv_exponent),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(EcmError::InvalidParams(format!(
                    "{name} must be finite and positive, got {value}"
                )));
            }
        }
        if let Some(r_sd) = self.self_discharge_resistance {
            if !(r_sd.is_finite() && r_sd > 0.0) {
                return Err(EcmError::InvalidParams(format!(
                    "self_discharge_resistance must be finite and positive, got {r_sd}"
                )));
            }
        }
        if self.ocv_coeffs.iter().any(|c| !c.is_finite()) {
            return Err(EcmError::InvalidParams("ocv_coeffs must be finite".into()));
        }
        if !(self.v_min.is_finite() && self.v_max.is_finite() && self.v_min < self.v_max) {
            return Err(EcmError::InvalidParams(format!(
                "need v_min < v_max, got {} and {}",
                self.v_min, self.v_max
            )));
        }
        if !self.ocv_curve().is_increasing() {
            return Err(EcmError::InvalidParams(
                "open-circuit voltage curve is not strictly increasing on [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Time constant of the first RC branch.
    pub fn tau1(&self) -> f64 {
        self.rc1_resistance * self.rc1_capacitance
    }

    pub fn tau2(&self) -> f64 {
        self.rc2_resistance * self.rc2_capacitance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    /// State of charge as a fraction in [0, 1].
    pub soc: f64,
    /// Voltage across the first RC branch.
    pub v1: f64,
    /// Voltage across the second RC branch.
    pub v2: f64,
}

impl CellState {
    pub fn at_rest(soc: f64) -> Result<Self, EcmError> {
        check_soc(soc)?;
        Ok(Self { soc, v1: 0.0, v2: 0.0 })
    }

    pub fn validate(&self) -> Result<(), EcmError> {
        check_soc(self.soc)?;
        if !(self.v1.is_finite() && self.v2.is_finite()) {
            return Err(EcmError::NonFinite("RC branch voltage"));
        }
        Ok(())
    }
}

/// One terminal measurement: voltage and current (positive = discharge).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMeasurement {
    pub terminal_voltage: f64,
    pub current: f64,
}

/// Result of an exact step. `saturated` is set when the SOC had to be
/// clamped back into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: CellState,
    pub saturated: bool,
}

pub fn ocv(params: &CellParams, soc: f64) -> Result<f64, EcmError> {
    params.ocv_curve().eval(soc)
}

pub fn terminal_voltage(
    params: &CellParams,
    state: &CellState,
    current: f64,
) -> Result<f64, EcmError> {
    state.validate()?;
    if !current.is_finite() {
        return Err(EcmError::NonFinite("current"));
    }
    Ok(ocv(params, state.soc)? - state.v1 - state.v2 - params.series_resistance * current)
}

/// Advances the state by `dt` seconds under a constant `current`.
pub fn step_exact(
    params: &CellParams,
    state: &CellState,
    current: f64,
    dt: f64,
) -> Result<StepOutcome, EcmError> {
    if !dt.is_finite() {
        return Err(EcmError::NonFinite("dt"));
    }
    if dt <= 0.0 {
        return Err(EcmError::NonPositiveStep(dt));
    }
    if !current.is_finite() {
        return Err(EcmError::NonFinite("current"));
    }
    state.validate()?;

    let soc = match params.self_discharge_resistance {
        None => state.soc - current * dt / params.capacity_coulombs,
        Some(r_sd) => {
            let x = -dt / (r_sd * params.capacity_coulombs);
            // Fixed point of the SOC equation is -I * R_sd.
            state.soc * x.exp() + current * r_sd * x.exp_m1()
        }
    };
    let v1 = rc_step(state.v1, params.rc1_resistance, params.rc1_capacitance, current, dt);
    let v2 = rc_step(state.v2, params.rc2_resistance, params.rc2_capacitance, current, dt);

    let clamped = soc.clamp(0.0, 1.0);
    Ok(StepOutcome {
        state: CellState { soc: clamped, v1, v2 },
        saturated: clamped != soc,
    })
}

fn rc_step(v: f64, r: f64, c: f64, current: f64, dt: f64) -> f64 {
    let x = -dt / (r * c);
    // 1 - e^x computed without cancellation for short steps.
    let charge_fraction = -x.exp_m1();
    v * x.exp() + r * charge_fraction * current
}

fn check_soc(soc: f64) -> Result<(), EcmError> {
    if !soc.is_finite() {
        return Err(EcmError::NonFinite("soc"));
    }
    if !(0.0..=1.0).contains(&soc) {
        return Err(EcmError::SocOutOfRange(soc));
    }
    Ok(())
}
