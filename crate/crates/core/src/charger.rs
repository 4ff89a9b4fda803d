//! Stack-level CC-CV charger with a per-cell overvoltage guard.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChargerMode {
    #[default]
    CcCv,
    Idle,
}

/// Charger settings. Currents follow the discharge-positive convention, so
/// `cc_current` is negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChargerConfig {
    pub mode: ChargerMode,
    pub cc_current: f64,
    /// Stack voltage held during the CV phase.
    pub cv_voltage: f64,
    /// CV phase ends once the current magnitude drops below this.
    pub cutoff_current: f64,
    /// Charging stops if any cell exceeds this voltage.
    pub v_max: f64,
}

impl Default for ChargerConfig {
    fn default() -> Self {
        Self {
            mode: ChargerMode::CcCv,
            cc_current: -0.8,
            cv_voltage: 15.2,
            cutoff_current: 0.04,
            v_max: 4.2,
        }
    }
}

impl ChargerConfig {
    pub fn idle() -> Self {
        Self { mode: ChargerMode::Idle, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all_finite = [self.cc_current, self.cv_voltage, self.cutoff_current, self.v_max]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err("charger settings must be finite".into());
        }
        if self.mode == ChargerMode::CcCv {
            if self.cc_current.abs() <= self.cutoff_current.abs() {
                return Err(format!(
                    "|cc_current| ({}) must exceed |cutoff_current| ({})",
                    self.cc_current.abs(),
                    self.cutoff_current.abs()
                ));
            }
            if self.cv_voltage <= 0.0 {
                return Err(format!("cv_voltage must be positive, got {}", self.cv_voltage));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChargePhase {
    ConstantCurrent,
    ConstantVoltage,
    /// Taper reached the cutoff, or the charger is idle.
    Finished,
    /// A cell left its safety band.
    Halted,
}

/// Mutable charger state carried between control steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChargerState {
    pub phase: ChargePhase,
    /// Current applied over the previous interval.
    pub last_current: f64,
    /// Aggregate ohmic resistance of the stack used for CV regulation.
    pub series_resistance: f64,
}

impl ChargerState {
    pub fn new(cfg: &ChargerConfig, series_resistance: f64) -> Self {
        let phase = match cfg.mode {
            ChargerMode::CcCv => ChargePhase::ConstantCurrent,
            ChargerMode::Idle => ChargePhase::Finished,
        };
        Self { phase, last_current: 0.0, series_resistance }
    }

    pub fn is_done(&self) -> bool {
        matches!(self.phase, ChargePhase::Finished | ChargePhase::Halted)
    }

    /// Latches the charger off after a safety event.
    pub fn halt(&mut self) {
        self.phase = ChargePhase::Halted;
        self.last_current = 0.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChargerOutput {
    pub current: f64,
    pub guard_event: bool,
}

/// Charger current for the next interval.
///
/// In the CV phase the stack's internal voltage is recovered from the
/// measurement and the previous current through the aggregate resistance,
/// and the current that would put the terminals exactly at `cv_voltage` is
/// returned, clamped to the CC magnitude.
pub fn cc_cv_current(
    cfg: &ChargerConfig,
    stack_voltage: f64,
    cell_voltages: &[f64],
    state: &mut ChargerState,
) -> ChargerOutput {
    if cfg.mode == ChargerMode::Idle {
        state.phase = ChargePhase::Finished;
        state.last_current = 0.0;
        return ChargerOutput { current: 0.0, guard_event: false };
    }
    if cell_voltages.iter().any(|&v| v > cfg.v_max) {
        let fresh = state.phase != ChargePhase::Halted;
        state.halt();
        return ChargerOutput { current: 0.0, guard_event: fresh };
    }

    if state.phase == ChargePhase::ConstantCurrent && stack_voltage >= cfg.cv_voltage {
        state.phase = ChargePhase::ConstantVoltage;
    }
    let current = match state.phase {
        ChargePhase::ConstantCurrent => cfg.cc_current,
        ChargePhase::ConstantVoltage => {
            let r = state.series_resistance;
            let internal = stack_voltage + r * state.last_current;
            let lo = cfg.cc_current.min(0.0);
            let hi = cfg.cc_current.max(0.0);
            let i = ((internal - cfg.cv_voltage) / r).clamp(lo, hi);
            if i.abs() < cfg.cutoff_current.abs() {
                state.phase = ChargePhase::Finished;
                0.0
            } else {
                i
            }
        }
        ChargePhase::Finished | ChargePhase::Halted => 0.0,
    };
    state.last_current = current;
    ChargerOutput { current, guard_event: false }
}
