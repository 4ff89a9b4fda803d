//! One-cycle-ahead model predictive selection of the flyback switch schedule.
//!
//! Every cycle the cells are ranked by voltage. If the spread exceeds the
//! trigger threshold, the highest cell is discharged and the controller picks
//! which of the second and third ranked cells also conduct in stages I and
//! II. All 16 combinations are simulated with the closed-form cycle model and
//! the one whose predicted end-of-cycle voltages have the smallest population
//! standard deviation wins. Ties go to the earliest candidate in enumeration
//! order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ecm::{step_exact, terminal_voltage, CellParams, CellState, EcmError};
use crate::flyback::{simulate_cycle, ConverterParams, FlybackError, SwitchPlan};
use crate::rls::{Regressor, RlsError, RlsEstimator};

pub const CANDIDATE_COUNT: usize = 16;
pub const MIN_CELLS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("the controller needs at least {MIN_CELLS} cells, got {0}")]
    TooFewCells(usize),
    #[error("standard deviation of an empty list")]
    EmptyInput,
    #[error("non-finite cell voltage at index {0}")]
    NonFiniteVoltage(usize),
    #[error("per-cell inputs disagree in length: {0}")]
    SizeMismatch(String),
    #[error(transparent)]
    Flyback(#[from] FlybackError),
    #[error(transparent)]
    Rls(#[from] RlsError),
    #[error(transparent)]
    Ecm(#[from] EcmError),
}

/// The four stage decision bits: second/third ranked cell in stage I
/// (`c11`, `c21`) and in stage II (`c12`, `c22`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub c11: bool,
    pub c21: bool,
    pub c12: bool,
    pub c22: bool,
}

impl Candidate {
    /// Candidate number `index` in enumeration order; `c11` is the most
    /// significant bit.
    pub fn from_index(index: usize) -> Self {
        assert!(index < CANDIDATE_COUNT, "candidate index {index} out of range");
        Self {
            c11: index & 0b1000 != 0,
            c21: index & 0b0100 != 0,
            c12: index & 0b0010 != 0,
            c22: index & 0b0001 != 0,
        }
    }

    pub fn index(&self) -> usize {
        (usize::from(self.c11) << 3)
            | (usize::from(self.c21) << 2)
            | (usize::from(self.c12) << 1)
            | usize::from(self.c22)
    }

    /// `"c11 c21 c12 c22"` as four `0`/`1` characters.
    pub fn bits(&self) -> String {
        [self.c11, self.c21, self.c12, self.c22]
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    pub fn parse_bits(s: &str) -> Option<Self> {
        let b: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<_>>()?;
        match b[..] {
            [c11, c21, c12, c22] => Some(Self { c11, c21, c12, c22 }),
            _ => None,
        }
    }

    /// Maps the decision bits onto the top three cells of `ranking`.
    pub fn to_plan(&self, ranking: &[usize]) -> SwitchPlan {
        SwitchPlan {
            target_cell: ranking[0],
            second_cell: ranking[1],
            third_cell: ranking[2],
            c11: self.c11,
            c21: self.c21,
            c12: self.c12,
            c22: self.c22,
        }
    }
}

/// Where end-of-cycle voltages come from when scoring candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    /// Per-cell RLS models.
    #[default]
    Identified,
    /// The simulated plant's own cell models and states.
    Plant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Balancing starts when max - min voltage exceeds this, volts.
    pub gap_threshold: f64,
    pub prediction: PredictionSource,
    /// Whether the external charger current enters the prediction.
    pub include_charger_current: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            gap_threshold: 0.02,
            prediction: PredictionSource::Identified,
            include_charger_current: true,
        }
    }
}

/// Per-cell models used for prediction.
#[derive(Debug, Clone, Copy)]
pub enum CellModels<'a> {
    Identified {
        estimators: &'a [RlsEstimator],
        capacities: &'a [f64],
    },
    Plant {
        params: &'a [CellParams],
        states: &'a [CellState],
    },
}

impl CellModels<'_> {
    fn len(&self) -> usize {
        match self {
            CellModels::Identified { estimators, .. } => estimators.len(),
            CellModels::Plant { states, .. } => states.len(),
        }
    }

    fn check(&self) -> Result<(), ControllerError> {
        let (a, b) = match self {
            CellModels::Identified { estimators, capacities } => (estimators.len(), capacities.len()),
            CellModels::Plant { params, states } => (params.len(), states.len()),
        };
        if a != b {
            return Err(ControllerError::SizeMismatch(format!("models {a} vs {b}")));
        }
        Ok(())
    }
}

/// Inputs shared by every candidate evaluation in one control step.
#[derive(Debug, Clone, Copy)]
pub struct PredictionInputs<'a> {
    pub models: CellModels<'a>,
    /// Charge drawn from each cell since the start of the run, coulombs.
    pub charge_accumulators: &'a [f64],
    /// Stack current supplied by the charger (positive = discharge).
    pub external_current: f64,
    pub converter: &'a ConverterParams,
    /// Latest measured terminal voltages.
    pub voltages: &'a [f64],
}

impl PredictionInputs<'_> {
    fn check(&self) -> Result<(), ControllerError> {
        self.models.check()?;
        let n = self.voltages.len();
        if self.models.len() != n || self.charge_accumulators.len() != n {
            return Err(ControllerError::SizeMismatch(format!(
                "{} voltages, {} models, {} accumulators",
                n,
                self.models.len(),
                self.charge_accumulators.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub balancing_active: bool,
    pub candidate: Option<Candidate>,
    pub plan: Option<SwitchPlan>,
    /// Predicted std for each of the 16 candidates (empty when inactive).
    pub predicted_std: Vec<f64>,
    pub ranking: Vec<usize>,
}

impl Decision {
    pub fn inactive(ranking: Vec<usize>) -> Self {
        Self {
            balancing_active: false,
            candidate: None,
            plan: None,
            predicted_std: Vec::new(),
            ranking,
        }
    }
}

/// Cell indices by descending voltage, ties by ascending index.
pub fn rank_cells(voltages: &[f64]) -> Result<Vec<usize>, ControllerError> {
    if voltages.len() < MIN_CELLS {
        return Err(ControllerError::TooFewCells(voltages.len()));
    }
    if let Some(bad) = voltages.iter().position(|v| !v.is_finite()) {
        return Err(ControllerError::NonFiniteVoltage(bad));
    }
    let mut order: Vec<usize> = (0..voltages.len()).collect();
    // Stable sort keeps index order within ties.
    order.sort_by(|&a, &b| voltages[b].total_cmp(&voltages[a]));
    Ok(order)
}

pub fn voltage_gap(voltages: &[f64]) -> f64 {
    let max = voltages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = voltages.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

pub fn should_balance(voltages: &[f64], cfg: &ControllerConfig) -> bool {
    !voltages.is_empty() && voltage_gap(voltages) > cfg.gap_threshold
}

pub fn enumerate_candidates() -> [Candidate; CANDIDATE_COUNT] {
    std::array::from_fn(Candidate::from_index)
}

/// Population standard deviation.
pub fn std(values: &[f64]) -> Result<f64, ControllerError> {
    if values.is_empty() {
        return Err(ControllerError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Predicted terminal voltage of every cell at the end of the cycle that
/// `candidate` would produce.
///
/// Over the cycle each cell carries the external current plus its average
/// balancing current `-dq / T`; this advances the charge accumulator (and,
/// for plant models, the cell state). The voltage is predicted at the
/// sampling instant that ends the cycle, when every winding current is zero
/// and only the external current flows.
pub fn predict_cycle_voltages(
    candidate: &Candidate,
    ranking: &[usize],
    inputs: &PredictionInputs<'_>,
) -> Result<Vec<f64>, ControllerError> {
    inputs.check()?;
    let plan = candidate.to_plan(ranking);
    let cycle = simulate_cycle(inputs.converter, inputs.voltages, &plan)?;
    let duration = cycle.duration();
    let i_ext = inputs.external_current;

    (0..inputs.voltages.len())
        .map(|j| {
            let i_avg = if duration > 0.0 {
                i_ext - cycle.delta_q[j] / duration
            } else {
                i_ext
            };
            match inputs.models {
                CellModels::Identified { estimators, capacities } => {
                    let q = inputs.charge_accumulators[j] + i_avg * duration;
                    let x = Regressor::new(i_ext, q, capacities[j])?;
                    Ok(estimators[j].predict(&x))
                }
                CellModels::Plant { params, states } => {
                    let state = if duration > 0.0 {
                        step_exact(&params[j], &states[j], i_avg, duration)?.state
                    } else {
                        states[j]
                    };
                    Ok(terminal_voltage(&params[j], &state, i_ext)?)
                }
            }
        })
        .collect()
}

pub fn predict_cycle_std(
    candidate: &Candidate,
    ranking: &[usize],
    inputs: &PredictionInputs<'_>,
) -> Result<f64, ControllerError> {
    std(&predict_cycle_voltages(candidate, ranking, inputs)?)
}

/// Index of the smallest value; the first one wins ties.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if !(v < b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn select_plan(
    inputs: &PredictionInputs<'_>,
    cfg: &ControllerConfig,
) -> Result<Decision, ControllerError> {
    inputs.check()?;
    let ranking = rank_cells(inputs.voltages)?;
    if !should_balance(inputs.voltages, cfg) {
        return Ok(Decision::inactive(ranking));
    }
    let effective = PredictionInputs {
        external_current: if cfg.include_charger_current { inputs.external_current } else { 0.0 },
        ..*inputs
    };
    let scores = enumerate_candidates()
        .iter()
        .map(|c| predict_cycle_std(c, &ranking, &effective))
        .collect::<Result<Vec<_>, _>>()?;
    let best = argmin(&scores).expect("16 candidates");
    let candidate = Candidate::from_index(best);
    Ok(Decision {
        balancing_active: true,
        candidate: Some(candidate),
        plan: Some(candidate.to_plan(&ranking)),
        predicted_std: scores,
        ranking,
    })
}
