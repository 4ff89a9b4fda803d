//! Closed-loop scenario runner: plant, measurement, identification, charger
//! and balancing policy advanced one control step at a time.
//!
//! A control step starts at a sampling instant. Cell voltages are measured
//! under the charger current of the previous step, the estimators are
//! updated, the charger and the policy decide, and the plant advances either
//! by one flyback cycle or by the idle interval.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::charger::{cc_cv_current, ChargerState};
use crate::controller::{
    rank_cells, select_plan, Candidate, PredictionSource, should_balance, std, CellModels, ControllerError, Decision,
    PredictionInputs,
};
use crate::ecm::{step_exact, terminal_voltage, CellParams, CellState, EcmError};
use crate::flyback::{simulate_cycle, ConverterParams, FlybackError, SwitchPlan};
use crate::rls::{Regressor, RlsError, RlsEstimator};
use crate::scenario::{ConfigError, Policy, ScenarioConfig};
use crate::summary::{CellSample, Summary, SummaryBuilder, Trace, TraceRecord};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ecm(#[from] EcmError),
    #[error(transparent)]
    Rls(#[from] RlsError),
    #[error(transparent)]
    Flyback(#[from] FlybackError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyKind {
    OverVoltage,
    UnderVoltage,
}

/// A measured cell voltage outside its safety band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyEvent {
    pub time: f64,
    pub cell: usize,
    pub voltage: f64,
    pub kind: SafetyKind,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub trace: Trace,
    pub summary: Summary,
    pub events: Vec<SafetyEvent>,
    pub final_states: Vec<CellState>,
    /// Plant steps in which SOC hit a bound and was clamped.
    pub saturation_events: u64,
}

/// Everything the controller saw at one control step, passed to observers
/// before the plant advances.
#[derive(Debug, Clone, Copy)]
pub struct StepSnapshot<'a> {
    pub time: f64,
    pub step: u64,
    pub params: &'a [CellParams],
    pub states: &'a [CellState],
    pub measured: &'a [f64],
    pub charge_accumulators: &'a [f64],
    pub charger_current: f64,
    pub estimators: &'a [RlsEstimator],
    pub converter: &'a ConverterParams,
    pub decision: &'a Decision,
}

/// Baseline policy: discharge the highest cell alone, every auxiliary
/// switch off.
pub fn greedy_baseline_plan(voltages: &[f64]) -> Result<SwitchPlan, ControllerError> {
    let ranking = rank_cells(voltages)?;
    Ok(SwitchPlan {
        target_cell: ranking[0],
        second_cell: ranking[1],
        third_cell: ranking[2],
        c11: false,
        c21: false,
        c12: false,
        c22: false,
    })
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioRun, SimError> {
    run_scenario_observed(cfg, |_| {})
}

pub fn run_scenario_observed(
    cfg: &ScenarioConfig,
    mut observer: impl FnMut(&StepSnapshot<'_>),
) -> Result<ScenarioRun, SimError> {
    cfg.validate()?;
    let n = cfg.cells.len();
    let params: Vec<CellParams> = cfg.cells.iter().map(|c| c.params.clone()).collect();
    let capacities: Vec<f64> = params.iter().map(|p| p.capacity_coulombs).collect();
    let mut states: Vec<CellState> = cfg.cells.iter().map(|c| c.state()).collect();
    let ctl = &cfg.controller;
    let ctl_cfg = ctl.controller_config();

    let mut estimators = params
        .iter()
        .map(|p| {
            let est = if ctl.warm_start {
                RlsEstimator::warm_start(p, ctl.p0_scale, ctl.forgetting_factor)?
            } else {
                RlsEstimator::new([0.0; 3], ctl.p0_scale, ctl.forgetting_factor)?
            };
            Ok(match ctl.covariance_trace_limit {
                Some(limit) => est.with_trace_limit(limit),
                None => est,
            })
        })
        .collect::<Result<Vec<_>, RlsError>>()?;

    let stack_resistance: f64 = params.iter().map(|p| p.series_resistance).sum();
    let mut charger = ChargerState::new(&cfg.charger, stack_resistance);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let noise = (cfg.run.noise_std > 0.0)
        .then(|| Normal::new(0.0, cfg.run.noise_std).expect("validated noise std"));

    let mut accumulators = vec![0.0; n];
    let mut trace = Trace::default();
    let mut summary = SummaryBuilder::new(ctl.gap_threshold);
    let mut events = Vec::new();
    let mut saturation_events = 0u64;
    let mut time = 0.0;
    let mut step: u64 = 0;
    let mut sample_current = 0.0;

    loop {
        let true_voltages = states
            .iter()
            .zip(&params)
            .map(|(s, p)| terminal_voltage(p, s, sample_current))
            .collect::<Result<Vec<_>, _>>()?;
        let measured: Vec<f64> = true_voltages
            .iter()
            .map(|&v| v + noise.as_ref().map_or(0.0, |d| d.sample(&mut rng)))
            .collect();
        let std_v = std(&measured)?;

        if time >= cfg.run.max_time {
            let row = make_row(time, step, &states, &measured, &vec![sample_current; n], &estimators, None, std_v, sample_current);
            summary.push(&row);
            if step > 0 {
                trace.rows.push(row);
            }
            break;
        }

        for j in 0..n {
            let x = Regressor::new(sample_current, accumulators[j], capacities[j])?;
            estimators[j].update(&x, measured[j])?;
        }

        for (j, (&v, p)) in measured.iter().zip(&params).enumerate() {
            let kind = if v > p.v_max {
                Some(SafetyKind::OverVoltage)
            } else if v < p.v_min {
                Some(SafetyKind::UnderVoltage)
            } else {
                None
            };
            if let Some(kind) = kind {
                events.push(SafetyEvent { time, cell: j, voltage: v, kind });
                if kind == SafetyKind::UnderVoltage {
                    charger.halt();
                }
            }
        }
        let stack_voltage: f64 = measured.iter().sum();
        let charger_current = cc_cv_current(&cfg.charger, stack_voltage, &measured, &mut charger).current;

        let decision = match ctl.policy {
            Policy::None => Decision::inactive(rank_cells(&measured)?),
            Policy::Greedy => {
                let ranking = rank_cells(&measured)?;
                if should_balance(&measured, &ctl_cfg) {
                    Decision {
                        balancing_active: true,
                        candidate: Some(Candidate::from_index(0)),
                        plan: Some(greedy_baseline_plan(&measured)?),
                        predicted_std: Vec::new(),
                        ranking,
                    }
                } else {
                    Decision::inactive(ranking)
                }
            }
            Policy::Ampc => {
                let models = match ctl.prediction {
                    PredictionSource::Identified => CellModels::Identified {
                        estimators: &estimators,
                        capacities: &capacities,
                    },
                    PredictionSource::Plant => CellModels::Plant {
                        params: &params,
                        states: &states,
                    },
                };
                let inputs = PredictionInputs {
                    models,
                    charge_accumulators: &accumulators,
                    external_current: charger_current,
                    converter: &cfg.converter,
                    voltages: &measured,
                };
                select_plan(&inputs, &ctl_cfg)?
            }
        };

        observer(&StepSnapshot {
            time,
            step,
            params: &params,
            states: &states,
            measured: &measured,
            charge_accumulators: &accumulators,
            charger_current,
            estimators: &estimators,
            converter: &cfg.converter,
            decision: &decision,
        });

        let plan = decision.plan.filter(|_| decision.balancing_active);
        if plan.is_none() && charger.is_done() {
            let row = make_row(time, step, &states, &measured, &vec![charger_current; n], &estimators, None, std_v, charger_current);
            summary.push(&row);
            trace.rows.push(row);
            break;
        }

        let (dt, currents) = match &plan {
            Some(plan) => {
                let cycle = simulate_cycle(&cfg.converter, &true_voltages, plan)?;
                let dt = cycle.duration();
                let currents: Vec<f64> = cycle.delta_q.iter().map(|dq| charger_current - dq / dt).collect();
                (dt, currents)
            }
            None => (cfg.run.idle_interval, vec![charger_current; n]),
        };

        let row = make_row(time, step, &states, &measured, &currents, &estimators, decision.candidate.filter(|_| plan.is_some()), std_v, charger_current);
        summary.push(&row);
        if step.is_multiple_of(cfg.run.decimation) {
            trace.rows.push(row);
        }

        for j in 0..n {
            let out = step_exact(&params[j], &states[j], currents[j], dt)?;
            if out.saturated {
                saturation_events += 1;
            }
            states[j] = out.state;
            accumulators[j] += currents[j] * dt;
        }
        sample_current = charger_current;
        time += dt;
        step += 1;
    }

    Ok(ScenarioRun {
        trace,
        summary: summary.finish().expect("at least one row is always summarized"),
        events,
        final_states: states,
        saturation_events,
    })
}

#[allow(clippy::too_many_arguments)]
fn make_row(
    time: f64,
    step: u64,
    states: &[CellState],
    measured: &[f64],
    currents: &[f64],
    estimators: &[RlsEstimator],
    candidate: Option<Candidate>,
    std_v: f64,
    charger_current: f64,
) -> TraceRecord {
    let cells = (0..states.len())
        .map(|j| CellSample {
            soc: states[j].soc,
            voltage: measured[j],
            current: currents[j],
            theta: estimators[j].theta(),
        })
        .collect();
    TraceRecord { time, cycle: step, cells, candidate, std_v, charger_current }
}
