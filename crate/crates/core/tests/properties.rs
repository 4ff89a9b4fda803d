use cellbal::controller::{
    rank_cells, select_plan, should_balance, std, CellModels, ControllerConfig, PredictionInputs,
};
use cellbal::ecm::{step_exact, CellParams, CellState, OcvCurve, OCV_MONOTONICITY_GRID};
use cellbal::flyback::{simulate_cycle, ConverterParams, SwitchPlan};
use cellbal::rls::{Regressor, RlsEstimator};
use cellbal::scenario::{CellSetup, ScenarioConfig};
use cellbal::summary::{CellSample, Trace, TraceRecord};
use cellbal::trace_io::{read_trace, write_trace};
use cellbal::{controller::Candidate, run_scenario, Policy};
use proptest::prelude::*;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn cell_state() -> impl Strategy<Value = CellState> {
    (0.05..0.95f64, -0.1..0.1f64, -0.1..0.1f64).prop_map(|(soc, v1, v2)| CellState { soc, v1, v2 })
}

fn plan_strategy() -> impl Strategy<Value = (Vec<f64>, SwitchPlan)> {
    (
        prop::collection::vec(3.0..4.2f64, 4..7),
        0usize..16,
        any::<prop::sample::Index>(),
    )
        .prop_map(|(volts, bits, pick)| {
            let n = volts.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.rotate_left(pick.index(n));
            let c = Candidate::from_index(bits);
            let plan = SwitchPlan {
                target_cell: order[0],
                second_cell: order[1],
                third_cell: order[2],
                c11: c.c11,
                c21: c.c21,
                c12: c.c12,
                c22: c.c22,
            };
            (volts, plan)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ecm_halving_the_step_composes(s in cell_state(), i in -4.0..4.0f64, dt in 1e-3..500.0f64) {
        let p = CellParams::default();
        let whole = step_exact(&p, &s, i, dt).unwrap();
        prop_assume!(!whole.saturated);
        let half = step_exact(&p, &step_exact(&p, &s, i, dt / 2.0).unwrap().state, i, dt / 2.0).unwrap().state;
        prop_assert!(rel_err(whole.state.soc, half.soc) <= 1e-12);
        prop_assert!((whole.state.v1 - half.v1).abs() <= 1e-12 * whole.state.v1.abs().max(1e-3));
        prop_assert!((whole.state.v2 - half.v2).abs() <= 1e-12 * whole.state.v2.abs().max(1e-3));
    }

    #[test]
    fn ecm_coulomb_counting(s in cell_state(), steps in prop::collection::vec((-3.0..3.0f64, 0.5..30.0f64), 1..20)) {
        let p = CellParams::default();
        let mut state = s;
        let mut net = 0.0;
        let mut throughput = 0.0;
        let n = steps.len();
        for (i, dt) in steps {
            let out = step_exact(&p, &state, i, dt).unwrap();
            prop_assume!(!out.saturated);
            state = out.state;
            net += i * dt;
            throughput += (i * dt).abs();
        }
        let moved = (s.soc - state.soc) * p.capacity_coulombs;
        // SOC is stored as a fraction, so each step can round the charge by
        // up to one ulp of SOC times the capacity.
        let floor = (n + 1) as f64 * f64::EPSILON * p.capacity_coulombs;
        prop_assert!((moved - net).abs() <= 1e-12 * throughput + floor, "{} vs {}", moved, net);
    }

    #[test]
    fn ecm_soc_stays_in_range(s in cell_state(), i in -50.0..50.0f64, dt in 1.0..5000.0f64) {
        let p = CellParams::default();
        let out = step_exact(&p, &s, i, dt).unwrap();
        prop_assert!((0.0..=1.0).contains(&out.state.soc));
        let unclamped = s.soc - i * dt / p.capacity_coulombs;
        prop_assert_eq!(out.saturated, !(0.0..=1.0).contains(&unclamped));
    }

    #[test]
    fn accepted_ocv_is_increasing(
        a1 in 0.2..2.0f64, a2 in -0.6..0.6f64, a3 in -0.6..0.6f64, a4 in -0.5..0.1f64, beta in 1.0..40.0f64,
    ) {
        let params = CellParams { ocv_coeffs: [3.0, a1, a2, a3, a4], ocv_exponent: beta, ..CellParams::default() };
        prop_assume!(params.validate().is_ok());
        let a = params.ocv_coeffs;
        let ocv = |s: f64| a[0] + a[1] * s + a[2] * s * s + a[3] * s * s * s + a[4] * (-beta * s).exp();
        let n = OCV_MONOTONICITY_GRID;
        for k in 1..n {
            let (s0, s1) = ((k - 1) as f64 / (n - 1) as f64, k as f64 / (n - 1) as f64);
            prop_assert!(ocv(s1) > ocv(s0), "OCV falls near soc {}", s1);
        }
        prop_assert!((OcvCurve::new(a, beta).eval(0.37).unwrap() - ocv(0.37)).abs() < 1e-12);
    }

    #[test]
    fn rls_covariance_stays_positive_definite(
        lambda_pick in 0usize..3,
        xs in prop::collection::vec((-4.0..4.0f64, -1.0..1.0f64, 3.0..4.2f64), 200..2000),
    ) {
        let lambda = [0.95, 0.99, 1.0][lambda_pick];
        let mut est = RlsEstimator::new([0.0; 3], 1e6, lambda).unwrap().with_trace_limit(1e8);
        for (k, (i, q, y)) in xs.iter().enumerate() {
            // Long flat stretches let the covariance wind up along the
            // unexcited directions.
            let x = if (k / 100) % 2 == 0 { Regressor::from_parts(*i, *q) } else { Regressor::from_parts(-0.8, 0.3) };
            est.update(&x.unwrap(), *y).unwrap();
        }
        let p = est.covariance();
        prop_assert_eq!(p, &p.transpose());
        prop_assert!(est.covariance_eigenvalues()[0] > 0.0);
    }

    #[test]
    fn rls_noiseless_data_is_recovered(
        truth in (-0.2..0.0f64, -1.5..-0.2f64, 3.0..4.2f64),
        xs in prop::collection::vec((-4.0..4.0f64, -0.5..0.5f64), 50..80),
    ) {
        let truth = [truth.0, truth.1, truth.2];
        let mut est = RlsEstimator::new([0.0; 3], 1e6, 1.0).unwrap();
        for (i, q) in xs {
            let x = Regressor::from_parts(i, q).unwrap();
            est.update(&x, x.to_array().iter().zip(truth).map(|(a, b)| a * b).sum()).unwrap();
        }
        for (got, want) in est.theta().iter().zip(truth) {
            prop_assert!((got - want).abs() < 1e-6, "{} vs {}", got, want);
        }
    }

    #[test]
    fn rls_error_decays_after_three_samples(
        truth in (-0.2..0.0f64, -1.5..-0.2f64, 3.0..4.2f64),
        xs in prop::collection::vec((-4.0..4.0f64, -1.0..1.0f64), 4..60),
    ) {
        // Diffuse prior: three exciting samples pin the parameters down, so
        // every later a-priori error is at rounding level.
        let truth = [truth.0, truth.1, truth.2];
        let mut est = RlsEstimator::new([0.0; 3], 1e14, 1.0).unwrap();
        let mut errs = Vec::new();
        for (i, q) in xs {
            let x = Regressor::from_parts(i, q).unwrap();
            let y: f64 = x.to_array().iter().zip(truth).map(|(a, b)| a * b).sum();
            errs.push(est.update(&x, y).unwrap().abs());
        }
        for k in 4..errs.len() {
            prop_assert!(errs[k] <= errs[k - 1] + 1e-9, "sample {}: {} after {}", k, errs[k], errs[k - 1]);
        }
    }

    #[test]
    fn rls_limit_does_not_depend_on_prior_scale(
        truth in (-0.2..0.0f64, -1.5..-0.2f64, 3.0..4.2f64),
        xs in prop::collection::vec((-4.0..4.0f64, -0.5..0.5f64), 400..600),
    ) {
        let truth = [truth.0, truth.1, truth.2];
        let mut a = RlsEstimator::new([0.0; 3], 1e6, 1.0).unwrap();
        let mut b = RlsEstimator::new([0.0; 3], 1e7, 1.0).unwrap();
        for (i, q) in xs {
            let x = Regressor::from_parts(i, q).unwrap();
            let y: f64 = x.to_array().iter().zip(truth).map(|(a, b)| a * b).sum();
            a.update(&x, y).unwrap();
            b.update(&x, y).unwrap();
        }
        for (x, y) in a.theta().iter().zip(b.theta()) {
            prop_assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn flyback_flux_linkage_is_continuous((volts, plan) in plan_strategy()) {
        let conv = ConverterParams::default();
        let c = simulate_cycle(&conv, &volts, &plan).unwrap();
        let (n1, n2) = (conv.turns_primary as f64, conv.turns_secondary as f64);
        let scale = n1 * c.peak_currents.iter().copied().fold(0.0, f64::max);
        for t in [c.timing.t1, c.timing.t2] {
            let before = n1 * c.switch_currents.iter().map(|w| w.value_before(t)).sum::<f64>() + n2 * c.secondary.value_before(t);
            let after = n1 * c.switch_currents.iter().map(|w| w.value_after(t)).sum::<f64>() + n2 * c.secondary.value_after(t);
            prop_assert!((before - after).abs() <= 1e-9 * scale, "{} vs {}", before, after);
        }
    }

    #[test]
    fn flyback_cycle_terminates_at_zero((volts, plan) in plan_strategy()) {
        let c = simulate_cycle(&ConverterParams::default(), &volts, &plan).unwrap();
        let t3 = c.timing.t3;
        prop_assert_eq!(c.secondary.value_before(t3), 0.0);
        prop_assert_eq!(c.secondary.value_after(t3), 0.0);
        for w in c.freewheel.iter().chain(&c.magnetizing) {
            prop_assert_eq!(w.value_after(t3), 0.0);
            prop_assert!(w.end_time() <= t3);
        }
        prop_assert!(c.secondary.min_value() >= 0.0);
    }

    #[test]
    fn flyback_charge_and_energy_balance((volts, plan) in plan_strategy()) {
        let conv = ConverterParams::default();
        let c = simulate_cycle(&conv, &volts, &plan).unwrap();
        let ratio = conv.turns_ratio();
        let per_winding: f64 = c.freewheel.iter().map(|w| ratio * w.integral()).sum();
        prop_assert!(rel_err(per_winding, c.secondary_charge) <= 1e-12);
        prop_assert!(rel_err(c.secondary.integral(), c.secondary_charge) <= 1e-12);

        let stored = c.stored_energy(conv.magnetizing_inductance);
        prop_assert!(rel_err(stored, c.delivered_energy()) <= 1e-9);

        let n = volts.len() as f64;
        let drawn: f64 = c.switch_currents.iter().map(|w| w.integral()).sum();
        let total: f64 = c.delta_q.iter().sum();
        let expected = n * c.secondary.integral() - drawn;
        prop_assert!((total - expected).abs() <= 1e-12 * drawn);
        for j in 0..volts.len() {
            let net = c.balancing_current(j).integral();
            prop_assert!((net - c.delta_q[j]).abs() <= 1e-12 * drawn);
        }
    }

    #[test]
    fn controller_is_deterministic_and_picks_the_minimum(
        volts in prop::collection::vec(3.4..3.9f64, 4..6),
        offsets in prop::collection::vec(-0.05..0.05f64, 6),
        i_ext in -1.0..0.0f64,
    ) {
        let n = volts.len();
        let params = vec![CellParams::default(); n];
        let est: Vec<RlsEstimator> = (0..n)
            .map(|j| {
                let p = &params[j];
                RlsEstimator::new([-p.series_resistance, -0.7, volts[j] + offsets[j]], 1.0, 1.0).unwrap()
            })
            .collect();
        let caps = vec![params[0].capacity_coulombs; n];
        let acc = vec![0.0; n];
        let conv = ConverterParams::default();
        let inputs = PredictionInputs {
            models: CellModels::Identified { estimators: &est, capacities: &caps },
            charge_accumulators: &acc,
            external_current: i_ext,
            converter: &conv,
            voltages: &volts,
        };
        let cfg = ControllerConfig::default();
        let a = select_plan(&inputs, &cfg).unwrap();
        let b = select_plan(&inputs, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        let gap = volts.iter().copied().fold(f64::MIN, f64::max) - volts.iter().copied().fold(f64::MAX, f64::min);
        prop_assert_eq!(a.balancing_active, gap > cfg.gap_threshold);
        if a.balancing_active {
            let best = a.predicted_std.iter().copied().fold(f64::INFINITY, f64::min);
            let chosen = a.candidate.unwrap().index();
            prop_assert_eq!(a.predicted_std[chosen], best);
            prop_assert!(a.predicted_std[..chosen].iter().all(|&s| s > best));
        } else {
            prop_assert!(a.plan.is_none() && a.predicted_std.is_empty());
        }
    }

    #[test]
    fn controller_ignores_a_common_voltage_shift(
        volts in prop::collection::vec(3.4..3.9f64, 4..6),
        shift in -0.3..0.3f64,
    ) {
        let cfg = ControllerConfig::default();
        let gap = volts.iter().copied().fold(f64::MIN, f64::max) - volts.iter().copied().fold(f64::MAX, f64::min);
        prop_assume!((gap - cfg.gap_threshold).abs() > 1e-9);
        let shifted: Vec<f64> = volts.iter().map(|v| v + shift).collect();
        prop_assert_eq!(rank_cells(&volts).unwrap(), rank_cells(&shifted).unwrap());
        prop_assert_eq!(should_balance(&volts, &cfg), should_balance(&shifted, &cfg));
        prop_assert!((std(&volts).unwrap() - std(&shifted).unwrap()).abs() < 1e-12);

        let n = volts.len();
        let decide = |v: &[f64]| {
            let est: Vec<RlsEstimator> = v.iter().map(|&x| RlsEstimator::new([0.0, 0.0, x], 1.0, 1.0).unwrap()).collect();
            let caps = vec![2880.0; n];
            let conv = ConverterParams::default();
            let inputs = PredictionInputs {
                models: CellModels::Identified { estimators: &est, capacities: &caps },
                charge_accumulators: &vec![0.0; n],
                external_current: -0.8,
                converter: &conv,
                voltages: v,
            };
            select_plan(&inputs, &cfg).unwrap().candidate
        };
        prop_assert_eq!(decide(&volts), decide(&shifted));
    }

    #[test]
    fn trace_csv_round_trips(rows in prop::collection::vec(
        (0.0..1e4f64, prop::collection::vec((0.0..1.0f64, 2.5..4.3f64, -5.0..5.0f64, -1.0..5.0f64), 4), proptest::option::of(0usize..16), -1.0..0.0f64),
        0..20,
    )) {
        let mut t = 0.0;
        let trace = Trace {
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(k, (dt, cells, cand, chg))| {
                    t += dt + 1e-3;
                    TraceRecord {
                        time: t,
                        cycle: k as u64,
                        cells: cells
                            .into_iter()
                            .map(|(soc, v, i, th)| CellSample { soc, voltage: v, current: i, theta: [-th / 7.0, th, v / 3.0] })
                            .collect(),
                        candidate: cand.map(Candidate::from_index),
                        std_v: t.sin().abs() / 3.0,
                        charger_current: chg,
                    }
                })
                .collect(),
        };
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        if trace.rows.is_empty() {
            prop_assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
        } else {
            prop_assert_eq!(read_trace(buf.as_slice()).unwrap(), trace);
        }
    }

    #[test]
    fn config_round_trips_through_json(
        socs in prop::collection::vec(0.0..1.0f64, 4..7),
        r0 in 0.001..0.2f64,
        seed in any::<u64>(),
        noise in 0.0..0.01f64,
        l_m in 1e-5..1e-2f64,
        pick in 0usize..3,
    ) {
        let mut cfg = ScenarioConfig {
            cells: socs.iter().map(|&s| CellSetup::at_soc(s)).collect(),
            ..Default::default()
        };
        cfg.cells[0].params.series_resistance = r0;
        cfg.run.seed = seed;
        cfg.run.noise_std = noise;
        cfg.converter.magnetizing_inductance = l_m;
        cfg.controller.policy = [Policy::Ampc, Policy::Greedy, Policy::None][pick];
        let back = ScenarioConfig::from_str_with_overrides(&cfg.to_json(), &[]).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn seeded_runs_are_bit_identical(seed in any::<u64>(), noise in 0.0..0.005f64, pick in 0usize..3) {
        let mut cfg = ScenarioConfig::reference([Policy::Ampc, Policy::Greedy, Policy::None][pick]);
        cfg.run.max_time = 5.0;
        cfg.run.seed = seed;
        cfg.run.noise_std = noise;
        let csv = |cfg: &ScenarioConfig| {
            let mut buf = Vec::new();
            write_trace(&mut buf, &run_scenario(cfg).unwrap().trace).unwrap();
            buf
        };
        prop_assert_eq!(csv(&cfg), csv(&cfg));
    }
}
