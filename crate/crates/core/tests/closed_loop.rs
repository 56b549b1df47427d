mod common;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::simulate;
use rdpc::baselines::non_robust_control;
use rdpc::config::ExperimentConfig;
use rdpc::experiment::run_experiment;
use rdpc::hankel::build_stack;
use rdpc::predictor::{factorize_kkt, RegularizerWeights};
use rdpc::robust::{solve_control, solve_qp, BoxSet, History, HorizonSets, ObjectiveSpec, QpSettings, RobustOptions};
use rdpc::sim::{initial_qp, preset, run_closed_loop, ControllerKind, StepMode};

fn tracking_cfg(extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = vec!["scenario.mc_runs=1".into()];
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::load("lti_tracking", &o).unwrap()
}

fn first_step_feasible(half_width: f64) -> bool {
    let cfg = tracking_cfg(&[
        &format!("scenario.disturbance.lower=[{}]", -half_width),
        &format!("scenario.disturbance.upper=[{half_width}]"),
    ]);
    let qp = initial_qp(&cfg.scenario(cfg.scenario.seed).unwrap(), &cfg.controller()).unwrap();
    solve_qp(&qp, &QpSettings::default()).is_ok()
}

#[test]
fn tracking_settles_near_reachable_reference() {
    let cfg = tracking_cfg(&["scenario.noise_std=0.005"]);
    let log = run_closed_loop(&cfg.scenario(1).unwrap(), &cfg.controller()).unwrap();
    assert!(log.aborted.is_none(), "{:?}", log.aborted);
    // Reference 0 holds for steps 0..30 and -1 from step 68 on; both lie
    // well inside the output box.
    let mean = |a: usize, b: usize| log.records[a..b].iter().map(|r| r.y_true[0]).sum::<f64>() / (b - a) as f64;
    let settled_zero = mean(15, 30);
    let settled_neg = mean(85, 100);
    assert!(
        settled_zero.abs() < 0.1,
        "mean output {settled_zero} around reference 0"
    );
    assert!(
        (settled_neg + 1.0).abs() < 0.1,
        "mean output {settled_neg} around reference -1"
    );
    // Reference 0.5 sits on the upper bound, so the robust controller backs off.
    let at_bound = mean(45, 65);
    assert!(
        at_bound < 0.5 && at_bound > 0.2,
        "mean output {at_bound} below the bound 0.5"
    );
}

#[test]
fn widening_disturbance_reaches_infeasibility() {
    let (mut lo, mut hi) = (0.5, 50.0);
    assert!(first_step_feasible(lo));
    assert!(!first_step_feasible(hi));
    for _ in 0..12 {
        let mid = 0.5 * (lo + hi);
        if first_step_feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!(hi - lo < 0.05);
    // The boundary is sharp: just inside is feasible, just outside is not.
    assert!(first_step_feasible(lo) && !first_step_feasible(hi));
}

#[test]
fn applied_inputs_stay_in_input_box() {
    for kind in [
        ControllerKind::BilevelRobust,
        ControllerKind::BilevelNonrobust,
        ControllerKind::SingleLevel,
        ControllerKind::RlsMpc,
    ] {
        let cfg = tracking_cfg(&[&format!("controller.kind={}", kind.name()), "scenario.run_len=60"]);
        let log = run_closed_loop(&cfg.scenario(3).unwrap(), &cfg.controller()).unwrap();
        assert!(!log.records.is_empty());
        for r in &log.records {
            assert!(
                (-10.0..=10.0).contains(&r.u[0]),
                "{}: u = {} at step {}",
                kind.name(),
                r.u[0],
                r.step
            );
        }
    }
}

#[test]
fn moving_reference_never_triggers_excitation() {
    let cfg = tracking_cfg(&[
        "controller.excitation.enabled=true",
        "controller.excitation.lower=[-0.5]",
        "controller.excitation.upper=[0.5]",
        "controller.excitation.pe_tolerance=1e-6",
    ]);
    let log = run_closed_loop(&cfg.scenario(2).unwrap(), &cfg.controller()).unwrap();
    assert!(log.records.iter().all(|r| !r.excited && r.mode != StepMode::Excite));
}

#[test]
fn equilibrium_excites_inside_input_box() {
    let cfg = ExperimentConfig::load("equilibrium", &["scenario.run_len=120".into()]).unwrap();
    let res = run_experiment(&cfg, Some(1)).unwrap();
    let log = &res.logs[0];
    assert!(log.aborted.is_none(), "{:?}", log.aborted);
    assert!(res.metrics.excited_steps > 0);
    for r in log.records.iter().filter(|r| r.excited) {
        assert!((-10.0..=10.0).contains(&r.u[0]));
    }
}

#[test]
fn same_seed_same_trajectory() {
    let cfg = tracking_cfg(&["scenario.run_len=50"]);
    let (sc, spec) = (cfg.scenario(4).unwrap(), cfg.controller());
    let a = run_closed_loop(&sc, &spec).unwrap();
    let b = run_closed_loop(&sc, &spec).unwrap();
    assert_eq!(a.records, b.records);
}

/// The point-forecast controller optimizes over a superset of the robust
/// controller's feasible set, so its optimum can only be lower.
#[test]
fn nonrobust_cost_is_at_most_robust_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let plant = preset("second_order_lti").unwrap();
    let (t, n_h) = (4, 8);
    let mut checked = 0;
    for trial in 0..10 {
        let (ds, _) = simulate(&plant, DVector::zeros(2), 80, (-1.0, 1.0), (-1.0, 1.0), &mut rng);
        let stack = build_stack(&ds, t, n_h).unwrap();
        let factor = factorize_kkt(&stack, &RegularizerWeights::constant(stack.n_c, 1e-3).unwrap()).unwrap();
        let (u_init, w_init, y_init) = ds.tail(t).unwrap();
        let hist = History { y_init, u_init, w_init };
        let sets = HorizonSets {
            input: vec![BoxSet::uniform(1, -10.0, 10.0).unwrap(); n_h],
            output: vec![BoxSet::uniform(1, -2.0, 0.5).unwrap(); n_h],
            uncertainty: vec![BoxSet::uniform(1, -0.3, 0.3).unwrap(); n_h],
            n_excite: 0,
        };
        let obj = ObjectiveSpec::Tracking {
            output_weight: 10.0,
            input_weight: 0.1,
            reference: vec![DVector::from_element(1, 0.4 - 0.1 * trial as f64); n_h],
        };
        let qp = QpSettings::default();
        let map = factor.output_map(&hist.y_init, &hist.u_init, &hist.w_init).unwrap();
        let opts = RobustOptions {
            feedback: true,
            soft_output_penalty: None,
            qp,
        };
        let Ok(robust) = solve_control(&map, &sets, &obj, &opts) else {
            continue;
        };
        let nominal = non_robust_control(&factor, &hist, &sets, &obj, &qp).unwrap();
        assert!(
            nominal.objective_value <= robust.objective_value + 1e-6 * robust.objective_value.abs().max(1.0),
            "trial {trial}: {} > {}",
            nominal.objective_value,
            robust.objective_value
        );
        checked += 1;
    }
    assert!(checked >= 5, "only {checked} robust instances were feasible");
}
