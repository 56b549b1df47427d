mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{gaussian_mat, max_abs, random_dataset, simulate, uniform_vec};
use rdpc::baselines::{
    batch_least_squares, regression_data, rls_update, single_level_deepc, ArxModel, DeepcWeights, RlsState,
};
use rdpc::excitation::{self, ExcitationConfig, StepProblem};
use rdpc::hankel::{build_hankel, build_stack, is_persistently_exciting, Dataset};
use rdpc::predictor::{
    factorize_kkt, wasserstein_bound_convex, wasserstein_bound_nonconvex, NoiseModel, OutputMap, RegularizerWeights,
};
use rdpc::robust::{
    causality_mask, robustify_row, solve_control, solve_qp, AffineExpr, BilinearTerm, BoxSet, History, HorizonSets,
    ObjectiveSpec, QpBuilder, QpSettings, RobustOptions,
};
use rdpc::sim::{generate, preset, DisturbanceSpec, WeatherSpec};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

fn signal(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    (0..len).map(|_| uniform_vec(n, -1.0, 1.0, rng)).collect()
}

fn random_map(n_h: usize, n_u: usize, n_w: usize, n_y: usize, rng: &mut ChaCha8Rng) -> OutputMap {
    OutputMap {
        offset: uniform_vec(n_h * n_y, -0.2, 0.2, rng),
        du: gaussian_mat(n_h * n_y, n_h * n_u, rng) * 0.5,
        dw: gaussian_mat(n_h * n_y, n_h * n_w, rng) * 0.5,
        n_u,
        n_w,
        n_y,
        n_h,
    }
}

fn horizon_sets(n_h: usize, n_u: usize, n_w: usize, n_y: usize, w_half: f64) -> HorizonSets {
    HorizonSets {
        input: vec![BoxSet::uniform(n_u, -5.0, 5.0).unwrap(); n_h],
        output: vec![BoxSet::uniform(n_y, -3.0, 3.0).unwrap(); n_h],
        uncertainty: vec![BoxSet::uniform(n_w, -w_half, w_half).unwrap(); n_h],
        n_excite: 0,
    }
}

fn tracking(n_h: usize, n_y: usize, level: f64) -> ObjectiveSpec {
    ObjectiveSpec::Tracking {
        output_weight: 1.0,
        input_weight: 0.1,
        reference: vec![DVector::from_element(n_y, level); n_h],
    }
}

fn robust_opts() -> RobustOptions {
    RobustOptions {
        feedback: true,
        soft_output_penalty: None,
        qp: QpSettings::default(),
    }
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn hankel_columns_read_back_windows(seed in any::<u64>(), len in 1usize..50, n in 1usize..4, depth_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = signal(len, n, &mut rng);
        let depth = 1 + ((len - 1) as f64 * depth_frac) as usize;
        let h = build_hankel(&s, depth).unwrap();
        prop_assert_eq!(h.ncols(), len - depth + 1);
        for j in 0..h.ncols() {
            for i in 0..depth {
                for c in 0..n {
                    prop_assert_eq!(h[(i * n + c, j)], s[i + j][c]);
                }
            }
        }
    }

    #[test]
    fn hankel_shift_structure(seed in any::<u64>(), len in 3usize..40, n in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = signal(len, n, &mut rng);
        let depth = 1 + len / 3;
        let h = build_hankel(&s, depth).unwrap();
        for i in 0..depth - 1 {
            for j in 0..h.ncols() - 1 {
                for c in 0..n {
                    prop_assert_eq!(h[((i + 1) * n + c, j)], h[(i * n + c, j + 1)]);
                }
            }
        }
    }

    #[test]
    fn sliding_update_matches_rebuild(seed in any::<u64>(), cap in 8usize..30, t in 1usize..4, n_h in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(1, 1, 2, cap, &mut rng);
        let (u, w, y) = (uniform_vec(1, -1.0, 1.0, &mut rng), uniform_vec(1, -1.0, 1.0, &mut rng), uniform_vec(2, -1.0, 1.0, &mut rng));
        let pushed = ds.push_sample(u.clone(), w.clone(), y.clone()).unwrap();
        let mut manual = Dataset::new(1, 1, 2, cap).unwrap();
        for s in ds.samples().skip(1) {
            manual.push(s.u.clone(), s.w.clone(), s.y.clone()).unwrap();
        }
        manual.push(u, w, y).unwrap();
        prop_assert_eq!(build_stack(&pushed, t, n_h).unwrap(), build_stack(&manual, t, n_h).unwrap());
    }

    #[test]
    fn persistency_is_monotone_in_order(seed in any::<u64>(), len in 4usize..40, zeros in 0usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = signal(len, 1, &mut rng);
        // Zero tails make higher orders fail, which exercises both outcomes.
        for v in s.iter_mut().skip(len.saturating_sub(zeros)) {
            v[0] = 0.0;
        }
        for k in 1..=len {
            if is_persistently_exciting(&s, k) {
                for lower in 1..k {
                    prop_assert!(is_persistently_exciting(&s, lower), "PE of order {} but not {}", k, lower);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn woodbury_inverse_of_top_block(seed in any::<u64>(), t in 2usize..5, n_h in 2usize..6, extra in 0usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (t + n_h) * 2;
        let n_c = rows + 2 + extra;
        let ds = random_dataset(1, 1, 2, n_c + t + n_h - 1, &mut rng);
        let stack = build_stack(&ds, t, n_h).unwrap();
        let e_g = uniform_vec(n_c, 0.05, 1.0, &mut rng);
        let f = factorize_kkt(&stack, &RegularizerWeights::new(e_g.clone()).unwrap()).unwrap();
        let m11 = stack.y_init.transpose() * &stack.y_init + DMatrix::from_diagonal(&e_g);
        let err = max_abs(&(&m11 * f.m11_inv() - DMatrix::identity(n_c, n_c)));
        prop_assert!(err < 1e-9, "M11·M11⁻¹ − I = {err:e}");
    }

    #[test]
    fn kkt_stationarity_and_feasibility(seed in any::<u64>(), t in 2usize..5, n_h in 2usize..6, extra in 0usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_c = (t + n_h) * 2 + 2 + extra;
        let ds = random_dataset(1, 1, 2, n_c + t + n_h - 1, &mut rng);
        let stack = build_stack(&ds, t, n_h).unwrap();
        let e_g = uniform_vec(n_c, 0.05, 1.0, &mut rng);
        let f = factorize_kkt(&stack, &RegularizerWeights::new(e_g.clone()).unwrap()).unwrap();
        let y_init = uniform_vec(2 * t, -1.0, 1.0, &mut rng);
        let (u_init, w_init) = (uniform_vec(t, -1.0, 1.0, &mut rng), uniform_vec(t, -1.0, 1.0, &mut rng));
        let (u_pred, w_pred) = (uniform_vec(n_h, -1.0, 1.0, &mut rng), uniform_vec(n_h, -1.0, 1.0, &mut rng));
        let g = f.solve_lower(&y_init, &u_init, &w_init, &u_pred, &w_pred).unwrap();
        let kappa = f.kappa(&y_init, &u_init, &w_init, &u_pred, &w_pred).unwrap();
        let h = stack.constraint_matrix();
        let hy = &stack.y_init;
        let stat = (hy.transpose() * hy + DMatrix::from_diagonal(&e_g)) * &g + h.transpose() * &kappa - hy.transpose() * &y_init;
        prop_assert!(stat.amax() < 1e-8, "stationarity residual {:e}", stat.amax());
        let b = DVector::from_iterator(h.nrows(), u_init.iter().chain(w_init.iter()).chain(u_pred.iter()).chain(w_pred.iter()).cloned());
        let prim = &h * &g - b;
        prop_assert!(prim.amax() < 1e-8, "equality residual {:e}", prim.amax());
    }

    #[test]
    fn output_map_matches_lower_level(seed in any::<u64>(), t in 2usize..5, n_h in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_c = (t + n_h) * 2 + 20;
        let ds = random_dataset(1, 1, 1, n_c + t + n_h - 1, &mut rng);
        let stack = build_stack(&ds, t, n_h).unwrap();
        let f = factorize_kkt(&stack, &RegularizerWeights::constant(n_c, 0.1).unwrap()).unwrap();
        let y_init = uniform_vec(t, -1.0, 1.0, &mut rng);
        let (u_init, w_init) = (uniform_vec(t, -1.0, 1.0, &mut rng), uniform_vec(t, -1.0, 1.0, &mut rng));
        let map = f.output_map(&y_init, &u_init, &w_init).unwrap();
        let aff = f.affine_predictor(&y_init, &u_init, &w_init).unwrap();
        for _ in 0..5 {
            let (u_pred, w_pred) = (uniform_vec(n_h, -2.0, 2.0, &mut rng), uniform_vec(n_h, -2.0, 2.0, &mut rng));
            let g = f.solve_lower(&y_init, &u_init, &w_init, &u_pred, &w_pred).unwrap();
            let direct = f.predict(&g).unwrap();
            let scale = direct.amax().max(1.0);
            prop_assert!((map.eval(&u_pred, &w_pred) - &direct).amax() < 1e-9 * scale);
            prop_assert!((aff.eval(&u_pred, &w_pred) - &g).amax() < 1e-9 * g.amax().max(1.0));
        }
    }

    #[test]
    fn bound_ordering(seed in any::<u64>(), scale in 0.0f64..3.0, std in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, n_h, n_y) = (3, 2, 2);
        let ds = random_dataset(1, 1, n_y, 25, &mut rng);
        let stack = build_stack(&ds, t, n_h).unwrap();
        let g = uniform_vec(stack.n_c, -1.0, 1.0, &mut rng) * scale;
        let y = uniform_vec(t * n_y, -1.0, 1.0, &mut rng);
        let noise = NoiseModel::isotropic(n_y, std).unwrap();
        let cvx = wasserstein_bound_convex(&g, &y, &stack, &noise).unwrap();
        let ncv = wasserstein_bound_nonconvex(&g, &y, &stack, &noise).unwrap();
        let resid = (&stack.y_init * &g - &y).norm_squared();
        prop_assert!(cvx >= ncv - 1e-12 * cvx.abs().max(1.0));
        prop_assert!(ncv >= resid - 1e-12 * resid.max(1.0));
    }
}

/// Max of one row over every vertex of the box.
fn vertex_max(expr: &AffineExpr, row: usize, z: &DVector<f64>, set: &BoxSet) -> f64 {
    set.vertices()
        .iter()
        .map(|v| expr.eval(z, v)[row])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Random row over `n_dec` decisions and `n_unc` uncertain components with
/// a few bilinear terms.
fn random_expr(n_dec: usize, n_unc: usize, rng: &mut ChaCha8Rng) -> AffineExpr {
    let mut e = AffineExpr::zeros(1, n_dec, n_unc);
    e.constant[0] = rng.random_range(-1.0..1.0);
    e.coeff_dec = gaussian_mat(1, n_dec, rng);
    e.coeff_unc = gaussian_mat(1, n_unc, rng);
    for _ in 0..n_unc {
        e.bilinear.push(BilinearTerm {
            row: 0,
            dec: rng.random_range(0..n_dec),
            unc: rng.random_range(0..n_unc),
            weight: rng.random_range(-1.0..1.0),
        });
    }
    e
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn range_over_box_is_vertex_extremum(seed in any::<u64>(), n_unc in 1usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let expr = random_expr(3, n_unc, &mut rng);
        let z = uniform_vec(3, -2.0, 2.0, &mut rng);
        let lo = uniform_vec(n_unc, -1.0, 0.0, &mut rng);
        let set = BoxSet::new(lo.clone(), lo + uniform_vec(n_unc, 0.0, 2.0, &mut rng)).unwrap();
        let (min, max) = expr.range_over(0, &z, &set);
        let vmax = vertex_max(&expr, 0, &z, &set);
        let vmin = set.vertices().iter().map(|v| expr.eval(&z, v)[0]).fold(f64::INFINITY, f64::min);
        prop_assert!((max - vmax).abs() < 1e-10 * vmax.abs().max(1.0));
        prop_assert!((min - vmin).abs() < 1e-10 * vmin.abs().max(1.0));
    }

    /// With the decisions pinned, the robustified row is satisfiable exactly
    /// when the vertex maximum is within the bound.
    #[test]
    fn robustified_row_is_vertex_maximum(seed in any::<u64>(), n_unc in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_dec = 3;
        let expr = random_expr(n_dec, n_unc, &mut rng);
        let z = uniform_vec(n_dec, -2.0, 2.0, &mut rng);
        let set = BoxSet::symmetric(uniform_vec(n_unc, -0.5, 0.5, &mut rng), uniform_vec(n_unc, 0.05, 1.0, &mut rng)).unwrap();
        let vmax = vertex_max(&expr, 0, &z, &set);
        let feasible = |bound: f64| {
            let mut b = QpBuilder::new();
            b.add_vars(n_dec);
            for i in 0..n_dec {
                b.add_eq(vec![(i, 1.0)], z[i], format!("pin {i}"));
                b.add_quad(i, i, 1.0);
            }
            robustify_row(&mut b, &expr, 0, &set, bound, "row").unwrap();
            solve_qp(&b.build(), &QpSettings::default()).is_ok()
        };
        prop_assert!(feasible(vmax + 1e-4));
        prop_assert!(!feasible(vmax - 1e-2));
    }

    #[test]
    fn feedback_gain_is_causal(seed in any::<u64>(), n_h in 2usize..6, n_w in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(n_h, 1, n_w, 1, &mut rng);
        let sets = horizon_sets(n_h, 1, n_w, 1, 0.2);
        let sol = solve_control(&map, &sets, &tracking(n_h, 1, 0.5), &robust_opts());
        prop_assume!(sol.is_ok());
        let k = sol.unwrap().k_gain;
        let mask = causality_mask(n_h, 1, n_w);
        for i in 0..k.nrows() {
            for j in 0..k.ncols() {
                if !mask[(i, j)] {
                    prop_assert_eq!(k[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn wider_uncertainty_never_lowers_cost(seed in any::<u64>(), n_h in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(n_h, 1, 1, 1, &mut rng);
        let obj = tracking(n_h, 1, 2.0);
        let mut last = f64::NEG_INFINITY;
        for half in [0.0, 0.1, 0.3] {
            match solve_control(&map, &horizon_sets(n_h, 1, 1, 1, half), &obj, &robust_opts()) {
                Ok(s) => {
                    prop_assert!(s.objective_value >= last - 1e-6 * last.abs().max(1.0), "{} < {}", s.objective_value, last);
                    last = s.objective_value;
                }
                // Once infeasible, wider sets stay infeasible.
                Err(_) => break,
            }
        }
    }

    #[test]
    fn excitation_branch_passes_plain_solution_through(seed in any::<u64>(), n_h in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(n_h, 1, 1, 1, &mut rng);
        let sets = horizon_sets(n_h, 1, 1, 1, 0.1);
        let obj = tracking(n_h, 1, 1.0);
        let plain = solve_control(&map, &sets, &obj, &robust_opts());
        prop_assume!(plain.is_ok());
        let plain = plain.unwrap();
        let problem = StepProblem {
            map: &map,
            input: &sets.input,
            output: &sets.output,
            forecast: &sets.uncertainty,
            objective: &obj,
            options: robust_opts(),
        };
        let cfg = ExcitationConfig {
            enabled: true,
            u_e_box: BoxSet::uniform(1, -0.5, 0.5).unwrap(),
            pe_tolerance: 1e-9,
            use_exact_rank: false,
            exact_rank_order: 1,
            rng_seed: 0,
        };
        let out = excitation::step(&problem, &cfg, &mut ChaCha8Rng::seed_from_u64(seed), None).unwrap();
        prop_assume!(!out.excited);
        prop_assert_eq!(out.applied, plain.first_input(1));
        prop_assert_eq!(out.solution, plain);
    }
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn rls_without_forgetting_is_batch_least_squares(seed in any::<u64>(), order in 1usize..4, extra in 5usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(1, 1, 1, order + 3 * order + 1 + extra, &mut rng);
        let (phi, y) = regression_data(&ds, order).unwrap();
        let n0 = phi.ncols() + 2;
        let mut st = RlsState::from_batch_exact(&phi.rows(0, n0).into_owned(), &y.rows(0, n0).into_owned(), 1.0).unwrap();
        for r in n0..phi.nrows() {
            st = rls_update(&st, &phi.row(r).transpose(), &y.row(r).transpose()).unwrap();
        }
        let batch = batch_least_squares(&phi, &y).unwrap();
        let err = max_abs(&(&st.theta - &batch)) / max_abs(&batch).max(1.0);
        prop_assert!(err < 1e-6, "relative error {err:e}");
    }

    #[test]
    fn arx_rollout_matches_recursion(seed in any::<u64>(), order in 1usize..4, n_h in 1usize..8, n_y in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n_u, n_w) = (1, 2);
        let width = order * (n_y + n_u + n_w);
        let model = ArxModel::from_theta(&(gaussian_mat(width, n_y, &mut rng) * 0.3), order, n_u, n_w, n_y).unwrap();
        let hist = History {
            y_init: uniform_vec(order * n_y, -1.0, 1.0, &mut rng),
            u_init: uniform_vec(order * n_u, -1.0, 1.0, &mut rng),
            w_init: uniform_vec(order * n_w, -1.0, 1.0, &mut rng),
        };
        let map = model.output_map(&hist, n_h).unwrap();
        let u = uniform_vec(n_h * n_u, -1.0, 1.0, &mut rng);
        let w = uniform_vec(n_h * n_w, -1.0, 1.0, &mut rng);
        let direct = model.simulate(&hist, &u, &w);
        prop_assert!((map.eval(&u, &w) - &direct).amax() < 1e-10 * direct.amax().max(1.0));
    }

    #[test]
    fn plant_is_linear(seed in any::<u64>(), step in 0usize..500, name in prop::sample::select(vec!["second_order_lti", "second_order_ltv", "rc_multizone"])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = preset(name).unwrap();
        let v = |n: usize, rng: &mut ChaCha8Rng| uniform_vec(n, -3.0, 3.0, rng);
        let (x1, x2) = (v(p.n_x(), &mut rng), v(p.n_x(), &mut rng));
        let (u1, u2) = (v(p.n_u(), &mut rng), v(p.n_u(), &mut rng));
        let (w1, w2) = (v(p.n_w(), &mut rng), v(p.n_w(), &mut rng));
        let (xa, ya) = p.step(step, &x1, &u1, &w1).unwrap();
        let (xb, yb) = p.step(step, &x2, &u2, &w2).unwrap();
        let (xs, ys) = p.step(step, &(&x1 + &x2), &(&u1 + &u2), &(&w1 + &w2)).unwrap();
        prop_assert!((xs - xa - xb).amax() < 1e-9);
        prop_assert!((ys - ya - yb).amax() < 1e-9);
    }

    #[test]
    fn weather_stays_inside_forecast_tube(seed in any::<u64>(), tube in 0.0f64..3.0, rho in -0.95f64..0.95) {
        let spec = DisturbanceSpec::Weather(WeatherSpec { temp_tube: tube, solar_tube: 10.0 * tube, error_correlation: rho, ..WeatherSpec::default() });
        let a = generate(&spec, 300, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(a.is_consistent());
        prop_assert_eq!(a, generate(&spec, 300, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap());
    }

    #[test]
    fn box_sum_and_difference_membership(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = uniform_vec(n, -3.0, 0.0, &mut rng);
        let a = BoxSet::new(lo.clone(), lo + uniform_vec(n, 1.0, 4.0, &mut rng)).unwrap();
        let blo = uniform_vec(n, -0.4, 0.0, &mut rng);
        let b = BoxSet::new(blo.clone(), blo + uniform_vec(n, 0.0, 0.8, &mut rng)).unwrap();
        let diff = a.pontryagin_diff(&b).unwrap();
        let sum = diff.minkowski_sum(&b).unwrap();
        prop_assert!((sum.lower() - a.lower()).amax() < 1e-12 && (sum.upper() - a.upper()).amax() < 1e-12);
        for _ in 0..20 {
            let x = excitation::sample_box(&diff, &mut rng);
            let y = excitation::sample_box(&b, &mut rng);
            prop_assert!(a.contains_tol(&(x + y), 1e-12));
        }
    }
}

/// Single-level DeePC keeps its equality constraints for every weight pair
/// on a grid spanning five decades.
#[test]
fn deepc_equalities_hold_across_weight_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let plant = preset("second_order_lti").unwrap();
    let (t, n_h) = (4, 6);
    let (ds, _) = simulate(
        &plant,
        DVector::zeros(plant.n_x()),
        60,
        (-1.0, 1.0),
        (-1.0, 1.0),
        &mut rng,
    );
    let stack = build_stack(&ds, t, n_h).unwrap();
    let (u_i, w_i, y_i) = ds.tail(t).unwrap();
    let hist = History {
        y_init: y_i,
        u_init: u_i,
        w_init: w_i,
    };
    let w_nom = DVector::zeros(n_h);
    let input = vec![BoxSet::uniform(1, -10.0, 10.0).unwrap(); n_h];
    let output = vec![BoxSet::uniform(1, -2.0, 0.5).unwrap(); n_h];
    let obj = tracking(n_h, 1, 0.3);
    for eta_g in [1e-3, 1e-1, 1e1] {
        for eta_sigma in [1e0, 1e2, 1e4] {
            let sol = single_level_deepc(
                &stack,
                &hist,
                &w_nom,
                &input,
                &output,
                DeepcWeights { eta_g, eta_sigma },
                &obj,
                &QpSettings::default(),
            )
            .unwrap();
            let res = [
                (&stack.u_init * &sol.g - &hist.u_init).amax(),
                (&stack.w_init * &sol.g - &hist.w_init).amax(),
                (&stack.w_pred * &sol.g - &w_nom).amax(),
            ];
            let scale = sol.g.amax().max(1.0);
            for r in res {
                assert!(
                    r < 1e-6 * scale,
                    "eta_g {eta_g}, eta_sigma {eta_sigma}: equality residual {r:e}"
                );
            }
        }
    }
}
