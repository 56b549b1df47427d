//! Comparison controllers: regularized single-level DeePC, the bi-level
//! controller without robustness, and robust MPC on an RLS-identified ARX
//! model.

pub mod arx;

use nalgebra::DVector;

pub use arx::{batch_least_squares, regression_data, regressor, rls_update, ArxModel, RlsState};

use crate::error::{Error, Result};
use crate::hankel::HankelStack;
use crate::predictor::KktFactor;
use crate::robust::{
    solve_control, solve_qp, BoxSet, ControlSolution, History, HorizonSets, ObjectiveSpec, QpBuilder, QpSettings,
    RobustOptions,
};

/// Regularization weights of the single-level scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeepcWeights {
    pub eta_g: f64,
    pub eta_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepcSolution {
    pub u_pred: DVector<f64>,
    pub y_pred: DVector<f64>,
    pub g: DVector<f64>,
    pub sigma: DVector<f64>,
    pub objective_value: f64,
}

/// Single-level regularized DeePC with squared regularizers:
///
/// ```text
/// min_g  J(Y_p g, U_p g) + η_g‖g‖² + η_σ‖Y_i g − y_init‖²
/// s.t.   U_i g = u_init, W_i g = w_init, W_p g = w̄, U_p g ∈ U, Y_p g ∈ Y
/// ```
///
/// `σ = Y_i g − y_init` and the predicted trajectories are eliminated.
#[allow(clippy::too_many_arguments)]
pub fn single_level_deepc(
    stack: &HankelStack,
    history: &History,
    w_nominal: &DVector<f64>,
    input: &[BoxSet],
    output: &[BoxSet],
    weights: DeepcWeights,
    objective: &ObjectiveSpec,
    qp: &QpSettings,
) -> Result<DeepcSolution> {
    let (n_c, n_h, n_u, n_y, n_w) = (stack.n_c, stack.n_h, stack.n_u, stack.n_y, stack.n_w);
    if weights.eta_g < 0.0 || weights.eta_sigma < 0.0 {
        return Err(Error::Parameter("DeePC regularization weights must be >= 0".into()));
    }
    if history.y_init.len() != stack.y_init.nrows() {
        return Err(Error::dim("y_init", stack.y_init.nrows(), history.y_init.len()));
    }
    if history.u_init.len() != stack.u_init.nrows() {
        return Err(Error::dim("u_init", stack.u_init.nrows(), history.u_init.len()));
    }
    if history.w_init.len() != stack.w_init.nrows() {
        return Err(Error::dim("w_init", stack.w_init.nrows(), history.w_init.len()));
    }
    if w_nominal.len() != n_h * n_w {
        return Err(Error::dim("disturbance forecast", n_h * n_w, w_nominal.len()));
    }
    if input.len() != n_h || output.len() != n_h {
        return Err(Error::dim("constraint steps", n_h, input.len().min(output.len())));
    }

    let mut b = QpBuilder::new();
    b.add_vars(n_c);
    let row_of = |m: &nalgebra::DMatrix<f64>, r: usize| -> Vec<(usize, f64)> {
        (0..n_c).filter(|&j| m[(r, j)] != 0.0).map(|j| (j, m[(r, j)])).collect()
    };
    for r in 0..stack.u_init.nrows() {
        b.add_eq(row_of(&stack.u_init, r), history.u_init[r], format!("u_init {r}"));
    }
    for r in 0..stack.w_init.nrows() {
        b.add_eq(row_of(&stack.w_init, r), history.w_init[r], format!("w_init {r}"));
    }
    for r in 0..stack.w_pred.nrows() {
        b.add_eq(row_of(&stack.w_pred, r), w_nominal[r], format!("w_pred {r}"));
    }
    for step in 0..n_h {
        for a in 0..n_u {
            let r = step * n_u + a;
            let (lo, hi) = (input[step].lower()[a], input[step].upper()[a]);
            let row = row_of(&stack.u_pred, r);
            if hi.is_finite() {
                b.add_le(row.clone(), hi, format!("input step {step} channel {a} <= {hi}"));
            }
            if lo.is_finite() {
                b.add_le(
                    row.iter().map(|&(j, v)| (j, -v)).collect(),
                    -lo,
                    format!("input step {step} channel {a} >= {lo}"),
                );
            }
        }
        for a in 0..n_y {
            let r = step * n_y + a;
            let (lo, hi) = (output[step].lower()[a], output[step].upper()[a]);
            let row = row_of(&stack.y_pred, r);
            if hi.is_finite() {
                b.add_le(row.clone(), hi, format!("output step {step} channel {a} <= {hi}"));
            }
            if lo.is_finite() {
                b.add_le(
                    row.iter().map(|&(j, v)| (j, -v)).collect(),
                    -lo,
                    format!("output step {step} channel {a} >= {lo}"),
                );
            }
        }
    }

    // Quadratic terms in g.
    let mut hess = nalgebra::DMatrix::identity(n_c, n_c) * (2.0 * weights.eta_g);
    hess += stack.y_init.transpose() * &stack.y_init * (2.0 * weights.eta_sigma);
    let mut lin = -(stack.y_init.transpose() * &history.y_init) * (2.0 * weights.eta_sigma);
    let mut constant = weights.eta_sigma * history.y_init.norm_squared();
    match objective {
        ObjectiveSpec::Tracking {
            output_weight,
            input_weight,
            reference,
        } => {
            if reference.len() != n_h {
                return Err(Error::dim("reference steps", n_h, reference.len()));
            }
            let refv = crate::linalg::flatten(reference);
            hess += stack.y_pred.transpose() * &stack.y_pred * (2.0 * output_weight);
            hess += stack.u_pred.transpose() * &stack.u_pred * (2.0 * input_weight);
            lin -= stack.y_pred.transpose() * &refv * (2.0 * output_weight);
            constant += output_weight * refv.norm_squared();
        }
        ObjectiveSpec::Energy { weight } => {
            let s0 = b.add_vars(n_h * n_u);
            for r in 0..n_h * n_u {
                let row = row_of(&stack.u_pred, r);
                let mut pos = row.clone();
                pos.push((s0 + r, -1.0));
                b.add_le(pos, 0.0, format!("|u {r}| epigraph +"));
                let mut neg: Vec<(usize, f64)> = row.iter().map(|&(j, v)| (j, -v)).collect();
                neg.push((s0 + r, -1.0));
                b.add_le(neg, 0.0, format!("|u {r}| epigraph -"));
                b.add_linear(s0 + r, *weight);
            }
        }
    }
    for j in 0..n_c {
        for i in 0..=j {
            b.add_quad(i, j, hess[(i, j)]);
        }
        b.add_linear(j, lin[j]);
    }
    b.add_constant(constant);
    let sol = solve_qp(&b.build(), qp)?;
    let g = DVector::from_column_slice(&sol.x[..n_c]);
    Ok(DeepcSolution {
        u_pred: &stack.u_pred * &g,
        y_pred: &stack.y_pred * &g,
        sigma: &stack.y_init * &g - &history.y_init,
        g,
        objective_value: sol.objective,
    })
}

/// Bi-level controller with a point forecast and no disturbance feedback.
pub fn non_robust_control(
    factor: &KktFactor,
    history: &History,
    sets: &HorizonSets,
    objective: &ObjectiveSpec,
    qp: &QpSettings,
) -> Result<ControlSolution> {
    let map = factor.output_map(&history.y_init, &history.u_init, &history.w_init)?;
    let point_sets = HorizonSets {
        uncertainty: sets.uncertainty.iter().map(|b| BoxSet::point(b.center())).collect(),
        ..sets.clone()
    };
    let opts = RobustOptions {
        feedback: false,
        soft_output_penalty: None,
        qp: *qp,
    };
    solve_control(&map, &point_sets, objective, &opts)
}

/// Robust MPC on an ARX prediction model, tightened exactly like the
/// data-driven controller.
pub fn rls_robust_mpc(
    model: &ArxModel,
    history: &History,
    sets: &HorizonSets,
    objective: &ObjectiveSpec,
    opts: &RobustOptions,
) -> Result<ControlSolution> {
    let map = model.output_map(history, sets.n_h())?;
    solve_control(&map, sets, objective, opts)
}
