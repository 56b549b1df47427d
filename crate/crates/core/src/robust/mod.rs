//! Upper-level robust problem.
//!
//! Future inputs follow `u = ū + K (w̃ − w̄)`, where `w̃` stacks the
//! uncertain per-step vectors (measurable disturbance, optionally followed by
//! the excitation input) and `w̄` is their nominal value. `K` is restricted to
//! strictly causal blocks, so the first applied input is always `ū₁`. Input
//! and output constraints must hold for every `w̃` in a box; for boxes the
//! worst case is the support function, which needs an absolute value of each
//! coefficient of `w̃`. Coefficients that depend on `K` get an auxiliary
//! epigraph variable, keeping the whole problem a convex QP. The objective is
//! evaluated at the nominal disturbance.

mod boxset;
pub mod qp;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

pub use boxset::BoxSet;
pub use qp::{solve_qp, KktResiduals, QpBuilder, QpProblem, QpSettings, QpSolution, SparseRow};

use crate::error::{Error, Result};
use crate::predictor::{KktFactor, OutputMap};

/// Entry `(i, j)` is true iff `K[i][j]` may be nonzero: the block row of `i`
/// (future step) is strictly later than the block column of `j`.
pub fn causality_mask(n_h: usize, n_u: usize, n_w: usize) -> DMatrix<bool> {
    DMatrix::from_fn(n_h * n_u, n_h * n_w, |i, j| n_u > 0 && n_w > 0 && j / n_w < i / n_u)
}

/// Free entries of the causal gain in row-major order.
pub fn free_entries(n_h: usize, n_u: usize, n_w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if n_u == 0 || n_w == 0 {
        return out;
    }
    for i in 0..n_h * n_u {
        for j in 0..(i / n_u) * n_w {
            out.push((i, j));
        }
    }
    out
}

/// `K·w̃` contribution of one decision variable to one row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTerm {
    pub row: usize,
    pub dec: usize,
    pub unc: usize,
    pub weight: f64,
}

/// Rows of `constant + coeff_dec·z + coeff_unc·w̃ + Σ weight·z[dec]·w̃[unc]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineExpr {
    pub constant: DVector<f64>,
    pub coeff_dec: DMatrix<f64>,
    pub coeff_unc: DMatrix<f64>,
    pub bilinear: Vec<BilinearTerm>,
}

impl AffineExpr {
    pub fn zeros(rows: usize, n_dec: usize, n_unc: usize) -> Self {
        Self {
            constant: DVector::zeros(rows),
            coeff_dec: DMatrix::zeros(rows, n_dec),
            coeff_unc: DMatrix::zeros(rows, n_unc),
            bilinear: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.constant.len()
    }

    pub fn n_dec(&self) -> usize {
        self.coeff_dec.ncols()
    }

    pub fn n_unc(&self) -> usize {
        self.coeff_unc.ncols()
    }

    pub fn eval(&self, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.constant + &self.coeff_dec * z.rows(0, self.n_dec()) + &self.coeff_unc * w;
        for t in &self.bilinear {
            out[t.row] += t.weight * z[t.dec] * w[t.unc];
        }
        out
    }

    /// Bilinear terms grouped by row, then by uncertainty index.
    fn grouped(&self) -> Vec<BTreeMap<usize, Vec<(usize, f64)>>> {
        let mut g = vec![BTreeMap::new(); self.n_rows()];
        for t in &self.bilinear {
            g[t.row].entry(t.unc).or_insert_with(Vec::new).push((t.dec, t.weight));
        }
        g
    }

    /// Exact `(min, max)` of row `row` over the box at fixed `z`.
    pub fn range_over(&self, row: usize, z: &DVector<f64>, set: &BoxSet) -> (f64, f64) {
        let mut coeff: Vec<f64> = self.coeff_unc.row(row).iter().cloned().collect();
        for t in self.bilinear.iter().filter(|t| t.row == row) {
            coeff[t.unc] += t.weight * z[t.dec];
        }
        let base = self.constant[row] + (self.coeff_dec.row(row) * z.rows(0, self.n_dec()))[0];
        let c = set.center();
        let r = set.half_width();
        let mid: f64 = base + coeff.iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>();
        let spread: f64 = coeff.iter().zip(r.iter()).map(|(a, b)| a.abs() * b).sum();
        (mid - spread, mid + spread)
    }
}

/// Emits rows enforcing `lo ≤ expr[row](z, w̃) ≤ hi` for all `w̃` in `set`.
/// The first `expr.n_dec()` builder variables are the decisions. With
/// `slack = Some(s)` both sides are relaxed by the builder variable `s`.
#[allow(clippy::too_many_arguments)]
pub fn robustify_interval(
    builder: &mut QpBuilder,
    expr: &AffineExpr,
    row: usize,
    set: &BoxSet,
    lo: f64,
    hi: f64,
    label: &str,
    slack: Option<usize>,
) -> Result<()> {
    let groups = expr.grouped();
    robustify_grouped(builder, expr, &groups[row], row, set, lo, hi, label, slack)
}

/// One-sided form `expr[row](z, w̃) ≤ bound` for all `w̃` in `set`.
pub fn robustify_row(
    builder: &mut QpBuilder,
    expr: &AffineExpr,
    row: usize,
    set: &BoxSet,
    bound: f64,
    label: &str,
) -> Result<()> {
    robustify_interval(builder, expr, row, set, f64::NEG_INFINITY, bound, label, None)
}

#[allow(clippy::too_many_arguments)]
fn robustify_grouped(
    builder: &mut QpBuilder,
    expr: &AffineExpr,
    group: &BTreeMap<usize, Vec<(usize, f64)>>,
    row: usize,
    set: &BoxSet,
    lo: f64,
    hi: f64,
    label: &str,
    slack: Option<usize>,
) -> Result<()> {
    if set.dim() != expr.n_unc() {
        return Err(Error::dim("uncertainty box", expr.n_unc(), set.dim()));
    }
    if !set.is_bounded() {
        return Err(Error::Parameter("uncertainty box must be bounded".into()));
    }
    if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
        return Ok(());
    }
    let n_dec = expr.n_dec();
    let c = set.center();
    let r = set.half_width();

    // Nominal part: constant + coeff_dec·z + a(z)·c.
    let mut lin: Vec<f64> = expr.coeff_dec.row(row).iter().cloned().collect();
    let mut constant = expr.constant[row];
    for k in 0..expr.n_unc() {
        constant += expr.coeff_unc[(row, k)] * c[k];
    }
    for (&k, terms) in group {
        for &(d, w) in terms {
            lin[d] += w * c[k];
        }
    }

    let mut margin = 0.0;
    let mut aux: Vec<(usize, f64)> = Vec::new();
    for k in 0..expr.n_unc() {
        if r[k] == 0.0 {
            continue;
        }
        let a0 = expr.coeff_unc[(row, k)];
        match group.get(&k) {
            None => margin += r[k] * a0.abs(),
            Some(terms) => {
                let t = builder.add_var();
                let mut pos: SparseRow = terms.clone();
                pos.push((t, -1.0));
                builder.add_le(pos, -a0, format!("{label}: |coef {k}| upper"));
                let mut neg: SparseRow = terms.iter().map(|&(d, w)| (d, -w)).collect();
                neg.push((t, -1.0));
                builder.add_le(neg, a0, format!("{label}: |coef {k}| lower"));
                aux.push((t, r[k]));
            }
        }
    }

    let base: SparseRow = lin
        .iter()
        .enumerate()
        .take(n_dec)
        .filter(|(_, v)| **v != 0.0)
        .map(|(d, v)| (d, *v))
        .collect();
    if hi.is_finite() {
        let mut row_up = base.clone();
        row_up.extend(aux.iter().cloned());
        if let Some(s) = slack {
            row_up.push((s, -1.0));
        }
        builder.add_le(row_up, hi - constant - margin, format!("{label} <= {hi}"));
    } else if hi == f64::NEG_INFINITY {
        return Err(Error::EmptySet(format!("{label}: upper bound -inf")));
    }
    if lo.is_finite() {
        let mut row_lo: SparseRow = base.iter().map(|&(d, v)| (d, -v)).collect();
        row_lo.extend(aux.iter().cloned());
        if let Some(s) = slack {
            row_lo.push((s, -1.0));
        }
        builder.add_le(row_lo, -lo + constant - margin, format!("{label} >= {lo}"));
    } else if lo == f64::INFINITY {
        return Err(Error::EmptySet(format!("{label}: lower bound +inf")));
    }
    Ok(())
}

/// Per-step constraint and uncertainty sets over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSets {
    /// Admissible nominal-plus-feedback input per step (`n_u` each).
    pub input: Vec<BoxSet>,
    /// Admissible output per step (`n_y` each).
    pub output: Vec<BoxSet>,
    /// Uncertain vector per step: measurable disturbance (`n_w`) followed by
    /// `n_excite` excitation components that add to the applied input.
    /// The box center is the nominal value.
    pub uncertainty: Vec<BoxSet>,
    /// 0, or `n_u` when excitation is part of the uncertainty.
    pub n_excite: usize,
}

impl HorizonSets {
    pub fn n_h(&self) -> usize {
        self.input.len()
    }

    fn validate(&self, n_h: usize, n_u: usize, n_w: usize, n_y: usize) -> Result<()> {
        if self.input.len() != n_h {
            return Err(Error::dim("input sets per step", n_h, self.input.len()));
        }
        if self.output.len() != n_h {
            return Err(Error::dim("output sets per step", n_h, self.output.len()));
        }
        if self.uncertainty.len() != n_h {
            return Err(Error::dim("uncertainty sets per step", n_h, self.uncertainty.len()));
        }
        if self.n_excite != 0 && self.n_excite != n_u {
            return Err(Error::dim("excitation components", n_u, self.n_excite));
        }
        for b in &self.input {
            if b.dim() != n_u {
                return Err(Error::dim("input box", n_u, b.dim()));
            }
        }
        for b in &self.output {
            if b.dim() != n_y {
                return Err(Error::dim("output box", n_y, b.dim()));
            }
        }
        for b in &self.uncertainty {
            if b.dim() != n_w + self.n_excite {
                return Err(Error::dim("uncertainty box", n_w + self.n_excite, b.dim()));
            }
            if !b.is_bounded() {
                return Err(Error::Parameter("uncertainty boxes must be bounded".into()));
            }
        }
        Ok(())
    }

    /// Nominal uncertain vector over the horizon (box centers).
    pub fn nominal(&self) -> DVector<f64> {
        BoxSet::stack(&self.uncertainty).center()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveSpec {
    /// `Σ output_weight‖ȳ_k − ref_k‖² + input_weight‖ū_k‖²` at the nominal
    /// disturbance.
    Tracking {
        output_weight: f64,
        input_weight: f64,
        reference: Vec<DVector<f64>>,
    },
    /// `weight · Σ|ū|`.
    Energy { weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustOptions {
    /// Optimize the causal disturbance feedback `K`; when false `K = 0`.
    pub feedback: bool,
    /// When set, output rows get a nonnegative slack charged at this price
    /// per unit instead of being hard constraints.
    pub soft_output_penalty: Option<f64>,
    pub qp: QpSettings,
}

impl Default for RobustOptions {
    fn default() -> Self {
        Self {
            feedback: true,
            soft_output_penalty: None,
            qp: QpSettings::default(),
        }
    }
}

/// Where each block of decisions lives in the QP variable vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionLayout {
    pub n_h: usize,
    pub n_u: usize,
    /// Width of one uncertainty step (`n_w + n_excite`).
    pub n_unc_step: usize,
    /// `K` entries in the order of their variables, starting at `n_h·n_u`.
    pub free: Vec<(usize, usize)>,
    pub slacks: Vec<usize>,
}

impl DecisionLayout {
    pub fn n_base(&self) -> usize {
        self.n_h * self.n_u + self.free.len()
    }

    pub fn u_nominal(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&x[..self.n_h * self.n_u])
    }

    pub fn k_gain(&self, x: &[f64]) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.n_h * self.n_u, self.n_h * self.n_unc_step);
        let off = self.n_h * self.n_u;
        for (idx, &(i, j)) in self.free.iter().enumerate() {
            k[(i, j)] = x[off + idx];
        }
        k
    }

    /// Decision vector `[ū; free K entries]` from explicit values.
    pub fn pack(&self, u_nominal: &DVector<f64>, k_gain: &DMatrix<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.n_base());
        z.rows_mut(0, u_nominal.len()).copy_from(u_nominal);
        let off = self.n_h * self.n_u;
        for (idx, &(i, j)) in self.free.iter().enumerate() {
            z[off + idx] = k_gain[(i, j)];
        }
        z
    }
}

/// Assembled QP together with the expressions it was built from.
#[derive(Debug, Clone)]
pub struct AssembledProblem {
    pub qp: QpProblem,
    pub layout: DecisionLayout,
    /// Planned input `u = ū + K(w̃ − w̄)` (without the excitation term).
    pub input_expr: AffineExpr,
    /// Predicted output as a function of `[ū; K]` and `w̃`.
    pub output_expr: AffineExpr,
    pub sets: HorizonSets,
    /// Nominal output map: `ȳ = y_nominal_offset + du·ū`.
    pub y_nominal_offset: DVector<f64>,
    pub du: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSolution {
    pub u_nominal: DVector<f64>,
    pub k_gain: DMatrix<f64>,
    pub objective_value: f64,
    pub y_nominal: DVector<f64>,
    /// Sum of output slacks (zero unless soft outputs were requested).
    pub output_slack: f64,
    pub residual: f64,
}

impl ControlSolution {
    /// First applied input `ū₁`.
    pub fn first_input(&self, n_u: usize) -> DVector<f64> {
        self.u_nominal.rows(0, n_u).into_owned()
    }
}

/// Builds the robust QP for a predictor given as an affine output map.
pub fn assemble(
    map: &OutputMap,
    sets: &HorizonSets,
    objective: &ObjectiveSpec,
    opts: &RobustOptions,
) -> Result<AssembledProblem> {
    let (n_h, n_u, n_w, n_y) = (map.n_h, map.n_u, map.n_w, map.n_y);
    sets.validate(n_h, n_u, n_w, n_y)?;
    let n_e = sets.n_excite;
    let n_s = n_w + n_e;
    let n_ubar = n_h * n_u;
    let n_unc = n_h * n_s;
    let free = if opts.feedback {
        free_entries(n_h, n_u, n_s)
    } else {
        Vec::new()
    };
    let n_base = n_ubar + free.len();
    let c = sets.nominal();

    // Input expression: ū + K(w̃ − c).
    let mut input_expr = AffineExpr::zeros(n_ubar, n_base, n_unc);
    for i in 0..n_ubar {
        input_expr.coeff_dec[(i, i)] = 1.0;
    }
    for (idx, &(i, j)) in free.iter().enumerate() {
        let d = n_ubar + idx;
        input_expr.coeff_dec[(i, d)] -= c[j];
        input_expr.bilinear.push(BilinearTerm {
            row: i,
            dec: d,
            unc: j,
            weight: 1.0,
        });
    }

    // Lower-level inputs: u_pred = ū + K(w̃ − c) + excitation, w_pred = w part.
    // y = offset + du·u_pred + dw·w_pred.
    let n_out = n_h * n_y;
    let mut g = DMatrix::zeros(n_out, n_unc);
    for step in 0..n_h {
        for a in 0..n_w {
            let col = step * n_s + a;
            g.column_mut(col).copy_from(&map.dw.column(step * n_w + a));
        }
        for a in 0..n_e {
            let col = step * n_s + n_w + a;
            g.column_mut(col).copy_from(&map.du.column(step * n_u + a));
        }
    }
    let mut output_expr = AffineExpr::zeros(n_out, n_base, n_unc);
    output_expr.constant.copy_from(&map.offset);
    output_expr.coeff_dec.columns_mut(0, n_ubar).copy_from(&map.du);
    output_expr.coeff_unc.copy_from(&g);
    for (idx, &(i, j)) in free.iter().enumerate() {
        let d = n_ubar + idx;
        for row in 0..n_out {
            let w = map.du[(row, i)];
            if w != 0.0 {
                output_expr.coeff_dec[(row, d)] -= w * c[j];
                output_expr.bilinear.push(BilinearTerm {
                    row,
                    dec: d,
                    unc: j,
                    weight: w,
                });
            }
        }
    }

    let mut b = QpBuilder::new();
    b.add_vars(n_base);
    let unc_box = BoxSet::stack(&sets.uncertainty);

    let in_groups = input_expr.grouped();
    for step in 0..n_h {
        for a in 0..n_u {
            let row = step * n_u + a;
            let set = &sets.input[step];
            robustify_grouped(
                &mut b,
                &input_expr,
                &in_groups[row],
                row,
                &unc_box,
                set.lower()[a],
                set.upper()[a],
                &format!("input step {step} channel {a}"),
                None,
            )?;
        }
    }

    let out_groups = output_expr.grouped();
    let mut slacks = Vec::new();
    for step in 0..n_h {
        for a in 0..n_y {
            let row = step * n_y + a;
            let set = &sets.output[step];
            let (lo, hi) = (set.lower()[a], set.upper()[a]);
            let slack = match opts.soft_output_penalty {
                Some(price) if lo.is_finite() || hi.is_finite() => {
                    let s = b.add_var();
                    b.add_linear(s, price);
                    b.add_le(vec![(s, -1.0)], 0.0, format!("output slack {step}/{a} >= 0"));
                    slacks.push(s);
                    Some(s)
                }
                _ => None,
            };
            robustify_grouped(
                &mut b,
                &output_expr,
                &out_groups[row],
                row,
                &unc_box,
                lo,
                hi,
                &format!("output step {step} channel {a}"),
                slack,
            )?;
        }
    }

    // Nominal prediction: ȳ = offset + g·c + du·ū.
    let y0 = &map.offset + &g * &c;
    match objective {
        ObjectiveSpec::Tracking {
            output_weight,
            input_weight,
            reference,
        } => {
            if reference.len() != n_h {
                return Err(Error::dim("reference steps", n_h, reference.len()));
            }
            if *output_weight < 0.0 || *input_weight < 0.0 {
                return Err(Error::Parameter("objective weights must be nonnegative".into()));
            }
            for r in reference {
                if r.len() != n_y {
                    return Err(Error::dim("reference", n_y, r.len()));
                }
            }
            let refv = crate::linalg::flatten(reference);
            let e0 = &y0 - &refv;
            let hess = map.du.transpose() * &map.du * (2.0 * output_weight)
                + DMatrix::identity(n_ubar, n_ubar) * (2.0 * input_weight);
            let lin = map.du.transpose() * &e0 * (2.0 * output_weight);
            for j in 0..n_ubar {
                for i in 0..=j {
                    b.add_quad(i, j, hess[(i, j)]);
                }
                b.add_linear(j, lin[j]);
            }
            b.add_constant(output_weight * e0.norm_squared());
        }
        ObjectiveSpec::Energy { weight } => {
            if *weight < 0.0 {
                return Err(Error::Parameter("energy weight must be nonnegative".into()));
            }
            let s0 = b.add_vars(n_ubar);
            for j in 0..n_ubar {
                b.add_linear(s0 + j, *weight);
                b.add_le(vec![(j, 1.0), (s0 + j, -1.0)], 0.0, format!("|u {j}| epigraph +"));
                b.add_le(vec![(j, -1.0), (s0 + j, -1.0)], 0.0, format!("|u {j}| epigraph -"));
            }
        }
    }

    Ok(AssembledProblem {
        qp: b.build(),
        layout: DecisionLayout {
            n_h,
            n_u,
            n_unc_step: n_s,
            free,
            slacks,
        },
        input_expr,
        output_expr,
        sets: sets.clone(),
        y_nominal_offset: y0,
        du: map.du.clone(),
    })
}

impl AssembledProblem {
    pub fn solve(&self, settings: &QpSettings) -> Result<ControlSolution> {
        let sol = solve_qp(&self.qp, settings)?;
        let u_nominal = self.layout.u_nominal(&sol.x);
        let y_nominal = &self.y_nominal_offset + &self.du * &u_nominal;
        Ok(ControlSolution {
            k_gain: self.layout.k_gain(&sol.x),
            objective_value: sol.objective,
            y_nominal,
            output_slack: self.layout.slacks.iter().map(|&s| sol.x[s].max(0.0)).sum(),
            residual: sol.residuals.max(),
            u_nominal,
        })
    }
}

pub fn solve_control(
    map: &OutputMap,
    sets: &HorizonSets,
    objective: &ObjectiveSpec,
    opts: &RobustOptions,
) -> Result<ControlSolution> {
    assemble(map, sets, objective, opts)?.solve(&opts.qp)
}

/// Measured history feeding the lower level.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub y_init: DVector<f64>,
    pub u_init: DVector<f64>,
    pub w_init: DVector<f64>,
}

/// Assembles the single-level robust problem for the data-driven predictor.
pub fn assemble_problem(
    factor: &KktFactor,
    history: &History,
    sets: &HorizonSets,
    objective: &ObjectiveSpec,
    opts: &RobustOptions,
) -> Result<AssembledProblem> {
    let map = factor.output_map(&history.y_init, &history.u_init, &history.w_init)?;
    assemble(&map, sets, objective, opts)
}
