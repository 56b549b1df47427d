//! Convex QP canonical form and backend.
//!
//! Problems are `min ½xᵀPx + qᵀx + c  s.t.  A x ≤ b,  E x = f`. The interior
//! point solver does the heavy lifting; its answer is then audited against
//! the KKT conditions and, when the residuals are above tolerance, polished by
//! an equality-constrained solve on the detected active set.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, SupportedConeT, ZeroConeT,
};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type SparseRow = Vec<(usize, f64)>;

/// Incremental builder; variables and rows are appended in call order.
#[derive(Debug, Clone, Default)]
pub struct QpBuilder {
    n: usize,
    p: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    obj_const: f64,
    a: Vec<SparseRow>,
    b: Vec<f64>,
    a_labels: Vec<String>,
    e: Vec<SparseRow>,
    f: Vec<f64>,
    e_labels: Vec<String>,
}

impl QpBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn n_ineq(&self) -> usize {
        self.a.len()
    }

    /// Appends `k` variables and returns the index of the first.
    pub fn add_vars(&mut self, k: usize) -> usize {
        let first = self.n;
        self.n += k;
        self.q.resize(self.n, 0.0);
        first
    }

    pub fn add_var(&mut self) -> usize {
        self.add_vars(1)
    }

    /// Adds `v` to `P[i][j]` and, for `i != j`, to `P[j][i]`.
    pub fn add_quad(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        if v != 0.0 {
            self.p.push((i.min(j), i.max(j), v));
        }
    }

    pub fn add_linear(&mut self, i: usize, v: f64) {
        self.q[i] += v;
    }

    pub fn add_constant(&mut self, v: f64) {
        self.obj_const += v;
    }

    /// `row · x ≤ rhs`. Returns the row index.
    pub fn add_le(&mut self, row: SparseRow, rhs: f64, label: impl Into<String>) -> usize {
        debug_assert!(row.iter().all(|&(j, _)| j < self.n));
        self.a.push(row);
        self.b.push(rhs);
        self.a_labels.push(label.into());
        self.a.len() - 1
    }

    pub fn add_eq(&mut self, row: SparseRow, rhs: f64, label: impl Into<String>) -> usize {
        debug_assert!(row.iter().all(|&(j, _)| j < self.n));
        self.e.push(row);
        self.f.push(rhs);
        self.e_labels.push(label.into());
        self.e.len() - 1
    }

    pub fn ineq_row(&self, i: usize) -> (&SparseRow, f64) {
        (&self.a[i], self.b[i])
    }

    pub fn build(self) -> QpProblem {
        QpProblem {
            n: self.n,
            p: self.p,
            q: self.q,
            obj_const: self.obj_const,
            a: self.a,
            b: self.b,
            a_labels: self.a_labels,
            e: self.e,
            f: self.f,
            e_labels: self.e_labels,
        }
    }
}

/// Sparse QP in canonical form. `p` holds upper-triangular entries; repeated
/// entries are summed.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub n: usize,
    pub p: Vec<(usize, usize, f64)>,
    pub q: Vec<f64>,
    pub obj_const: f64,
    pub a: Vec<SparseRow>,
    pub b: Vec<f64>,
    pub a_labels: Vec<String>,
    pub e: Vec<SparseRow>,
    pub f: Vec<f64>,
    pub e_labels: Vec<String>,
}

fn rows_to_dense(rows: &[SparseRow], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), n);
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            m[(i, j)] += v;
        }
    }
    m
}

fn row_dot(row: &SparseRow, x: &[f64]) -> f64 {
    row.iter().map(|&(j, v)| v * x[j]).sum()
}

impl QpProblem {
    pub fn dense_p(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for &(i, j, v) in &self.p {
            m[(i, j)] += v;
            if i != j {
                m[(j, i)] += v;
            }
        }
        m
    }

    pub fn dense_a(&self) -> DMatrix<f64> {
        rows_to_dense(&self.a, self.n)
    }

    pub fn dense_e(&self) -> DMatrix<f64> {
        rows_to_dense(&self.e, self.n)
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut quad = 0.0;
        for &(i, j, v) in &self.p {
            quad += if i == j { 0.5 * v * x[i] * x[i] } else { v * x[i] * x[j] };
        }
        quad + self.q.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.obj_const
    }

    /// Largest violation over all inequality and equality rows.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let ineq = self
            .a
            .iter()
            .zip(&self.b)
            .map(|(r, b)| (row_dot(r, x) - b).max(0.0))
            .fold(0.0, f64::max);
        let eq = self
            .e
            .iter()
            .zip(&self.f)
            .map(|(r, f)| (row_dot(r, x) - f).abs())
            .fold(0.0, f64::max);
        ineq.max(eq)
    }

    fn p_times(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(i, j, v) in &self.p {
            out[i] += v * x[j];
            if i != j {
                out[j] += v * x[i];
            }
        }
        out
    }

    /// Scaled KKT residuals of a primal-dual point.
    pub fn kkt_residuals(&self, x: &[f64], z: &[f64], y: &[f64]) -> KktResiduals {
        let px = self.p_times(x);
        let mut grad = px.clone();
        let mut at_z = vec![0.0; self.n];
        for (k, row) in self.a.iter().enumerate() {
            for &(j, v) in row {
                at_z[j] += v * z[k];
            }
        }
        for (k, row) in self.e.iter().enumerate() {
            for &(j, v) in row {
                at_z[j] += v * y[k];
            }
        }
        for j in 0..self.n {
            grad[j] += self.q[j] + at_z[j];
        }
        let inf = |v: &[f64]| v.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        let dual_scale = 1.0 + inf(&px).max(inf(&self.q)).max(inf(&at_z));
        let ax: Vec<f64> = self.a.iter().map(|r| row_dot(r, x)).collect();
        let ex: Vec<f64> = self.e.iter().map(|r| row_dot(r, x)).collect();
        let primal_scale = 1.0 + inf(&ax).max(inf(&self.b)).max(inf(&ex)).max(inf(&self.f));
        let mut comp = 0.0_f64;
        let mut sign = 0.0_f64;
        for k in 0..self.a.len() {
            let slack = self.b[k] - ax[k];
            comp = comp.max((z[k] * slack).abs());
            sign = sign.max(-z[k]);
        }
        // Scaled like the solver's duality gap, which does not see the
        // objective constant.
        let obj = self.objective(x);
        let comp_scale = 1.0 + obj.abs().max((obj - self.obj_const).abs());
        KktResiduals {
            primal: self.max_violation(x) / primal_scale,
            dual: (inf(&grad) / dual_scale).max(sign),
            complementarity: comp / comp_scale,
        }
    }

    /// Writes the problem densely: a dimension header, then `P, q, A, b, E,
    /// f` row-major with 17 significant digits.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "n {} m_ineq {} m_eq {}", self.n, self.a.len(), self.e.len()).unwrap();
        writeln!(s, "obj_const {:.16e}", self.obj_const).unwrap();
        let mut mat = |name: &str, m: &DMatrix<f64>| {
            writeln!(s, "{name} {} {}", m.nrows(), m.ncols()).unwrap();
            for r in 0..m.nrows() {
                let line: Vec<String> = (0..m.ncols()).map(|c| format!("{:.16e}", m[(r, c)])).collect();
                writeln!(s, "{}", line.join(" ")).unwrap();
            }
        };
        mat("P", &self.dense_p());
        mat("q", &DMatrix::from_column_slice(1, self.n, &self.q));
        mat("A", &self.dense_a());
        mat("b", &DMatrix::from_column_slice(1, self.b.len(), &self.b));
        mat("E", &self.dense_e());
        mat("f", &DMatrix::from_column_slice(1, self.f.len(), &self.f));
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    /// Parses the format written by [`QpProblem::write_dump`]. Labels are
    /// not part of the format and come back as row numbers.
    pub fn read_dump<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("unexpected end of QP dump".into()))?
                .map_err(Error::from)
        };
        let header = next()?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("{s}: {e}")));
        if h.len() != 6 || h[0] != "n" || h[2] != "m_ineq" || h[4] != "m_eq" {
            return Err(Error::Parse(format!("bad QP dump header: {header}")));
        }
        let (n, m, p) = (num(h[1])?, num(h[3])?, num(h[5])?);
        let c_line = next()?;
        let obj_const = c_line
            .strip_prefix("obj_const ")
            .ok_or_else(|| Error::Parse("missing obj_const".into()))?
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Parse(e.to_string()))?;
        let mut read_mat = |name: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let head = next()?;
            if head != format!("{name} {rows} {cols}") {
                return Err(Error::Parse(format!("expected block {name} {rows} {cols}, got {head}")));
            }
            let mut m = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                let line = next()?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                    .collect::<Result<_>>()?;
                if vals.len() != cols {
                    return Err(Error::Parse(format!("{name} row {r}: {} values", vals.len())));
                }
                for (c, v) in vals.into_iter().enumerate() {
                    m[(r, c)] = v;
                }
            }
            Ok(m)
        };
        let pm = read_mat("P", n, n)?;
        let q = read_mat("q", 1, n)?;
        let a = read_mat("A", m, n)?;
        let b = read_mat("b", 1, m)?;
        let e = read_mat("E", p, n)?;
        let f = read_mat("f", 1, p)?;
        let sparse = |mat: &DMatrix<f64>| -> Vec<SparseRow> {
            (0..mat.nrows())
                .map(|r| {
                    (0..mat.ncols())
                        .filter(|&c| mat[(r, c)] != 0.0)
                        .map(|c| (c, mat[(r, c)]))
                        .collect()
                })
                .collect()
        };
        let mut ptrip = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                if pm[(i, j)] != 0.0 {
                    ptrip.push((i, j, pm[(i, j)]));
                }
            }
        }
        Ok(QpProblem {
            n,
            p: ptrip,
            q: q.iter().cloned().collect(),
            obj_const,
            a: sparse(&a),
            b: b.iter().cloned().collect(),
            a_labels: (0..m).map(|i| format!("row {i}")).collect(),
            e: sparse(&e),
            f: f.iter().cloned().collect(),
            e_labels: (0..p).map(|i| format!("eq {i}")).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Required bound on every scaled KKT residual.
    pub tol: f64,
    pub max_iter: u32,
    pub polish: bool,
    /// Largest `variables + active rows` for which polishing is attempted.
    pub polish_max_dim: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 200,
            polish: true,
            polish_max_dim: 1500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers of the inequality rows (nonnegative).
    pub z: Vec<f64>,
    /// Multipliers of the equality rows.
    pub y: Vec<f64>,
    pub objective: f64,
    pub residuals: KktResiduals,
    pub iterations: u32,
    pub polished: bool,
}

fn to_csc(rows: &[&[SparseRow]], m: usize, n: usize) -> CscMatrix<f64> {
    let (mut ii, mut jj, mut vv) = (Vec::new(), Vec::new(), Vec::new());
    let mut r = 0;
    for block in rows {
        for row in block.iter() {
            for &(j, v) in row {
                ii.push(r);
                jj.push(j);
                vv.push(v);
            }
            r += 1;
        }
    }
    debug_assert_eq!(r, m);
    CscMatrix::new_from_triplets(m, n, ii, jj, vv)
}

pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    let n = problem.n;
    let (m_eq, m_in) = (problem.e.len(), problem.a.len());
    let (pi, pj, pv): (Vec<usize>, Vec<usize>, Vec<f64>) = {
        let mut i = Vec::with_capacity(problem.p.len());
        let mut j = Vec::with_capacity(problem.p.len());
        let mut v = Vec::with_capacity(problem.p.len());
        for &(a, b, x) in &problem.p {
            i.push(a);
            j.push(b);
            v.push(x);
        }
        (i, j, v)
    };
    let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);
    let a = to_csc(&[&problem.e, &problem.a], m_eq + m_in, n);
    let mut rhs = problem.f.clone();
    rhs.extend_from_slice(&problem.b);
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if m_eq > 0 {
        cones.push(ZeroConeT(m_eq));
    }
    if m_in > 0 {
        cones.push(NonnegativeConeT(m_in));
    }
    let cfg = DefaultSettings::<f64> {
        verbose: false,
        max_iter: settings.max_iter,
        tol_gap_abs: 1e-10,
        tol_gap_rel: 1e-10,
        tol_feas: 1e-10,
        tol_ktratio: 1e-8,
        presolve_enable: false,
        max_threads: 1,
        ..DefaultSettings::default()
    };
    let mut solver =
        DefaultSolver::new(&p, &problem.q, &a, &rhs, &cones, cfg).map_err(|e| Error::Solver(format!("setup: {e}")))?;
    solver.solve();
    let sol = &solver.solution;
    match sol.status {
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            let (row, weight) = sol.z[m_eq..].iter().enumerate().fold((None, 0.0), |(bi, bw), (i, &w)| {
                if w.abs() > bw {
                    (Some(i), w.abs())
                } else {
                    (bi, bw)
                }
            });
            let detail = match row {
                Some(r) => format!(
                    "certificate weight {weight:.3e} largest on row {r} ({})",
                    problem.a_labels[r]
                ),
                None => "certificate supported on equality rows".into(),
            };
            return Err(Error::Infeasible { detail, row });
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            return Err(Error::Unbounded("objective unbounded below on the feasible set".into()));
        }
        _ => {}
    }
    let x = sol.x.clone();
    let y = sol.z[..m_eq].to_vec();
    let z: Vec<f64> = sol.z[m_eq..].to_vec();
    let s: Vec<f64> = sol.s[m_eq..].to_vec();
    let iterations = sol.iterations;
    let status = sol.status;
    let mut residuals = problem.kkt_residuals(&x, &z, &y);
    let mut best = QpSolution {
        objective: problem.objective(&x),
        x,
        z,
        y,
        residuals,
        iterations,
        polished: false,
    };
    if settings.polish && residuals.max() > settings.tol {
        if let Some(p) = polish(problem, &best, &s, settings) {
            if p.residuals.max() < residuals.max() {
                residuals = p.residuals;
                best = p;
            }
        }
    }
    if residuals.max() > settings.tol {
        return Err(Error::Solver(format!(
            "status {status:?}: KKT residuals primal {:.2e} dual {:.2e} complementarity {:.2e} above {:.1e} (max violation {:.2e})",
            residuals.primal,
            residuals.dual,
            residuals.complementarity,
            settings.tol,
            problem.max_violation(&best.x)
        )));
    }
    Ok(best)
}

/// Re-solves the equality-constrained QP on the active set guessed from the
/// interior-point iterate.
const POLISH_DELTA: f64 = 1e-9;
const POLISH_REFINE_STEPS: usize = 5;

fn polish(problem: &QpProblem, sol: &QpSolution, slack: &[f64], settings: &QpSettings) -> Option<QpSolution> {
    let n = problem.n;
    let active: Vec<usize> = (0..problem.a.len()).filter(|&k| sol.z[k] > slack[k]).collect();
    let m_eq = problem.e.len();
    let dim = n + m_eq + active.len();
    if dim > settings.polish_max_dim {
        return None;
    }
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&problem.dense_p());
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = -problem.q[j];
    }
    let mut put_row = |r: usize, row: &SparseRow, b: f64, kkt: &mut DMatrix<f64>| {
        for &(j, v) in row {
            kkt[(n + r, j)] += v;
            kkt[(j, n + r)] += v;
        }
        rhs[n + r] = b;
    };
    for (r, row) in problem.e.iter().enumerate() {
        put_row(r, row, problem.f[r], &mut kkt);
    }
    for (r, &k) in active.iter().enumerate() {
        put_row(m_eq + r, &problem.a[k], problem.b[k], &mut kkt);
    }
    // Quasi-definite regularization keeps the system solvable when P is
    // singular or active rows are redundant; refinement recovers accuracy.
    let mut reg = kkt.clone();
    for i in 0..dim {
        reg[(i, i)] += if i < n { POLISH_DELTA } else { -POLISH_DELTA };
    }
    let lu = reg.lu();
    let mut solved = lu.solve(&rhs)?;
    for _ in 0..POLISH_REFINE_STEPS {
        let r = &rhs - &kkt * &solved;
        solved += lu.solve(&r)?;
    }
    if solved.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x: Vec<f64> = solved.rows(0, n).iter().cloned().collect();
    let y: Vec<f64> = solved.rows(n, m_eq).iter().cloned().collect();
    let mut z = vec![0.0; problem.a.len()];
    for (r, &k) in active.iter().enumerate() {
        z[k] = solved[n + m_eq + r].max(0.0);
    }
    let residuals = problem.kkt_residuals(&x, &z, &y);
    Some(QpSolution {
        objective: problem.objective(&x),
        x,
        z,
        y,
        residuals,
        iterations: sol.iterations,
        polished: true,
    })
}
