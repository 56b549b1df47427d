//! Lower-level trajectory prediction.
//!
//! For a fixed right-hand side the lower level is the strongly convex
//! equality-constrained least-squares problem
//!
//! ```text
//! min_g  ½‖H_y,init g − y_init‖² + ½ gᵀ E_g g   s.t.  H g = [u_init; w_init; u_pred; w_pred]
//! ```
//!
//! whose KKT matrix `M = [M₁₁ Hᵀ; H 0]` with `M₁₁ = H_y,initᵀ H_y,init + E_g`
//! is inverted once per dataset. `M₁₁⁻¹` comes from the Woodbury identity, so
//! the only explicit inversions are of the `t_init·n_y` square matrix
//! `I + H_y,init E_g⁻¹ H_y,initᵀ` and of the Schur complement `H M₁₁⁻¹ Hᵀ`.
//! The solution `g` is linear in the right-hand side, which makes the
//! predicted outputs affine in the future inputs and disturbances.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hankel::HankelStack;
use crate::linalg;

/// Gaussian measurement-noise covariance `Σ_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    sigma_v: DMatrix<f64>,
}

impl NoiseModel {
    pub fn new(sigma_v: DMatrix<f64>) -> Result<Self> {
        if !sigma_v.is_square() {
            return Err(Error::Parameter("noise covariance must be square".into()));
        }
        let asym = linalg::max_abs(&(&sigma_v - sigma_v.transpose()));
        let scale = linalg::max_abs(&sigma_v).max(1.0);
        if asym > 1e-12 * scale {
            return Err(Error::Parameter("noise covariance must be symmetric".into()));
        }
        let eig = sigma_v.clone().symmetric_eigenvalues();
        if eig.iter().any(|&l| l < -1e-12 * scale) {
            return Err(Error::Parameter(
                "noise covariance must be positive semidefinite".into(),
            ));
        }
        Ok(Self { sigma_v })
    }

    /// `σ²·I` for `n_y` independent channels.
    pub fn isotropic(n_y: usize, std: f64) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::Parameter(format!("noise std must be >= 0, got {std}")));
        }
        Self::new(DMatrix::identity(n_y, n_y) * (std * std))
    }

    pub fn sigma_v(&self) -> &DMatrix<f64> {
        &self.sigma_v
    }

    pub fn n_y(&self) -> usize {
        self.sigma_v.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.sigma_v.trace()
    }
}

/// Diagonal of the lower-level penalty `E_g`, one weight per Hankel column
/// ordered oldest to newest.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerWeights {
    e_g: DVector<f64>,
}

impl RegularizerWeights {
    pub fn new(e_g: DVector<f64>) -> Result<Self> {
        if e_g.is_empty() {
            return Err(Error::Parameter("E_g needs at least one entry".into()));
        }
        if let Some((i, v)) = e_g.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Parameter(format!("E_g entry {i} must be positive, got {v}")));
        }
        Ok(Self { e_g })
    }

    pub fn constant(n_c: usize, value: f64) -> Result<Self> {
        Self::new(DVector::from_element(n_c, value))
    }

    /// `t_init^exponent · tr(Σ_v) · I`.
    pub fn from_noise(n_c: usize, t_init: usize, noise: &NoiseModel, exponent: u32) -> Result<Self> {
        let value = (t_init as f64).powi(exponent as i32) * noise.trace();
        Self::constant(n_c, value)
    }

    /// Weights interpolated linearly from `first` (oldest column) to `last`
    /// (newest column); `first >= last` favours recent data.
    pub fn linear(n_c: usize, first: f64, last: f64) -> Result<Self> {
        let e = if n_c == 1 {
            DVector::from_element(1, first)
        } else {
            DVector::from_fn(n_c, |i, _| first + (last - first) * i as f64 / (n_c - 1) as f64)
        };
        Self::new(e)
    }

    pub fn diagonal(&self) -> &DVector<f64> {
        &self.e_g
    }

    pub fn len(&self) -> usize {
        self.e_g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e_g.is_empty()
    }

    pub fn is_non_increasing(&self) -> bool {
        self.e_g.as_slice().windows(2).all(|w| w[1] <= w[0])
    }
}

/// Offsets of the right-hand-side blocks `[u_init; w_init; u_pred; w_pred]`
/// within the equality constraint of the lower level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RhsLayout {
    pub u_init: usize,
    pub w_init: usize,
    pub u_pred: usize,
    pub w_pred: usize,
    pub len: usize,
}

impl RhsLayout {
    fn new(t_init: usize, n_h: usize, n_u: usize, n_w: usize) -> Self {
        let u_init = 0;
        let w_init = u_init + t_init * n_u;
        let u_pred = w_init + t_init * n_w;
        let w_pred = u_pred + n_h * n_u;
        let len = w_pred + n_h * n_w;
        Self {
            u_init,
            w_init,
            u_pred,
            w_pred,
            len,
        }
    }
}

/// Pre-inverted lower-level KKT system for one dataset.
#[derive(Debug, Clone)]
pub struct KktFactor {
    pub t_init: usize,
    pub n_h: usize,
    pub n_c: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub n_y: usize,
    pub layout: RhsLayout,
    e_inv: DVector<f64>,
    /// `E_g⁻¹ H_y,initᵀ`.
    low_rank: DMatrix<f64>,
    /// `(I_m + H_y,init E_g⁻¹ H_y,initᵀ)⁻¹`.
    mmid_inv: DMatrix<f64>,
    /// `S = H M₁₁⁻¹ Hᵀ` and its inverse.
    schur: DMatrix<f64>,
    schur_inv: DMatrix<f64>,
    /// `H M₁₁⁻¹`; the gains `M_schᵀ = (S⁻¹ H M₁₁⁻¹)ᵀ` are applied through it
    /// rather than stored.
    h_m11inv: DMatrix<f64>,
    /// `M₁₁⁻¹ H_y,initᵀ` and `H M₁₁⁻¹ H_y,initᵀ`.
    m11inv_hyt: DMatrix<f64>,
    h_m11inv_hyt: DMatrix<f64>,
    /// `M_sch H_y,initᵀ`, used to recover the multiplier.
    kappa_init_gain: DMatrix<f64>,
    /// `H_y,pred` times the `y_init` and constraint-rhs gains of `g`.
    pred_init_gain: DMatrix<f64>,
    pred_rhs_gain: DMatrix<f64>,
    y_pred: DMatrix<f64>,
}

/// Pivot threshold on the Cholesky factor of the Schur complement, relative
/// to its largest diagonal entry.
const SCHUR_PIVOT_RTOL: f64 = 1e-13;

pub fn factorize_kkt(stack: &HankelStack, weights: &RegularizerWeights) -> Result<KktFactor> {
    let n_c = stack.n_c;
    if weights.len() != n_c {
        return Err(Error::dim("E_g length vs Hankel columns", n_c, weights.len()));
    }
    let hy = &stack.y_init;
    let h = stack.constraint_matrix();
    let m = hy.nrows();
    let n_r = h.nrows();
    if n_r > n_c {
        return Err(Error::RankDeficient(format!(
            "{n_r} constraint rows exceed {n_c} Hankel columns"
        )));
    }

    let e_inv = weights.diagonal().map(|v| 1.0 / v);
    let mut low_rank = hy.transpose();
    for (i, mut row) in low_rank.row_iter_mut().enumerate() {
        row *= e_inv[i];
    }
    let mmid = DMatrix::identity(m, m) + hy * &low_rank;
    let mmid_inv = linalg::spd_inverse(&linalg::symmetrize(&mmid))
        .ok_or_else(|| Error::Parameter("Woodbury middle matrix is not positive definite".into()))?;

    // H M₁₁⁻¹ = H E⁻¹ − (H E⁻¹ H_yᵀ) M_mid⁻¹ (E⁻¹ H_yᵀ)ᵀ
    let mut h_einv = h.clone();
    for (j, mut col) in h_einv.column_iter_mut().enumerate() {
        col *= e_inv[j];
    }
    let h_low = &h * &low_rank;
    let h_m11inv = &h_einv - (&h_low * &mmid_inv) * low_rank.transpose();

    let schur = linalg::symmetrize(&(&h_m11inv * h.transpose()));
    let chol = schur
        .clone()
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("Schur complement H M11^-1 H^T is not positive definite".into()))?;
    let diag_max = schur.diagonal().iter().cloned().fold(0.0_f64, f64::max);
    let l = chol.l();
    let pivot_min = l.diagonal().iter().map(|d| d * d).fold(f64::INFINITY, f64::min);
    if !(pivot_min > SCHUR_PIVOT_RTOL * diag_max) {
        return Err(Error::RankDeficient(format!(
            "Schur complement pivot ratio {:.3e} below {SCHUR_PIVOT_RTOL:e}",
            pivot_min / diag_max
        )));
    }
    let schur_inv = linalg::symmetrize(&chol.inverse());

    // M₁₁⁻¹ H_yᵀ = E⁻¹H_yᵀ M_mid⁻¹
    let m11inv_hyt = &low_rank * &mmid_inv;
    let h_m11inv_hyt = &h * &m11inv_hyt;
    let kappa_init_gain = &schur_inv * &h_m11inv_hyt;
    let y_pred = stack.y_pred.clone();
    let pred_rhs_gain = (&y_pred * h_m11inv.transpose()) * &schur_inv;
    let pred_init_gain = &y_pred * &m11inv_hyt - &pred_rhs_gain * &h_m11inv_hyt;

    Ok(KktFactor {
        t_init: stack.t_init,
        n_h: stack.n_h,
        n_c,
        n_u: stack.n_u,
        n_w: stack.n_w,
        n_y: stack.n_y,
        layout: RhsLayout::new(stack.t_init, stack.n_h, stack.n_u, stack.n_w),
        e_inv,
        low_rank,
        mmid_inv,
        schur,
        schur_inv,
        h_m11inv,
        m11inv_hyt,
        h_m11inv_hyt,
        kappa_init_gain,
        pred_init_gain,
        pred_rhs_gain,
        y_pred,
    })
}

impl KktFactor {
    pub fn n_rows(&self) -> usize {
        self.layout.len
    }

    /// Materialized `M₁₁⁻¹` (`n_c × n_c`).
    pub fn m11_inv(&self) -> DMatrix<f64> {
        let mut out = -(&self.low_rank * &self.mmid_inv) * self.low_rank.transpose();
        for i in 0..self.n_c {
            out[(i, i)] += self.e_inv[i];
        }
        out
    }

    /// Materialized `M_top = [M₁₁⁻¹ − M₁₁⁻¹Hᵀ M_sch, M_schᵀ]`, the first
    /// `n_c` rows of `M⁻¹`.
    pub fn m_top(&self) -> DMatrix<f64> {
        let m_sch = self.m_sch();
        let first = self.m11_inv() - m_sch.transpose() * &self.schur * &m_sch;
        let mut out = DMatrix::zeros(self.n_c, self.n_c + self.layout.len);
        out.view_mut((0, 0), (self.n_c, self.n_c)).copy_from(&first);
        out.view_mut((0, self.n_c), (self.n_c, self.layout.len))
            .copy_from(&m_sch.transpose());
        out
    }

    /// Materialized `M_sch = S⁻¹ H M₁₁⁻¹` (`rows × n_c`).
    pub fn m_sch(&self) -> DMatrix<f64> {
        &self.schur_inv * &self.h_m11inv
    }

    pub fn schur_inv(&self) -> &DMatrix<f64> {
        &self.schur_inv
    }

    /// Materialized map from `y_init` to `g`: `M₁₁⁻¹H_yᵀ − M_schᵀ H M₁₁⁻¹H_yᵀ`.
    pub fn init_gain(&self) -> DMatrix<f64> {
        &self.m11inv_hyt - self.h_m11inv.transpose() * &self.kappa_init_gain
    }

    /// Materialized map from the constraint rhs to `g` (`M_schᵀ`).
    pub fn rhs_gain(&self) -> DMatrix<f64> {
        self.m_sch().transpose()
    }

    /// `g` for history `y_init` and rhs `b`, without forming the gains.
    fn apply(&self, y_init: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let nu = &self.schur_inv * (b - &self.h_m11inv_hyt * y_init);
        &self.m11inv_hyt * y_init + self.h_m11inv.tr_mul(&nu)
    }

    fn check_block(&self, name: &'static str, v: &DVector<f64>, expected: usize) -> Result<()> {
        if v.len() != expected {
            return Err(Error::dim(name, expected, v.len()));
        }
        Ok(())
    }

    fn rhs(
        &self,
        u_init: &DVector<f64>,
        w_init: &DVector<f64>,
        u_pred: &DVector<f64>,
        w_pred: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_block("u_init", u_init, self.t_init * self.n_u)?;
        self.check_block("w_init", w_init, self.t_init * self.n_w)?;
        self.check_block("u_pred", u_pred, self.n_h * self.n_u)?;
        self.check_block("w_pred", w_pred, self.n_h * self.n_w)?;
        Ok(linalg::vcat(&[u_init, w_init, u_pred, w_pred]))
    }

    /// Lower-level minimizer `g` for the given measured history and future
    /// input/disturbance sequences.
    pub fn solve_lower(
        &self,
        y_init: &DVector<f64>,
        u_init: &DVector<f64>,
        w_init: &DVector<f64>,
        u_pred: &DVector<f64>,
        w_pred: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_block("y_init", y_init, self.t_init * self.n_y)?;
        let b = self.rhs(u_init, w_init, u_pred, w_pred)?;
        Ok(self.apply(y_init, &b))
    }

    /// Multiplier of the equality constraint at the lower-level solution.
    pub fn kappa(
        &self,
        y_init: &DVector<f64>,
        u_init: &DVector<f64>,
        w_init: &DVector<f64>,
        u_pred: &DVector<f64>,
        w_pred: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_block("y_init", y_init, self.t_init * self.n_y)?;
        let b = self.rhs(u_init, w_init, u_pred, w_pred)?;
        Ok(&self.kappa_init_gain * y_init - &self.schur_inv * b)
    }

    /// `y_pred = H_y,pred g`.
    pub fn predict(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        if g.len() != self.n_c {
            return Err(Error::dim("g", self.n_c, g.len()));
        }
        Ok(&self.y_pred * g)
    }

    /// Splits `g` into the part fixed by the measured history and the parts
    /// linear in `u_pred` and `w_pred`.
    pub fn affine_predictor(
        &self,
        y_init: &DVector<f64>,
        u_init: &DVector<f64>,
        w_init: &DVector<f64>,
    ) -> Result<AffinePredictor> {
        self.check_block("y_init", y_init, self.t_init * self.n_y)?;
        self.check_block("u_init", u_init, self.t_init * self.n_u)?;
        self.check_block("w_init", w_init, self.t_init * self.n_w)?;
        let lay = self.layout;
        let mut b = DVector::zeros(lay.len);
        b.rows_mut(lay.u_init, u_init.len()).copy_from(u_init);
        b.rows_mut(lay.w_init, w_init.len()).copy_from(w_init);
        let g0 = self.apply(y_init, &b);
        let gain_cols = |start: usize, n: usize| self.h_m11inv.tr_mul(&self.schur_inv.columns(start, n));
        Ok(AffinePredictor {
            g0,
            g_u: gain_cols(lay.u_pred, self.n_h * self.n_u),
            g_w: gain_cols(lay.w_pred, self.n_h * self.n_w),
        })
    }

    /// Output prediction map `y_pred = offset + du·u_pred + dw·w_pred`.
    pub fn output_map(&self, y_init: &DVector<f64>, u_init: &DVector<f64>, w_init: &DVector<f64>) -> Result<OutputMap> {
        self.check_block("y_init", y_init, self.t_init * self.n_y)?;
        self.check_block("u_init", u_init, self.t_init * self.n_u)?;
        self.check_block("w_init", w_init, self.t_init * self.n_w)?;
        let lay = self.layout;
        let g = &self.pred_rhs_gain;
        let offset = &self.pred_init_gain * y_init
            + g.columns(lay.u_init, u_init.len()) * u_init
            + g.columns(lay.w_init, w_init.len()) * w_init;
        Ok(OutputMap {
            offset,
            du: g.columns(lay.u_pred, self.n_h * self.n_u).into_owned(),
            dw: g.columns(lay.w_pred, self.n_h * self.n_w).into_owned(),
            n_u: self.n_u,
            n_w: self.n_w,
            n_y: self.n_y,
            n_h: self.n_h,
        })
    }
}

/// `g = g0 + g_u·u_pred + g_w·w_pred`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePredictor {
    pub g0: DVector<f64>,
    pub g_u: DMatrix<f64>,
    pub g_w: DMatrix<f64>,
}

impl AffinePredictor {
    pub fn eval(&self, u_pred: &DVector<f64>, w_pred: &DVector<f64>) -> DVector<f64> {
        &self.g0 + &self.g_u * u_pred + &self.g_w * w_pred
    }
}

/// Predicted outputs affine in the future inputs and disturbances. Produced
/// by the data-driven predictor and by the ARX baseline alike.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMap {
    pub offset: DVector<f64>,
    pub du: DMatrix<f64>,
    pub dw: DMatrix<f64>,
    pub n_u: usize,
    pub n_w: usize,
    pub n_y: usize,
    pub n_h: usize,
}

impl OutputMap {
    pub fn eval(&self, u_pred: &DVector<f64>, w_pred: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.du * u_pred + &self.dw * w_pred
    }
}

/// `y_pred = H_y,pred g`.
pub fn predict(stack: &HankelStack, g: &DVector<f64>) -> Result<DVector<f64>> {
    if g.len() != stack.n_c {
        return Err(Error::dim("g", stack.n_c, g.len()));
    }
    Ok(&stack.y_pred * g)
}

/// Full KKT matrix `[H_yᵀH_y + E_g, Hᵀ; H, 0]`, formed densely. Used for
/// cross-checks; the controller never inverts it.
pub fn kkt_matrix(stack: &HankelStack, weights: &RegularizerWeights) -> DMatrix<f64> {
    let h = stack.constraint_matrix();
    let n_c = stack.n_c;
    let n_r = h.nrows();
    let mut m = DMatrix::zeros(n_c + n_r, n_c + n_r);
    let mut m11 = stack.y_init.transpose() * &stack.y_init;
    for i in 0..n_c {
        m11[(i, i)] += weights.diagonal()[i];
    }
    m.view_mut((0, 0), (n_c, n_c)).copy_from(&m11);
    m.view_mut((0, n_c), (n_c, n_r)).copy_from(&h.transpose());
    m.view_mut((n_c, 0), (n_r, n_c)).copy_from(&h);
    m
}

fn check_bound_dims(g: &DVector<f64>, y_init: &DVector<f64>, stack: &HankelStack, noise: &NoiseModel) -> Result<()> {
    if g.len() != stack.n_c {
        return Err(Error::dim("g", stack.n_c, g.len()));
    }
    if y_init.len() != stack.y_init.nrows() {
        return Err(Error::dim("y_init", stack.y_init.nrows(), y_init.len()));
    }
    if noise.n_y() != stack.n_y {
        return Err(Error::dim("noise covariance", stack.n_y, noise.n_y()));
    }
    Ok(())
}

/// `‖H_y,init g − y_init‖² + (√t_init‖g‖ − 1)² tr(Σ_v)`. Diagnostic only;
/// it is not convex in `g`.
pub fn wasserstein_bound_nonconvex(
    g: &DVector<f64>,
    y_init: &DVector<f64>,
    stack: &HankelStack,
    noise: &NoiseModel,
) -> Result<f64> {
    check_bound_dims(g, y_init, stack, noise)?;
    let resid = (&stack.y_init * g - y_init).norm_squared();
    let t = stack.t_init as f64;
    let s = t.sqrt() * g.norm() - 1.0;
    Ok(resid + s * s * noise.trace())
}

/// `‖H_y,init g − y_init‖² + t_init tr(Σ_v)(‖g‖² + 1)`.
pub fn wasserstein_bound_convex(
    g: &DVector<f64>,
    y_init: &DVector<f64>,
    stack: &HankelStack,
    noise: &NoiseModel,
) -> Result<f64> {
    check_bound_dims(g, y_init, stack, noise)?;
    let resid = (&stack.y_init * g - y_init).norm_squared();
    let t = stack.t_init as f64;
    Ok(resid + t * noise.trace() * (g.norm_squared() + 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hankel::{build_stack, Dataset};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(seed: u64, t: usize, t_init: usize, n_h: usize) -> HankelStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = Dataset::new(1, 1, 1, t).unwrap();
        for _ in 0..t {
            ds.push(
                DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0)),
                DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0)),
                DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0)),
            )
            .unwrap();
        }
        build_stack(&ds, t_init, n_h).unwrap()
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(NoiseModel::new(DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0])).is_err());
        let n = NoiseModel::isotropic(3, 0.1).unwrap();
        assert!((n.trace() - 0.03).abs() < 1e-15);
    }

    #[test]
    fn weight_constructors() {
        assert!(RegularizerWeights::constant(3, 0.0).is_err());
        let lin = RegularizerWeights::linear(5, 0.2, 0.02).unwrap();
        assert!((lin.diagonal()[0] - 0.2).abs() < 1e-15);
        assert!((lin.diagonal()[4] - 0.02).abs() < 1e-15);
        assert!(lin.is_non_increasing());
        let noise = NoiseModel::isotropic(1, 0.1).unwrap();
        let w = RegularizerWeights::from_noise(4, 3, &noise, 2).unwrap();
        assert!((w.diagonal()[0] - 9.0 * 0.01).abs() < 1e-15);
    }

    #[test]
    fn single_column_is_rank_deficient() {
        // With one column the constraint has at least two rows, so the
        // equality block can never have full row rank.
        let mut ds = Dataset::new(1, 0, 1, 2).unwrap();
        for (u, y) in [(2.0, 3.0), (1.0, -1.0)] {
            ds.push(
                DVector::from_element(1, u),
                DVector::zeros(0),
                DVector::from_element(1, y),
            )
            .unwrap();
        }
        let st = build_stack(&ds, 1, 1).unwrap();
        assert_eq!(st.n_c, 1);
        let w = RegularizerWeights::constant(1, 0.5).unwrap();
        assert!(matches!(factorize_kkt(&st, &w), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn square_constraint_fixes_g() {
        // Two columns, two constraint rows: g = H⁻¹ b whatever E_g is, and
        // the y_init gain vanishes.
        let mut ds = Dataset::new(1, 0, 1, 3).unwrap();
        for (u, y) in [(1.0, 0.5), (2.0, -1.0), (-1.0, 4.0)] {
            ds.push(
                DVector::from_element(1, u),
                DVector::zeros(0),
                DVector::from_element(1, y),
            )
            .unwrap();
        }
        let st = build_stack(&ds, 1, 1).unwrap();
        assert_eq!(st.n_c, 2);
        // H = [[1, 2], [2, -1]], det = -5.
        let b = DVector::from_vec(vec![3.0, 1.0]);
        let expected = DVector::from_vec(vec![(-3.0 - 2.0) / -5.0, (1.0 - 6.0) / -5.0]);
        for e in [1e-6, 1.0, 1e3] {
            let f = factorize_kkt(&st, &RegularizerWeights::constant(2, e).unwrap()).unwrap();
            let g = f
                .solve_lower(
                    &DVector::from_element(1, 7.0),
                    &b.rows(0, 1).into_owned(),
                    &DVector::zeros(0),
                    &b.rows(1, 1).into_owned(),
                    &DVector::zeros(0),
                )
                .unwrap();
            assert!((g - &expected).abs().max() < 1e-8);
            // Both terms of the gain cancel; at E = 1e-6 the residue is about
            // cond(M₁₁)·ε relative to their size.
            assert!(f.init_gain().amax() < 1e-9 * f.m11inv_hyt.amax().max(1.0));
        }
    }

    #[test]
    fn woodbury_inverse_is_exact() {
        for seed in 0..5 {
            let st = random_stack(seed, 40, 3, 4);
            let w = RegularizerWeights::linear(st.n_c, 0.3, 0.05).unwrap();
            let f = factorize_kkt(&st, &w).unwrap();
            let mut m11 = st.y_init.transpose() * &st.y_init;
            for i in 0..st.n_c {
                m11[(i, i)] += w.diagonal()[i];
            }
            let id = &m11 * f.m11_inv();
            assert!((id - DMatrix::identity(st.n_c, st.n_c)).abs().max() < 1e-9);
        }
    }

    #[test]
    fn bounds_at_zero() {
        let st = random_stack(9, 30, 3, 2);
        let noise = NoiseModel::isotropic(1, 0.2).unwrap();
        let g = DVector::zeros(st.n_c);
        let y = DVector::zeros(3);
        let nc = wasserstein_bound_nonconvex(&g, &y, &st, &noise).unwrap();
        let cv = wasserstein_bound_convex(&g, &y, &st, &noise).unwrap();
        assert!((nc - noise.trace()).abs() < 1e-15);
        assert!((cv - 3.0 * noise.trace()).abs() < 1e-15);
    }

    #[test]
    fn bound_vanishes_on_consistent_unit_g() {
        let st = random_stack(10, 30, 4, 2);
        let noise = NoiseModel::isotropic(1, 0.3).unwrap();
        let mut g = DVector::zeros(st.n_c);
        g[3] = 1.0 / (st.t_init as f64).sqrt();
        let y = &st.y_init * &g;
        let nc = wasserstein_bound_nonconvex(&g, &y, &st, &noise).unwrap();
        assert!(nc.abs() < 1e-14);
    }

    #[test]
    fn dimension_errors() {
        let st = random_stack(11, 30, 3, 2);
        let w = RegularizerWeights::constant(st.n_c, 0.1).unwrap();
        let f = factorize_kkt(&st, &w).unwrap();
        let z = |n| DVector::zeros(n);
        assert!(f.solve_lower(&z(2), &z(3), &z(3), &z(2), &z(2)).is_err());
        assert!(f.predict(&z(st.n_c + 1)).is_err());
        assert!(factorize_kkt(&st, &RegularizerWeights::constant(st.n_c + 1, 0.1).unwrap()).is_err());
    }
}
