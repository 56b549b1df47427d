//! ARX model identified by recursive least squares, and its prediction map.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hankel::Dataset;
use crate::predictor::OutputMap;
use crate::robust::History;

/// `y_k = Σ_{j=1..order} θ_y,j y_{k−j} + θ_u,j u_{k−j} + θ_w,j w_{k−j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArxModel {
    pub theta_y: Vec<DMatrix<f64>>,
    pub theta_u: Vec<DMatrix<f64>>,
    pub theta_w: Vec<DMatrix<f64>>,
}

impl ArxModel {
    pub fn zeros(order: usize, n_u: usize, n_w: usize, n_y: usize) -> Self {
        Self {
            theta_y: vec![DMatrix::zeros(n_y, n_y); order],
            theta_u: vec![DMatrix::zeros(n_y, n_u); order],
            theta_w: vec![DMatrix::zeros(n_y, n_w); order],
        }
    }

    pub fn order(&self) -> usize {
        self.theta_y.len()
    }

    pub fn n_y(&self) -> usize {
        self.theta_y[0].nrows()
    }

    pub fn n_u(&self) -> usize {
        self.theta_u[0].ncols()
    }

    pub fn n_w(&self) -> usize {
        self.theta_w[0].ncols()
    }

    pub fn regressor_len(&self) -> usize {
        self.order() * (self.n_y() + self.n_u() + self.n_w())
    }

    /// Parameters as a `regressor_len × n_y` matrix, so `y = Θᵀ φ`.
    pub fn to_theta(&self) -> DMatrix<f64> {
        let (t, n_y, n_u, n_w) = (self.order(), self.n_y(), self.n_u(), self.n_w());
        let mut th = DMatrix::zeros(self.regressor_len(), n_y);
        for j in 0..t {
            th.view_mut((j * n_y, 0), (n_y, n_y))
                .copy_from(&self.theta_y[j].transpose());
            th.view_mut((t * n_y + j * n_u, 0), (n_u, n_y))
                .copy_from(&self.theta_u[j].transpose());
            th.view_mut((t * (n_y + n_u) + j * n_w, 0), (n_w, n_y))
                .copy_from(&self.theta_w[j].transpose());
        }
        th
    }

    pub fn from_theta(th: &DMatrix<f64>, order: usize, n_u: usize, n_w: usize, n_y: usize) -> Result<Self> {
        let p = order * (n_y + n_u + n_w);
        if th.nrows() != p || th.ncols() != n_y {
            return Err(Error::dim("ARX parameter rows", p, th.nrows()));
        }
        let t = order;
        Ok(Self {
            theta_y: (0..t).map(|j| th.view((j * n_y, 0), (n_y, n_y)).transpose()).collect(),
            theta_u: (0..t)
                .map(|j| th.view((t * n_y + j * n_u, 0), (n_u, n_y)).transpose())
                .collect(),
            theta_w: (0..t)
                .map(|j| th.view((t * (n_y + n_u) + j * n_w, 0), (n_w, n_y)).transpose())
                .collect(),
        })
    }

    /// Output predicted over `n_h` steps, affine in the future inputs and
    /// disturbances. The history uses the same layout as the data-driven
    /// predictor: `y_init` ends with the latest measurement, `u_init` and
    /// `w_init` end with the values applied just before it.
    pub fn output_map(&self, history: &History, n_h: usize) -> Result<OutputMap> {
        let (t, n_y, n_u, n_w) = (self.order(), self.n_y(), self.n_u(), self.n_w());
        if history.y_init.len() != t * n_y {
            return Err(Error::dim("ARX y history", t * n_y, history.y_init.len()));
        }
        if history.u_init.len() != t * n_u {
            return Err(Error::dim("ARX u history", t * n_u, history.u_init.len()));
        }
        if history.w_init.len() != t * n_w {
            return Err(Error::dim("ARX w history", t * n_w, history.w_init.len()));
        }
        let nu_f = n_h * n_u;
        let nw_f = n_h * n_w;
        // Affine signals: (constant, d/du_pred, d/dw_pred).
        type Aff = (DVector<f64>, DMatrix<f64>, DMatrix<f64>);
        let known = |v: DVector<f64>| -> Aff { (v, DMatrix::zeros(n_y, nu_f), DMatrix::zeros(n_y, nw_f)) };
        let mut ys: Vec<Aff> = (0..t)
            .map(|k| known(history.y_init.rows(k * n_y, n_y).into_owned()))
            .collect();
        let past_u: Vec<DVector<f64>> = (0..t).map(|k| history.u_init.rows(k * n_u, n_u).into_owned()).collect();
        let past_w: Vec<DVector<f64>> = (0..t).map(|k| history.w_init.rows(k * n_w, n_w).into_owned()).collect();

        let mut offset = DVector::zeros(n_h * n_y);
        let mut du = DMatrix::zeros(n_h * n_y, nu_f);
        let mut dw = DMatrix::zeros(n_h * n_y, nw_f);
        for step in 0..n_h {
            let mut c = DVector::zeros(n_y);
            let mut gu = DMatrix::zeros(n_y, nu_f);
            let mut gw = DMatrix::zeros(n_y, nw_f);
            for j in 1..=t {
                let (yc, yu, yw) = &ys[ys.len() - j];
                c += &self.theta_y[j - 1] * yc;
                gu += &self.theta_y[j - 1] * yu;
                gw += &self.theta_y[j - 1] * yw;
                // Input / disturbance applied at future step `step + 1 − j`.
                let idx = step as isize + 1 - j as isize;
                if idx >= 0 {
                    let k = idx as usize;
                    {
                        let mut v = gu.columns_mut(k * n_u, n_u);
                        v += &self.theta_u[j - 1];
                    }
                    if n_w > 0 {
                        {
                            let mut v = gw.columns_mut(k * n_w, n_w);
                            v += &self.theta_w[j - 1];
                        }
                    }
                } else {
                    let back = (-idx) as usize; // 1 = most recent past value
                    c += &self.theta_u[j - 1] * &past_u[t - back];
                    if n_w > 0 {
                        c += &self.theta_w[j - 1] * &past_w[t - back];
                    }
                }
            }
            offset.rows_mut(step * n_y, n_y).copy_from(&c);
            du.view_mut((step * n_y, 0), (n_y, nu_f)).copy_from(&gu);
            dw.view_mut((step * n_y, 0), (n_y, nw_f)).copy_from(&gw);
            ys.push((c, gu, gw));
        }
        Ok(OutputMap {
            offset,
            du,
            dw,
            n_u,
            n_w,
            n_y,
            n_h,
        })
    }

    /// Step-by-step numeric recursion, used to cross-check [`ArxModel::output_map`].
    pub fn simulate(&self, history: &History, u_pred: &DVector<f64>, w_pred: &DVector<f64>) -> DVector<f64> {
        let (t, n_y, n_u, n_w) = (self.order(), self.n_y(), self.n_u(), self.n_w());
        let n_h = u_pred.len() / n_u;
        let mut y: Vec<DVector<f64>> = (0..t).map(|k| history.y_init.rows(k * n_y, n_y).into_owned()).collect();
        let mut u: Vec<DVector<f64>> = (0..t).map(|k| history.u_init.rows(k * n_u, n_u).into_owned()).collect();
        let mut w: Vec<DVector<f64>> = (0..t).map(|k| history.w_init.rows(k * n_w, n_w).into_owned()).collect();
        let mut out = DVector::zeros(n_h * n_y);
        for step in 0..n_h {
            u.push(u_pred.rows(step * n_u, n_u).into_owned());
            w.push(w_pred.rows(step * n_w, n_w).into_owned());
            let mut next = DVector::zeros(n_y);
            for j in 1..=t {
                next += &self.theta_y[j - 1] * &y[y.len() - j];
                next += &self.theta_u[j - 1] * &u[u.len() - j];
                next += &self.theta_w[j - 1] * &w[w.len() - j];
            }
            out.rows_mut(step * n_y, n_y).copy_from(&next);
            y.push(next);
        }
        out
    }
}

/// Regressor `[y_{k−1}..y_{k−t}; u_{k−1}..u_{k−t}; w_{k−1}..w_{k−t}]` for the
/// output stored in dataset sample `idx` (which is the output following
/// input `idx`). Requires `idx ≥ order`.
pub fn regressor(ds: &Dataset, idx: usize, order: usize) -> Result<DVector<f64>> {
    if idx < order || idx >= ds.len() {
        return Err(Error::InsufficientData(format!(
            "regressor for sample {idx} needs {order} prior samples"
        )));
    }
    let (n_y, n_u, n_w) = (ds.n_y(), ds.n_u(), ds.n_w());
    let mut phi = DVector::zeros(order * (n_y + n_u + n_w));
    for j in 1..=order {
        let s_now = ds.sample(idx + 1 - j).expect("index checked");
        // y_{k−j} is the output stored with sample idx − j.
        let s_prev = ds.sample(idx - j).expect("index checked");
        phi.rows_mut((j - 1) * n_y, n_y).copy_from(&s_prev.y);
        phi.rows_mut(order * n_y + (j - 1) * n_u, n_u).copy_from(&s_now.u);
        phi.rows_mut(order * (n_y + n_u) + (j - 1) * n_w, n_w)
            .copy_from(&s_now.w);
    }
    Ok(phi)
}

/// Regression matrices `(Φ, Y)` over every sample with a complete regressor.
pub fn regression_data(ds: &Dataset, order: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let first = order;
    if ds.len() <= first {
        return Err(Error::InsufficientData(format!(
            "ARX order {order} needs more than {first} samples, dataset holds {}",
            ds.len()
        )));
    }
    let rows = ds.len() - first;
    let p = order * (ds.n_y() + ds.n_u() + ds.n_w());
    let mut phi = DMatrix::zeros(rows, p);
    let mut y = DMatrix::zeros(rows, ds.n_y());
    for (r, idx) in (first..ds.len()).enumerate() {
        phi.row_mut(r).copy_from(&regressor(ds, idx, order)?.transpose());
        y.row_mut(r).copy_from(&ds.sample(idx).unwrap().y.transpose());
    }
    Ok((phi, y))
}

/// Least-squares `Θ` minimizing `‖ΦΘ − Y‖`, via SVD.
pub fn batch_least_squares(phi: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if phi.nrows() != y.nrows() {
        return Err(Error::dim("regression rows", phi.nrows(), y.nrows()));
    }
    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * (phi.nrows().max(phi.ncols()) as f64) * f64::EPSILON;
    svd.solve(y, eps).map_err(|e| Error::Parameter(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    /// `regressor_len × n_y`.
    pub theta: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub lambda: f64,
}

impl RlsState {
    pub fn new(theta: DMatrix<f64>, p: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::Parameter(format!(
                "forgetting factor must be in (0, 1], got {lambda}"
            )));
        }
        if !p.is_square() || p.nrows() != theta.nrows() {
            return Err(Error::dim("RLS covariance", theta.nrows(), p.nrows()));
        }
        Ok(Self { theta, p, lambda })
    }

    /// Batch least-squares parameters on `(Φ, Y)` with `P₀ = p0_scale · I`.
    pub fn from_batch(phi: &DMatrix<f64>, y: &DMatrix<f64>, p0_scale: f64, lambda: f64) -> Result<Self> {
        let theta = batch_least_squares(phi, y)?;
        let n = theta.nrows();
        Self::new(theta, DMatrix::identity(n, n) * p0_scale, lambda)
    }

    /// Exact recursive initialization: `P = (ΦᵀΦ)⁻¹`, so later updates with
    /// `λ = 1` reproduce batch least squares on all data seen.
    pub fn from_batch_exact(phi: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        let theta = batch_least_squares(phi, y)?;
        let gram = phi.transpose() * phi;
        let p = crate::linalg::spd_inverse(&crate::linalg::symmetrize(&gram))
            .ok_or_else(|| Error::RankDeficient("regressor Gram matrix is singular".into()))?;
        Self::new(theta, p, lambda)
    }

    pub fn model(&self, order: usize, n_u: usize, n_w: usize, n_y: usize) -> Result<ArxModel> {
        ArxModel::from_theta(&self.theta, order, n_u, n_w, n_y)
    }
}

/// Exponentially weighted RLS update.
pub fn rls_update(state: &RlsState, phi: &DVector<f64>, y: &DVector<f64>) -> Result<RlsState> {
    let p_len = state.theta.nrows();
    if phi.len() != p_len {
        return Err(Error::dim("RLS regressor", p_len, phi.len()));
    }
    if y.len() != state.theta.ncols() {
        return Err(Error::dim("RLS measurement", state.theta.ncols(), y.len()));
    }
    let p_phi = &state.p * phi;
    let denom = state.lambda + phi.dot(&p_phi);
    if !(denom > 0.0) {
        return Err(Error::RlsReset);
    }
    let k = &p_phi / denom;
    let innovation = y.transpose() - phi.transpose() * &state.theta;
    let theta = &state.theta + &k * innovation;
    let p = (&state.p - &k * p_phi.transpose()) / state.lambda;
    let p = crate::linalg::symmetrize(&p);
    if p.clone().cholesky().is_none() {
        return Err(Error::RlsReset);
    }
    Ok(RlsState {
        theta,
        p,
        lambda: state.lambda,
    })
}
