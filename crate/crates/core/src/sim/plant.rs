use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Additive drift `A_i = A + amplitude · sin(π i / half_period) · I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    pub amplitude: f64,
    pub half_period: f64,
}

/// `x_{i+1} = A_i x_i + B u_i + E w_i`, `ȳ_i = C x_i + D u_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub name: String,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub drift: Option<Drift>,
}

impl PlantModel {
    pub fn new(
        name: impl Into<String>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
        drift: Option<Drift>,
    ) -> Result<Self> {
        let n_x = a.nrows();
        if !a.is_square() {
            return Err(Error::dim("A columns", n_x, a.ncols()));
        }
        if b.nrows() != n_x {
            return Err(Error::dim("B rows", n_x, b.nrows()));
        }
        if e.nrows() != n_x {
            return Err(Error::dim("E rows", n_x, e.nrows()));
        }
        if c.ncols() != n_x {
            return Err(Error::dim("C columns", n_x, c.ncols()));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::dim("D shape", c.nrows() * b.ncols(), d.nrows() * d.ncols()));
        }
        Ok(Self {
            name: name.into(),
            a,
            b,
            c,
            d,
            e,
            drift,
        })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_w(&self) -> usize {
        self.e.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn a_at(&self, i: usize) -> DMatrix<f64> {
        match self.drift {
            None => self.a.clone(),
            Some(d) => {
                let s = d.amplitude * (std::f64::consts::PI * i as f64 / d.half_period).sin();
                &self.a + DMatrix::identity(self.n_x(), self.n_x()) * s
            }
        }
    }

    /// Largest spectral radius of `A + δI` over the drift range.
    pub fn max_spectral_radius(&self) -> f64 {
        let amp = self.drift.map_or(0.0, |d| d.amplitude.abs());
        let eig = self.a.complex_eigenvalues();
        [-amp, amp]
            .iter()
            .flat_map(|&shift| eig.iter().map(move |l| ((l.re + shift).powi(2) + l.im.powi(2)).sqrt()))
            .fold(0.0, f64::max)
    }

    /// Noise-free step: `(x_{i+1}, ȳ_i)`.
    pub fn step(
        &self,
        i: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if x.len() != self.n_x() {
            return Err(Error::dim("plant state", self.n_x(), x.len()));
        }
        if u.len() != self.n_u() {
            return Err(Error::dim("plant input", self.n_u(), u.len()));
        }
        if w.len() != self.n_w() {
            return Err(Error::dim("plant disturbance", self.n_w(), w.len()));
        }
        let x_next = self.a_at(i) * x + &self.b * u + &self.e * w;
        let y = &self.c * x + &self.d * u;
        Ok((x_next, y))
    }
}

/// One plant step with Gaussian measurement noise of standard deviation
/// `noise_std` per channel: `(x_{i+1}, y_measured, ȳ_i)`.
pub fn plant_step<R: Rng>(
    model: &PlantModel,
    i: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    noise_std: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let (x_next, y_true) = model.step(i, x, u, w)?;
    let y_meas = if noise_std == 0.0 {
        y_true.clone()
    } else {
        y_true.map(|v| v + noise_std * rng.sample::<f64, _>(StandardNormal))
    };
    Ok((x_next, y_meas, y_true))
}

pub const PRESETS: [&str; 3] = ["second_order_lti", "second_order_ltv", "rc_multizone"];

pub fn preset(name: &str) -> Result<PlantModel> {
    let model = match name {
        "second_order_lti" => second_order(None)?,
        "second_order_ltv" => second_order(Some(Drift {
            amplitude: 0.02,
            half_period: 336.0,
        }))?,
        "rc_multizone" => rc_multizone()?,
        other => {
            return Err(Error::Parameter(format!(
                "unknown plant preset '{other}', expected one of {PRESETS:?}"
            )))
        }
    };
    let rho = model.max_spectral_radius();
    if !(rho < 1.0) {
        return Err(Error::Parameter(format!("preset {name} has spectral radius {rho}")));
    }
    Ok(model)
}

fn second_order(drift: Option<Drift>) -> Result<PlantModel> {
    let a = DMatrix::from_row_slice(2, 2, &[0.9535, 0.0761, -0.8454, 0.5478]);
    let b = DMatrix::from_column_slice(2, 1, &[0.0465, 0.8454]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let name = if drift.is_some() {
        "second_order_ltv"
    } else {
        "second_order_lti"
    };
    PlantModel::new(name, a, b.clone(), c, DMatrix::zeros(1, 1), b, drift)
}

/// Thermal RC network constants. Zone `k` air node, one exterior wall per
/// zone, and five interior walls between adjacent zones.
pub mod rc {
    /// Sampling time in seconds (15 minutes).
    pub const DT: f64 = 900.0;
    /// Zone air plus furniture heat capacity, J/K.
    pub const ZONE_CAPACITY: [f64; 4] = [4.0e6, 3.0e6, 3.5e6, 3.0e6];
    pub const EXT_WALL_CAPACITY: f64 = 1.5e7;
    pub const INT_WALL_CAPACITY: f64 = 8.0e6;
    /// Conductance zone air to exterior wall node, W/K.
    pub const EXT_WALL_INNER: f64 = 200.0;
    /// Conductance exterior wall node to outdoor air, W/K.
    pub const EXT_WALL_OUTER: f64 = 150.0;
    /// Conductance zone air to interior wall node (each side), W/K.
    pub const INT_WALL_SIDE: f64 = 150.0;
    /// Infiltration conductance zone air to outdoor air, W/K.
    pub const INFILTRATION: f64 = 30.0;
    /// Effective solar aperture per zone, m² (W per W/m² of radiation).
    pub const SOLAR_APERTURE: [f64; 4] = [3.0, 2.0, 2.5, 2.0];
    /// Interior walls as zone pairs (0-based).
    pub const INTERIOR: [(usize, usize); 5] = [(2, 1), (2, 3), (1, 3), (1, 0), (3, 0)];
}

/// 4-zone building: states are 4 zone temperatures then 9 wall temperatures
/// (°C); inputs are heating power in kW for zone 1 and for zones 2–4
/// (split equally); disturbances are outdoor temperature (°C) and solar
/// radiation (W/m²); outputs are the zone temperatures.
fn rc_multizone() -> Result<PlantModel> {
    use rc::*;
    let n_z = 4;
    let n_wall = 4 + INTERIOR.len();
    let n_x = n_z + n_wall;
    let mut cap = vec![0.0; n_x];
    cap[..n_z].copy_from_slice(&ZONE_CAPACITY);
    for c in cap.iter_mut().skip(n_z).take(4) {
        *c = EXT_WALL_CAPACITY;
    }
    for c in cap.iter_mut().skip(n_z + 4) {
        *c = INT_WALL_CAPACITY;
    }

    // Conductance network: heat flow G (T_j − T_i) into node i.
    let mut g = DMatrix::<f64>::zeros(n_x, n_x);
    let mut to_outdoor = vec![0.0; n_x];
    let link = |g: &mut DMatrix<f64>, i: usize, j: usize, c: f64| {
        g[(i, j)] += c;
        g[(j, i)] += c;
        g[(i, i)] -= c;
        g[(j, j)] -= c;
    };
    for z in 0..n_z {
        let wall = n_z + z;
        link(&mut g, z, wall, EXT_WALL_INNER);
        to_outdoor[wall] += EXT_WALL_OUTER;
        to_outdoor[z] += INFILTRATION;
    }
    for (k, &(za, zb)) in INTERIOR.iter().enumerate() {
        let wall = n_z + 4 + k;
        link(&mut g, za, wall, INT_WALL_SIDE);
        link(&mut g, zb, wall, INT_WALL_SIDE);
    }
    let mut ac = DMatrix::zeros(n_x, n_x);
    let mut bc = DMatrix::zeros(n_x, 2);
    let mut ec = DMatrix::zeros(n_x, 2);
    for i in 0..n_x {
        for j in 0..n_x {
            ac[(i, j)] = g[(i, j)] / cap[i];
        }
        ac[(i, i)] -= to_outdoor[i] / cap[i];
        ec[(i, 0)] = to_outdoor[i] / cap[i];
    }
    bc[(0, 0)] = 1000.0 / cap[0];
    for z in 1..n_z {
        bc[(z, 1)] = 1000.0 / 3.0 / cap[z];
    }
    for z in 0..n_z {
        ec[(z, 1)] = SOLAR_APERTURE[z] / cap[z];
    }

    // Zero-order hold through the exponential of the augmented generator.
    let n_in = 4;
    let mut aug = DMatrix::zeros(n_x + n_in, n_x + n_in);
    aug.view_mut((0, 0), (n_x, n_x)).copy_from(&(&ac * DT));
    aug.view_mut((0, n_x), (n_x, 2)).copy_from(&(&bc * DT));
    aug.view_mut((0, n_x + 2), (n_x, 2)).copy_from(&(&ec * DT));
    let phi = aug.exp();
    let a = phi.view((0, 0), (n_x, n_x)).into_owned();
    let b = phi.view((0, n_x), (n_x, 2)).into_owned();
    let e = phi.view((0, n_x + 2), (n_x, 2)).into_owned();
    let mut c = DMatrix::zeros(n_z, n_x);
    for z in 0..n_z {
        c[(z, z)] = 1.0;
    }
    PlantModel::new("rc_multizone", a, b, c, DMatrix::zeros(n_z, 2), e, None)
}
