//! Realized disturbance trajectories and their forecast tubes.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robust::BoxSet;

/// Synthetic weather: outdoor temperature follows a diurnal sinusoid and
/// solar radiation a half-rectified sinusoid; realizations deviate from the
/// forecast by a clipped first-order autoregressive error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherSpec {
    pub steps_per_day: usize,
    pub temp_mean: f64,
    pub temp_amplitude: f64,
    /// Hour of the temperature maximum.
    pub temp_peak_hour: f64,
    pub solar_peak: f64,
    /// Forecast tube half-widths.
    pub temp_tube: f64,
    pub solar_tube: f64,
    /// AR(1) coefficient of the forecast error.
    pub error_correlation: f64,
}

impl Default for WeatherSpec {
    fn default() -> Self {
        Self {
            steps_per_day: 96,
            temp_mean: 8.0,
            temp_amplitude: 5.0,
            temp_peak_hour: 15.0,
            solar_peak: 400.0,
            temp_tube: 1.0,
            solar_tube: 50.0,
            error_correlation: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceSpec {
    /// Independent uniform draws over `[lower, upper]`; the forecast tube is
    /// the same box at every step.
    Uniform {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Weather(WeatherSpec),
}

impl DisturbanceSpec {
    pub fn n_w(&self) -> usize {
        match self {
            DisturbanceSpec::Uniform { lower, .. } => lower.len(),
            DisturbanceSpec::Weather(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceTrace {
    pub realized: Vec<DVector<f64>>,
    /// Forecast box per step; its center is the point forecast.
    pub forecast: Vec<BoxSet>,
}

impl DisturbanceTrace {
    pub fn len(&self) -> usize {
        self.realized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.realized.is_empty()
    }

    /// Whether each realization lies inside its forecast box.
    pub fn is_consistent(&self) -> bool {
        self.realized
            .iter()
            .zip(&self.forecast)
            .all(|(w, b)| b.contains_tol(w, 1e-12))
    }
}

pub fn generate(spec: &DisturbanceSpec, len: usize, rng: &mut ChaCha8Rng) -> Result<DisturbanceTrace> {
    match spec {
        DisturbanceSpec::Uniform { lower, upper } => {
            let bx = BoxSet::from_slices(lower, upper)?;
            if !bx.is_bounded() {
                return Err(Error::Parameter("uniform disturbance box must be bounded".into()));
            }
            let realized = (0..len)
                .map(|_| {
                    DVector::from_fn(bx.dim(), |i, _| {
                        let (lo, hi) = (bx.lower()[i], bx.upper()[i]);
                        if lo == hi {
                            lo
                        } else {
                            rng.random_range(lo..=hi)
                        }
                    })
                })
                .collect();
            Ok(DisturbanceTrace {
                realized,
                forecast: vec![bx; len],
            })
        }
        DisturbanceSpec::Weather(w) => weather(w, len, rng),
    }
}

fn weather(spec: &WeatherSpec, len: usize, rng: &mut ChaCha8Rng) -> Result<DisturbanceTrace> {
    if spec.steps_per_day == 0 {
        return Err(Error::Parameter("steps_per_day must be positive".into()));
    }
    if spec.temp_tube < 0.0 || spec.solar_tube < 0.0 {
        return Err(Error::Parameter("forecast tube half-widths must be >= 0".into()));
    }
    if !(spec.error_correlation.abs() < 1.0) {
        return Err(Error::Parameter("error_correlation must lie in (-1, 1)".into()));
    }
    let tau = std::f64::consts::TAU;
    let spd = spec.steps_per_day as f64;
    let innovation = (1.0 - spec.error_correlation.powi(2)).sqrt();
    let (mut et, mut es) = (0.0_f64, 0.0_f64);
    let mut realized = Vec::with_capacity(len);
    let mut forecast = Vec::with_capacity(len);
    for i in 0..len {
        let hour = 24.0 * (i as f64 % spd) / spd;
        let temp = spec.temp_mean + spec.temp_amplitude * (tau * (hour - spec.temp_peak_hour) / 24.0).cos();
        let solar = spec.solar_peak * (tau * (hour - 6.0) / 24.0).sin().max(0.0);
        // Errors are driven in units of the tube and clipped to stay inside.
        et = (spec.error_correlation * et + innovation * rng.random_range(-1.0..=1.0)).clamp(-1.0, 1.0);
        es = (spec.error_correlation * es + innovation * rng.random_range(-1.0..=1.0)).clamp(-1.0, 1.0);
        let center = DVector::from_vec(vec![temp, solar]);
        let half = DVector::from_vec(vec![spec.temp_tube, spec.solar_tube]);
        realized.push(DVector::from_vec(vec![
            temp + et * spec.temp_tube,
            solar + es * spec.solar_tube,
        ]));
        forecast.push(BoxSet::symmetric(center, half)?);
    }
    Ok(DisturbanceTrace { realized, forecast })
}
