#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rdpc::hankel::Dataset;
use rdpc::sim::PlantModel;

pub fn uniform_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(lo..=hi))
}

pub fn gaussian_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Simulates `len` steps from `x0` with uniform inputs and disturbances and
/// noise-free outputs. Returns the dataset and the final state.
pub fn simulate(
    plant: &PlantModel,
    x0: DVector<f64>,
    len: usize,
    u_range: (f64, f64),
    w_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (Dataset, DVector<f64>) {
    let mut ds = Dataset::new(plant.n_u(), plant.n_w(), plant.n_y(), len).unwrap();
    let mut x = x0;
    for i in 0..len {
        let u = uniform_vec(plant.n_u(), u_range.0, u_range.1, rng);
        let w = uniform_vec(plant.n_w(), w_range.0, w_range.1, rng);
        let (xn, _) = plant.step(i, &x, &u, &w).unwrap();
        x = xn;
        let y = &plant.c * &x;
        ds.push(u, w, y).unwrap();
    }
    (ds, x)
}

/// Dataset of i.i.d. Gaussian samples, with no underlying system.
pub fn random_dataset(n_u: usize, n_w: usize, n_y: usize, len: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let mut ds = Dataset::new(n_u, n_w, n_y, len).unwrap();
    for _ in 0..len {
        let g = |n: usize, rng: &mut ChaCha8Rng| gaussian_mat(n, 1, rng).column(0).into_owned();
        let (u, w, y) = (g(n_u, rng), g(n_w, rng), g(n_y, rng));
        ds.push(u, w, y).unwrap();
    }
    ds
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, b| a.max(b.abs()))
}
