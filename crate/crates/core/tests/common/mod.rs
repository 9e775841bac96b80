#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix3, SMatrix, SVector, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use uncpnp::bench::random_rotation;

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian<const D: usize, R: Rng>(rng: &mut R) -> SVector<f64, D> {
    SVector::from_fn(|_, _| normal(rng))
}

/// Random covariance with principal deviations `σ` and two draws from
/// `U(0, σ]`; returns `(Σ, A)` with `Σ = A Aᵀ`.
pub fn random_cov3<R: Rng>(rng: &mut R, sigma: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let d = Vector3::new(sigma, sigma * (1.0 - rng.random::<f64>()), sigma * (1.0 - rng.random::<f64>()));
    let a = random_rotation(rng) * Matrix3::from_diagonal(&d);
    (a * a.transpose(), a)
}

pub fn random_cov2<R: Rng>(rng: &mut R, sigma: f64) -> (Matrix2<f64>, Matrix2<f64>) {
    let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let rot = Matrix2::new(th.cos(), -th.sin(), th.sin(), th.cos());
    let a = rot * Matrix2::from_diagonal(&Vector2::new(sigma, sigma * (1.0 - rng.random::<f64>())));
    (a * a.transpose(), a)
}

/// Running sample covariance.
pub struct SampleCov<const D: usize> {
    n: usize,
    sum: SVector<f64, D>,
    outer: SMatrix<f64, D, D>,
}

impl<const D: usize> SampleCov<D> {
    pub fn new() -> Self {
        Self { n: 0, sum: SVector::zeros(), outer: SMatrix::zeros() }
    }

    pub fn push(&mut self, x: &SVector<f64, D>) {
        self.n += 1;
        self.sum += x;
        self.outer += x * x.transpose();
    }

    pub fn cov(&self) -> SMatrix<f64, D, D> {
        let n = self.n as f64;
        let mean = self.sum / n;
        (self.outer - mean * mean.transpose() * n) / (n - 1.0)
    }
}

pub fn rel_frobenius<const D: usize>(sample: &SMatrix<f64, D, D>, model: &SMatrix<f64, D, D>) -> f64 {
    (sample - model).norm() / model.norm()
}
