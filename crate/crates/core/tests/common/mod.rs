#![allow(dead_code)]

use std::f64::consts::PI;

use kpidyn_core::{modal_basis, BoundaryConditions, GainModel, KpiVector, LossModel, ModalBasis, QuadraticWell};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;
pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn kv(v: &[f64]) -> KpiVector {
    KpiVector::new(v.to_vec()).unwrap()
}

pub fn random_vec(rng: &mut Rng64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn random_orthogonal(rng: &mut Rng64, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    a.qr().q()
}

/// `Q·diag(λ)·Qᵀ` with eigenvalues drawn from `[lo, hi)`, symmetrized exactly.
pub fn random_spd(rng: &mut Rng64, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let q = random_orthogonal(rng, n);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(random_vec(rng, n, lo, hi)));
    let a = &q * d * q.transpose();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

pub fn random_symmetric(rng: &mut Rng64, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    DMatrix::from_fn(n, n, |i, j| a[(i, j)] + a[(j, i)])
}

pub fn one_d(omega: f64) -> (LossModel, GainModel, QuadraticWell) {
    let loss = LossModel::new(DMatrix::from_element(1, 1, 0.5)).unwrap();
    let well = QuadraticWell::new(0.0, KpiVector::zeros(1), DMatrix::from_element(1, 1, omega * omega)).unwrap();
    (loss, GainModel::QuadraticWell(well.clone()), well)
}

/// A random single-well problem whose span stays before the first conjugate point.
pub struct Instance {
    pub loss: LossModel,
    pub gain: GainModel,
    pub well: QuadraticWell,
    pub basis: ModalBasis,
    pub bc: BoundaryConditions,
}

pub fn random_instance(rng: &mut Rng64) -> Instance {
    let n = rng.gen_range(1..=3);
    let loss = LossModel::new(random_spd(rng, n, 0.5, 1.5)).unwrap();
    let well = QuadraticWell::new(
        rng.gen_range(-1.0..2.0),
        kv(&random_vec(rng, n, -0.5, 0.5)),
        random_spd(rng, n, 0.5, 4.0),
    )
    .unwrap();
    let basis = modal_basis(&loss, &well).unwrap();
    let w_max = basis.frequencies.iter().cloned().fold(0.0, f64::max);
    let span = (0.8 * PI / w_max).min(3.0);
    let t1 = rng.gen_range(-1.0..1.0);
    let bc = BoundaryConditions::new(
        kv(&random_vec(rng, n, -1.0, 1.0)),
        t1,
        kv(&random_vec(rng, n, -1.0, 1.0)),
        t1 + span,
    )
    .unwrap();
    Instance {
        loss,
        gain: GainModel::QuadraticWell(well.clone()),
        well,
        basis,
        bc,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
