//! Symmetric eigen-decomposition and the coordinate changes built on it.
//!
//! Two transformations are layered here. The loss matrix `K` is rotated to
//! its principal axes and rescaled so that the change-cost rate becomes
//! `½‖ẏ‖²` (whitening). The gain curvature, expressed in those whitened
//! coordinates, is then rotated once more to diagonal form `diag(ω²)`. The
//! composite map `y = Qᵀ·W·(x − center)` is what the rest of the crate calls
//! modal coordinates.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{check_dim, KpiError, Result};
use crate::model::{KpiVector, LossModel, QuadraticWell};

/// Largest matrix order accepted by [`symmetric_eigen`].
pub const MAX_ORDER: usize = 64;

const MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenDecomposition {
    /// Eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
    /// Orthogonal matrix whose columns are the matching eigenvectors.
    #[serde(serialize_with = "crate::io::serialize_matrix")]
    pub rotation: DMatrix<f64>,
}

impl EigenDecomposition {
    /// `R·diag(λ)·Rᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.eigenvalues));
        &self.rotation * lambda * self.rotation.transpose()
    }
}

pub(crate) fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Cyclic Jacobi diagonalization of a real symmetric matrix.
///
/// Sweeps every upper-triangular pair in fixed order, annihilating each
/// off-diagonal entry with a plane rotation, until the largest off-diagonal
/// magnitude drops below `1e-12·‖a‖_F`. Eigenvector columns are sign
/// normalized (largest-magnitude component positive) so the output is a pure
/// function of the input.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> Result<EigenDecomposition> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(KpiError::DimensionMismatch {
            expected: n,
            found: a.ncols(),
        });
    }
    if n == 0 || n > MAX_ORDER {
        return Err(KpiError::InvalidArgument(format!(
            "matrix order {n} outside 1..={MAX_ORDER}"
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(KpiError::InvalidArgument("matrix has non-finite entries".into()));
    }
    let frob = a.norm();
    let asym = max_asymmetry(a);
    if asym > SYMMETRY_TOL * frob.max(1.0) {
        return Err(KpiError::NotSymmetric { asymmetry: asym });
    }

    // Work on the exactly symmetrized copy.
    let mut m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = DMatrix::<f64>::identity(n, n);
    let threshold = 1e-12 * frob;

    let off_max = |m: &DMatrix<f64>| {
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max(m[(i, j)].abs());
            }
        }
        worst
    };

    let mut sweeps = 0;
    loop {
        let off = off_max(&m);
        if off <= threshold {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(KpiError::NoConvergence {
                what: "Jacobi eigenvalue iteration".into(),
                iterations: sweeps,
                residual: off,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;

                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in their original diagonal order.
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut rotation = DMatrix::<f64>::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for r in 0..n {
            if v[(r, src)].abs() > v[(pivot, src)].abs() {
                pivot = r;
            }
        }
        let sign = if v[(pivot, src)] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            rotation[(r, col)] = sign * v[(r, src)];
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        rotation,
    })
}

/// Decomposes `a` and fails unless every eigenvalue exceeds `1e-12·λ_max`.
pub(crate) fn spd_eigen(a: &DMatrix<f64>, what: &str) -> Result<EigenDecomposition> {
    let eig = symmetric_eigen(a)?;
    let max = eig.eigenvalues[0];
    let min = *eig.eigenvalues.last().expect("order >= 1");
    if max <= 0.0 || min <= 1e-12 * max {
        return Err(KpiError::NotPositiveDefinite {
            what: what.to_string(),
            min_eigenvalue: min,
        });
    }
    Ok(eig)
}

/// Eigenvalues ("eigenlosses") and principal axes of the loss matrix.
pub fn eigenlosses(loss: &LossModel) -> Result<EigenDecomposition> {
    spd_eigen(loss.matrix(), "loss matrix")
}

/// Whitened, curvature-diagonal coordinates around a quadratic well.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalBasis {
    /// `W = diag(√(2Kₙ))·R_Kᵀ`; maps raw KPI offsets to whitened coordinates.
    #[serde(serialize_with = "crate::io::serialize_matrix")]
    pub whitening: DMatrix<f64>,
    #[serde(serialize_with = "crate::io::serialize_matrix")]
    pub inverse_whitening: DMatrix<f64>,
    /// Eigenfrequencies, ascending.
    pub frequencies: Vec<f64>,
    /// Orthogonal `Q` with `Qᵀ·(W⁻ᵀ C W⁻¹)·Q = diag(ω²)`.
    #[serde(serialize_with = "crate::io::serialize_matrix")]
    pub modal_rotation: DMatrix<f64>,
    pub center: KpiVector,
    #[serde(skip)]
    forward: DMatrix<f64>,
    #[serde(skip)]
    backward: DMatrix<f64>,
}

impl ModalBasis {
    pub fn dim(&self) -> usize {
        self.frequencies.len()
    }

    /// Composite linear part `Qᵀ·W` of the raw → modal map.
    pub fn forward_map(&self) -> &DMatrix<f64> {
        &self.forward
    }

    /// Composite linear part `W⁻¹·Q` of the modal → raw map.
    pub fn backward_map(&self) -> &DMatrix<f64> {
        &self.backward
    }

    pub fn to_modal(&self, x: &[f64]) -> Result<KpiVector> {
        check_dim(self.dim(), x.len())?;
        let n = self.dim();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..n)
                .map(|k| self.forward[(i, k)] * (x[k] - self.center[k]))
                .sum();
        }
        Ok(KpiVector::from_vec_unchecked(out))
    }

    pub fn from_modal(&self, y: &[f64]) -> Result<KpiVector> {
        check_dim(self.dim(), y.len())?;
        let n = self.dim();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.center[i] + (0..n).map(|k| self.backward[(i, k)] * y[k]).sum::<f64>();
        }
        Ok(KpiVector::from_vec_unchecked(out))
    }

    /// Velocities transform linearly (no center shift).
    pub fn velocity_to_modal(&self, v: &[f64]) -> Result<KpiVector> {
        check_dim(self.dim(), v.len())?;
        let n = self.dim();
        let out = (0..n)
            .map(|i| (0..n).map(|k| self.forward[(i, k)] * v[k]).sum())
            .collect();
        Ok(KpiVector::from_vec_unchecked(out))
    }

    pub fn velocity_from_modal(&self, w: &[f64]) -> Result<KpiVector> {
        check_dim(self.dim(), w.len())?;
        let n = self.dim();
        let out = (0..n)
            .map(|i| (0..n).map(|k| self.backward[(i, k)] * w[k]).sum())
            .collect();
        Ok(KpiVector::from_vec_unchecked(out))
    }
}

/// Simultaneous diagonalization of the loss matrix and a well's curvature.
///
/// Equivalent to the generalized problem `det(C − ω²·2K) = 0`.
pub fn modal_basis(loss: &LossModel, well: &QuadraticWell) -> Result<ModalBasis> {
    let n = loss.dim();
    check_dim(n, well.dim())?;
    let k_eig = eigenlosses(loss)?;
    spd_eigen(well.curvature(), "gain curvature")?;

    let scale: Vec<f64> = k_eig.eigenvalues.iter().map(|&k| (2.0 * k).sqrt()).collect();
    let rk = &k_eig.rotation;
    let whitening = DMatrix::from_fn(n, n, |i, j| scale[i] * rk[(j, i)]);
    let inverse_whitening = DMatrix::from_fn(n, n, |i, j| rk[(i, j)] / scale[j]);

    let c_white = inverse_whitening.transpose() * well.curvature() * &inverse_whitening;
    let c_white = DMatrix::from_fn(n, n, |i, j| 0.5 * (c_white[(i, j)] + c_white[(j, i)]));
    let c_eig = spd_eigen(&c_white, "whitened gain curvature")?;

    // Ascending frequency order.
    let mut modal_rotation = DMatrix::<f64>::zeros(n, n);
    let mut frequencies = Vec::with_capacity(n);
    for (dst, src) in (0..n).rev().enumerate() {
        frequencies.push(c_eig.eigenvalues[src].sqrt());
        modal_rotation.set_column(dst, &c_eig.rotation.column(src));
    }

    let forward = modal_rotation.transpose() * &whitening;
    let backward = &inverse_whitening * &modal_rotation;
    Ok(ModalBasis {
        whitening,
        inverse_whitening,
        frequencies,
        modal_rotation,
        center: well.center().clone(),
        forward,
        backward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(n: usize, rows: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(n, n, rows)
    }

    #[test]
    fn diagonal_input_is_already_decomposed() {
        let eig = symmetric_eigen(&mat(2, &[3.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(eig.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(eig.rotation, DMatrix::identity(2, 2));
    }

    #[test]
    fn two_by_two_coupled() {
        // λ² − 4λ + 3 = 0 → λ ∈ {3, 1}.
        let eig = symmetric_eigen(&mat(2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert_abs_diff_eq!(eig.eigenvalues[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(eig.eigenvalues[1], 1.0, epsilon = 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c0 = eig.rotation.column(0);
        let c1 = eig.rotation.column(1);
        assert_abs_diff_eq!((c0[0] * h + c0[1] * h).abs(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!((c1[0] * h - c1[1] * h).abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_asymmetric_and_oversized() {
        let err = symmetric_eigen(&mat(2, &[1.0, 0.5, 0.4, 1.0])).unwrap_err();
        assert!(matches!(err, KpiError::NotSymmetric { .. }));
        let big = DMatrix::<f64>::identity(65, 65);
        assert!(matches!(symmetric_eigen(&big), Err(KpiError::InvalidArgument(_))));
    }

    #[test]
    fn zero_matrix_converges_immediately() {
        let eig = symmetric_eigen(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(eig.eigenvalues, vec![0.0; 3]);
    }

    #[test]
    fn eigenlosses_examples() {
        let l = LossModel::new(mat(2, &[2.0, 0.0, 0.0, 5.0])).unwrap();
        assert_eq!(eigenlosses(&l).unwrap().eigenvalues, vec![5.0, 2.0]);
        let l = LossModel::new(mat(2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let ev = eigenlosses(&l).unwrap().eigenvalues;
        assert_abs_diff_eq!(ev[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ev[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn singular_loss_is_rejected() {
        let err = LossModel::new(mat(2, &[1.0, 1.0, 1.0, 1.0])).unwrap_err();
        assert!(matches!(err, KpiError::NotPositiveDefinite { .. }));
    }

    #[test]
    fn canonical_pair_gives_identity_whitening() {
        let loss = LossModel::new(DMatrix::identity(2, 2) * 0.5).unwrap();
        let well = QuadraticWell::new(0.0, KpiVector::zeros(2), mat(2, &[0.25, 0.0, 0.0, 9.0])).unwrap();
        let b = modal_basis(&loss, &well).unwrap();
        assert_abs_diff_eq!(b.frequencies[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(b.frequencies[1], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(b.whitening, DMatrix::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn per_axis_frequencies() {
        // ω² = C/(2K) per axis: 4/4 and 16/4.
        let loss = LossModel::new(mat(2, &[2.0, 0.0, 0.0, 2.0])).unwrap();
        let well = QuadraticWell::new(0.0, KpiVector::zeros(2), mat(2, &[4.0, 0.0, 0.0, 16.0])).unwrap();
        let b = modal_basis(&loss, &well).unwrap();
        assert_abs_diff_eq!(b.frequencies[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(b.frequencies[1], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn hand_computed_whitening() {
        let loss = LossModel::new(mat(2, &[2.0, 0.0, 0.0, 2.0])).unwrap();
        let center = KpiVector::new(vec![1.0, -1.0]).unwrap();
        let well = QuadraticWell::new(0.0, center, mat(2, &[4.0, 0.0, 0.0, 16.0])).unwrap();
        let b = modal_basis(&loss, &well).unwrap();
        assert_abs_diff_eq!(b.whitening, mat(2, &[2.0, 0.0, 0.0, 2.0]), epsilon = 1e-14);
        let y = b.to_modal(&[2.0, -1.0]).unwrap();
        assert_abs_diff_eq!(y[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(y[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn identity_basis_subtracts_center() {
        let loss = LossModel::new(DMatrix::identity(2, 2) * 0.5).unwrap();
        let center = KpiVector::new(vec![3.0, 4.0]).unwrap();
        let well = QuadraticWell::new(1.0, center, mat(2, &[1.0, 0.0, 0.0, 4.0])).unwrap();
        let b = modal_basis(&loss, &well).unwrap();
        let y = b.to_modal(&[5.0, 7.0]).unwrap();
        assert_abs_diff_eq!(y.as_slice(), &[2.0, 3.0][..], epsilon = 1e-14);
        assert!(matches!(b.to_modal(&[1.0]), Err(KpiError::DimensionMismatch { .. })));
    }
}
