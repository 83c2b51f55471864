//! KPI states, loss and gain models, boundary conditions and trajectories.

use std::ops::Deref;

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KpiError, Result};
use crate::transforms::{max_asymmetry, spd_eigen};

/// A point in KPI space. Non-empty, every entry finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct KpiVector(Vec<f64>);

impl KpiVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(KpiError::InvalidArgument("KPI vector must have at least one entry".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(KpiError::InvalidArgument(format!(
                "KPI entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(KpiVector(values))
    }

    pub fn zeros(n: usize) -> Self {
        KpiVector(vec![0.0; n])
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        KpiVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Deref for KpiVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for KpiVector {
    type Error = KpiError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        KpiVector::new(v)
    }
}

impl From<KpiVector> for Vec<f64> {
    fn from(v: KpiVector) -> Self {
        v.0
    }
}

fn validate_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(KpiError::InvalidArgument(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Err(KpiError::InvalidArgument(format!("{what} is empty")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(KpiError::InvalidArgument(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Symmetrizes a matrix that is symmetric up to rounding noise.
fn symmetrized(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let asym = max_asymmetry(m);
    if asym > 1e-12 * m.norm().max(1.0) {
        return Err(KpiError::NotSymmetric { asymmetry: asym });
    }
    let n = m.nrows();
    Ok(DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)])))
}

/// Change-cost rate `K[v] = vᵀ·K·v` with symmetric positive-definite `K`.
#[derive(Debug, Clone)]
pub struct LossModel {
    k: DMatrix<f64>,
    mass: Cholesky<f64, Dyn>,
}

impl LossModel {
    pub fn new(k: DMatrix<f64>) -> Result<Self> {
        validate_square(&k, "loss matrix")?;
        let k = symmetrized(&k)?;
        spd_eigen(&k, "loss matrix")?;
        let mass = Cholesky::new(&k * 2.0).ok_or_else(|| KpiError::NotPositiveDefinite {
            what: "mass matrix 2K".into(),
            min_eigenvalue: f64::NAN,
        })?;
        Ok(LossModel { k, mass })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn evaluate(&self, v: &[f64]) -> Result<f64> {
        check_dim(self.dim(), v.len())?;
        Ok(self.quad(v))
    }

    pub(crate) fn quad(&self, v: &[f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for k in 0..n {
                row += self.k[(i, k)] * v[k];
            }
            acc += v[i] * row;
        }
        acc
    }

    /// `∂K/∂v = 2·K·v`.
    pub fn velocity_gradient(&self, v: &[f64]) -> Result<KpiVector> {
        check_dim(self.dim(), v.len())?;
        let mut out = vec![0.0; v.len()];
        self.mass_apply(v, &mut out);
        Ok(KpiVector::from_vec_unchecked(out))
    }

    /// `out = 2K·v`.
    pub(crate) fn mass_apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            out[i] = 2.0 * (0..n).map(|k| self.k[(i, k)] * v[k]).sum::<f64>();
        }
    }

    /// Solves `2K·out = rhs` in place using the stored factorization.
    pub(crate) fn mass_solve_in_place(&self, rhs: &mut [f64]) {
        let mut b = nalgebra::DVectorViewMut::from_slice(rhs, self.dim());
        self.mass.solve_mut(&mut b);
    }
}

/// `U(x) = u0 + ½·(x − center)ᵀ·C·(x − center)` with SPD curvature `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticWell {
    u0: f64,
    center: KpiVector,
    curvature: DMatrix<f64>,
}

impl QuadraticWell {
    pub fn new(u0: f64, center: KpiVector, curvature: DMatrix<f64>) -> Result<Self> {
        if !u0.is_finite() {
            return Err(KpiError::InvalidArgument("u0 must be finite".into()));
        }
        validate_square(&curvature, "gain curvature")?;
        check_dim(center.dim(), curvature.nrows())?;
        let curvature = symmetrized(&curvature)?;
        spd_eigen(&curvature, "gain curvature")?;
        Ok(QuadraticWell {
            u0,
            center,
            curvature,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    pub fn u0(&self) -> f64 {
        self.u0
    }

    pub fn center(&self) -> &KpiVector {
        &self.center
    }

    pub fn curvature(&self) -> &DMatrix<f64> {
        &self.curvature
    }

    fn value(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let di = x[i] - self.center[i];
            let mut row = 0.0;
            for k in 0..n {
                row += self.curvature[(i, k)] * (x[k] - self.center[k]);
            }
            acc += di * row;
        }
        self.u0 + 0.5 * acc
    }

    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..n)
                .map(|k| self.curvature[(i, k)] * (x[k] - self.center[k]))
                .sum();
        }
    }
}

/// Gain tabulated on a rectilinear grid, multilinearly interpolated.
///
/// `values` are stored row-major: the last axis varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGain {
    axes: Vec<Vec<f64>>,
    values: Vec<f64>,
    strides: Vec<usize>,
}

impl GridGain {
    pub fn new(axes: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        if axes.is_empty() {
            return Err(KpiError::InvalidArgument("grid needs at least one axis".into()));
        }
        for (a, axis) in axes.iter().enumerate() {
            if axis.len() < 2 {
                return Err(KpiError::InvalidArgument(format!("grid axis {a} needs at least two nodes")));
            }
            if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(KpiError::InvalidArgument(format!(
                    "grid axis {a} must be finite and strictly increasing"
                )));
            }
        }
        let expected: usize = axes.iter().map(Vec::len).product();
        if values.len() != expected {
            return Err(KpiError::DimensionMismatch {
                expected,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KpiError::InvalidArgument("grid values must be finite".into()));
        }
        let mut strides = vec![1; axes.len()];
        for a in (0..axes.len() - 1).rev() {
            strides[a] = strides[a + 1] * axes[a + 1].len();
        }
        Ok(GridGain {
            axes,
            values,
            strides,
        })
    }

    /// Tabulates `f` on the given axes.
    pub fn from_fn(axes: Vec<Vec<f64>>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let total: usize = axes.iter().map(Vec::len).product();
        let mut values = Vec::with_capacity(total);
        let mut idx = vec![0usize; axes.len()];
        let mut point = vec![0.0; axes.len()];
        for _ in 0..total {
            for (a, &i) in idx.iter().enumerate() {
                point[a] = axes[a][i];
            }
            values.push(f(&point));
            for a in (0..axes.len()).rev() {
                idx[a] += 1;
                if idx[a] < axes[a].len() {
                    break;
                }
                idx[a] = 0;
            }
        }
        GridGain::new(axes, values)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn check_domain(&self, x: &[f64]) -> Result<()> {
        for (a, (&xa, axis)) in x.iter().zip(&self.axes).enumerate() {
            let (lo, hi) = (axis[0], axis[axis.len() - 1]);
            if !(xa >= lo && xa <= hi) {
                return Err(KpiError::OutOfDomain {
                    axis: a,
                    value: xa,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    fn value(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut base = 0usize;
        let mut frac = Vec::with_capacity(d);
        for (a, axis) in self.axes.iter().enumerate() {
            // Cell index j with axis[j] <= x < axis[j+1], clamped to the last cell.
            let j = match axis.partition_point(|&node| node <= x[a]) {
                0 => 0,
                p => (p - 1).min(axis.len() - 2),
            };
            frac.push((x[a] - axis[j]) / (axis[j + 1] - axis[j]));
            base += j * self.strides[a];
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut offset = 0;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    offset += self.strides[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * self.values[base + offset];
            }
        }
        acc
    }

    /// Central differences with `h = 1e-5·(1 + |xᵢ|)`, one-sided at box faces.
    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let mut probe = x.to_vec();
        for (a, o) in out.iter_mut().enumerate() {
            let axis = &self.axes[a];
            let (lo, hi) = (axis[0], axis[axis.len() - 1]);
            let h = 1e-5 * (1.0 + x[a].abs());
            let up = (x[a] + h).min(hi);
            let down = (x[a] - h).max(lo);
            probe[a] = up;
            let f_up = self.value(&probe);
            probe[a] = down;
            let f_down = self.value(&probe);
            probe[a] = x[a];
            *o = (f_up - f_down) / (up - down);
        }
    }
}

/// Profit-flow landscape `U(x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum GainModel {
    Constant { u0: f64 },
    QuadraticWell(QuadraticWell),
    Grid(GridGain),
}

impl GainModel {
    /// KPI dimension the model is tied to; `None` for the constant gain.
    pub fn dim(&self) -> Option<usize> {
        match self {
            GainModel::Constant { .. } => None,
            GainModel::QuadraticWell(w) => Some(w.dim()),
            GainModel::Grid(g) => Some(g.dim()),
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if let Some(n) = self.dim() {
            check_dim(n, x.len())?;
        }
        if let GainModel::Grid(g) = self {
            g.check_domain(x)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(match self {
            GainModel::Constant { u0 } => *u0,
            GainModel::QuadraticWell(w) => w.value(x),
            GainModel::Grid(g) => g.value(x),
        })
    }

    pub fn gradient(&self, x: &[f64]) -> Result<KpiVector> {
        let mut out = vec![0.0; x.len()];
        self.gradient_into(x, &mut out)?;
        Ok(KpiVector::from_vec_unchecked(out))
    }

    /// Writes `∇U(x)` into `out` without allocating (for the hot integrator loops).
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(x)?;
        check_dim(x.len(), out.len())?;
        match self {
            GainModel::Constant { .. } => out.fill(0.0),
            GainModel::QuadraticWell(w) => w.gradient_into(x, out),
            GainModel::Grid(g) => g.gradient_into(x, out),
        }
        Ok(())
    }

    /// Fails unless the model accepts `n`-dimensional states.
    pub fn ensure_dim(&self, n: usize) -> Result<()> {
        match self.dim() {
            Some(d) => check_dim(d, n),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub x1: KpiVector,
    pub t1: f64,
    pub x2: KpiVector,
    pub t2: f64,
}

impl BoundaryConditions {
    pub fn new(x1: KpiVector, t1: f64, x2: KpiVector, t2: f64) -> Result<Self> {
        check_dim(x1.dim(), x2.dim())?;
        if !(t1.is_finite() && t2.is_finite() && t2 > t1) {
            return Err(KpiError::InvalidArgument(format!(
                "boundary times must satisfy t2 > t1 (got t1={t1}, t2={t2})"
            )));
        }
        Ok(BoundaryConditions { x1, t1, x2, t2 })
    }

    pub fn dim(&self) -> usize {
        self.x1.dim()
    }

    pub fn span(&self) -> f64 {
        self.t2 - self.t1
    }
}

/// Number of uniform steps covering `span` with a step no larger than `dt`.
///
/// Spans that are an integer multiple of `dt` up to rounding map to that integer.
pub fn step_count(span: f64, dt: f64) -> Result<usize> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(KpiError::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    if !(span.is_finite() && span > 0.0) {
        return Err(KpiError::InvalidArgument(format!("time span must be positive, got {span}")));
    }
    let ratio = span / dt;
    let nearest = ratio.round();
    let n = if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        ratio.ceil()
    };
    if n > 1e9 {
        return Err(KpiError::InvalidArgument(format!("{n} steps exceeds the supported grid size")));
    }
    Ok((n as usize).max(1))
}

/// Time-indexed states and velocities on a uniform grid.
///
/// States and velocities are stored flat, `dim` values per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    velocities: Vec<f64>,
}

impl Trajectory {
    pub fn new(dim: usize, times: Vec<f64>, states: Vec<f64>, velocities: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(KpiError::InvalidTrajectory("dimension must be at least 1".into()));
        }
        let m = times.len();
        if m < 2 {
            return Err(KpiError::InvalidTrajectory(format!("need at least 2 samples, got {m}")));
        }
        if states.len() != m * dim || velocities.len() != m * dim {
            return Err(KpiError::InvalidTrajectory(format!(
                "expected {} state and velocity values, got {} and {}",
                m * dim,
                states.len(),
                velocities.len()
            )));
        }
        if times.iter().chain(&states).chain(&velocities).any(|v| !v.is_finite()) {
            return Err(KpiError::InvalidTrajectory("non-finite sample".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(KpiError::InvalidTrajectory("times must be strictly increasing".into()));
        }
        let t0 = times[0];
        let span = times[m - 1] - t0;
        let dt = span / (m - 1) as f64;
        let tol = 1e-12 * (t0.abs() + span);
        for (k, &t) in times.iter().enumerate() {
            if (t - (t0 + k as f64 * dt)).abs() > tol {
                return Err(KpiError::InvalidTrajectory(format!(
                    "non-uniform time grid at sample {k}"
                )));
            }
        }
        Ok(Trajectory {
            dim,
            times,
            states,
            velocities,
        })
    }

    /// Builds the grid `t0 + k·dt` for `k = 0..m`.
    pub fn uniform_times(t0: f64, dt: f64, m: usize) -> Vec<f64> {
        (0..m).map(|k| t0 + k as f64 * dt).collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        (self.times[self.len() - 1] - self.times[0]) / (self.len() - 1) as f64
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn velocity(&self, k: usize) -> &[f64] {
        &self.velocities[k * self.dim..(k + 1) * self.dim]
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }

    pub fn velocities_flat(&self) -> &[f64] {
        &self.velocities
    }

    pub fn first_state(&self) -> &[f64] {
        self.state(0)
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}
