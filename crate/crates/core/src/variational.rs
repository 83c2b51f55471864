//! Profit functional, equations of motion and the two-point boundary problem.
//!
//! Sign convention: optimal paths satisfy `2K·ẍ = −∇U`. Both boundary
//! solvers discretize on the same uniform grid and satisfy the same
//! three-point stencil `2K·(x₊ − 2x + x₋)/Δt² + ∇U(x) = 0` at interior nodes,
//! so on a given grid their answers coincide up to solver tolerance.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KpiError, Result};
use crate::model::{step_count, BoundaryConditions, GainModel, KpiVector, LossModel, Trajectory};
use crate::transforms::symmetric_eigen;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub dt: f64,
    /// Terminal-state tolerance; `None` means `1e-8·(1 + ‖x2‖)`.
    pub shooting_tol: Option<f64>,
    pub max_newton_iters: usize,
    pub direct_max_iters: usize,
    pub direct_grad_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            dt: 1e-3,
            shooting_tol: None,
            max_newton_iters: 50,
            direct_max_iters: 5000,
            direct_grad_tol: 1e-8,
        }
    }
}

impl SolverSettings {
    pub fn with_dt(dt: f64) -> Self {
        SolverSettings {
            dt,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let tol_ok = self.shooting_tol.is_none_or(|t| t.is_finite() && t > 0.0);
        if !(self.dt.is_finite() && self.dt > 0.0)
            || !tol_ok
            || !(self.direct_grad_tol.is_finite() && self.direct_grad_tol > 0.0)
        {
            return Err(KpiError::InvalidArgument(
                "solver step and tolerances must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn shooting_tol_for(&self, x2: &[f64]) -> f64 {
        self.shooting_tol
            .unwrap_or_else(|| 1e-8 * (1.0 + x2.iter().map(|v| v * v).sum::<f64>().sqrt()))
    }
}

fn check_traj(loss: &LossModel, gain: &GainModel, traj: &Trajectory) -> Result<()> {
    check_dim(loss.dim(), traj.dim())?;
    gain.ensure_dim(traj.dim())
}

/// Trapezoidal quadrature of `U(x(t)) − K(ẋ(t))` over the stored grid.
pub fn compute_profit(loss: &LossModel, gain: &GainModel, traj: &Trajectory) -> Result<f64> {
    check_traj(loss, gain, traj)?;
    let m = traj.len();
    let dt = traj.dt();
    let mut total = 0.0;
    for k in 0..m {
        let rate = gain.evaluate(traj.state(k))? - loss.quad(traj.velocity(k));
        let w = if k == 0 || k == m - 1 { 0.5 } else { 1.0 };
        total += w * rate;
    }
    Ok(total * dt)
}

/// Euler-Lagrange residual `D = 2K·ẍ + ∇U` at interior samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Flat, `dim` values per interior sample.
    pub values: Vec<f64>,
}

impl ResidualSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn norms(&self) -> Vec<f64> {
        self.values
            .chunks(self.dim)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.norms().into_iter().fold(0.0, f64::max)
    }
}

/// Second central difference of the stored states, `ẍ ≈ (x₊ − 2x + x₋)/Δt²`.
pub fn el_residual(loss: &LossModel, gain: &GainModel, traj: &Trajectory) -> Result<ResidualSeries> {
    check_traj(loss, gain, traj)?;
    let m = traj.len();
    if m < 3 {
        return Err(KpiError::InvalidTrajectory(
            "residual needs at least 3 samples".into(),
        ));
    }
    let n = traj.dim();
    let inv_dt2 = 1.0 / (traj.dt() * traj.dt());
    let mut values = Vec::with_capacity((m - 2) * n);
    let mut acc = vec![0.0; n];
    let mut force = vec![0.0; n];
    let mut grad = vec![0.0; n];
    for k in 1..m - 1 {
        let (xm, x, xp) = (traj.state(k - 1), traj.state(k), traj.state(k + 1));
        for i in 0..n {
            acc[i] = (xp[i] - 2.0 * x[i] + xm[i]) * inv_dt2;
        }
        loss.mass_apply(&acc, &mut force);
        gain.gradient_into(x, &mut grad)?;
        values.extend(force.iter().zip(&grad).map(|(f, g)| f + g));
    }
    Ok(ResidualSeries {
        dim: n,
        times: traj.times()[1..m - 1].to_vec(),
        values,
    })
}

/// `a = −(2K)⁻¹·∇U(x)`.
fn acceleration(loss: &LossModel, gain: &GainModel, x: &[f64], out: &mut [f64]) -> Result<()> {
    gain.gradient_into(x, out)?;
    for v in out.iter_mut() {
        *v = -*v;
    }
    loss.mass_solve_in_place(out);
    Ok(())
}

struct VerletRun {
    states: Vec<f64>,
    velocities: Vec<f64>,
    last_x: Vec<f64>,
}

/// Velocity Verlet on `2K·ẍ = −∇U`; stores every sample only when asked.
fn verlet(
    loss: &LossModel,
    gain: &GainModel,
    x0: &[f64],
    v0: &[f64],
    h: f64,
    steps: usize,
    store: bool,
) -> Result<VerletRun> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut v = v0.to_vec();
    let mut a = vec![0.0; n];
    let mut a_next = vec![0.0; n];
    acceleration(loss, gain, &x, &mut a)?;
    let cap = if store { (steps + 1) * n } else { 0 };
    let mut states = Vec::with_capacity(cap);
    let mut velocities = Vec::with_capacity(cap);
    if store {
        states.extend_from_slice(&x);
        velocities.extend_from_slice(&v);
    }
    let half_h2 = 0.5 * h * h;
    for _ in 0..steps {
        for i in 0..n {
            x[i] += h * v[i] + half_h2 * a[i];
        }
        acceleration(loss, gain, &x, &mut a_next)?;
        for i in 0..n {
            v[i] += 0.5 * h * (a[i] + a_next[i]);
        }
        std::mem::swap(&mut a, &mut a_next);
        if store {
            states.extend_from_slice(&x);
            velocities.extend_from_slice(&v);
        }
    }
    Ok(VerletRun {
        states,
        velocities,
        last_x: x,
    })
}

/// Integrates the initial-value problem with velocity Verlet.
///
/// The grid is `t0 + k·h` with `h = span/⌈span/dt⌉`.
pub fn integrate_ivp(
    loss: &LossModel,
    gain: &GainModel,
    x0: &KpiVector,
    v0: &KpiVector,
    t_span: (f64, f64),
    dt: f64,
) -> Result<Trajectory> {
    let n = loss.dim();
    check_dim(n, x0.dim())?;
    check_dim(n, v0.dim())?;
    gain.ensure_dim(n)?;
    let steps = step_count(t_span.1 - t_span.0, dt)?;
    let h = (t_span.1 - t_span.0) / steps as f64;
    let run = verlet(loss, gain, x0, v0, h, steps, true)?;
    Trajectory::new(
        n,
        Trajectory::uniform_times(t_span.0, h, steps + 1),
        run.states,
        run.velocities,
    )
}

/// Velocities consistent with a velocity-Verlet step for positions sampled on
/// a uniform grid: central differences inside, half-step corrected ends.
pub(crate) fn verlet_velocities(
    loss: &LossModel,
    gain: &GainModel,
    states: &[f64],
    n: usize,
    h: f64,
) -> Result<Vec<f64>> {
    let m = states.len() / n;
    let x = |k: usize| &states[k * n..(k + 1) * n];
    let mut vel = vec![0.0; m * n];
    let mut a = vec![0.0; n];
    for k in 1..m - 1 {
        let (xm, xp) = (x(k - 1), x(k + 1));
        for i in 0..n {
            vel[k * n + i] = (xp[i] - xm[i]) / (2.0 * h);
        }
    }
    acceleration(loss, gain, x(0), &mut a)?;
    for i in 0..n {
        vel[i] = (x(1)[i] - x(0)[i]) / h - 0.5 * h * a[i];
    }
    acceleration(loss, gain, x(m - 1), &mut a)?;
    for i in 0..n {
        vel[(m - 1) * n + i] = (x(m - 1)[i] - x(m - 2)[i]) / h + 0.5 * h * a[i];
    }
    Ok(vel)
}

fn solve_dense(j: &DMatrix<f64>, rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    let b = nalgebra::DVector::from_column_slice(rhs);
    j.clone().lu().solve(&b).map(|s| s.as_slice().to_vec()).filter(|s| s.len() == n)
}

/// Smallest eigenvalue of `(J/T)ᵀ(J/T)`, i.e. the squared smallest singular
/// value of the terminal-map Jacobian normalized by the free-flight value `T·I`.
fn normalized_min_sv2(j: &DMatrix<f64>, span: f64) -> Result<f64> {
    let s = j / span;
    let gram = s.transpose() * &s;
    let eig = symmetric_eigen(&gram)?;
    Ok(*eig.eigenvalues.last().expect("non-empty"))
}

/// Shooting on the unknown initial velocity.
///
/// Newton iteration on `v0 ↦ x(t2; v0) − x2` with a forward-difference
/// Jacobian (step `1e-6·(1 + |v0ᵢ|)`). Reports [`KpiError::Degenerate`] when
/// the normalized Jacobian's squared smallest singular value falls below
/// `1e-12`, which is what happens at conjugate points.
pub fn solve_bvp_shooting(
    loss: &LossModel,
    gain: &GainModel,
    bc: &BoundaryConditions,
    settings: &SolverSettings,
) -> Result<Trajectory> {
    settings.validate()?;
    let n = loss.dim();
    check_dim(n, bc.dim())?;
    gain.ensure_dim(n)?;
    let span = bc.span();
    let steps = step_count(span, settings.dt)?;
    let h = span / steps as f64;
    let tol = settings.shooting_tol_for(&bc.x2);

    let terminal = |v0: &[f64]| -> Result<Vec<f64>> {
        let run = verlet(loss, gain, &bc.x1, v0, h, steps, false)?;
        Ok(run.last_x.iter().zip(bc.x2.iter()).map(|(a, b)| a - b).collect())
    };
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut v0: Vec<f64> = bc.x1.iter().zip(bc.x2.iter()).map(|(a, b)| (b - a) / span).collect();
    let mut r = terminal(&v0)?;
    let mut best = norm(&r);
    let mut iter = 0;
    while best > tol {
        if iter == settings.max_newton_iters {
            return Err(KpiError::NoConvergence {
                what: "shooting Newton iteration".into(),
                iterations: iter,
                residual: best,
            });
        }
        iter += 1;

        let mut jac = DMatrix::<f64>::zeros(n, n);
        let mut probe = v0.clone();
        for c in 0..n {
            let step = 1e-6 * (1.0 + v0[c].abs());
            probe[c] = v0[c] + step;
            let rp = terminal(&probe)?;
            probe[c] = v0[c];
            for row in 0..n {
                jac[(row, c)] = (rp[row] - r[row]) / step;
            }
        }
        let sv2 = normalized_min_sv2(&jac, span)?;
        if sv2 < 1e-12 {
            return Err(KpiError::Degenerate(format!(
                "terminal-map Jacobian is singular (normalized squared singular value {sv2:e}); \
                 the interval likely ends at a conjugate point"
            )));
        }
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = solve_dense(&jac, &neg)
            .ok_or_else(|| KpiError::Degenerate("terminal-map Jacobian could not be factorized".into()))?;

        // Damped Newton: halve the step while the terminal miss grows.
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = v0.iter().zip(&delta).map(|(v, d)| v + lambda * d).collect();
            let outcome = terminal(&trial);
            match outcome {
                Ok(rt) if norm(&rt) < best || lambda < 1e-3 => {
                    v0 = trial;
                    best = norm(&rt);
                    r = rt;
                    break;
                }
                Ok(_) => lambda *= 0.5,
                Err(e @ KpiError::OutOfDomain { .. }) if lambda < 1e-3 => return Err(e),
                Err(KpiError::OutOfDomain { .. }) => lambda *= 0.5,
                Err(e) => return Err(e),
            }
        }
    }
    let v0 = KpiVector::new(v0)?;
    let run = verlet(loss, gain, &bc.x1, &v0, h, steps, true)?;
    Trajectory::new(
        n,
        Trajectory::uniform_times(bc.t1, h, steps + 1),
        run.states,
        run.velocities,
    )
}

/// Discrete profit over the interior unknowns, with its per-node gradient.
struct DiscreteAction<'a> {
    loss: &'a LossModel,
    gain: &'a GainModel,
    n: usize,
    nodes: usize,
    h: f64,
    x1: &'a [f64],
    x2: &'a [f64],
}

impl DiscreteAction<'_> {
    fn node<'b>(&'b self, z: &'b [f64], k: usize) -> &'b [f64] {
        let n = self.n;
        if k == 0 {
            self.x1
        } else if k == self.nodes {
            self.x2
        } else {
            &z[(k - 1) * n..k * n]
        }
    }

    /// Negated profit divided by `h`, to be minimized.
    fn cost(&self, z: &[f64]) -> Result<f64> {
        let n = self.n;
        let mut gain_sum = 0.0;
        for k in 1..self.nodes {
            gain_sum += self.gain.evaluate(self.node(z, k))?;
        }
        let mut diff = vec![0.0; n];
        let mut loss_sum = 0.0;
        for k in 0..self.nodes {
            let (a, b) = (self.node(z, k), self.node(z, k + 1));
            for i in 0..n {
                diff[i] = (b[i] - a[i]) / self.h;
            }
            loss_sum += self.loss.quad(&diff);
        }
        Ok(loss_sum - gain_sum)
    }

    /// Gradient of [`Self::cost`]; equals `−D` node by node.
    fn gradient(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n;
        let inv_h2 = 1.0 / (self.h * self.h);
        let mut lap = vec![0.0; n];
        let mut force = vec![0.0; n];
        let mut grad = vec![0.0; n];
        for k in 1..self.nodes {
            let (xm, x, xp) = (self.node(z, k - 1), self.node(z, k), self.node(z, k + 1));
            for i in 0..n {
                lap[i] = (xp[i] - 2.0 * x[i] + xm[i]) * inv_h2;
            }
            self.loss.mass_apply(&lap, &mut force);
            self.gain.gradient_into(x, &mut grad)?;
            for i in 0..n {
                out[(k - 1) * n + i] = -(force[i] + grad[i]);
            }
        }
        Ok(())
    }

    /// Applies the inverse of the loss-term Hessian `(2K ⊗ L)/h²`, where `L`
    /// is the Dirichlet second-difference matrix: a mass solve per node, then
    /// a tridiagonal solve per component.
    fn precondition(&self, g: &[f64], out: &mut [f64]) {
        let n = self.n;
        let m = self.nodes - 1;
        out.copy_from_slice(g);
        for k in 0..m {
            self.loss.mass_solve_in_place(&mut out[k * n..(k + 1) * n]);
        }
        let h2 = self.h * self.h;
        let mut c_prime = vec![0.0; m];
        let mut d = vec![0.0; m];
        for i in 0..n {
            // Thomas algorithm for tridiag(−1, 2, −1)·w = h²·rhs.
            let mut denom = 2.0;
            c_prime[0] = -1.0 / denom;
            d[0] = h2 * out[i] / denom;
            for k in 1..m {
                denom = 2.0 + c_prime[k - 1];
                c_prime[k] = -1.0 / denom;
                d[k] = (h2 * out[k * n + i] + d[k - 1]) / denom;
            }
            out[(m - 1) * n + i] = d[m - 1];
            for k in (0..m - 1).rev() {
                out[k * n + i] = d[k] - c_prime[k] * out[(k + 1) * n + i];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Direct maximization of the discretized profit
/// `Σ[U(xₖ) − K((xₖ₊₁ − xₖ)/Δt)]·Δt` over the interior nodes.
///
/// Preconditioned nonlinear conjugate gradient (Polak-Ribière+) with
/// backtracking Armijo line search, started from the straight line. The
/// gradient is reported per node as `−D`, so the convergence test
/// `max|g| ≤ direct_grad_tol` bounds the discrete Euler-Lagrange residual.
pub fn solve_bvp_direct(
    loss: &LossModel,
    gain: &GainModel,
    bc: &BoundaryConditions,
    n_steps: usize,
    settings: &SolverSettings,
) -> Result<Trajectory> {
    settings.validate()?;
    if n_steps < 2 {
        return Err(KpiError::InvalidArgument(format!("n_steps must be at least 2, got {n_steps}")));
    }
    let n = loss.dim();
    check_dim(n, bc.dim())?;
    gain.ensure_dim(n)?;
    let h = bc.span() / n_steps as f64;
    let problem = DiscreteAction {
        loss,
        gain,
        n,
        nodes: n_steps,
        h,
        x1: &bc.x1,
        x2: &bc.x2,
    };

    let unknowns = (n_steps - 1) * n;
    let mut z = Vec::with_capacity(unknowns);
    for k in 1..n_steps {
        let s = k as f64 / n_steps as f64;
        z.extend(bc.x1.iter().zip(bc.x2.iter()).map(|(a, b)| a + s * (b - a)));
    }

    let mut g = vec![0.0; unknowns];
    let mut pg = vec![0.0; unknowns];
    let mut dir = vec![0.0; unknowns];
    let mut trial = vec![0.0; unknowns];
    let mut g_new = vec![0.0; unknowns];
    let mut pg_new = vec![0.0; unknowns];

    let mut f = problem.cost(&z)?;
    problem.gradient(&z, &mut g)?;
    problem.precondition(&g, &mut pg);
    for (d, p) in dir.iter_mut().zip(&pg) {
        *d = -p;
    }

    let mut iter = 0;
    let mut gnorm = max_abs(&g);
    while gnorm > settings.direct_grad_tol {
        if iter == settings.direct_max_iters {
            return Err(KpiError::NoConvergence {
                what: "direct discrete-action optimizer".into(),
                iterations: iter,
                residual: gnorm,
            });
        }
        iter += 1;

        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            for (d, p) in dir.iter_mut().zip(&pg) {
                *d = -p;
            }
            slope = dot(&g, &dir);
        }

        // Armijo backtracking. The cost is a difference of large sums, so
        // near the optimum a step is also accepted when the change in cost
        // is below rounding noise and the gradient shrinks.
        let noise = 1e-13 * (1.0 + f.abs());
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for ((t, zi), d) in trial.iter_mut().zip(&z).zip(&dir) {
                *t = zi + alpha * d;
            }
            match problem.cost(&trial) {
                Ok(f_trial) => {
                    let armijo = f_trial <= f + 1e-4 * alpha * slope;
                    if armijo || f_trial <= f + noise {
                        problem.gradient(&trial, &mut g_new)?;
                        if armijo || max_abs(&g_new) < gnorm {
                            f = f_trial;
                            accepted = true;
                            break;
                        }
                    }
                }
                Err(KpiError::OutOfDomain { .. }) => {}
                Err(e) => return Err(e),
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(KpiError::NoConvergence {
                what: "direct optimizer line search".into(),
                iterations: iter,
                residual: gnorm,
            });
        }
        std::mem::swap(&mut z, &mut trial);

        problem.precondition(&g_new, &mut pg_new);
        let denom = dot(&g, &pg);
        let beta = if denom > 0.0 {
            ((dot(&g_new, &pg_new) - dot(&g_new, &pg)) / denom).max(0.0)
        } else {
            0.0
        };
        for (d, p) in dir.iter_mut().zip(&pg_new) {
            *d = -p + beta * *d;
        }
        std::mem::swap(&mut g, &mut g_new);
        std::mem::swap(&mut pg, &mut pg_new);
        gnorm = max_abs(&g);
    }

    let mut states = Vec::with_capacity((n_steps + 1) * n);
    states.extend_from_slice(&bc.x1);
    states.extend_from_slice(&z);
    states.extend_from_slice(&bc.x2);
    let velocities = verlet_velocities(loss, gain, &states, n, h)?;
    Trajectory::new(
        n,
        Trajectory::uniform_times(bc.t1, h, n_steps + 1),
        states,
        velocities,
    )
}

/// One decoupled mode `y(t) = a·sin ω(t − c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicMode {
    pub amplitude: f64,
    pub phase_shift: f64,
    pub frequency: f64,
}

impl HarmonicMode {
    pub fn position(&self, t: f64) -> f64 {
        self.amplitude * (self.frequency * (t - self.phase_shift)).sin()
    }

    pub fn velocity(&self, t: f64) -> f64 {
        self.amplitude * self.frequency * (self.frequency * (t - self.phase_shift)).cos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicSolution {
    pub modes: Vec<HarmonicMode>,
}

impl HarmonicSolution {
    pub fn position(&self, t: f64) -> Vec<f64> {
        self.modes.iter().map(|m| m.position(t)).collect()
    }

    pub fn velocity(&self, t: f64) -> Vec<f64> {
        self.modes.iter().map(|m| m.velocity(t)).collect()
    }
}

/// Reduces `c` into `[0, period)`.
pub(crate) fn wrap_phase(c: f64, period: f64) -> f64 {
    let r = c.rem_euclid(period);
    if r >= period {
        0.0
    } else {
        r
    }
}

/// Closed-form boundary fit of decoupled oscillators in modal coordinates.
///
/// Each mode is written `A·sin ωt + B·cos ωt`; the two boundary rows give a
/// 2×2 system whose determinant is `sin ω(t2 − t1)`.
pub fn analytic_harmonic_solve(
    frequencies: &[f64],
    y1: &[f64],
    t1: f64,
    y2: &[f64],
    t2: f64,
) -> Result<HarmonicSolution> {
    check_dim(frequencies.len(), y1.len())?;
    check_dim(frequencies.len(), y2.len())?;
    if !(t2 > t1) {
        return Err(KpiError::InvalidArgument("t2 must exceed t1".into()));
    }
    let span = t2 - t1;
    let mut modes = Vec::with_capacity(frequencies.len());
    for (i, &w) in frequencies.iter().enumerate() {
        if !(w > 0.0 && w.is_finite()) {
            return Err(KpiError::ZeroFrequency { mode: i });
        }
        let turns = w * span / PI;
        if (turns - turns.round()).abs() * PI <= 1e-9 {
            return Err(KpiError::DegenerateInterval {
                frequency: w,
                span,
            });
        }
        let (s1, c1) = (w * t1).sin_cos();
        let (s2, c2) = (w * t2).sin_cos();
        let det = s1 * c2 - c1 * s2;
        let a_coef = (y1[i] * c2 - c1 * y2[i]) / det;
        let b_coef = (s1 * y2[i] - s2 * y1[i]) / det;
        let amplitude = a_coef.hypot(b_coef);
        let period = 2.0 * PI / w;
        let phase_shift = if amplitude == 0.0 {
            0.0
        } else {
            wrap_phase((-b_coef).atan2(a_coef) / w, period)
        };
        modes.push(HarmonicMode {
            amplitude,
            phase_shift,
            frequency: w,
        });
    }
    Ok(HarmonicSolution { modes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuadraticWell;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn kv(v: &[f64]) -> KpiVector {
        KpiVector::new(v.to_vec()).unwrap()
    }

    fn unit_oscillator() -> (LossModel, GainModel) {
        let loss = LossModel::new(DMatrix::from_element(1, 1, 0.5)).unwrap();
        let gain = GainModel::QuadraticWell(QuadraticWell::new(0.0, KpiVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap());
        (loss, gain)
    }

    #[test]
    fn stationary_profit_is_u0_times_span() {
        let loss = LossModel::new(DMatrix::identity(2, 2)).unwrap();
        let gain = GainModel::Constant { u0: 3.0 };
        let m = 11;
        let states: Vec<f64> = (0..m).flat_map(|_| [1.0, 2.0]).collect();
        let traj = Trajectory::new(2, Trajectory::uniform_times(0.0, 0.5, m), states, vec![0.0; 2 * m]).unwrap();
        assert_abs_diff_eq!(compute_profit(&loss, &gain, &traj).unwrap(), 15.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_gain_profit_is_non_positive() {
        let loss = LossModel::new(DMatrix::identity(1, 1)).unwrap();
        let gain = GainModel::Constant { u0: 0.0 };
        let times = Trajectory::uniform_times(0.0, 0.1, 5);
        let v = vec![1.0, -2.0, 0.5, 0.0, 3.0];
        let traj = Trajectory::new(1, times, vec![0.0; 5], v).unwrap();
        let p = compute_profit(&loss, &gain, &traj).unwrap();
        // −0.1·(0.5·1 + 4 + 0.25 + 0 + 0.5·9)
        assert_abs_diff_eq!(p, -0.925, epsilon = 1e-12);
    }

    #[test]
    fn residual_of_rest_at_center_vanishes() {
        let (loss, gain) = unit_oscillator();
        let traj = Trajectory::new(1, Trajectory::uniform_times(0.0, 0.1, 4), vec![0.0; 4], vec![0.0; 4]).unwrap();
        let d = el_residual(&loss, &gain, &traj).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.max_norm(), 0.0);
    }

    #[test]
    fn residual_of_straight_line_is_the_gradient() {
        let loss = LossModel::new(DMatrix::identity(1, 1)).unwrap();
        let gain = GainModel::QuadraticWell(QuadraticWell::new(0.0, KpiVector::zeros(1), DMatrix::from_element(1, 1, 2.0)).unwrap());
        let states = vec![1.0, 1.5, 2.0, 2.5];
        let traj = Trajectory::new(1, Trajectory::uniform_times(0.0, 0.5, 4), states, vec![1.0; 4]).unwrap();
        let d = el_residual(&loss, &gain, &traj).unwrap();
        assert_abs_diff_eq!(d.at(0)[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.at(1)[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_needs_three_samples() {
        let (loss, gain) = unit_oscillator();
        let traj = Trajectory::new(1, vec![0.0, 1.0], vec![0.0; 2], vec![0.0; 2]).unwrap();
        assert!(el_residual(&loss, &gain, &traj).is_err());
    }

    #[test]
    fn free_flight_is_a_straight_line() {
        let loss = LossModel::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let gain = GainModel::Constant { u0: 1.0 };
        let traj = integrate_ivp(&loss, &gain, &kv(&[1.0, -1.0]), &kv(&[0.5, 2.0]), (0.0, 3.0), 0.01).unwrap();
        for k in 0..traj.len() {
            let t = traj.times()[k];
            assert_abs_diff_eq!(traj.state(k)[0], 1.0 + 0.5 * t, epsilon = 1e-12);
            assert_abs_diff_eq!(traj.state(k)[1], -1.0 + 2.0 * t, epsilon = 1e-12);
        }
    }

    #[test]
    fn oscillator_returns_after_one_period() {
        let (loss, gain) = unit_oscillator();
        let traj = integrate_ivp(&loss, &gain, &kv(&[1.0]), &kv(&[0.0]), (0.0, 2.0 * PI), 1e-3).unwrap();
        let k = traj.len() - 1;
        assert!((traj.state(k)[0] - 1.0).abs() < 1e-6);
        assert!(traj.velocity(k)[0].abs() < 1e-6);
    }

    #[test]
    fn shooting_trivial_and_degenerate() {
        let (loss, gain) = unit_oscillator();
        let s = SolverSettings::default();
        let bc = BoundaryConditions::new(kv(&[0.0]), 0.0, kv(&[0.0]), 1.0).unwrap();
        let traj = solve_bvp_shooting(&loss, &gain, &bc, &s).unwrap();
        assert_eq!(traj.velocity(0)[0], 0.0);
        assert!(traj.states_flat().iter().all(|&x| x == 0.0));

        let bc = BoundaryConditions::new(kv(&[0.0]), 0.0, kv(&[0.5]), PI).unwrap();
        let err = solve_bvp_shooting(&loss, &gain, &bc, &s).unwrap_err();
        assert!(matches!(err, KpiError::Degenerate(_)), "{err:?}");
    }

    #[test]
    fn shooting_hits_sine() {
        let (loss, gain) = unit_oscillator();
        let bc = BoundaryConditions::new(kv(&[0.0]), 0.0, kv(&[1.0]), FRAC_PI_2).unwrap();
        let traj = solve_bvp_shooting(&loss, &gain, &bc, &SolverSettings::default()).unwrap();
        assert!((traj.velocity(0)[0] - 1.0).abs() < 1e-6);
        for k in 0..traj.len() {
            assert!((traj.state(k)[0] - traj.times()[k].sin()).abs() < 1e-6);
        }
    }

    #[test]
    fn direct_with_constant_gain_is_straight() {
        let loss = LossModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])).unwrap();
        let gain = GainModel::Constant { u0: 2.0 };
        let bc = BoundaryConditions::new(kv(&[0.0, 1.0]), 0.0, kv(&[2.0, -1.0]), 2.0).unwrap();
        let traj = solve_bvp_direct(&loss, &gain, &bc, 20, &SolverSettings::default()).unwrap();
        for k in 0..traj.len() {
            let s = k as f64 / 20.0;
            assert_abs_diff_eq!(traj.state(k)[0], 2.0 * s, epsilon = 1e-9);
            assert_abs_diff_eq!(traj.state(k)[1], 1.0 - 2.0 * s, epsilon = 1e-9);
            assert_abs_diff_eq!(traj.velocity(k)[0], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn direct_rejects_tiny_grids() {
        let (loss, gain) = unit_oscillator();
        let bc = BoundaryConditions::new(kv(&[0.0]), 0.0, kv(&[1.0]), 1.0).unwrap();
        assert!(solve_bvp_direct(&loss, &gain, &bc, 1, &SolverSettings::default()).is_err());
    }

    #[test]
    fn analytic_examples() {
        let sol = analytic_harmonic_solve(&[1.0], &[0.0], 0.0, &[1.0], FRAC_PI_2).unwrap();
        assert_abs_diff_eq!(sol.modes[0].amplitude, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.modes[0].phase_shift, 0.0, epsilon = 1e-14);

        let sol = analytic_harmonic_solve(&[1.0], &[0.0], 0.3, &[0.0], 0.3 + FRAC_PI_2).unwrap();
        assert_eq!(sol.modes[0].amplitude, 0.0);

        let err = analytic_harmonic_solve(&[1.0], &[0.0], 0.0, &[0.5], PI).unwrap_err();
        assert!(matches!(err, KpiError::DegenerateInterval { .. }));
        let err = analytic_harmonic_solve(&[0.0], &[0.0], 0.0, &[0.5], 1.0).unwrap_err();
        assert!(matches!(err, KpiError::ZeroFrequency { mode: 0 }));
    }

    #[test]
    fn phase_shift_lies_in_one_period() {
        let sol = analytic_harmonic_solve(&[2.0], &[-0.3], 1.0, &[0.2], 2.0).unwrap();
        let m = sol.modes[0];
        assert!(m.amplitude >= 0.0);
        assert!(m.phase_shift >= 0.0 && m.phase_shift < PI);
        assert_abs_diff_eq!(m.position(1.0), -0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(m.position(2.0), 0.2, epsilon = 1e-12);
    }
}
