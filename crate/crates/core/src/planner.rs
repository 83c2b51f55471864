//! Operational planning: the next KPI target from the current and previous ones.
//!
//! Replacing `ẍ` in `2K·ẍ = −∇U` by the second difference over the planning
//! interval and solving for the future point gives the explicit recurrence
//!
//! ```text
//! x(t+Δt) = 2·x(t) − x(t−Δt) − Δt²·(2K)⁻¹·∇U(x(t))
//! ```
//!
//! which is the leapfrog step of the equations of motion. A rest start uses
//! `x_prev = x_curr`.

use std::f64::consts::PI;

use crate::error::{check_dim, KpiError, Result};
use crate::model::{GainModel, KpiVector, LossModel, Trajectory};
use crate::transforms::ModalBasis;
use crate::variational::verlet_velocities;

#[derive(Debug, Clone, PartialEq)]
pub struct PlanState {
    pub x_prev: KpiVector,
    pub x_curr: KpiVector,
    pub dt: f64,
}

impl PlanState {
    pub fn new(x_prev: KpiVector, x_curr: KpiVector, dt: f64) -> Result<Self> {
        check_dim(x_prev.dim(), x_curr.dim())?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(KpiError::InvalidArgument(format!("planning interval must be positive, got {dt}")));
        }
        Ok(PlanState { x_prev, x_curr, dt })
    }

    /// Cold start from rest.
    pub fn at_rest(x: KpiVector, dt: f64) -> Result<Self> {
        PlanState::new(x.clone(), x, dt)
    }
}

fn step(loss: &LossModel, gain: &GainModel, prev: &[f64], curr: &[f64], dt: f64, out: &mut [f64]) -> Result<()> {
    gain.gradient_into(curr, out)?;
    loss.mass_solve_in_place(out);
    let dt2 = dt * dt;
    for i in 0..out.len() {
        out[i] = 2.0 * curr[i] - prev[i] - dt2 * out[i];
    }
    Ok(())
}

pub fn next_kpi(loss: &LossModel, gain: &GainModel, state: &PlanState) -> Result<KpiVector> {
    let n = loss.dim();
    check_dim(n, state.x_curr.dim())?;
    gain.ensure_dim(n)?;
    let mut out = vec![0.0; n];
    step(loss, gain, &state.x_prev, &state.x_curr, state.dt, &mut out)?;
    KpiVector::new(out)
}

/// Iterates [`next_kpi`] `steps` times.
///
/// The returned trajectory holds `x_prev` at `t = −Δt`, `x_curr` at `t = 0`
/// and the planned points after it; velocities are central differences
/// `(xₖ₊₁ − xₖ₋₁)/(2Δt)`, with half-step corrected ends.
pub fn plan_horizon(loss: &LossModel, gain: &GainModel, state: &PlanState, steps: usize) -> Result<Trajectory> {
    if steps == 0 {
        return Err(KpiError::InvalidArgument("plan needs at least one step".into()));
    }
    let n = loss.dim();
    check_dim(n, state.x_curr.dim())?;
    gain.ensure_dim(n)?;
    let m = steps + 2;
    let mut states = Vec::with_capacity(m * n);
    states.extend_from_slice(&state.x_prev);
    states.extend_from_slice(&state.x_curr);
    let mut next = vec![0.0; n];
    for k in 2..m {
        let (prev, curr) = (&states[(k - 2) * n..(k - 1) * n], &states[(k - 1) * n..k * n]);
        step(loss, gain, prev, curr, state.dt, &mut next)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(KpiError::InvalidArgument(format!("plan diverged at step {}", k - 1)));
        }
        states.extend_from_slice(&next);
    }
    let velocities = verlet_velocities(loss, gain, &states, n, state.dt)?;
    Trajectory::new(n, Trajectory::uniform_times(-state.dt, state.dt, m), states, velocities)
}

/// First-order planning from the harmonic invariants: amplitudes and phase
/// shifts at `(x, v, t)` are held fixed and every mode is advanced to `t + Δt`.
/// Returns the planned state and velocity.
pub fn phase_advance(basis: &ModalBasis, x: &[f64], v: &[f64], t: f64, dt: f64) -> Result<(KpiVector, KpiVector)> {
    let y = basis.to_modal(x)?;
    let w = basis.velocity_to_modal(v)?;
    let n = basis.dim();
    let mut y_next = vec![0.0; n];
    let mut w_next = vec![0.0; n];
    for i in 0..n {
        let omega = basis.frequencies[i];
        if !(omega > 1e-12) {
            return Err(KpiError::ZeroFrequency { mode: i });
        }
        let a = y[i].hypot(w[i] / omega);
        let c = t - (y[i] * omega).atan2(w[i]) / omega;
        let phase = (omega * (t + dt - c)).rem_euclid(2.0 * PI);
        y_next[i] = a * phase.sin();
        w_next[i] = a * omega * phase.cos();
    }
    Ok((basis.from_modal(&y_next)?, basis.velocity_from_modal(&w_next)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuadraticWell;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn kv(v: &[f64]) -> KpiVector {
        KpiVector::new(v.to_vec()).unwrap()
    }

    fn well_2d() -> (LossModel, GainModel) {
        let loss = LossModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.7])).unwrap();
        let well = QuadraticWell::new(1.0, kv(&[0.5, -0.5]), DMatrix::from_row_slice(2, 2, &[3.0, 0.4, 0.4, 2.0])).unwrap();
        (loss, GainModel::QuadraticWell(well))
    }

    #[test]
    fn center_is_a_fixed_point() {
        let (loss, gain) = well_2d();
        let s = PlanState::at_rest(kv(&[0.5, -0.5]), 0.1).unwrap();
        assert_eq!(next_kpi(&loss, &gain, &s).unwrap().as_slice(), &[0.5, -0.5]);
    }

    #[test]
    fn constant_gain_continues_drift() {
        let loss = LossModel::new(DMatrix::identity(2, 2)).unwrap();
        let gain = GainModel::Constant { u0: 4.0 };
        let s = PlanState::new(kv(&[0.0, 1.0]), kv(&[0.5, 1.5]), 0.3).unwrap();
        assert_eq!(next_kpi(&loss, &gain, &s).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn single_step_horizon_matches_next_kpi() {
        let (loss, gain) = well_2d();
        let s = PlanState::new(kv(&[1.0, 0.0]), kv(&[1.1, 0.05]), 0.05).unwrap();
        let traj = plan_horizon(&loss, &gain, &s, 1).unwrap();
        assert_eq!(traj.len(), 3);
        assert_eq!(traj.last_state(), next_kpi(&loss, &gain, &s).unwrap().as_slice());
        assert!(plan_horizon(&loss, &gain, &s, 0).is_err());
    }

    #[test]
    fn recurrence_is_time_reversible() {
        let (loss, gain) = well_2d();
        let s = PlanState::new(kv(&[1.0, 0.0]), kv(&[1.1, 0.05]), 0.05).unwrap();
        let next = next_kpi(&loss, &gain, &s).unwrap();
        let back = next_kpi(&loss, &gain, &PlanState::new(next, s.x_curr.clone(), s.dt).unwrap()).unwrap();
        assert_abs_diff_eq!(back.as_slice(), s.x_prev.as_slice(), epsilon = 1e-12);
    }

    #[test]
    fn stationary_exactly_at_gradient_zero() {
        let (loss, gain) = well_2d();
        let s = PlanState::at_rest(kv(&[0.6, -0.5]), 0.1).unwrap();
        assert_ne!(next_kpi(&loss, &gain, &s).unwrap().as_slice(), s.x_curr.as_slice());
    }

    #[test]
    fn phase_advance_follows_the_sine() {
        let loss = LossModel::new(DMatrix::from_element(1, 1, 0.5)).unwrap();
        let well = QuadraticWell::new(0.0, KpiVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let basis = crate::transforms::modal_basis(&loss, &well).unwrap();
        let t: f64 = 0.7;
        let (x, v) = phase_advance(&basis, &[t.sin()], &[t.cos()], t, 0.25).unwrap();
        assert_abs_diff_eq!(x[0], (t + 0.25).sin(), epsilon = 1e-14);
        assert_abs_diff_eq!(v[0], (t + 0.25).cos(), epsilon = 1e-14);
    }
}
