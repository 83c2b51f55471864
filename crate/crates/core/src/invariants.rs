//! Conserved quantities along trajectories and drift alarms.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KpiError, Result};
use crate::model::{GainModel, LossModel, Trajectory};
use crate::transforms::ModalBasis;
use crate::variational::{el_residual, wrap_phase};

/// Relative deviations are measured against `max(|reference|, DRIFT_FLOOR)`.
pub const DRIFT_FLOOR: f64 = 1e-30;

/// Amplitudes at or below this are treated as rest; their phase is reported as 0.
pub const REST_AMPLITUDE: f64 = 1e-12;

/// `E = v·∂K/∂v − K + U`, the defining form of business power.
pub fn power_general(loss: &LossModel, gain: &GainModel, x: &[f64], v: &[f64]) -> Result<f64> {
    let p = loss.velocity_gradient(v)?;
    let k = loss.evaluate(v)?;
    let pv: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(pv - k + gain.evaluate(x)?)
}

/// `E(tₖ) = U(xₖ) + K(vₖ)`, the reduced form valid for a quadratic loss.
pub fn power_series(loss: &LossModel, gain: &GainModel, traj: &Trajectory) -> Result<Vec<f64>> {
    check_dim(loss.dim(), traj.dim())?;
    gain.ensure_dim(traj.dim())?;
    (0..traj.len())
        .map(|k| {
            let (x, v) = (traj.state(k), traj.velocity(k));
            let e = gain.evaluate(x)? + loss.quad(v);
            debug_assert!({
                let g = power_general(loss, gain, x, v)?;
                (g - e).abs() <= 1e-12 * e.abs().max(1.0)
            });
            Ok(e)
        })
        .collect()
}

/// Amplitude and phase-shift series of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSeries {
    pub frequency: f64,
    pub amplitude: Vec<f64>,
    pub phase_shift: Vec<f64>,
    /// `false` where the mode is at rest and the phase carries no information.
    pub phase_defined: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalInvariants {
    pub times: Vec<f64>,
    pub modes: Vec<ModeSeries>,
}

/// `a = √(y² + (ẏ/ω)²)` and `c = t − atan2(yω, ẏ)/ω mod 2π/ω` for a
/// trajectory already expressed in modal coordinates.
pub fn modal_invariants(frequencies: &[f64], modal: &Trajectory) -> Result<ModalInvariants> {
    check_dim(frequencies.len(), modal.dim())?;
    if let Some(i) = frequencies.iter().position(|&w| !(w > 1e-12)) {
        return Err(KpiError::ZeroFrequency { mode: i });
    }
    let m = modal.len();
    let mut modes: Vec<ModeSeries> = frequencies
        .iter()
        .map(|&frequency| ModeSeries {
            frequency,
            amplitude: Vec::with_capacity(m),
            phase_shift: Vec::with_capacity(m),
            phase_defined: Vec::with_capacity(m),
        })
        .collect();
    for k in 0..m {
        let t = modal.times()[k];
        let (y, v) = (modal.state(k), modal.velocity(k));
        for (i, mode) in modes.iter_mut().enumerate() {
            let w = mode.frequency;
            let a = y[i].hypot(v[i] / w);
            let defined = a > REST_AMPLITUDE;
            let c = if defined {
                wrap_phase(t - (y[i] * w).atan2(v[i]) / w, 2.0 * PI / w)
            } else {
                0.0
            };
            mode.amplitude.push(a);
            mode.phase_shift.push(c);
            mode.phase_defined.push(defined);
        }
    }
    Ok(ModalInvariants {
        times: modal.times().to_vec(),
        modes,
    })
}

/// Maps a raw-coordinate trajectory into the basis' modal coordinates.
pub fn to_modal_trajectory(basis: &ModalBasis, traj: &Trajectory) -> Result<Trajectory> {
    check_dim(basis.dim(), traj.dim())?;
    let n = traj.dim();
    let mut states = Vec::with_capacity(traj.len() * n);
    let mut velocities = Vec::with_capacity(traj.len() * n);
    for k in 0..traj.len() {
        states.extend(basis.to_modal(traj.state(k))?.into_vec());
        velocities.extend(basis.velocity_to_modal(traj.velocity(k))?.into_vec());
    }
    Trajectory::new(n, traj.times().to_vec(), states, velocities)
}

/// Per-mode harmonic invariants of a raw-coordinate trajectory.
pub fn harmonic_invariants(basis: &ModalBasis, traj: &Trajectory) -> Result<ModalInvariants> {
    let modal = to_modal_trajectory(basis, traj)?;
    modal_invariants(&basis.frequencies, &modal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub time: f64,
    pub invariant: String,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub times: Vec<f64>,
    pub power_series: Vec<f64>,
    /// `‖D‖` at interior samples (two shorter than `times`).
    pub residual_series: Vec<f64>,
    pub modal_series: Option<ModalInvariants>,
    /// Largest relative deviation of `E` from `E(0)`.
    pub drift: f64,
    pub alarms: Vec<Alarm>,
    /// Set when the series comes from non-conservative dynamics that the
    /// variational machinery does not describe.
    #[serde(default)]
    pub simulation_only: bool,
}

fn relative_drift(series: &[f64]) -> f64 {
    let Some(&first) = series.first() else {
        return 0.0;
    };
    let scale = first.abs().max(DRIFT_FLOOR);
    series.iter().fold(0.0, |m, e| m.max((e - first).abs() / scale))
}

impl InvariantReport {
    /// Full report for a trajectory under a model; modal series are added
    /// when a basis is supplied. Alarms use `rel_tol`.
    pub fn build(
        loss: &LossModel,
        gain: &GainModel,
        traj: &Trajectory,
        basis: Option<&ModalBasis>,
        rel_tol: f64,
    ) -> Result<Self> {
        let power_series = power_series(loss, gain, traj)?;
        let residual_series = if traj.len() >= 3 {
            el_residual(loss, gain, traj)?.norms()
        } else {
            Vec::new()
        };
        let modal_series = basis.map(|b| harmonic_invariants(b, traj)).transpose()?;
        let mut report = InvariantReport {
            times: traj.times().to_vec(),
            drift: relative_drift(&power_series),
            power_series,
            residual_series,
            modal_series,
            alarms: Vec::new(),
            simulation_only: false,
        };
        report.alarms = drift_alarm(&report, rel_tol)?;
        Ok(report)
    }

    /// Report over a bare power series, e.g. from a perturbed simulation.
    pub fn from_power_series(times: Vec<f64>, power_series: Vec<f64>) -> Result<Self> {
        check_dim(times.len(), power_series.len())?;
        Ok(InvariantReport {
            drift: relative_drift(&power_series),
            times,
            power_series,
            residual_series: Vec::new(),
            modal_series: None,
            alarms: Vec::new(),
            simulation_only: false,
        })
    }
}

/// Earliest crossing of `rel_tol` for each tracked invariant.
///
/// Tracks `E`, every mode amplitude `a_i` (relative to its initial value) and
/// every defined phase shift `c_i` (circular deviation as a fraction of the
/// mode period). Alarms are ordered by time, then by name.
pub fn drift_alarm(report: &InvariantReport, rel_tol: f64) -> Result<Vec<Alarm>> {
    if !(rel_tol > 0.0) {
        return Err(KpiError::InvalidArgument(format!("rel_tol must be positive, got {rel_tol}")));
    }
    let mut alarms = Vec::new();
    let mut first_crossing = |name: String, deviations: &mut dyn Iterator<Item = (f64, f64)>| {
        if let Some((time, deviation)) = deviations.filter(|&(_, d)| d > rel_tol).next() {
            alarms.push(Alarm {
                time,
                invariant: name,
                deviation,
            });
        }
    };

    if let Some(&e0) = report.power_series.first() {
        let scale = e0.abs().max(DRIFT_FLOOR);
        let mut it = report
            .times
            .iter()
            .zip(&report.power_series)
            .map(|(&t, &e)| (t, (e - e0).abs() / scale));
        first_crossing("E".to_string(), &mut it);
    }
    if let Some(modal) = &report.modal_series {
        for (i, mode) in modal.modes.iter().enumerate() {
            let a0 = mode.amplitude[0];
            let scale = a0.abs().max(DRIFT_FLOOR);
            let mut it = modal
                .times
                .iter()
                .zip(&mode.amplitude)
                .map(|(&t, &a)| (t, (a - a0).abs() / scale));
            first_crossing(format!("a_{}", i + 1), &mut it);

            if mode.phase_defined[0] {
                let period = 2.0 * PI / mode.frequency;
                let c0 = mode.phase_shift[0];
                let mut it = modal
                    .times
                    .iter()
                    .zip(&mode.phase_shift)
                    .zip(&mode.phase_defined)
                    .filter(|(_, &d)| d)
                    .map(|((&t, &c), _)| {
                        let d = (c - c0).rem_euclid(period);
                        (t, d.min(period - d) / period)
                    });
                first_crossing(format!("c_{}", i + 1), &mut it);
            }
        }
    }
    alarms.sort_by(|a, b| a.time.total_cmp(&b.time).then_with(|| a.invariant.cmp(&b.invariant)));
    Ok(alarms)
}
