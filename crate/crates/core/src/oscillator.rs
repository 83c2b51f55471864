//! Perturbed modal dynamics: forcing, stiffness modulation, damping.
//!
//! In whitened modal coordinates every mode obeys
//!
//! ```text
//! ÿᵢ + (ωᵢ² − mᵢ(t))·yᵢ + Σₖ qᵢₖ·ẏₖ + Σₖ pᵢₖ(t)·yₖ + fᵢ(t) = 0
//! ```
//!
//! with sinusoidal forcing `f`, stiffness modulation `m`, constant damping `q`
//! and sinusoidal cross stiffness `p`. These forces are not conservative, so
//! runs use classical RK4 rather than Verlet.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KpiError, Result};
use crate::model::{step_count, Trajectory};
use crate::transforms::symmetric_eigen;

/// `amplitude · sin(frequency·t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Sinusoid {
    pub fn new(amplitude: f64, frequency: f64, phase: f64) -> Self {
        Sinusoid {
            amplitude,
            frequency,
            phase,
        }
    }

    /// A time-independent term of the given value.
    pub fn constant(value: f64) -> Self {
        Sinusoid::new(value, 0.0, PI / 2.0)
    }

    pub fn value(&self, t: f64) -> f64 {
        self.amplitude * (self.frequency * t + self.phase).sin()
    }

    fn is_finite(&self) -> bool {
        self.amplitude.is_finite() && self.frequency.is_finite() && self.phase.is_finite()
    }
}

/// `pᵢₖ(t) = matrixᵢₖ · sin(frequency·t + phase)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossStiffness {
    pub matrix: DMatrix<f64>,
    pub frequency: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Perturbation {
    /// Per-mode forcing `fᵢ(t)`; empty means none.
    pub forcing: Vec<Option<Sinusoid>>,
    /// Per-mode modulation `ωᵢ² → ωᵢ² − aᵢ·sin(νt + φ)`; empty means none.
    pub stiffness_modulation: Vec<Option<Sinusoid>>,
    /// Constant damping matrix `q`. Positive definite dissipates, negative
    /// definite pumps energy in.
    pub damping: Option<DMatrix<f64>>,
    pub cross_stiffness: Option<CrossStiffness>,
}

impl Perturbation {
    pub fn none() -> Self {
        Perturbation::default()
    }

    pub fn damping(q: DMatrix<f64>) -> Self {
        Perturbation {
            damping: Some(q),
            ..Default::default()
        }
    }

    pub fn forcing(terms: Vec<Option<Sinusoid>>) -> Self {
        Perturbation {
            forcing: terms,
            ..Default::default()
        }
    }

    pub fn modulation(terms: Vec<Option<Sinusoid>>) -> Self {
        Perturbation {
            stiffness_modulation: terms,
            ..Default::default()
        }
    }

    pub fn validate(&self, frequencies: &[f64]) -> Result<()> {
        let n = frequencies.len();
        for (name, terms) in [("forcing", &self.forcing), ("stiffness_modulation", &self.stiffness_modulation)] {
            if !terms.is_empty() {
                check_dim(n, terms.len())?;
            }
            if terms.iter().flatten().any(|s| !s.is_finite()) {
                return Err(KpiError::InvalidArgument(format!("{name} has non-finite parameters")));
            }
        }
        for (i, m) in self.stiffness_modulation.iter().enumerate() {
            if let Some(m) = m {
                let w2 = frequencies[i] * frequencies[i];
                if m.amplitude.abs() >= w2 {
                    return Err(KpiError::InvalidArgument(format!(
                        "modulation amplitude {} on mode {} must stay below ω² = {w2}",
                        m.amplitude,
                        i + 1
                    )));
                }
            }
        }
        for (name, m) in [
            ("damping", self.damping.as_ref()),
            ("cross_stiffness", self.cross_stiffness.as_ref().map(|c| &c.matrix)),
        ] {
            if let Some(m) = m {
                if m.nrows() != n || m.ncols() != n {
                    return Err(KpiError::DimensionMismatch {
                        expected: n,
                        found: m.nrows().max(m.ncols()),
                    });
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(KpiError::InvalidArgument(format!("{name} has non-finite entries")));
                }
            }
        }
        if let Some(c) = &self.cross_stiffness {
            if !(c.frequency.is_finite() && c.phase.is_finite()) {
                return Err(KpiError::InvalidArgument("cross_stiffness has non-finite parameters".into()));
            }
        }
        Ok(())
    }

    /// True when the damping has an anti-dissipative direction. Such runs
    /// have no profit-optimal interpretation and are labelled simulation-only.
    pub fn is_anti_dissipative(&self) -> bool {
        let Some(q) = &self.damping else {
            return false;
        };
        let n = q.nrows();
        let sym = DMatrix::from_fn(n, n, |i, j| 0.5 * (q[(i, j)] + q[(j, i)]));
        match symmetric_eigen(&sym) {
            Ok(eig) => eig.eigenvalues.iter().any(|&l| l < 0.0),
            Err(_) => true,
        }
    }

    fn acceleration(&self, omega2: &[f64], t: f64, y: &[f64], v: &[f64], out: &mut [f64]) {
        let n = y.len();
        for i in 0..n {
            let mut k = omega2[i];
            if let Some(Some(m)) = self.stiffness_modulation.get(i) {
                k -= m.value(t);
            }
            out[i] = -k * y[i];
            if let Some(Some(f)) = self.forcing.get(i) {
                out[i] -= f.value(t);
            }
        }
        if let Some(q) = &self.damping {
            for i in 0..n {
                out[i] -= (0..n).map(|k| q[(i, k)] * v[k]).sum::<f64>();
            }
        }
        if let Some(c) = &self.cross_stiffness {
            let s = (c.frequency * t + c.phase).sin();
            for i in 0..n {
                out[i] -= s * (0..n).map(|k| c.matrix[(i, k)] * y[k]).sum::<f64>();
            }
        }
    }
}

/// RK4 run in modal coordinates with its energy series
/// `E = ½Σẏᵢ² + ½Σωᵢ²yᵢ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub trajectory: Trajectory,
    pub energy: Vec<f64>,
    pub simulation_only: bool,
}

fn modal_energy(omega2: &[f64], y: &[f64], v: &[f64]) -> f64 {
    0.5 * y
        .iter()
        .zip(v)
        .zip(omega2)
        .map(|((y, v), w2)| v * v + w2 * y * y)
        .sum::<f64>()
}

/// Largest admissible step: `(2π/max ω)/50`.
pub fn max_step(frequencies: &[f64]) -> f64 {
    let w = frequencies.iter().fold(0.0_f64, |m, &w| m.max(w.abs()));
    if w == 0.0 {
        f64::INFINITY
    } else {
        2.0 * PI / w / 50.0
    }
}

pub fn simulate_perturbed(
    frequencies: &[f64],
    perturbation: &Perturbation,
    y0: &[f64],
    v0: &[f64],
    t_span: (f64, f64),
    dt: f64,
) -> Result<SimulationRun> {
    let n = frequencies.len();
    if n == 0 {
        return Err(KpiError::InvalidArgument("need at least one mode".into()));
    }
    if frequencies.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(KpiError::InvalidArgument("frequencies must be finite and non-negative".into()));
    }
    check_dim(n, y0.len())?;
    check_dim(n, v0.len())?;
    perturbation.validate(frequencies)?;
    let bound = max_step(frequencies);
    if !(dt > 0.0 && dt <= bound) {
        return Err(KpiError::InvalidStep { dt, bound });
    }
    let steps = step_count(t_span.1 - t_span.0, dt)?;
    let h = (t_span.1 - t_span.0) / steps as f64;
    let omega2: Vec<f64> = frequencies.iter().map(|w| w * w).collect();

    let m = steps + 1;
    let mut states = Vec::with_capacity(m * n);
    let mut velocities = Vec::with_capacity(m * n);
    let mut energy = Vec::with_capacity(m);
    let mut y = y0.to_vec();
    let mut v = v0.to_vec();
    states.extend_from_slice(&y);
    velocities.extend_from_slice(&v);
    energy.push(modal_energy(&omega2, &y, &v));

    let mut k1a = vec![0.0; n];
    let mut k2a = vec![0.0; n];
    let mut k3a = vec![0.0; n];
    let mut k4a = vec![0.0; n];
    let mut ys = vec![0.0; n];
    let mut vs = vec![0.0; n];
    let (mut k2v, mut k3v, mut k4v) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for s in 0..steps {
        let t = t_span.0 + s as f64 * h;
        perturbation.acceleration(&omega2, t, &y, &v, &mut k1a);

        for i in 0..n {
            ys[i] = y[i] + 0.5 * h * v[i];
            vs[i] = v[i] + 0.5 * h * k1a[i];
        }
        k2v.copy_from_slice(&vs);
        perturbation.acceleration(&omega2, t + 0.5 * h, &ys, &vs, &mut k2a);

        for i in 0..n {
            ys[i] = y[i] + 0.5 * h * k2v[i];
            vs[i] = v[i] + 0.5 * h * k2a[i];
        }
        k3v.copy_from_slice(&vs);
        perturbation.acceleration(&omega2, t + 0.5 * h, &ys, &vs, &mut k3a);

        for i in 0..n {
            ys[i] = y[i] + h * k3v[i];
            vs[i] = v[i] + h * k3a[i];
        }
        k4v.copy_from_slice(&vs);
        perturbation.acceleration(&omega2, t + h, &ys, &vs, &mut k4a);

        for i in 0..n {
            y[i] += h / 6.0 * (v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
            v[i] += h / 6.0 * (k1a[i] + 2.0 * k2a[i] + 2.0 * k3a[i] + k4a[i]);
        }
        if y.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(KpiError::InvalidArgument(format!(
                "simulation overflowed at t = {}",
                t + h
            )));
        }
        states.extend_from_slice(&y);
        velocities.extend_from_slice(&v);
        energy.push(modal_energy(&omega2, &y, &v));
    }
    let trajectory = Trajectory::new(n, Trajectory::uniform_times(t_span.0, h, m), states, velocities)?;
    Ok(SimulationRun {
        trajectory,
        energy,
        simulation_only: perturbation.is_anti_dissipative(),
    })
}

/// Parallelism and step control for sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    /// Integration step; `None` picks 1/100 of the shortest period involved.
    pub dt: Option<f64>,
    /// Worker threads; 1 runs sequentially.
    pub jobs: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { dt: None, jobs: 1 }
    }
}

fn map_grid<T: Send>(jobs: usize, grid: &[f64], f: impl Fn(f64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if jobs <= 1 {
        return grid.iter().map(|&g| f(g)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| KpiError::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| grid.par_iter().map(|&g| f(g)).collect())
}

/// Peak `|yᵢ|` per mode for each forcing frequency of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub grid: Vec<f64>,
    /// `peaks[g][i]`: peak of mode `i` under forcing at `grid[g]`.
    pub peaks: Vec<Vec<f64>>,
}

impl ResponseCurve {
    /// Largest modal peak per grid point.
    pub fn max_response(&self) -> Vec<f64> {
        self.peaks.iter().map(|p| p.iter().fold(0.0, |m: f64, &v| m.max(v))).collect()
    }

    /// Grid index maximizing the response of each mode.
    pub fn argmax_per_mode(&self) -> Vec<usize> {
        let n = self.peaks.first().map_or(0, Vec::len);
        (0..n)
            .map(|i| {
                (0..self.grid.len())
                    .max_by(|&a, &b| self.peaks[a][i].total_cmp(&self.peaks[b][i]))
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Drives every mode from rest with `f(t) = a·sin(Ωt)` for each `Ω` of the
/// grid (no damping) and records the peak response.
pub fn resonance_scan(
    frequencies: &[f64],
    forcing_amplitude: f64,
    scan_grid: &[f64],
    duration: f64,
    options: ScanOptions,
) -> Result<ResponseCurve> {
    if scan_grid.is_empty() {
        return Err(KpiError::InvalidArgument("scan grid is empty".into()));
    }
    let n = frequencies.len();
    let top = scan_grid
        .iter()
        .chain(frequencies)
        .fold(0.0_f64, |m, w| m.max(w.abs()));
    let dt = options.dt.unwrap_or(2.0 * PI / top.max(1e-12) / 100.0);
    let peaks = map_grid(options.jobs, scan_grid, |omega| {
        let forcing = vec![Some(Sinusoid::new(forcing_amplitude, omega, 0.0)); n];
        let run = simulate_perturbed(
            frequencies,
            &Perturbation::forcing(forcing),
            &vec![0.0; n],
            &vec![0.0; n],
            (0.0, duration),
            dt,
        )?;
        Ok(peak_per_mode(&run.trajectory))
    })?;
    Ok(ResponseCurve {
        grid: scan_grid.to_vec(),
        peaks,
    })
}

fn peak_per_mode(traj: &Trajectory) -> Vec<f64> {
    let n = traj.dim();
    let mut peaks = vec![0.0_f64; n];
    for k in 0..traj.len() {
        for (p, y) in peaks.iter_mut().zip(traj.state(k)) {
            *p = p.max(y.abs());
        }
    }
    peaks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthEstimate {
    /// Fitted exponent `s` of the envelope `∝ e^{st}`.
    pub exponent: f64,
    /// Standard error of the fitted slope.
    pub fit_residual: f64,
    /// Time window covered by the fitted peaks.
    pub window: (f64, f64),
    /// Number of oscillation periods (one peak each) in the fit.
    pub periods: usize,
}

/// One parametric-pump experiment on a single mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpSpec {
    pub omega: f64,
    pub amplitude: f64,
    pub pump_frequency: f64,
    pub phase: f64,
    pub duration: f64,
    /// `None` uses 1/200 of the natural period.
    pub dt: Option<f64>,
    pub y0: f64,
    pub v0: f64,
}

impl PumpSpec {
    /// Pump at `2ω`, starting from `y = 1`, `ẏ = 0`.
    pub fn at_double_frequency(omega: f64, amplitude: f64, phase: f64, duration: f64) -> Self {
        PumpSpec {
            omega,
            amplitude,
            pump_frequency: 2.0 * omega,
            phase,
            duration,
            dt: None,
            y0: 1.0,
            v0: 0.0,
        }
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    pub fn simulate(&self) -> Result<SimulationRun> {
        let dt = self.dt.unwrap_or(self.period() / 200.0);
        let pert = Perturbation::modulation(vec![Some(Sinusoid::new(
            self.amplitude,
            self.pump_frequency,
            self.phase,
        ))]);
        simulate_perturbed(&[self.omega], &pert, &[self.y0], &[self.v0], (0.0, self.duration), dt)
    }
}

/// Maximum of `|y|` within each complete period window `[t0 + jP, t0 + (j+1)P)`.
pub fn envelope_peaks(times: &[f64], y: &[f64], period: f64) -> Vec<(f64, f64)> {
    let Some(&t0) = times.first() else {
        return Vec::new();
    };
    let t_end = *times.last().expect("non-empty");
    let windows = ((t_end - t0) / period + 1e-9).floor() as usize;
    let mut peaks: Vec<(f64, f64)> = vec![(f64::NAN, -1.0); windows];
    for (&t, &v) in times.iter().zip(y) {
        let j = ((t - t0) / period).floor() as usize;
        if j < windows && v.abs() > peaks[j].1 {
            peaks[j] = (t, v.abs());
        }
    }
    peaks.retain(|p| p.1 >= 0.0);
    peaks
}

/// Least-squares line through `(t, ln peak)`; returns `(slope, stderr)`.
fn fit_log_line(peaks: &[(f64, f64)]) -> (f64, f64) {
    let n = peaks.len() as f64;
    let mean_t = peaks.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_l = peaks.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxx: f64 = peaks.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let sxy: f64 = peaks.iter().map(|p| (p.0 - mean_t) * (p.1.ln() - mean_l)).sum();
    let slope = sxy / sxx;
    let intercept = mean_l - slope * mean_t;
    let sse: f64 = peaks
        .iter()
        .map(|p| (p.1.ln() - intercept - slope * p.0).powi(2))
        .sum();
    let stderr = (sse / (n - 2.0) / sxx).sqrt();
    (slope, stderr)
}

/// Runs the pump experiment and fits the log-envelope.
///
/// A fit fails when the slope's standard error exceeds 10% of its magnitude,
/// unless the magnitude itself is under the `1e-3·ω` noise band (no growth).
pub fn parametric_growth(spec: &PumpSpec) -> Result<GrowthEstimate> {
    if !(spec.omega > 0.0 && spec.omega.is_finite()) {
        return Err(KpiError::ZeroFrequency { mode: 0 });
    }
    if !(spec.amplitude >= 0.0 && spec.amplitude < spec.omega * spec.omega / 5.0) {
        return Err(KpiError::InvalidArgument(format!(
            "pump amplitude {} outside the small-pump range [0, ω²/5)",
            spec.amplitude
        )));
    }
    if spec.duration < 20.0 * spec.period() * (1.0 - 1e-12) {
        return Err(KpiError::InvalidArgument(format!(
            "duration {} is shorter than 20 periods",
            spec.duration
        )));
    }
    if spec.y0 == 0.0 && spec.v0 == 0.0 {
        return Err(KpiError::InvalidArgument("a resting oscillator has no envelope".into()));
    }
    let run = spec.simulate()?;
    let traj = &run.trajectory;
    let y: Vec<f64> = (0..traj.len()).map(|k| traj.state(k)[0]).collect();
    let peaks = envelope_peaks(traj.times(), &y, spec.period());
    if peaks.len() < 10 || peaks.iter().any(|p| p.1 <= 0.0) {
        return Err(KpiError::FitFailed {
            slope: f64::NAN,
            stderr: f64::NAN,
        });
    }
    let (slope, stderr) = fit_log_line(&peaks);
    let noise_band = 1e-3 * spec.omega;
    if !slope.is_finite() || (stderr > 0.1 * slope.abs() && slope.abs() >= noise_band) {
        return Err(KpiError::FitFailed { slope, stderr });
    }
    Ok(GrowthEstimate {
        exponent: slope,
        fit_residual: stderr,
        window: (peaks[0].0, peaks[peaks.len() - 1].0),
        periods: peaks.len(),
    })
}

/// Growth exponent for a pump at `2ω` starting from `y = 1`, `ẏ = 0`.
pub fn parametric_growth_rate(omega: f64, amplitude: f64, phase: f64, duration: f64) -> Result<GrowthEstimate> {
    parametric_growth(&PumpSpec::at_double_frequency(omega, amplitude, phase, duration))
}

/// Which pump parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PumpAxis {
    Frequency,
    Phase,
}

/// Growth exponents across a sweep of pump frequencies or phases, other
/// settings taken from `base`. Points whose envelope fit fails are `None`.
pub fn parametric_scan(
    base: &PumpSpec,
    grid: &[f64],
    axis: PumpAxis,
    jobs: usize,
) -> Result<Vec<Option<GrowthEstimate>>> {
    map_grid(jobs, grid, |g| {
        let spec = match axis {
            PumpAxis::Frequency => PumpSpec {
                pump_frequency: g,
                ..*base
            },
            PumpAxis::Phase => PumpSpec { phase: g, ..*base },
        };
        match parametric_growth(&spec) {
            Ok(est) => Ok(Some(est)),
            Err(KpiError::FitFailed { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceClass {
    Constructive,
    Destructive,
    Neutral,
}

/// Sign of the least-squares trend of `E(t)`, relative to `rel_threshold·Ē/span`.
pub fn classify_force(times: &[f64], energy: &[f64], rel_threshold: f64) -> Result<ForceClass> {
    check_dim(times.len(), energy.len())?;
    if times.len() < 3 {
        return Err(KpiError::InvalidArgument("need at least 3 energy samples".into()));
    }
    let n = times.len() as f64;
    let mean_t = times.iter().sum::<f64>() / n;
    let mean_e = energy.iter().sum::<f64>() / n;
    let sxx: f64 = times.iter().map(|t| (t - mean_t).powi(2)).sum();
    let sxy: f64 = times.iter().zip(energy).map(|(t, e)| (t - mean_t) * (e - mean_e)).sum();
    let slope = sxy / sxx;
    let span = times[times.len() - 1] - times[0];
    let threshold = rel_threshold * mean_e.abs() / span;
    Ok(if slope > threshold {
        ForceClass::Constructive
    } else if slope < -threshold {
        ForceClass::Destructive
    } else {
        ForceClass::Neutral
    })
}

/// First time any modal coordinate leaves `[−radius, radius]`.
pub fn escape_time(radius: f64, modal: &Trajectory) -> Result<Option<f64>> {
    if !(radius > 0.0) {
        return Err(KpiError::InvalidArgument(format!("well radius must be positive, got {radius}")));
    }
    Ok((0..modal.len())
        .find(|&k| modal.state(k).iter().any(|y| y.abs() > radius))
        .map(|k| modal.times()[k]))
}
