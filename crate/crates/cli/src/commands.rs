//! Subcommand definitions and their implementations.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use kpidyn_core::io::{self, Model, PerturbationFile};
use kpidyn_core::model::step_count;
use kpidyn_core::{
    classify_force, compute_profit, drift_alarm, eigenlosses, el_residual, modal_basis, parametric_scan,
    plan_horizon, resonance_scan, simulate_perturbed, solve_bvp_direct, solve_bvp_shooting, InvariantReport,
    KpiError, ModalBasis, PlanState, PumpAxis, PumpSpec, Result, ScanOptions, SolverSettings,
};

use crate::manifest::{write_file_atomic, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "kpidyn", version, about = "Least-action dynamics for business KPIs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print eigenlosses, eigenfrequencies and rotation matrices.
    Eig(EigArgs),
    /// Solve the model's boundary problem and write the trajectory CSV.
    Solve(SolveArgs),
    /// Iterate the planning recurrence from two known KPI vectors.
    Plan(PlanArgs),
    /// Simulate perturbed modal dynamics.
    Simulate(SimulateArgs),
    /// Sweep forcing or pump frequencies and write a response curve.
    Scan(ScanArgs),
    /// Print the invariant report of a trajectory as JSON.
    Invariants(InvariantsArgs),
    /// Print the profit of a trajectory.
    Profit(ProfitArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Text,
}

#[derive(Args, Debug, Serialize)]
pub struct EigArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Shooting,
    Direct,
}

#[derive(Args, Debug, Serialize)]
pub struct SolveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "shooting")]
    pub method: Method,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long, default_value = "traj.csv")]
    pub out: PathBuf,
    /// Terminal-state tolerance; defaults to 1e-8·(1 + ‖x2‖).
    #[arg(long)]
    pub shooting_tol: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub max_newton_iters: usize,
    #[arg(long, default_value_t = 5000)]
    pub direct_max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub direct_grad_tol: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct PlanArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// KPI vector at t − Δt (JSON array or {"values": [...]}).
    #[arg(long)]
    pub prev: PathBuf,
    /// KPI vector at t.
    #[arg(long)]
    pub curr: PathBuf,
    #[arg(long)]
    pub dt: f64,
    #[arg(long)]
    pub steps: usize,
    #[arg(long, default_value = "plan.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    /// Model with a quadratic_well gain; its eigenfrequencies define the modes.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub perturb: PathBuf,
    /// Duration of the run.
    #[arg(long = "t")]
    pub duration: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long, default_value_t = 0.0)]
    pub t0: f64,
    /// Initial modal positions; overrides the perturbation file. Defaults to rest.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub y0: Option<Vec<f64>>,
    /// Initial modal velocities.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub v0: Option<Vec<f64>>,
    #[arg(long, default_value = "run.csv")]
    pub out: PathBuf,
    /// Relative drift that raises an energy alarm.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Relative slope threshold for classifying the force.
    #[arg(long, default_value_t = 0.1)]
    pub classify_threshold: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanKind {
    Forcing,
    Parametric,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Over {
    Frequency,
    Phase,
}

#[derive(Args, Debug, Serialize)]
pub struct ScanArgs {
    #[arg(long, value_enum)]
    pub kind: ScanKind,
    /// Model with a quadratic_well gain; alternative to --omega.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Natural frequencies, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub omega: Option<Vec<f64>>,
    /// Forcing amplitude (default 0.01) or pump amplitude (default 0.1).
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub from: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub to: Option<f64>,
    #[arg(long)]
    pub points: Option<usize>,
    /// Run length; defaults to 50 periods (forcing) or 100 periods (parametric) of the slowest mode used.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Parametric only: which mode to pump (1-based).
    #[arg(long, default_value_t = 1)]
    pub mode: usize,
    /// Parametric only: pump phase for frequency sweeps.
    #[arg(long, default_value_t = PI, allow_hyphen_values = true)]
    pub phase: f64,
    /// Parametric only: sweep the pump frequency or the pump phase.
    #[arg(long, value_enum, default_value = "frequency")]
    pub over: Over,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "scan.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct InvariantsArgs {
    #[arg(long)]
    pub traj: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct ProfitArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub traj: PathBuf,
}

/// Files touched by one invocation.
struct Session {
    out_dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Session {
    fn model(&mut self, path: &Path) -> Result<Model> {
        self.inputs.push(path.to_path_buf());
        Model::load(path)
    }

    fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    fn resolve(&self, out: &Path) -> PathBuf {
        if out.is_absolute() {
            out.to_path_buf()
        } else {
            self.out_dir.join(out)
        }
    }

    fn write(&mut self, out: &Path, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.resolve(out);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_file_atomic(&path, bytes)?;
        self.outputs.push(path.clone());
        Ok(path)
    }
}

// A closed pipe on stdout (e.g. `| head`) is not an error worth reporting.
fn emit(text: std::fmt::Arguments) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_json(v: &impl Serialize) {
    emit(format_args!("{}", serde_json::to_string_pretty(v).expect("serializable")));
}

fn frequencies_of(model: &Model) -> Result<ModalBasis> {
    let well = model.well().ok_or_else(|| {
        KpiError::InvalidArgument("modal frequencies need a quadratic_well gain model".into())
    })?;
    modal_basis(&model.loss, well)
}

pub fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let out_dir = std::env::var_os("KPIDYN_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    let mut s = Session {
        out_dir: out_dir.clone(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let (name, args, resolved) = match &cli.command {
        Command::Eig(a) => ("eig", to_value(a), eig(a, &mut s)?),
        Command::Solve(a) => ("solve", to_value(a), solve(a, &mut s)?),
        Command::Plan(a) => ("plan", to_value(a), plan(a, &mut s)?),
        Command::Simulate(a) => ("simulate", to_value(a), simulate(a, &mut s)?),
        Command::Scan(a) => ("scan", to_value(a), scan(a, &mut s)?),
        Command::Invariants(a) => ("invariants", to_value(a), invariants(a, &mut s)?),
        Command::Profit(a) => ("profit", to_value(a), profit(a, &mut s)?),
    };
    let config = json!({
        "args": args,
        "resolved": resolved,
        "out_dir": out_dir.display().to_string(),
    });
    RunManifest::new(name, config, &s.inputs, &s.outputs, start.elapsed())?.write_atomic(&out_dir)?;
    Ok(())
}

fn to_value(a: &impl Serialize) -> Value {
    serde_json::to_value(a).expect("serializable")
}

fn eig(a: &EigArgs, s: &mut Session) -> Result<Value> {
    let model = s.model(&a.model)?;
    let losses = eigenlosses(&model.loss)?;
    let basis = model.well().map(|w| modal_basis(&model.loss, w)).transpose()?;
    match a.format {
        Format::Json => print_json(&json!({
            "eigenlosses": losses.eigenvalues,
            "loss_rotation": losses,
            "modal_basis": basis,
        })),
        Format::Text => {
            let row = |v: &[f64]| v.iter().map(|x| format!("{x:>18.10e}")).collect::<String>();
            let matrix = |m: &kpidyn_core::nalgebra::DMatrix<f64>| {
                m.row_iter()
                    .map(|r| format!("  {}", row(&r.iter().copied().collect::<Vec<_>>())))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            emit(format_args!("eigenlosses\n  {}", row(&losses.eigenvalues)));
            emit(format_args!("loss rotation\n{}", matrix(&losses.rotation)));
            if let Some(b) = &basis {
                emit(format_args!("frequencies\n  {}", row(&b.frequencies)));
                emit(format_args!("whitening\n{}", matrix(&b.whitening)));
                emit(format_args!("modal rotation\n{}", matrix(&b.modal_rotation)));
            }
        }
    }
    Ok(Value::Null)
}

fn solve(a: &SolveArgs, s: &mut Session) -> Result<Value> {
    let model = s.model(&a.model)?;
    let bc = model.boundary()?;
    let settings = SolverSettings {
        dt: a.dt,
        shooting_tol: a.shooting_tol,
        max_newton_iters: a.max_newton_iters,
        direct_max_iters: a.direct_max_iters,
        direct_grad_tol: a.direct_grad_tol,
    };
    settings.validate()?;
    let steps = step_count(bc.span(), a.dt)?;
    let traj = match a.method {
        Method::Shooting => solve_bvp_shooting(&model.loss, &model.gain, bc, &settings)?,
        Method::Direct => solve_bvp_direct(&model.loss, &model.gain, bc, steps, &settings)?,
    };
    let mut buf = Vec::new();
    io::write_trajectory_csv(&mut buf, &model.loss, &model.gain, &traj)?;
    let path = s.write(&a.out, &buf)?;
    let residual = el_residual(&model.loss, &model.gain, &traj)?.max_norm();
    print_json(&json!({
        "output": path.display().to_string(),
        "method": a.method,
        "samples": traj.len(),
        "dt": traj.dt(),
        "profit": compute_profit(&model.loss, &model.gain, &traj)?,
        "max_residual_norm": residual,
        "final_state": traj.last_state(),
    }));
    Ok(json!({ "steps": steps, "shooting_tol": settings.shooting_tol_for(&bc.x2) }))
}

fn plan(a: &PlanArgs, s: &mut Session) -> Result<Value> {
    let model = s.model(&a.model)?;
    let prev = io::load_kpi_vector(&s.input(&a.prev))?;
    let curr = io::load_kpi_vector(&s.input(&a.curr))?;
    let state = PlanState::new(prev, curr, a.dt)?;
    let traj = plan_horizon(&model.loss, &model.gain, &state, a.steps)?;
    let mut buf = Vec::new();
    io::write_trajectory_csv(&mut buf, &model.loss, &model.gain, &traj)?;
    let path = s.write(&a.out, &buf)?;
    print_json(&json!({
        "output": path.display().to_string(),
        "steps": a.steps,
        "next": traj.state(2),
        "final_state": traj.last_state(),
    }));
    Ok(Value::Null)
}

fn simulate(a: &SimulateArgs, s: &mut Session) -> Result<Value> {
    let model = s.model(&a.model)?;
    let basis = frequencies_of(&model)?;
    let n = basis.dim();
    let pfile = PerturbationFile::load(&s.input(&a.perturb))?;
    let pert = pfile.to_perturbation(n)?;
    let initial = pfile.initial.as_ref();
    let y0 = a.y0.clone().or_else(|| initial.map(|i| i.y.clone())).unwrap_or_else(|| vec![0.0; n]);
    let v0 = a.v0.clone().or_else(|| initial.map(|i| i.v.clone())).unwrap_or_else(|| vec![0.0; n]);
    let run = simulate_perturbed(&basis.frequencies, &pert, &y0, &v0, (a.t0, a.t0 + a.duration), a.dt)?;
    let mut buf = Vec::new();
    io::write_simulation_csv(&mut buf, &run)?;
    let path = s.write(&a.out, &buf)?;

    let times = run.trajectory.times().to_vec();
    let class = classify_force(&times, &run.energy, a.classify_threshold)?;
    let mut report = InvariantReport::from_power_series(times, run.energy.clone())?;
    report.simulation_only = run.simulation_only;
    let alarms = drift_alarm(&report, a.tol)?;
    print_json(&json!({
        "output": path.display().to_string(),
        "samples": run.trajectory.len(),
        "frequencies": basis.frequencies,
        "simulation_only": run.simulation_only,
        "energy_drift": report.drift,
        "force_class": class,
        "alarms": alarms,
    }));
    Ok(json!({ "frequencies": basis.frequencies, "y0": y0, "v0": v0 }))
}

fn linspace(from: f64, to: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![from];
    }
    (0..points).map(|k| from + (to - from) * k as f64 / (points - 1) as f64).collect()
}

fn scan(a: &ScanArgs, s: &mut Session) -> Result<Value> {
    let frequencies = match (&a.model, &a.omega) {
        (Some(path), None) => frequencies_of(&s.model(path)?)?.frequencies,
        (None, Some(w)) if !w.is_empty() => w.clone(),
        _ => {
            return Err(KpiError::InvalidArgument(
                "give exactly one of --model or --omega".into(),
            ))
        }
    };
    if a.jobs == 0 {
        return Err(KpiError::InvalidArgument("--jobs must be at least 1".into()));
    }
    let w_min = frequencies.iter().cloned().fold(f64::INFINITY, f64::min);
    let w_max = frequencies.iter().cloned().fold(0.0, f64::max);
    if !(w_min > 0.0) {
        return Err(KpiError::ZeroFrequency { mode: 0 });
    }

    let (header, grid, values, resolved) = match a.kind {
        ScanKind::Forcing => {
            let amplitude = a.amplitude.unwrap_or(0.01);
            let grid = linspace(a.from.unwrap_or(0.25 * w_min), a.to.unwrap_or(2.0 * w_max), a.points.unwrap_or(41));
            let duration = a.duration.unwrap_or(50.0 * 2.0 * PI / w_min);
            let curve = resonance_scan(&frequencies, amplitude, &grid, duration, ScanOptions { dt: a.dt, jobs: a.jobs })?;
            let resolved = json!({ "frequencies": frequencies, "amplitude": amplitude, "duration": duration });
            (("frequency", "peak"), grid, curve.max_response(), resolved)
        }
        ScanKind::Parametric => {
            if a.mode == 0 || a.mode > frequencies.len() {
                return Err(KpiError::InvalidArgument(format!(
                    "--mode must be between 1 and {}",
                    frequencies.len()
                )));
            }
            let omega = frequencies[a.mode - 1];
            let amplitude = a.amplitude.unwrap_or(0.1);
            let duration = a.duration.unwrap_or(100.0 * 2.0 * PI / omega);
            let base = PumpSpec {
                dt: a.dt,
                ..PumpSpec::at_double_frequency(omega, amplitude, a.phase, duration)
            };
            let (axis, names, grid) = match a.over {
                Over::Frequency => (
                    PumpAxis::Frequency,
                    ("pump_frequency", "exponent"),
                    linspace(a.from.unwrap_or(1.5 * omega), a.to.unwrap_or(2.5 * omega), a.points.unwrap_or(41)),
                ),
                Over::Phase => {
                    let points = a.points.unwrap_or(8).max(1);
                    let from = a.from.unwrap_or(0.0);
                    let to = a.to.unwrap_or(2.0 * PI);
                    let grid = (0..points).map(|k| from + (to - from) * k as f64 / points as f64).collect();
                    (PumpAxis::Phase, ("pump_phase", "exponent"), grid)
                }
            };
            let fits = parametric_scan(&base, &grid, axis, a.jobs)?;
            let values = fits.iter().map(|f| f.map_or(f64::NAN, |e| e.exponent)).collect();
            let resolved = json!({ "omega": omega, "amplitude": amplitude, "duration": duration, "failed_fits": fits.iter().filter(|f| f.is_none()).count() });
            (names, grid, values, resolved)
        }
    };
    let mut buf = Vec::new();
    io::write_series_csv(&mut buf, header, &grid, &values)?;
    let path = s.write(&a.out, &buf)?;
    print_json(&json!({ "output": path.display().to_string(), "points": grid.len() }));
    Ok(resolved)
}

fn invariants(a: &InvariantsArgs, s: &mut Session) -> Result<Value> {
    let model = s.model(&a.model)?;
    let traj = io::load_trajectory(&s.input(&a.traj))?;
    let basis = model.well().map(|w| modal_basis(&model.loss, w)).transpose()?;
    let report = InvariantReport::build(&model.loss, &model.gain, &traj, basis.as_ref(), a.tol)?;
    print_json(&report);
    Ok(Value::Null)
}

fn profit(a: &ProfitArgs, s: &mut Session) -> Result<Value> {
    let model = s.model(&a.model)?;
    let traj = io::load_trajectory(&s.input(&a.traj))?;
    emit(format_args!("{}", compute_profit(&model.loss, &model.gain, &traj)?));
    Ok(Value::Null)
}
