//! File formats: JSON model and perturbation configs, CSV trajectories.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{KpiError, Result};
use crate::model::{BoundaryConditions, GainModel, GridGain, KpiVector, LossModel, QuadraticWell, Trajectory};
use crate::oscillator::{CrossStiffness, Perturbation, Sinusoid, SimulationRun};
use crate::variational::el_residual;

pub const MODEL_SCHEMA: &str = "kpidyn-model/1";

/// Serializes a matrix as a list of rows.
pub fn serialize_matrix<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

fn parse_err(e: impl std::fmt::Display) -> KpiError {
    KpiError::Parse(e.to_string())
}

/// A square matrix given either flat in row-major order or as nested rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

impl MatrixSpec {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixSpec::Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    /// Side length implied by the entries, if square.
    pub fn side(&self) -> Option<usize> {
        match self {
            MatrixSpec::Rows(rows) => Some(rows.len()),
            MatrixSpec::Flat(v) => {
                let n = (v.len() as f64).sqrt().round() as usize;
                (n * n == v.len()).then_some(n)
            }
        }
    }

    pub fn to_matrix(&self, n: usize, what: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Flat(v) => {
                if v.len() != n * n {
                    return Err(KpiError::Parse(format!("{what}: expected {} entries, found {}", n * n, v.len())));
                }
                Ok(DMatrix::from_row_slice(n, n, v))
            }
            MatrixSpec::Rows(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(KpiError::Parse(format!("{what}: expected {n}x{n} rows")));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub matrix: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GainSpec {
    Constant {
        u0: f64,
    },
    QuadraticWell {
        u0: f64,
        center: Vec<f64>,
        curvature: MatrixSpec,
    },
    /// Values in row-major order, last axis fastest.
    Grid {
        axes: Vec<Vec<f64>>,
        values: Vec<f64>,
    },
}

/// On-disk model definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default = "default_schema")]
    pub schema: String,
    /// Taken from the loss matrix when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub loss: LossSpec,
    pub gain: GainSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<BoundaryConditions>,
}

fn default_schema() -> String {
    MODEL_SCHEMA.to_string()
}

/// A validated model.
#[derive(Debug, Clone)]
pub struct Model {
    pub loss: LossModel,
    pub gain: GainModel,
    pub boundary: Option<BoundaryConditions>,
}

impl Model {
    pub fn dim(&self) -> usize {
        self.loss.dim()
    }

    pub fn well(&self) -> Option<&QuadraticWell> {
        match &self.gain {
            GainModel::QuadraticWell(w) => Some(w),
            _ => None,
        }
    }

    pub fn boundary(&self) -> Result<&BoundaryConditions> {
        self.boundary
            .as_ref()
            .ok_or_else(|| KpiError::InvalidArgument("model has no boundary conditions".into()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(parse_err)?;
        file.into_model()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_file(&self) -> ModelFile {
        let gain = match &self.gain {
            GainModel::Constant { u0 } => GainSpec::Constant { u0: *u0 },
            GainModel::QuadraticWell(w) => GainSpec::QuadraticWell {
                u0: w.u0(),
                center: w.center().to_vec(),
                curvature: MatrixSpec::from_matrix(w.curvature()),
            },
            GainModel::Grid(g) => GainSpec::Grid {
                axes: g.axes().to_vec(),
                values: g.values().to_vec(),
            },
        };
        ModelFile {
            schema: MODEL_SCHEMA.to_string(),
            n: Some(self.dim()),
            loss: LossSpec {
                matrix: MatrixSpec::from_matrix(self.loss.matrix()),
            },
            gain,
            boundary: self.boundary.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }
}

impl ModelFile {
    pub fn into_model(self) -> Result<Model> {
        if self.schema != MODEL_SCHEMA {
            return Err(KpiError::Parse(format!(
                "unsupported schema {:?}, expected {MODEL_SCHEMA:?}",
                self.schema
            )));
        }
        let n = match self.n.or_else(|| self.loss.matrix.side()) {
            Some(n) => n,
            None => return Err(KpiError::Parse("loss.matrix is not square; give n explicitly".into())),
        };
        if n == 0 {
            return Err(KpiError::Parse("n must be at least 1".into()));
        }
        let loss = LossModel::new(self.loss.matrix.to_matrix(n, "loss.matrix")?)?;
        let gain = match self.gain {
            GainSpec::Constant { u0 } => {
                if !u0.is_finite() {
                    return Err(KpiError::Parse("gain.u0 must be finite".into()));
                }
                GainModel::Constant { u0 }
            }
            GainSpec::QuadraticWell { u0, center, curvature } => GainModel::QuadraticWell(QuadraticWell::new(
                u0,
                KpiVector::new(center)?,
                curvature.to_matrix(n, "gain.curvature")?,
            )?),
            GainSpec::Grid { axes, values } => GainModel::Grid(GridGain::new(axes, values)?),
        };
        gain.ensure_dim(n)?;
        let boundary = match self.boundary {
            Some(b) => {
                let b = BoundaryConditions::new(b.x1, b.t1, b.x2, b.t2)?;
                crate::error::check_dim(n, b.dim())?;
                Some(b)
            }
            None => None,
        };
        Ok(Model { loss, gain, boundary })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossStiffnessSpec {
    pub matrix: MatrixSpec,
    pub frequency: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub y: Vec<f64>,
    pub v: Vec<f64>,
}

/// On-disk perturbation description; every block is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationFile {
    #[serde(default)]
    pub forcing: Option<Vec<Option<Sinusoid>>>,
    #[serde(default)]
    pub stiffness_modulation: Option<Vec<Option<Sinusoid>>>,
    #[serde(default)]
    pub damping: Option<MatrixSpec>,
    #[serde(default)]
    pub cross_stiffness: Option<CrossStiffnessSpec>,
    #[serde(default)]
    pub initial: Option<InitialState>,
}

impl PerturbationFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(parse_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        PerturbationFile::from_json(&std::fs::read_to_string(path)?)
    }

    /// Builds the perturbation for `n` modes.
    pub fn to_perturbation(&self, n: usize) -> Result<Perturbation> {
        Ok(Perturbation {
            forcing: self.forcing.clone().unwrap_or_default(),
            stiffness_modulation: self.stiffness_modulation.clone().unwrap_or_default(),
            damping: self.damping.as_ref().map(|m| m.to_matrix(n, "damping")).transpose()?,
            cross_stiffness: self
                .cross_stiffness
                .as_ref()
                .map(|c| {
                    Ok::<_, KpiError>(CrossStiffness {
                        matrix: c.matrix.to_matrix(n, "cross_stiffness.matrix")?,
                        frequency: c.frequency,
                        phase: c.phase,
                    })
                })
                .transpose()?,
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum VectorFile {
    Bare(Vec<f64>),
    Wrapped { values: Vec<f64> },
}

/// Reads a KPI vector given as `[..]` or `{"values": [..]}`.
pub fn parse_kpi_vector(text: &str) -> Result<KpiVector> {
    let v = match serde_json::from_str::<VectorFile>(text).map_err(parse_err)? {
        VectorFile::Bare(v) | VectorFile::Wrapped { values: v } => v,
    };
    KpiVector::new(v)
}

pub fn load_kpi_vector(path: &Path) -> Result<KpiVector> {
    parse_kpi_vector(&std::fs::read_to_string(path)?)
}

/// `printf("%.10g")`-style rendering.
pub fn format_g10(x: f64) -> String {
    const DIGITS: i32 = 10;
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..DIGITS).contains(&exp) {
        let decimals = (DIGITS - 1 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        let m = trim_zeros(mantissa.to_string());
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn csv_err(e: csv::Error) -> KpiError {
    match e.kind() {
        csv::ErrorKind::Io(_) => KpiError::Io(e.to_string()),
        _ => KpiError::Parse(e.to_string()),
    }
}

/// Column names for an `n`-dimensional trajectory CSV.
pub fn trajectory_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("x_{i}")));
    h.extend((1..=n).map(|i| format!("v_{i}")));
    h.extend(["U", "K", "E", "D_norm"].map(String::from));
    h
}

/// Writes `t, x_1..x_N, v_1..v_N, U, K, E, D_norm`; `D_norm` is blank at
/// the end samples where the residual is undefined.
pub fn write_trajectory_csv<W: Write>(
    out: W,
    loss: &LossModel,
    gain: &GainModel,
    traj: &Trajectory,
) -> Result<()> {
    let n = traj.dim();
    let residual = if traj.len() >= 3 {
        el_residual(loss, gain, traj)?.norms()
    } else {
        Vec::new()
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(n)).map_err(csv_err)?;
    let last = traj.len() - 1;
    for k in 0..traj.len() {
        let x = traj.state(k);
        let v = traj.velocity(k);
        let u = gain.evaluate(x)?;
        let kk = loss.evaluate(v)?;
        let mut rec = Vec::with_capacity(2 * n + 5);
        rec.push(format_g10(traj.times()[k]));
        rec.extend(x.iter().map(|&a| format_g10(a)));
        rec.extend(v.iter().map(|&a| format_g10(a)));
        rec.push(format_g10(u));
        rec.push(format_g10(kk));
        rec.push(format_g10(u + kk));
        rec.push(if k == 0 || k == last || residual.is_empty() {
            String::new()
        } else {
            format_g10(residual[k - 1])
        });
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field(s: &str, row: usize, col: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| KpiError::Parse(format!("row {row}, column {col}: cannot parse {s:?}")))
}

/// Reads a trajectory CSV. Derived columns (`U`, `K`, `E`, `D_norm`) are
/// ignored. Times are checked for uniformity at the precision of the file and
/// then replaced by the exact grid `t0 + k·Δt`.
pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Trajectory> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let t_col = col("t").ok_or_else(|| KpiError::Parse("missing column t".into()))?;
    let mut n = 0;
    while col(&format!("x_{}", n + 1)).is_some() {
        n += 1;
    }
    if n == 0 {
        return Err(KpiError::Parse("missing column x_1".into()));
    }
    let x_cols: Vec<usize> = (1..=n).map(|i| col(&format!("x_{i}")).expect("found above")).collect();
    let v_cols: Vec<usize> = (1..=n)
        .map(|i| col(&format!("v_{i}")).ok_or_else(|| KpiError::Parse(format!("missing column v_{i}"))))
        .collect::<Result<_>>()?;

    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut velocities = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let get = |c: usize| rec.get(c).ok_or_else(|| KpiError::Parse(format!("row {} is short", row + 1)));
        times.push(parse_field(get(t_col)?, row + 1, "t")?);
        for &c in &x_cols {
            states.push(parse_field(get(c)?, row + 1, &header[c])?);
        }
        for &c in &v_cols {
            velocities.push(parse_field(get(c)?, row + 1, &header[c])?);
        }
    }
    let m = times.len();
    if m < 2 {
        return Err(KpiError::InvalidTrajectory(format!("need at least 2 samples, got {m}")));
    }
    let t0 = times[0];
    let dt = (times[m - 1] - t0) / (m - 1) as f64;
    if !(dt > 0.0) {
        return Err(KpiError::InvalidTrajectory("times must be strictly increasing".into()));
    }
    // Ten significant digits: allow rounding at that precision plus a margin.
    let scale = times.iter().fold(0.0_f64, |s, t| s.max(t.abs()));
    let tol = 1e-9 * scale.max(dt);
    for (k, &t) in times.iter().enumerate() {
        if (t - (t0 + k as f64 * dt)).abs() > tol {
            return Err(KpiError::InvalidTrajectory(format!("non-uniform time grid at sample {k}")));
        }
    }
    Trajectory::new(n, Trajectory::uniform_times(t0, dt, m), states, velocities)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    read_trajectory_csv(std::fs::File::open(path)?)
}

/// Writes `t, y_1..y_N, v_1..v_N, E` for a modal simulation.
pub fn write_simulation_csv<W: Write>(out: W, run: &SimulationRun) -> Result<()> {
    let traj = &run.trajectory;
    let n = traj.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("y_{i}")));
    header.extend((1..=n).map(|i| format!("v_{i}")));
    header.push("E".into());
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..traj.len() {
        let mut rec = Vec::with_capacity(2 * n + 2);
        rec.push(format_g10(traj.times()[k]));
        rec.extend(traj.state(k).iter().map(|&a| format_g10(a)));
        rec.extend(traj.velocity(k).iter().map(|&a| format_g10(a)));
        rec.push(format_g10(run.energy[k]));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column CSV with the given header names.
pub fn write_series_csv<W: Write>(out: W, names: (&str, &str), xs: &[f64], ys: &[f64]) -> Result<()> {
    crate::error::check_dim(xs.len(), ys.len())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([names.0, names.1]).map_err(csv_err)?;
    for (x, y) in xs.iter().zip(ys) {
        w.write_record([format_g10(*x), format_g10(*y)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
