//! KPI dynamics: least-action planning of key performance indicators.
//!
//! KPIs evolve under a quadratic loss `K(ẋ) = ẋᵀKẋ` and a gain landscape
//! `U(x)`. Profit-optimal paths satisfy `2K·ẍ = −∇U(x)` and conserve
//! `E = U + K`. Near a well the motion splits into independent harmonic modes.

pub use nalgebra;

pub mod error;
pub mod invariants;
pub mod io;
pub mod model;
pub mod oscillator;
pub mod planner;
pub mod transforms;
pub mod variational;

pub use error::{KpiError, Result};
pub use invariants::{drift_alarm, harmonic_invariants, power_series, Alarm, InvariantReport, ModalInvariants};
pub use model::{BoundaryConditions, GainModel, GridGain, KpiVector, LossModel, QuadraticWell, Trajectory};
pub use oscillator::{
    classify_force, escape_time, parametric_growth, parametric_growth_rate, parametric_scan, resonance_scan,
    simulate_perturbed,
    ForceClass, GrowthEstimate, Perturbation, PumpAxis, PumpSpec, ResponseCurve, ScanOptions, SimulationRun, Sinusoid,
};
pub use planner::{next_kpi, phase_advance, plan_horizon, PlanState};
pub use transforms::{eigenlosses, modal_basis, symmetric_eigen, EigenDecomposition, ModalBasis};
pub use variational::{
    analytic_harmonic_solve, compute_profit, el_residual, integrate_ivp, solve_bvp_direct, solve_bvp_shooting,
    HarmonicSolution, SolverSettings,
};
