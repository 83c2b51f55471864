//! CSV and JSON round trips.

mod common;

use common::*;
use kpidyn_core::io::{read_trajectory_csv, write_simulation_csv, write_trajectory_csv, Model, PerturbationFile};
use kpidyn_core::{integrate_ivp, simulate_perturbed, InvariantReport, Perturbation, Trajectory};

fn roundtrip(inst: &Instance, traj: &Trajectory) -> Trajectory {
    let mut buf = Vec::new();
    write_trajectory_csv(&mut buf, &inst.loss, &inst.gain, traj).unwrap();
    read_trajectory_csv(buf.as_slice()).unwrap()
}

fn report_diff(a: &InvariantReport, b: &InvariantReport) -> f64 {
    let mut d = max_abs_diff(&a.times, &b.times)
        .max(max_abs_diff(&a.power_series, &b.power_series))
        .max(max_abs_diff(&a.residual_series, &b.residual_series))
        .max((a.drift - b.drift).abs());
    if let (Some(ma), Some(mb)) = (&a.modal_series, &b.modal_series) {
        for (x, y) in ma.modes.iter().zip(&mb.modes) {
            d = d.max(max_abs_diff(&x.amplitude, &y.amplitude)).max(max_abs_diff(&x.phase_shift, &y.phase_shift));
        }
    }
    d
}

#[test]
fn trajectory_csv_roundtrip_is_stable() {
    let mut r = rng(31);
    for _ in 0..5 {
        let inst = random_instance(&mut r);
        let n = inst.bc.dim();
        let v0 = kv(&random_vec(&mut r, n, -1.0, 1.0));
        let traj = integrate_ivp(&inst.loss, &inst.gain, &inst.bc.x1, &v0, (inst.bc.t1, inst.bc.t1 + 3.0), 1e-2).unwrap();
        let once = roundtrip(&inst, &traj);
        let twice = roundtrip(&inst, &once);
        assert_eq!(once, twice);

        let build = |t: &Trajectory| InvariantReport::build(&inst.loss, &inst.gain, t, Some(&inst.basis), 1e-3).unwrap();
        assert!(report_diff(&build(&once), &build(&twice)) <= 1e-12);

        // One pass loses only what ten significant digits cannot hold.
        for (a, b) in once.states_flat().iter().zip(traj.states_flat()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-300));
        }
        assert!(max_abs_diff(once.times(), traj.times()) < 1e-9 * (traj.times()[traj.len() - 1].abs() + 1.0));
    }
}

#[test]
fn trajectory_csv_header_and_blank_residual_ends() {
    let (loss, gain, _) = one_d(1.0);
    let traj = integrate_ivp(&loss, &gain, &kv(&[1.0]), &kv(&[0.0]), (0.0, 0.03), 0.01).unwrap();
    let mut buf = Vec::new();
    write_trajectory_csv(&mut buf, &loss, &gain, &traj).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,x_1,v_1,U,K,E,D_norm");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].ends_with(','));
    assert!(!lines[2].ends_with(','));
    assert!(lines[4].ends_with(','));
}

#[test]
fn simulation_csv_columns() {
    let run = simulate_perturbed(&[1.0, 2.0], &Perturbation::none(), &[1.0, 0.0], &[0.0, 1.0], (0.0, 0.1), 0.05).unwrap();
    let mut buf = Vec::new();
    write_simulation_csv(&mut buf, &run).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,y_1,y_2,v_1,v_2,E");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn model_and_perturbation_files() {
    let model = Model::from_json(
        r#"{"schema": "kpidyn-model/1", "n": 1, "loss": {"matrix": [0.5]},
            "gain": {"kind": "grid", "axes": [[0, 1, 2]], "values": [0, 1, 4]}}"#,
    )
    .unwrap();
    assert_eq!(model.gain.evaluate(&[1.5]).unwrap(), 2.5);
    assert!(model.boundary().is_err());

    let p = PerturbationFile::from_json(
        r#"{"stiffness_modulation": [{"amplitude": 0.1, "frequency": 2.0, "phase": 3.14}],
            "cross_stiffness": {"matrix": [0.0], "frequency": 1.0, "phase": 0.0},
            "initial": {"y": [1.0], "v": [0.0]}}"#,
    )
    .unwrap();
    let pert = p.to_perturbation(1).unwrap();
    assert!(pert.validate(&[1.0]).is_ok());
    assert!(pert.validate(&[0.3]).is_err());
    assert_eq!(p.initial.unwrap().y, vec![1.0]);
}
