use dualsmpc::solver::{Mode, SolveOptions};
use dualsmpc::{BeliefState, Controller, UnicycleModel, UnicycleParams};
use nalgebra::{DMatrix, DVector};

fn noiseless() -> UnicycleModel {
    UnicycleModel::new(UnicycleParams {
        process_noise_cov: DMatrix::zeros(3, 3),
        measurement_noise_cov: DMatrix::zeros(3, 3),
        ..UnicycleParams::default()
    })
    .unwrap()
}

fn options(mode: Mode) -> SolveOptions {
    SolveOptions {
        max_iterations: 200,
        ..SolveOptions::default().with_mode(mode)
    }
}

#[test]
fn far_from_the_wall_drives_left_at_full_speed() {
    let model = noiseless();
    let belief = BeliefState::new(DVector::from_vec(vec![3.0, 0.5, 0.0]), DMatrix::zeros(3, 3)).unwrap();
    let mut c = Controller::new(options(Mode::Nominal));
    let (u, diag) = c.step(&model, &belief).unwrap();
    assert_eq!(u[0], -2.0);
    assert!(!diag.flagged);
}

#[test]
fn applied_controls_respect_bounds_in_every_mode() {
    let model = UnicycleModel::new(UnicycleParams::default()).unwrap();
    let belief = BeliefState::new(
        DVector::from_vec(vec![1.0, -1.0, 2.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.02, 0.02, 0.01])),
    )
    .unwrap();
    for mode in Mode::ALL {
        let mut c = Controller::new(SolveOptions {
            max_iterations: 40,
            ..SolveOptions::default().with_mode(mode)
        });
        for _ in 0..2 {
            let (u, _) = c.step(&model, &belief).unwrap();
            assert!(u.iter().all(|v| v.abs() <= 2.0), "{mode}: {u}");
        }
    }
}

#[test]
fn identical_beliefs_give_identical_controls() {
    let model = UnicycleModel::new(UnicycleParams::default()).unwrap();
    let belief = BeliefState::new(
        DVector::from_vec(vec![2.0, 1.0, 3.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.01, 0.0025])),
    )
    .unwrap();
    let run = || {
        let mut c = Controller::new(SolveOptions {
            max_iterations: 60,
            ..SolveOptions::default()
        });
        c.step(&model, &belief).unwrap()
    };
    let (a, da) = run();
    let (b, db) = run();
    assert_eq!(a, b);
    assert_eq!(da, db);
}

#[test]
fn modes_agree_without_uncertainty() {
    let model = noiseless();
    let belief = BeliefState::new(DVector::from_vec(vec![2.0, 0.8, 2.5]), DMatrix::zeros(3, 3)).unwrap();
    let controls: Vec<DVector<f64>> = Mode::ALL
        .iter()
        .map(|m| Controller::new(options(*m)).step(&model, &belief).unwrap().0)
        .collect();
    for u in &controls[1..] {
        assert!((u - &controls[0]).abs().max() < 1e-5, "{u} vs {}", controls[0]);
    }
}

#[test]
fn warm_start_is_used_after_the_first_step() {
    let model = UnicycleModel::new(UnicycleParams::default()).unwrap();
    let belief = BeliefState::new(
        DVector::from_vec(vec![3.0, 1.5, std::f64::consts::PI]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.01, 0.0025])),
    )
    .unwrap();
    let mut c = Controller::new(SolveOptions {
        max_iterations: 30,
        ..SolveOptions::default().with_mode(Mode::OpenLoop)
    });
    let (_, first) = c.step(&model, &belief).unwrap();
    let (_, second) = c.step(&model, &belief).unwrap();
    assert!(!first.warm_started);
    assert!(second.warm_started);
    assert_eq!(c.diagnostics().len(), 2);
    c.reset();
    assert!(c.last_solution().is_none());
}
