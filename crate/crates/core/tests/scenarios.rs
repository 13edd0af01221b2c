//! Worked scenarios: ladder choices, special gains and simulator sanity checks.

use delayobs::dde::{mori_scalar_stable, simulate, verify_observer, HistoryFunction, InputSignal, SimulationConfig, VerifyOptions};
use delayobs::fixtures;
use delayobs::model::{FunctionalSpec, LoadedProblem, Structure, TimeDelaySystem};
use delayobs::synthesis::{design_ladder, realize, DesignOptions, Stage};
use delayobs::Matrix;
use nalgebra::dmatrix;

fn unpinned(name: &str) -> LoadedProblem {
    let mut p = fixtures::load(name).unwrap().problem;
    p.r = None;
    p.f_d = None;
    p.pin_n_tau = None;
    p.load().unwrap()
}

fn ladder_stage(name: &str) -> (Stage, usize) {
    let l = unpinned(name);
    let d = design_ladder(&l.system, &l.functional, &DesignOptions::default())
        .unwrap()
        .design
        .unwrap();
    (d.stage, d.observer.order)
}

#[test]
fn ladder_stops_at_the_first_workable_stage() {
    assert_eq!(ladder_stage("ex1-case1"), (Stage::AMinimal, 1));
    assert_eq!(ladder_stage("ex1-case3"), (Stage::AExtended, 3));
    let (stage, order) = ladder_stage("ex1-case6");
    assert!(matches!(stage, Stage::BOrderQ), "{stage}");
    assert_eq!(order, 2);
}

#[test]
fn case_five_with_zero_z_leaves_the_delayed_gain_unstable() {
    let l = unpinned("ex1-case5");
    let fam_cols = delayobs::existence::build_b(&l.system, &l.functional.h0, &l.functional.h_tau)
        .unwrap()
        .width();
    let (obs, _) = realize(&l.system, &l.functional, Structure::B, &Matrix::zeros(1, fam_cols)).unwrap();
    assert!((obs.n[(0, 0)] - 0.5).abs() < 1e-12);
    assert!((obs.n_tau[(0, 0)] - 0.6558).abs() < 1e-3, "{}", obs.n_tau);
}

#[test]
fn mori_test_cannot_hold_for_a_two_with_long_delays() {
    for tau in [0.5, 0.56, 1.0, 2.0] {
        for k in 0..=40 {
            let b = -4.0 + 0.2 * f64::from(k);
            assert!(!mori_scalar_stable(2.0, b, tau).unwrap(), "tau {tau}, b {b}");
        }
    }
}

fn case_one() -> (LoadedProblem, delayobs::model::ObserverRealization) {
    let fx = fixtures::load("ex1-case1").unwrap();
    let l = fx.problem.clone().load().unwrap();
    let d = design_ladder(&l.system, &l.functional, &fx.design_options())
        .unwrap()
        .design
        .unwrap();
    (l, d.observer)
}

#[test]
fn case_one_error_decays_like_exp_minus_three() {
    let (l, obs) = case_one();
    let phi = HistoryFunction::Constant { value: vec![1.0, 1.0] };
    let rho = HistoryFunction::Constant { value: vec![0.0] };
    let input = InputSignal::Sine {
        amplitude: 1.0,
        omega: 1.0,
        phase: 0.0,
    };
    let cfg = SimulationConfig { t_final: 30.0, dt: 0.01 };
    let tr = simulate(&l.system, &l.functional, &obs, &phi, &rho, &input, &cfg).unwrap();
    let e = tr.column("e_1").unwrap();
    let (e0, ef) = (e[0].abs(), e.last().unwrap().abs());
    assert!(e0 > 0.1);
    assert!(ef <= 1e-6 * e0, "|e(30)| = {ef:e}");
    // after the onset the error is e(τ)·exp(−3(t − τ))
    let t = tr.times();
    let k1 = t.iter().position(|&s| (s - 1.0).abs() < 1e-9).unwrap();
    let k3 = t.iter().position(|&s| (s - 3.0).abs() < 1e-9).unwrap();
    let want = e[k1] * (-6.0f64).exp();
    assert!((e[k3] - want).abs() <= 1e-8 * e[k1].abs().max(1.0), "{} vs {want}", e[k3]);
}

#[test]
fn consistent_initial_observer_state_gives_zero_error() {
    // φ ≡ 0 is a plant solution for u ≡ 0, so w ≡ 0 matches z exactly.
    let (l, obs) = case_one();
    let phi = HistoryFunction::Constant { value: vec![0.0, 0.0] };
    let rho = HistoryFunction::Constant { value: vec![0.0] };
    let cfg = SimulationConfig { t_final: 5.0, dt: 0.01 };
    let tr = simulate(&l.system, &l.functional, &obs, &phi, &rho, &InputSignal::Zero, &cfg).unwrap();
    assert!(tr.column("e_1").unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn corrupted_gain_raises_the_residual_flag() {
    let (l, mut obs) = case_one();
    obs.g[(0, 0)] += 1e-3;
    let opts = VerifyOptions {
        sim: SimulationConfig { t_final: 4.0, dt: 0.01 },
        histories: 1,
        ..VerifyOptions::default()
    };
    let r = verify_observer(&l.system, &l.functional, &obs, &opts).unwrap();
    assert!(r.residual_flag);
    assert!(!r.passed);
}

#[test]
fn structure_c_without_an_h_channel_keeps_h_gains_at_zero() {
    // C_h = 0 and H_h = 0: every gain multiplying an h-shifted signal has nothing to act on.
    let sys = TimeDelaySystem::new(
        dmatrix![-1.0, 1.0; 0.0, -2.0],
        dmatrix![0.5, 0.0; 0.2, 0.1],
        dmatrix![1.0; 0.0],
        dmatrix![1.0, 0.0; 0.0, 1.0],
        Matrix::zeros(2, 2),
        0.4,
        0.9,
    )
    .unwrap();
    let fs = FunctionalSpec::instantaneous(dmatrix![1.0, 1.0]);
    let cp = delayobs::existence::build_c(&sys, &fs).unwrap();
    assert!(cp.is_solvable());
    let (obs, res) = realize(&sys, &fs, Structure::C, &Matrix::zeros(1, cp.width())).unwrap();
    assert!(res <= 1e-8);
    for m in [&obs.m_h, &obs.n_h, &obs.g_h, &obs.g_tauh, &obs.g_hh, &obs.j_h, &obs.j_tauh, &obs.j_hh] {
        assert!(m.amax() <= 1e-10, "{m}");
    }
}
