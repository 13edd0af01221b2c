use delayobs::fixtures;
use delayobs::model::{residuals, FunctionalSpec, ObserverRealization, ProblemFile, Structure, TimeDelaySystem};
use delayobs::{Error, Matrix};
use nalgebra::dmatrix;
use proptest::prelude::*;

const PLANT: &str = r#"{
    "A": [[-2, 1], [0, -3]],
    "A_tau": {"rows": 2, "cols": 2, "data": [0, 1, -1, 0]},
    "B": [[1], [1]],
    "C_tau": [[1, 0]],
    "tau": 1,
    "H0": [[0, 1]]
}"#;

#[test]
fn matrices_accept_nested_and_explicit_forms() {
    let p = ProblemFile::from_json(PLANT).unwrap();
    assert_eq!(p.a_tau, dmatrix![0.0, 1.0; -1.0, 0.0]);
    assert_eq!(p.a, dmatrix![-2.0, 1.0; 0.0, -3.0]);
}

#[test]
fn explicit_dimensions_must_match_the_data() {
    let bad = PLANT.replace(r#""data": [0, 1, -1, 0]"#, r#""data": [0, 1, -1]"#);
    assert!(matches!(ProblemFile::from_json(&bad), Err(Error::Parse(_))));
}

#[test]
fn omitted_channels_default_to_zero() {
    let l = ProblemFile::from_json(PLANT).unwrap().load().unwrap();
    assert_eq!(l.system.h, l.system.tau);
    assert_eq!(l.system.c_h, Matrix::zeros(1, 2));
    assert_eq!(l.functional.h_tau, Matrix::zeros(1, 2));
    assert!(l.shift.is_none());
}

#[test]
fn every_fixture_round_trips_through_json() {
    for fx in fixtures::all().unwrap() {
        let text = serde_json::to_string(&fx).unwrap();
        let back: fixtures::Fixture = serde_json::from_str(&text).unwrap();
        assert_eq!(back, fx, "{}", fx.name);
    }
}

#[test]
fn short_measurement_delay_is_retimed() {
    let text = r#"{"A": [[0]], "A_tau": [[0]], "B": [[1]], "C_tau": [[1]], "C_h": [[2]],
                   "tau": 1.0, "h": 0.25, "H0": [[1]]}"#;
    let l = ProblemFile::from_json(text).unwrap().load().unwrap();
    let s = l.shift.expect("re-timed");
    assert_eq!(s.shift, 0.75);
    assert_eq!(s.original_h, 0.25);
    // ỹ(t) = y(t − 0.75) = 2 x(t − 1) + x(t − 1.75)
    assert_eq!(l.system.c_tau, dmatrix![2.0]);
    assert_eq!(l.system.c_h, dmatrix![1.0]);
    assert_eq!(l.system.h, 1.75);
}

#[test]
fn invalid_plants_are_rejected() {
    let nonpositive = PLANT.replace(r#""tau": 1"#, r#""tau": 0"#);
    assert!(ProblemFile::from_json(&nonpositive).unwrap().load().is_err());
    let wide = PLANT.replace(r#""H0": [[0, 1]]"#, r#""H0": [[0, 1, 0]]"#);
    assert!(ProblemFile::from_json(&wide).unwrap().load().is_err());
    let sys = TimeDelaySystem::new(
        Matrix::zeros(2, 2),
        Matrix::zeros(2, 2),
        Matrix::zeros(2, 1),
        Matrix::zeros(1, 3),
        Matrix::zeros(1, 2),
        1.0,
        1.0,
    );
    assert!(sys.is_err());
}

#[test]
fn functional_rows_must_agree() {
    let r = FunctionalSpec::new(Matrix::zeros(1, 2), Matrix::zeros(2, 2), Matrix::zeros(1, 2));
    assert!(matches!(r, Err(Error::Shape(_))));
}

#[test]
fn residual_of_the_zero_observer_is_the_functional_dynamics() {
    // With every gain zero, the x(t) coefficient of the error equation reduces to −H0 A.
    let sys = TimeDelaySystem::aligned(
        dmatrix![-2.0, 1.0; 0.0, -3.0],
        dmatrix![0.0, 1.0; -1.0, 0.0],
        dmatrix![1.0; 1.0],
        dmatrix![1.0, 0.0],
        1.0,
    )
    .unwrap();
    let fs = FunctionalSpec::instantaneous(dmatrix![0.0, 1.0]);
    let obs = ObserverRealization::zeros(Structure::A, 1, 1, 1);
    let r = residuals(&sys, &fs, &obs).unwrap();
    assert!((r.max_abs - 3.0).abs() < 1e-12, "{}", r.max_abs);
}

fn small_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..4, 1usize..4).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-1e6f64..1e6, r * c).prop_map(move |v| Matrix::from_row_slice(r, c, &v))
    })
}

proptest! {
    #[test]
    fn observer_json_round_trip_is_exact(n in small_matrix()) {
        let s = n.nrows();
        let mut obs = ObserverRealization::zeros(Structure::C, s, 2, 1);
        if n.ncols() == s {
            obs.n = n.clone();
        }
        obs.g_tauh = Matrix::from_fn(s, 2, |i, j| n[(i % n.nrows(), j % n.ncols())] / 3.0);
        let text = serde_json::to_string(&obs).unwrap();
        let back: ObserverRealization = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, obs);
    }
}
