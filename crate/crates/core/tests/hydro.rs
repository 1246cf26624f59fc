use storage_rights_testkit as common;

use common::cases::random_hydro_physics;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use storage_rights::hydro::{
    calibrate, discharge_from_power_exact, discharge_from_power_quadratic, forebay_height, power_from_discharge, vertex_discharge,
    vertex_power, GeometryShape, HydroError, PlantPhysics, ReservoirGeometry,
};

fn physics(kappa: f64, phi: f64, theta0: f64, theta1: f64, loss: f64) -> PlantPhysics {
    PlantPhysics {
        efficiency: kappa,
        forebay_height: phi,
        tailrace_intercept: theta0,
        tailrace_slope: theta1,
        head_loss: loss,
        capacity: 50.0,
    }
}

/// Closed-form third derivative of the exact inverse `q(u)`.
fn third_derivative(alpha: f64, beta: f64, u: f64) -> f64 {
    12.0 * alpha * alpha * (beta * beta - 4.0 * alpha * u).powf(-2.5)
}

#[test]
fn exact_inverse_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let plant = calibrate(&random_hydro_physics(&mut rng)).unwrap();
        let top = vertex_power(&plant).min(1e4);
        for k in 0..=20 {
            let u = (top * k as f64 / 20.0).min(top);
            let q = discharge_from_power_exact(&plant, u).unwrap().min(vertex_discharge(&plant));
            let back = power_from_discharge(&plant, q).unwrap();
            assert!((back - u).abs() <= 1e-9 * (1.0 + u), "{u} -> {q} -> {back}");
        }
    }
}

#[test]
fn quadratic_error_obeys_lagrange_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..300 {
        let plant = calibrate(&random_hydro_physics(&mut rng)).unwrap();
        if plant.alpha == 0.0 {
            continue;
        }
        let vertex = vertex_power(&plant);
        for k in 1..=30 {
            let u = 0.9 * vertex * k as f64 / 30.0;
            let exact = discharge_from_power_exact(&plant, u).unwrap();
            let approx = discharge_from_power_quadratic(&plant, u).unwrap();
            let bound = third_derivative(plant.alpha, plant.beta, u) * u.powi(3) / 6.0;
            let err = exact - approx;
            assert!(err >= -1e-12 * exact, "expansion overshoots at {u}");
            assert!(err <= bound * (1.0 + 1e-9) + 1e-14, "u={u} err={err} bound={bound}");
        }
    }
}

#[test]
fn linear_tailrace_makes_expansion_exact() {
    let plant = calibrate(&physics(1.3, 30.0, 20.0, 0.0, 1.0)).unwrap();
    assert_eq!(plant.alpha, 0.0);
    for u in [0.0, 1.0, 17.5, 250.0] {
        let exact = discharge_from_power_exact(&plant, u).unwrap();
        let approx = discharge_from_power_quadratic(&plant, u).unwrap();
        assert!((exact - approx).abs() <= 1e-12 * (1.0 + exact));
    }
}

#[test]
fn calibration_names_violated_inequality() {
    let cases = [
        (physics(1.0, 19.0, 20.0, 0.01, 0.0), "forebay height > tailrace intercept"),
        (physics(0.0, 25.0, 20.0, 0.01, 0.0), "efficiency factor > 0"),
        (physics(1.0, 25.0, 20.0, -0.1, 0.0), "tailrace slope >= 0"),
        (physics(1.0, 25.0, 20.0, 0.01, 21.0), "tailrace intercept > head loss"),
        (physics(1.0, 25.0, 20.0, 0.01, 6.0), "net head > 0"),
    ];
    for (p, expected) in cases {
        match calibrate(&p) {
            Err(HydroError::Calibration { inequality, .. }) => assert_eq!(inequality, expected),
            other => panic!("{p:?}: {other:?}"),
        }
    }
}

#[test]
fn cuboidal_and_trapezoidal_heights() {
    let cube = ReservoirGeometry::new(
        GeometryShape::Cuboidal {
            floor_height: 21.0,
            base_area: 100.0,
        },
        0.0,
        200.0,
    )
    .unwrap();
    assert_eq!(forebay_height(&cube, 100.0).unwrap(), 22.0);
    assert!(matches!(forebay_height(&cube, 250.0), Err(HydroError::Domain { .. })));

    let points = [(0.0, 10.0), (25.0, 15.0), (100.0, 20.0)];
    let trap = ReservoirGeometry::fit_trapezoidal(&points, 0.0, 100.0).unwrap();
    for (v, h) in points {
        assert!((forebay_height(&trap, v).unwrap() - h).abs() < 1e-9);
    }
    let mut previous = f64::NEG_INFINITY;
    let mut slopes = Vec::new();
    for k in 0..=50 {
        let v = 2.0 * k as f64;
        let h = forebay_height(&trap, v).unwrap();
        assert!(h >= previous);
        if k > 0 {
            slopes.push(h - previous);
        }
        previous = h;
    }
    assert!(slopes.windows(2).all(|w| w[1] <= w[0] + 1e-12), "not concave");
}

proptest! {
    #[test]
    fn generation_is_concave_and_increasing(
        kappa in 0.5f64..2.0,
        theta0 in 10.0f64..40.0,
        head in 5.0f64..40.0,
        theta1 in 0.001f64..0.2,
    ) {
        let plant = calibrate(&physics(kappa, theta0 + head, theta0, theta1, 0.0)).unwrap();
        let top = vertex_discharge(&plant);
        let values: Vec<f64> = (0..=40).map(|k| power_from_discharge(&plant, (top * k as f64 / 40.0).min(top)).unwrap()).collect();
        for w in values.windows(3) {
            prop_assert!(w[1] >= w[0] - 1e-9);
            prop_assert!(w[0] - 2.0 * w[1] + w[2] <= 1e-9);
        }
    }

    #[test]
    fn discharge_expansion_is_convex_in_power(
        kappa in 0.5f64..2.0,
        theta0 in 10.0f64..40.0,
        head in 5.0f64..40.0,
        theta1 in 0.0f64..0.2,
        u in 0.0f64..100.0,
        v in 0.0f64..100.0,
        w in 0.0f64..1.0,
    ) {
        let plant = calibrate(&physics(kappa, theta0 + head, theta0, theta1, 0.0)).unwrap();
        let q = |x: f64| discharge_from_power_quadratic(&plant, x).unwrap();
        let mid = w * u + (1.0 - w) * v;
        prop_assert!(q(mid) <= w * q(u) + (1.0 - w) * q(v) + 1e-12 * (1.0 + q(u) + q(v)));
    }

    #[test]
    fn cuboidal_height_is_monotone(floor in 0.0f64..50.0, area in 1.0f64..500.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let g = ReservoirGeometry::new(GeometryShape::Cuboidal { floor_height: floor, base_area: area }, 0.0, 1000.0).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(forebay_height(&g, 1000.0 * lo).unwrap() <= forebay_height(&g, 1000.0 * hi).unwrap());
    }
}
