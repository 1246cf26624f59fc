use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use storage_rights::reservoir::{
    build_cumulative_matrix, conversion_series, storage_trajectory, validate_cascade, CascadeTopology, Conversion, ReservoirError,
    ReservoirSpec, StorageKind, UpstreamLink,
};

fn spec(initial: f64, inflow: Vec<f64>) -> ReservoirSpec {
    let t = inflow.len();
    ReservoirSpec {
        initial,
        lower: vec![0.0; t],
        upper: vec![1e9; t],
        inflow,
    }
}

/// Delay operator moving a schedule `lag` periods later.
fn shift(horizon: usize, lag: usize) -> DMatrix<f64> {
    DMatrix::from_fn(horizon, horizon, |t, tau| if t == tau + lag { 1.0 } else { 0.0 })
}

#[test]
fn cumulative_matrix_is_negative_lower_triangle() {
    let l = build_cumulative_matrix(4).unwrap();
    for t in 0..4 {
        for tau in 0..4 {
            assert_eq!(l.matrix()[(t, tau)], if tau <= t { -1.0 } else { 0.0 });
        }
    }
    assert_eq!(build_cumulative_matrix(0), Err(ReservoirError::EmptyHorizon));
}

#[test]
fn cycles_are_reported_from_smallest_member() {
    let kinds = vec![StorageKind::Hydro; 4];
    let link = |storage| vec![UpstreamLink { storage, lag: 0 }];
    let topo = CascadeTopology::new(kinds, vec![link(2), link(0), link(1), vec![]]).unwrap();
    assert_eq!(validate_cascade(&topo), Err(ReservoirError::Cycle(vec![0, 1, 2])));

    let chain = CascadeTopology::new(vec![StorageKind::Hydro; 3], vec![vec![], link(0), link(1)]).unwrap();
    assert_eq!(validate_cascade(&chain).unwrap(), vec![0, 1, 2]);
}

#[test]
fn batteries_cannot_join_a_cascade() {
    let link = vec![UpstreamLink { storage: 0, lag: 0 }];
    let err = CascadeTopology::new(vec![StorageKind::Hydro, StorageKind::Ess], vec![vec![], link]).unwrap_err();
    assert!(matches!(err, ReservoirError::Topology { node: 1, .. }));
}

#[test]
fn spec_validation_catches_bad_series() {
    let mut s = spec(5.0, vec![1.0, 1.0]);
    assert!(s.validate(0, StorageKind::Hydro, 2).is_ok());
    assert!(matches!(s.validate(0, StorageKind::Ess, 2), Err(ReservoirError::Spec { .. })));
    assert!(matches!(s.validate(0, StorageKind::Hydro, 3), Err(ReservoirError::Length { .. })));
    s.upper[1] = -1.0;
    assert!(matches!(s.validate(0, StorageKind::Hydro, 2), Err(ReservoirError::Spec { .. })));
}

#[test]
fn battery_conversion_is_energy_per_period() {
    let conv = Conversion::Battery {
        period_hours: 0.5,
        max_charge: 4.0,
        max_discharge: 6.0,
    };
    assert_eq!(conversion_series(&conv, &[-4.0, 0.0, 6.0]).unwrap(), vec![-2.0, 0.0, 3.0]);
    assert!(matches!(conversion_series(&conv, &[7.0]), Err(ReservoirError::Range { .. })));
}

proptest! {
    #[test]
    fn single_node_matches_matrix_form(
        z0 in 0.0f64..50.0,
        data in prop::collection::vec((0.0f64..5.0, -5.0f64..5.0), 1..8),
    ) {
        let horizon = data.len();
        let inflow: Vec<f64> = data.iter().map(|d| d.0).collect();
        let q: Vec<f64> = data.iter().map(|d| d.1).collect();
        let topo = CascadeTopology::isolated(vec![StorageKind::Ess]);
        let levels = storage_trajectory(&spec(z0, inflow.clone()), &topo, 0, std::slice::from_ref(&q)).unwrap();
        let l = build_cumulative_matrix(horizon).unwrap();
        let y = DVector::from_vec(inflow);
        let expected = DVector::from_element(horizon, z0) - l.matrix() * &y + l.matrix() * DVector::from_vec(q);
        for t in 0..horizon {
            prop_assert!((levels[t] - expected[t]).abs() <= 1e-9 * (1.0 + expected[t].abs()));
        }
    }

    #[test]
    fn cascade_matches_shifted_matrix_form(
        lag in 0usize..3,
        data in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0, 0.0f64..5.0), 1..7),
    ) {
        let horizon = data.len();
        let upstream_q: Vec<f64> = data.iter().map(|d| d.0).collect();
        let own_q: Vec<f64> = data.iter().map(|d| d.1).collect();
        let inflow: Vec<f64> = data.iter().map(|d| d.2).collect();
        let topo = CascadeTopology::new(
            vec![StorageKind::Hydro, StorageKind::Hydro],
            vec![vec![], vec![UpstreamLink { storage: 0, lag }]],
        ).unwrap();
        let z0 = 10.0;
        let levels = storage_trajectory(&spec(z0, inflow.clone()), &topo, 1, &[upstream_q.clone(), own_q.clone()]).unwrap();
        let l = build_cumulative_matrix(horizon).unwrap();
        let arriving = shift(horizon, lag) * DVector::from_vec(upstream_q);
        let net = DVector::from_vec(inflow) + arriving - DVector::from_vec(own_q);
        let expected = DVector::from_element(horizon, z0) - l.matrix() * net;
        for t in 0..horizon {
            prop_assert!((levels[t] - expected[t]).abs() <= 1e-9 * (1.0 + expected[t].abs()));
        }
    }

    #[test]
    fn hydro_conversion_is_convex(a in 0.0f64..0.01, b in 0.01f64..1.0, u in 0.0f64..50.0, v in 0.0f64..50.0) {
        let conv = Conversion::Quadratic { a, b, max_power: 50.0 };
        let mid = 0.5 * (u + v);
        prop_assert!(conv.apply(mid) <= 0.5 * (conv.apply(u) + conv.apply(v)) + 1e-12);
    }
}
