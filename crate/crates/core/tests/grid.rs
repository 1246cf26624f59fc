use storage_rights_testkit as common;

use common::angle_flows;
use common::cases::random_grid;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use storage_rights::grid::{GridError, GridModel, Line};

fn balanced_injections(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    x.iter_mut().for_each(|v| *v -= mean);
    x
}

#[test]
fn shift_factors_agree_with_angle_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.gen_range(2..7);
        let grid = random_grid(&mut rng, n);
        let m = grid.num_lines();
        let x = balanced_injections(&mut rng, n);
        let flows = grid.line_flows(&DVector::from_vec(x.clone())).unwrap();
        let oracle = angle_flows(&grid, &x);
        for l in 0..m {
            assert!((flows[l] - oracle[l]).abs() <= 1e-9 * (1.0 + oracle[l].abs()), "line {l}");
            assert!((flows[m + l] + oracle[l]).abs() <= 1e-9 * (1.0 + oracle[l].abs()));
        }
    }
}

#[test]
fn balanced_flows_do_not_depend_on_slack() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.gen_range(2..6);
        let base = random_grid(&mut rng, n);
        let other = GridModel::new(n, base.lines().to_vec(), (base.slack() + 1) % n).unwrap();
        let x = DVector::from_vec(balanced_injections(&mut rng, n));
        let a = base.line_flows(&x).unwrap();
        let b = other.line_flows(&x).unwrap();
        assert!((a - b).amax() < 1e-9);
    }
}

#[test]
fn flows_conserve_power_at_every_bus() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grid = random_grid(&mut rng, 5);
    let x = balanced_injections(&mut rng, 5);
    let flows = grid.line_flows(&DVector::from_vec(x.clone())).unwrap();
    let mut net = [0.0; 5];
    for (l, line) in grid.lines().iter().enumerate() {
        net[line.from] += flows[l];
        net[line.to] -= flows[l];
    }
    for b in 0..5 {
        assert!((net[b] - x[b]).abs() < 1e-9);
    }
}

#[test]
fn directed_capacities_stack_forward_then_reverse() {
    let line = Line {
        from: 0,
        to: 1,
        reactance: 0.1,
        capacity: 30.0,
        reverse_capacity: 20.0,
    };
    let grid = GridModel::new(2, vec![line], 0).unwrap();
    assert_eq!(grid.capacities().as_slice(), &[30.0, 20.0]);
    let g = grid.shift_factors();
    assert_eq!(g.nrows(), 2);
    assert!((g[(0, 0)] - g[(0, 1)] - 1.0).abs() < 1e-12);
}

#[test]
fn invalid_networks_are_rejected() {
    assert!(matches!(
        GridModel::new(3, vec![Line::symmetric(0, 1, 0.1, 10.0)], 0),
        Err(GridError::Disconnected { .. })
    ));
    assert!(matches!(
        GridModel::new(2, vec![Line::symmetric(0, 0, 0.1, 10.0)], 0),
        Err(GridError::SelfLoop { .. })
    ));
    assert!(matches!(
        GridModel::new(2, vec![Line::symmetric(0, 1, 0.0, 10.0)], 0),
        Err(GridError::Reactance { .. })
    ));
    assert!(matches!(
        GridModel::new(2, vec![Line::symmetric(0, 1, 0.1, 10.0)], 4),
        Err(GridError::Slack { .. })
    ));
    let grid = GridModel::new(2, vec![Line::symmetric(0, 1, 0.1, 10.0)], 0).unwrap();
    assert!(matches!(
        grid.line_flows(&DVector::from_vec(vec![1.0, 0.0])),
        Err(GridError::Unbalanced { .. })
    ));
}
