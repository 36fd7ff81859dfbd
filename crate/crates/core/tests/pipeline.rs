use fastslow::averaging::{tabulate, TabulationConfig};
use fastslow::model::{double_well, ou};
use fastslow::ratefn::{mdp_prediction, HalfSpace};
use fastslow::{invariant_density, simulate_pair, solve_poisson, Grid, PoissonMethod};

#[test]
fn ou_pipeline_reaches_the_quadratic_rate() {
    let spec = ou();
    let (avg, table) =
        tabulate(&spec, &Grid::cube(1, -3.0, 3.0, 13).unwrap(), &TabulationConfig::new(Grid::default_fast(1))).unwrap();
    let v = avg.eval(&[0.5]).unwrap();
    assert!((v.q[0] - 2.0).abs() < 1e-3);
    assert!((v.f[0] + 0.5).abs() < 1e-3);
    assert_eq!(table.p, 1);

    // P(X_1 > 1) decays at rate c²/(2 Q T) = 1/4
    let event = HalfSpace { normal: vec![1.0], threshold: 1.0 };
    let j = mdp_prediction(&avg, &[0.0], 1.0, &event, 64).unwrap();
    assert!((j - 0.25).abs() < 2.5e-3, "J* = {j}");
}

#[test]
fn grid_and_closed_form_correctors_agree_off_ou() {
    let spec = double_well();
    let grid = Grid::default_fast(1);
    let pi = invariant_density(&spec, &[0.0], &grid).unwrap();
    let rhs = fastslow::poisson::sample_integrand(&spec, &[0.0], &grid);
    let a = solve_poisson(&spec, &[0.0], &rhs, &pi, PoissonMethod::GridSolve).unwrap();
    let b = solve_poisson(&spec, &[0.0], &rhs, &pi, PoissonMethod::ClosedForm1d).unwrap();
    // compare where the density carries mass
    let gap = (0..pi.grid.len())
        .filter(|&i| pi.values[i] > 1e-6)
        .map(|i| (a.u.values[i] - b.u.values[i]).abs())
        .fold(0.0, f64::max);
    assert!(gap < 1e-3, "gap {gap}");
}

#[test]
fn same_seed_same_path() {
    let spec = ou().with_epsilon(0.05).unwrap();
    let a = simulate_pair(&spec, 0.5, 0.01, 3).unwrap();
    let b = simulate_pair(&spec, 0.5, 0.01, 3).unwrap();
    let c = simulate_pair(&spec, 0.5, 0.01, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.x, c.x);
}
