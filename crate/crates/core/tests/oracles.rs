//! Solver output checked against independent routes: eigen-decomposition of
//! the discrete heat operator, refined-grid references, hand-derived
//! closed forms and the dense generalized eigensolver.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use vanishcost_core::costlab::{hum_control, observability_cost, CostParams, Instance, Method, ProblemSpec};
use vanishcost_core::flow::{flow_map, FlowOptions};
use vanishcost_core::geometry::{build_grid, Domain, Grid, Region};
use vanishcost_core::pde::{assemble_generator, l2_norm, mass, solve_adjoint, solve_forward, SolverParams};
use vanishcost_core::velocity::builtin_field;
use vanishcost_core::Execution;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Symmetric part of the heat generator scaled by the cell volume.
fn heat_eigen(grid: &Grid, epsilon: f64) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let zero = builtin_field("zero", grid.dim()).unwrap();
    let g = assemble_generator(grid, &zero, epsilon, 0.0, None);
    let n = grid.cell_count();
    let dense = DMatrix::from_row_slice(n, n, &g.to_dense()) / grid.cell_volume();
    SymmetricEigen::new(dense)
}

fn propagate(eig: &SymmetricEigen<f64, nalgebra::Dyn>, data: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let q = &eig.eigenvectors;
    let coeffs = q.transpose() * DVector::from_column_slice(data);
    let scaled = DVector::from_iterator(coeffs.len(), coeffs.iter().zip(eig.eigenvalues.iter()).map(|(c, &l)| c * f(l)));
    (q * scaled).iter().copied().collect()
}

#[test]
fn heat_steps_match_the_eigen_propagator() {
    let domain = Domain::interval(-1.0, 1.0).unwrap();
    let grid = Arc::new(build_grid(&domain, &[20]).unwrap());
    let zero = builtin_field("zero", 1).unwrap();
    let data: Vec<f64> = (0..20).map(|c| (-8.0 * grid.center(c)[0].powi(2)).exp() + 0.3 * grid.center(c)[0]).collect();
    let eig = heat_eigen(&grid, 0.1);
    for theta in [0.5, 1.0] {
        let mut p = SolverParams::new(0.1, 200);
        p.theta = theta;
        let sol = solve_adjoint(&grid, &data, &zero, &p, 1.0).unwrap();
        let dt = 1.0 / 200.0;
        let want = propagate(&eig, &data, |l| ((1.0 + (1.0 - theta) * dt * l) / (1.0 - theta * dt * l)).powi(200));
        let err = rel_err(sol.first(), &want);
        assert!(err <= 1e-10, "theta = {theta}: {err:e}");
    }
}

#[test]
fn crank_nicolson_approaches_the_matrix_exponential_at_second_order() {
    let domain = Domain::interval(-1.0, 1.0).unwrap();
    let grid = Arc::new(build_grid(&domain, &[20]).unwrap());
    let zero = builtin_field("zero", 1).unwrap();
    let data: Vec<f64> = (0..20).map(|c| (3.0 * grid.center(c)[0]).cos()).collect();
    let eig = heat_eigen(&grid, 0.1);
    let exact = propagate(&eig, &data, |l| l.exp());
    let err = |m: usize| {
        let sol = solve_adjoint(&grid, &data, &zero, &SolverParams::new(0.1, m), 1.0).unwrap();
        rel_err(sol.first(), &exact)
    };
    let (e1, e2) = (err(50), err(100));
    let order = (e1 / e2).log2();
    assert!(e1 < 1e-4 && (1.9..2.1).contains(&order), "errors {e1:e} {e2:e}, order {order}");
}

/// Cell averages of a fine solution on a coarser grid (ratio fine/coarse).
fn restrict(fine: &[f64], ratio: usize) -> Vec<f64> {
    fine.chunks(ratio).map(|c| c.iter().sum::<f64>() / ratio as f64).collect()
}

#[test]
fn upwind_transport_converges_at_first_order() {
    let domain = Domain::interval(-1.0, 1.0).unwrap();
    let field = builtin_field("quadratic_potential", 1).unwrap();
    let solve = |n: usize| {
        let grid = Arc::new(build_grid(&domain, &[n]).unwrap());
        let data: Vec<f64> = (0..n).map(|c| (2.0 * grid.center(c)[0]).sin() + 1.0).collect();
        solve_adjoint(&grid, &data, &field, &SolverParams::new(0.02, 800), 0.5).unwrap().first().to_vec()
    };
    let reference = solve(1280);
    let e40 = rel_err(&solve(40), &restrict(&reference, 32));
    let e80 = rel_err(&solve(80), &restrict(&reference, 16));
    assert!(e40 / e80 >= 1.8, "errors {e40:e} {e80:e}");
}

#[test]
fn adjoint_mass_is_conserved() {
    let domain = Domain::interval(-1.0, 1.0).unwrap();
    let grid = Arc::new(build_grid(&domain, &[200]).unwrap());
    let field = builtin_field("quadratic_potential", 1).unwrap();
    let data: Vec<f64> = (0..200).map(|c| (-30.0 * (grid.center(c)[0] + 0.4).powi(2)).exp()).collect();
    let sol = solve_adjoint(&grid, &data, &field, &SolverParams::new(0.1, 400), 1.0).unwrap();
    let m0 = mass(&grid, sol.last());
    let drift = (0..sol.slice_count()).map(|k| (mass(&grid, sol.slice(k)) - m0).abs() / m0).fold(0.0, f64::max);
    assert!(drift <= 1e-12, "{drift:e}");
}

#[test]
fn forward_and_adjoint_are_discrete_transposes() {
    let domain = Domain::rectangle([-1.0, -1.0], [1.0, 1.0]).unwrap();
    let grid = Arc::new(build_grid(&domain, &[9, 7]).unwrap());
    let field = builtin_field("skew_rotation", 2).unwrap();
    let n = grid.cell_count();
    let y0: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let phi_t: Vec<f64> = (0..n).map(|i| ((i * 5 % 13) as f64 - 6.0) / 6.0).collect();
    let p = SolverParams::new(0.05, 30);
    let y = solve_forward(&grid, &y0, &field, &p, 0.7, None).unwrap();
    let phi = solve_adjoint(&grid, &phi_t, &field, &p, 0.7).unwrap();
    let a: f64 = y.last().iter().zip(&phi_t).map(|(u, v)| u * v).sum();
    let b: f64 = y0.iter().zip(phi.first()).map(|(u, v)| u * v).sum();
    assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn radial_backward_map_over_two_time_units() {
    let field = builtin_field("quadratic_potential", 2).unwrap();
    let opts = FlowOptions { tol: 1e-12, ..FlowOptions::default() };
    for tau in [0.25, 1.0, 2.0] {
        let y = flow_map(&field, &[0.6, -0.3], 3.0, 3.0 - tau, &opts).unwrap();
        let s = (-tau).exp();
        assert!((y[0] - 0.6 * s).abs() <= 1e-8 && (y[1] + 0.3 * s).abs() <= 1e-8, "{y:?}");
    }
}

fn duality_problem() -> ProblemSpec {
    ProblemSpec {
        domain: Domain::interval(-1.0, 1.0).unwrap(),
        omega: Region::interval(-0.3, 0.3).unwrap(),
        field: builtin_field("quadratic_potential", 1).unwrap(),
        t_end: 1.0,
        epsilon: 0.2,
    }
}

#[test]
fn power_method_matches_dense_pencil() {
    let inst = Instance::new(&duality_problem(), &CostParams::new(&[40], 40)).unwrap();
    let dense = observability_cost(&inst, Method::Dense, Execution::default()).unwrap();
    let power = observability_cost(&inst, Method::Power, Execution::default()).unwrap();
    assert!((power.k - dense.k).abs() <= 1e-6 * dense.k, "{} vs {}", power.k, dense.k);
}

#[test]
fn hum_control_steers_with_norm_at_most_k() {
    let inst = Instance::new(&duality_problem(), &CostParams::new(&[40], 40)).unwrap();
    let k = observability_cost(&inst, Method::Dense, Execution::default()).unwrap().k;
    let grid = inst.grid();
    let y0: Vec<f64> = (0..40).map(|c| 1.0 + grid.center(c)[0] - grid.center(c)[0].powi(3)).collect();
    let hum = hum_control(&inst, &y0, 1e-6, 400).unwrap();
    assert!(hum.terminal_norm <= 1e-6 * hum.initial_norm, "{hum:?}");
    assert!(hum.control_norm <= (1.0 + 1e-6) * k * hum.initial_norm);
    assert!((l2_norm(grid, &y0) - hum.initial_norm).abs() <= 1e-14);
}

#[test]
fn single_cell_cost_is_inverse_sqrt_of_horizon() {
    let mut problem = duality_problem();
    problem.t_end = 4.0;
    let k_of = |problem: &ProblemSpec| {
        let mut params = CostParams::new(&[1], 16);
        params.single_cell = true;
        let inst = Instance::new(problem, &params).unwrap();
        observability_cost(&inst, Method::Dense, Execution::Sequential).unwrap().k
    };
    // one cell with observed fraction |ω|/|Ω| = 0.3 gives K² = 1/(0.3·T)
    let k = k_of(&problem);
    assert!((k - (1.0f64 / 1.2).sqrt()).abs() <= 1e-10, "{k}");
    problem.omega = Region::interval(-1.0, 1.0).unwrap();
    let k = k_of(&problem);
    assert!((k - 0.5).abs() <= 1e-10, "{k}");
}
