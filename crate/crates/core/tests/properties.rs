//! Property tests for the invariants every module promises.

use std::sync::Arc;

use proptest::prelude::*;
use vanishcost_core::analysis::{
    build_eta, build_theta, carleman_functional, carleman_threshold, carleman_weights, CarlemanQuadrature, CarlemanSetup,
    ThetaOptions,
};
use vanishcost_core::costlab::{fit_log_inverse, CostParams, Instance, ProblemSpec};
use vanishcost_core::flow::{flow_map, FlowOptions};
use vanishcost_core::geometry::{build_grid, Domain, Region};
use vanishcost_core::io::{read_field, write_field};
use vanishcost_core::pde::{mass, solve_adjoint, FieldTag, SolverParams, SpaceTimeField};
use vanishcost_core::velocity::{builtin_field, QuadraticPotential};
use vanishcost_core::Execution;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn region_distance_vanishes_exactly_on_the_closure(
        lo in -1.0f64..0.0, width in 0.05f64..1.0, x in -2.0f64..2.0,
        cx in -0.5f64..0.5, cy in -0.5f64..0.5, r in 0.05f64..0.5, px in -1.5f64..1.5, py in -1.5f64..1.5,
    ) {
        let iv = Region::interval(lo, lo + width).unwrap();
        let d = iv.distance(&[x]).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d == 0.0, iv.contains_closed(&[x]));
        let ball = Region::ball(&[cx, cy], r).unwrap();
        let d = ball.distance(&[px, py]).unwrap();
        prop_assert_eq!(d == 0.0, ball.contains_closed(&[px, py]));
        let exact = (((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - r).max(0.0);
        prop_assert!((d - exact).abs() <= 1e-12);
    }

    #[test]
    fn grid_volumes_sum_to_the_domain(nx in 2usize..40, ny in 2usize..40, w in 0.1f64..5.0, h in 0.1f64..5.0) {
        let domain = Domain::rectangle([-w / 2.0, 0.0], [w / 2.0, h]).unwrap();
        let grid = build_grid(&domain, &[nx, ny]).unwrap();
        let total = grid.cell_volume() * grid.cell_count() as f64;
        prop_assert!((total - w * h).abs() <= 1e-12 * w * h);
        prop_assert_eq!(grid.boundary_faces().len(), 2 * (nx + ny));
    }

    #[test]
    fn radial_backward_map_is_exponential(x in -0.9f64..0.9, y in -0.9f64..0.9, t0 in 0.0f64..3.0, tau in 0.0f64..2.0) {
        let field = builtin_field("quadratic_potential", 2).unwrap();
        let opts = FlowOptions { tol: 1e-12, ..FlowOptions::default() };
        let p = flow_map(&field, &[x, y], t0, t0 - tau, &opts).unwrap();
        let s = (-tau).exp();
        prop_assert!((p[0] - x * s).abs() <= 1e-8 && (p[1] - y * s).abs() <= 1e-8);
    }

    #[test]
    fn binary_round_trip_keeps_every_value(vals in prop::collection::vec(-1e6f64..1e6, 24), eps in 1e-3f64..1.0) {
        let domain = Domain::interval(-1.0, 2.0).unwrap();
        let grid = Arc::new(build_grid(&domain, &[8]).unwrap());
        let f = SpaceTimeField::from_parts(grid, vec![0.0, 0.5, 1.0], vals.clone(), FieldTag::Adjoint, eps).unwrap();
        let mut bytes = Vec::new();
        write_field(&f, &mut bytes).unwrap();
        let back = read_field(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.values(), vals.as_slice());
        prop_assert_eq!(back.epsilon(), eps);
    }

    #[test]
    fn exact_exponential_rows_are_fitted_exactly(c in -2.0f64..2.0, a in 0.1f64..10.0) {
        let pts: Vec<(f64, f64)> = [0.2, 0.1, 0.05, 0.025].iter().map(|&e| (e, a * (c / e).exp())).collect();
        let fit = fit_log_inverse(&pts).unwrap();
        prop_assert!((fit.slope - c).abs() <= 1e-9 * (1.0 + c.abs()));
        prop_assert!((fit.intercept - a.ln()).abs() <= 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn adjoint_mass_is_conserved_for_any_data(
        data in prop::collection::vec(-1.0f64..1.0, 30), eps in 0.01f64..1.0, theta in 0.5f64..1.0,
    ) {
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let grid = Arc::new(build_grid(&domain, &[30]).unwrap());
        let field = builtin_field("quadratic_potential", 1).unwrap();
        let mut p = SolverParams::new(eps, 40);
        p.theta = theta;
        let sol = solve_adjoint(&grid, &data, &field, &p, 1.0).unwrap();
        let m = mass(&grid, sol.last());
        let scale = data.iter().map(|v| v.abs()).sum::<f64>() * grid.cell_volume();
        for k in 0..sol.slice_count() {
            prop_assert!((mass(&grid, sol.slice(k)) - m).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn rayleigh_quotient_is_homogeneous(data in prop::collection::vec(0.1f64..1.0, 16), c in prop::num::f64::NORMAL) {
        prop_assume!(c.abs() > 1e-100 && c.abs() < 1e100);
        let problem = ProblemSpec {
            domain: Domain::interval(-1.0, 1.0).unwrap(),
            omega: Region::interval(-0.3, 0.3).unwrap(),
            field: builtin_field("quadratic_potential", 1).unwrap(),
            t_end: 1.0,
            epsilon: 0.2,
        };
        let inst = Instance::new(&problem, &CostParams::new(&[16], 16)).unwrap();
        let (a, b) = inst.forms(&data).unwrap();
        let scaled: Vec<f64> = data.iter().map(|v| c * v).collect();
        let (sa, sb) = inst.forms(&scaled).unwrap();
        prop_assert!(((sa / sb) - (a / b)).abs() <= 1e-12 * (a / b));
    }

    #[test]
    fn theta_vanishes_on_the_tube_and_is_bounded_below_off_the_double_tube(
        x0 in -0.3f64..0.3, r in 0.05f64..0.2, x in -1.0f64..1.0, frac in 0.0f64..1.0,
    ) {
        let field = builtin_field("quadratic_potential", 1).unwrap();
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let w = build_theta(&field, &domain, &[x0], r, (0.0, 1.0), &ThetaOptions { space: 21, time: 5, ..Default::default() }).unwrap();
        let t = frac;
        let theta = w.eval(&[x], t).unwrap();
        prop_assert!(theta >= 0.0 && theta <= w.cap);
        let q = w.distance(&[x], t).unwrap();
        if q <= r {
            prop_assert_eq!(theta, 0.0);
        }
        if q >= 2.0 * r {
            // the weakest point off D_{2r} sits at t₁, where g is smallest
            let floor = r * r / (w.kappa * (w.t2 - w.t1) + 1.0);
            prop_assert!(theta >= floor * (1.0 - 1e-12));
        }
        // ρ is exactly the clipped squared excess at the anchor time
        let at_t2 = w.eval(&[x], 1.0).unwrap();
        let e = ((x - x0).abs() - r).max(0.0);
        prop_assert!((at_t2 - (e * e).min(r * r)).abs() <= 1e-15);
    }

    #[test]
    fn carleman_weights_are_ordered_and_bounded_below(
        lambda in 1.0f64..4.0, s in 1.0f64..100.0, t_end in 0.2f64..5.0, x in -1.0f64..1.0, frac in 0.001f64..0.999,
    ) {
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let eta = Arc::new(build_eta(&domain, &Region::interval(-0.2, 0.1).unwrap(), 201).unwrap());
        let w = carleman_weights(eta.clone(), lambda, s, t_end).unwrap();
        let t = frac * t_end;
        let (xp, xm) = (w.xi_plus(&[x], t), w.xi_minus(&[x], t));
        let (ap, am) = (w.alpha_plus(&[x], t), w.alpha_minus(&[x], t));
        prop_assert!(xm > 0.0 && ap > 0.0);
        prop_assert!(xm <= xp && ap <= am);
        prop_assert!(xm >= 4.0 / (t_end * t_end) * (1.0 - 1e-12));
        let e = eta.value(&[x]);
        prop_assert!((0.0..=1.0).contains(&e));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn carleman_constant_is_invariant_under_data_scaling(c in 1e-3f64..1e3, shift in -0.3f64..0.3) {
        let pot = QuadraticPotential { dim: 1 };
        let field = builtin_field("quadratic_potential", 1).unwrap();
        let domain = Domain::interval(-1.0, 1.0).unwrap();
        let grid = Arc::new(build_grid(&domain, &[24]).unwrap());
        let data: Vec<f64> = (0..24).map(|i| (-(grid.center(i)[0] - shift).powi(2) * 10.0).exp()).collect();
        let sol = solve_adjoint(&grid, &data, &field, &SolverParams::new(0.25, 24), 1.0).unwrap();
        let scaled = sol.with_values(sol.values().iter().map(|v| c * v).collect(), sol.tag()).unwrap();
        let eta = Arc::new(build_eta(&domain, &Region::interval(-0.2, 0.2).unwrap(), 101).unwrap());
        let chi = grid.region_fractions(&Region::interval(-0.3, 0.3).unwrap()).unwrap();
        let setup = CarlemanSetup {
            potential: &pot,
            chi: &chi,
            c_t: 6.0,
            s1: 1.0,
            lambda1: 1.0,
            quadrature: CarlemanQuadrature::for_dim(1),
            exec: Execution::Sequential,
        };
        let w = carleman_weights(eta, 2.0, carleman_threshold(0.25, 1.0, 6.0, 1.0), 1.0).unwrap();
        let a = carleman_functional(&sol, &setup, &w).unwrap();
        let b = carleman_functional(&scaled, &setup, &w).unwrap();
        let (la, lb) = (a.ln_c_min.unwrap(), b.ln_c_min.unwrap());
        prop_assert!((la - lb).abs() <= 1e-9 * la.abs().max(1.0), "{} vs {}", la, lb);
    }
}
