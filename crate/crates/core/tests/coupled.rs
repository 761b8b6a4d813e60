use sdmsfem::experiments::{
    check_halving, compute_errors, define_example, reference_solve, rho_ratios, run_scheme, spatial_study,
    DiscreteSolution, ExampleOverrides, NsplitPolicy, PermeabilityField, ReferenceConfig,
};
use sdmsfem::mesh::Point2;
use sdmsfem::solver::{CoupledSolver, DarcySpaceKind, SchemeConfig, StateVector};

#[test]
fn permeability_sample_value() {
    let eps = 0.02;
    let field = PermeabilityField::Separable { eps, amplitude: 1.5 };
    let k = field.eval(Point2::new(eps / 4.0, eps / 4.0));
    assert!((k - 1.0 / 7.0).abs() < 1e-14);
}

#[test]
fn solution_has_no_error_against_itself() {
    let ex = define_example(1, 0.1, &ExampleOverrides { t_final: Some(0.1), ..Default::default() }).unwrap();
    let (solver, out, _) = run_scheme(&ex, 0.25, DarcySpaceKind::MsFem, 4, 0.05, false).unwrap();
    let d = compute_errors(solver_view(&solver, &out.final_state), solver_view(&solver, &out.final_state)).unwrap();
    for v in [d.u_l2, d.u_h1_semi, d.u_h1, d.phi_l2, d.phi_h1_semi, d.phi_h1] {
        assert!(v <= 1e-12, "{d:?}");
    }
}

fn solver_view<'a>(solver: &'a CoupledSolver<f64>, state: &'a StateVector<f64>) -> DiscreteSolution<'a> {
    DiscreteSolution { fluid: solver.fluid_mesh(), darcy: solver.darcy_space(), state }
}

#[test]
fn observer_sees_every_level() {
    let ex = define_example(3, 0.05, &ExampleOverrides { t_final: Some(0.2), ..Default::default() }).unwrap();
    let fluid = ex.fluid_mesh(0.125).unwrap();
    let porous = ex.porous_mesh(0.125).unwrap();
    let darcy = ex.darcy_space(&porous, DarcySpaceKind::P1, 1).unwrap();
    let config = SchemeConfig {
        dt: 0.05,
        t_final: 0.2,
        darcy_space: DarcySpaceKind::P1,
        h: 0.125,
        nsplit: 1,
        stability_monitor: false,
    };
    let solver = CoupledSolver::new(ex.problem.clone(), fluid, darcy, config).unwrap();
    let mut seen = Vec::new();
    let mut obs = |n: usize, t: f64, s: &StateVector<f64>| seen.push((n, t, s.p.is_some()));
    let out = solver.run(Some(&mut obs)).unwrap();
    assert_eq!(seen.len(), 5);
    assert_eq!(seen[0], (0, 0.0, false));
    assert!(seen[1..].iter().all(|&(_, _, p)| p));
    assert!((seen[4].1 - 0.2).abs() < 1e-15);
    assert_eq!(out.stats.steps, 4);
    assert!(out.divergence.iter().all(|&d| d <= 1e-9));
}

#[test]
fn multiscale_head_beats_linear_elements_on_oscillatory_field() {
    let ex = define_example(1, 0.125, &ExampleOverrides { t_final: Some(0.1), ..Default::default() }).unwrap();
    let cfg = ReferenceConfig { h_stokes: 1.0 / 32.0, h_darcy: 1.0 / 64.0, dt: 0.05, max_dofs: 1_000_000 };
    let reference = reference_solve(&ex, &cfg).unwrap();
    let policy = NsplitPolicy::FixedFine { h_fine: 1.0 / 64.0 };
    let hs = [0.5, 0.25];
    let ms = spatial_study(&ex, &hs, policy, 0.05, DarcySpaceKind::MsFem, &reference).unwrap();
    let fem = spatial_study(&ex, &hs, policy, 0.05, DarcySpaceKind::P1, &reference).unwrap();
    for (m, f) in ms.rows.iter().zip(&fem.rows) {
        assert!(m.report.errors.phi_l2 <= f.report.errors.phi_l2, "{:?} vs {:?}", m.report.errors, f.report.errors);
        assert!(m.report.errors.phi_h1_semi <= f.report.errors.phi_h1_semi);
    }
    // velocity errors are not affected by the Darcy space beyond the coupling
    let (a, b) = (ms.rows[1].report.errors.u_l2, fem.rows[1].report.errors.u_l2);
    assert!((a - b).abs() <= 0.5 * a.max(b));
}

#[test]
fn reference_rejects_underresolved_period_and_budget() {
    let ex = define_example(1, 0.02, &ExampleOverrides::default()).unwrap();
    let cfg = ReferenceConfig { h_stokes: 1.0 / 8.0, h_darcy: 1.0 / 8.0, dt: 0.5, max_dofs: 1_000 };
    assert!(reference_solve(&ex, &cfg).is_err());
    let cfg = ReferenceConfig { h_darcy: 1.0 / 512.0, ..cfg };
    let err = reference_solve(&ex, &cfg).err().unwrap();
    assert!(err.to_string().contains("budget"));
}

#[test]
fn halving_chain_and_ratios() {
    assert!(check_halving(&[0.1, 0.05, 0.025]).is_ok());
    assert!(check_halving(&[0.1, 0.04]).is_err());
    let r = rho_ratios(&[4.0, 1.0, 0.25]);
    assert_eq!(r, vec![4.0, 4.0]);
}
