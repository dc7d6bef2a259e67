//! Worked examples for each public operation, exercised through the crate's
//! public API.

use std::f64::consts::PI;

use stochvar::diffusion::{
    kde_fit, simulate, BandwidthRule, DensityModel, DiffusionModel, InitialLaw, PathEnsemble, TimeGrid, TimeSelection,
};
use stochvar::lagrangian::{LagrangianSpec, Potential, QuadraticForm};
use stochvar::nelson::{
    analytic_complex_derivative, backward_derivative, derivative_of_function, dirac_complex_derivative,
    dirac_second_derivative, forward_derivative, product_rule_check, regression_complex_derivative, second_derivative,
    AffineMap, EstimatorConfig,
};
use stochvar::noether::{
    apply_group, commutation_check, conserved_quantity, constancy_test, invariance_check, ConservedQuantitySeries,
    OneParameterGroup, Verdict, NOETHER_INAPPLICABLE,
};
use stochvar::scenario::{list_registries, Registries, Scenario};
use stochvar::variation::{
    action, classical_el_solve, coherence_check, coherence_check_path, directional_derivative_fd,
    directional_derivative_formula, el_residual, FdOptions, ResidualVariant, VariationProcess, VariationShape,
};
use stochvar::{Complex64, Error};

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn harmonic(d: usize, omega: f64) -> LagrangianSpec {
    LagrangianSpec::natural(d, 1.0, Potential::harmonic(omega))
}

fn free(d: usize) -> LagrangianSpec {
    LagrangianSpec::natural(d, 1.0, Potential::Free)
}

/// σW from 0 at time 0, observed on [1, 2].
fn bm(dim: usize, steps: usize, n: usize, seed: u64) -> (DiffusionModel, DensityModel, PathEnsemble) {
    let model = DiffusionModel::brownian(dim, 1.0, InitialLaw::brownian_at(vec![0.0; dim], 1.0, 1.0)).unwrap();
    let dm = DensityModel::analytic_gaussian(&model, 1.0).unwrap();
    let ens = simulate(&model, &TimeGrid::new(1.0, 2.0, steps).unwrap(), n, seed).unwrap();
    (model, dm, ens)
}

fn stationary_ou(dim: usize, steps: usize, n: usize, seed: u64) -> (DiffusionModel, DensityModel, PathEnsemble) {
    let model = DiffusionModel::ornstein_uhlenbeck(dim, 1.0, 1.0, InitialLaw::ou_stationary(dim, 1.0, 1.0)).unwrap();
    let dm = DensityModel::analytic_gaussian(&model, 1.0).unwrap();
    let ens = simulate(&model, &TimeGrid::new(1.0, 2.0, steps).unwrap(), n, seed).unwrap();
    (model, dm, ens)
}

mod lagrangian {
    use super::*;

    #[test]
    fn eval_lagrangian() {
        let l = harmonic(1, 1.0);
        assert_eq!(l.eval(&[0.0], &[c(0.0, 0.0)]).unwrap(), c(0.0, 0.0));
        assert_eq!(l.eval(&[2.0], &[c(3.0, 0.0)]).unwrap(), c(2.5, 0.0));
        assert_eq!(l.eval(&[1.0], &[c(0.0, 1.0)]).unwrap(), c(-1.0, 0.0));
        assert!(matches!(l.eval(&[1.0, 2.0], &[c(0.0, 0.0)]), Err(Error::Dimension { expected: 1, got: 2 })));
    }

    #[test]
    fn partials() {
        let (dx, dv) = harmonic(1, 1.0).partials(&[1.0], &[c(1.0, 1.0)]).unwrap();
        assert_eq!((dx, dv), (vec![-1.0], vec![c(1.0, 1.0)]));
        let (dx, dv) = free(1).partials(&[3.7], &[c(0.0, 0.0)]).unwrap();
        assert_eq!((dx, dv), (vec![0.0], vec![c(0.0, 0.0)]));
        let (dx, dv) = harmonic(2, 2.0).partials(&[1.0, 0.0], &[c(0.0, 0.0), c(0.0, 1.0)]).unwrap();
        assert_eq!((dx, dv), (vec![-4.0, 0.0], vec![c(0.0, 0.0), c(0.0, 1.0)]));
    }

    fn probes(n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..n).map(|i| (vec![(i as f64 * 0.37).sin() * 3.0], vec![(i as f64 * 0.91).cos() * 2.0])).collect()
    }

    #[test]
    fn check_admissible() {
        let rep = harmonic(1, 1.0).check_admissible(&probes(100)).unwrap();
        assert!(rep.passed && rep.max_imag == 0.0);

        let doubled = Potential::custom("doubled", |x| 0.5 * x[0] * x[0], |x, g| g[0] = 2.0 * x[0]);
        let rep = LagrangianSpec::natural(1, 1.0, doubled).check_admissible(&probes(100)).unwrap();
        assert!(!rep.passed && !rep.gradient_consistent);

        let cosine = Potential::custom("cos", |x| x[0].cos(), |x, g| g[0] = -x[0].sin());
        let rep = LagrangianSpec::natural(1, 1.0, cosine).check_admissible(&probes(100)).unwrap();
        assert!(rep.passed && rep.max_gradient_error <= 1e-5, "{rep:?}");
    }

    #[test]
    fn quadratic_form_must_be_symmetric() {
        assert!(QuadraticForm::new(2, vec![1.0, 0.2, 0.0, 1.0]).is_err());
    }
}

mod diffusion {
    use super::*;

    #[test]
    fn simulate_examples() {
        let frozen = DiffusionModel::deterministic(1, |_, _, b| b[0] = 0.0, vec![1.0]).unwrap();
        let ens = simulate(&frozen, &TimeGrid::new(0.0, 1.0, 50).unwrap(), 4, 0).unwrap();
        assert!(ens.values().iter().all(|v| *v == 1.0));

        let decay = DiffusionModel::deterministic(1, |_, x, b| b[0] = -x[0], vec![1.0]).unwrap();
        let grid = TimeGrid::new(0.5, 1.5, 1000).unwrap();
        let ens = simulate(&decay, &grid, 1, 0).unwrap();
        let err = (0..=1000).map(|m| (ens.state(m, 0)[0] - (-(grid.time(m) - 0.5)).exp()).abs()).fold(0.0, f64::max);
        assert!(err <= 5.0 * grid.dt(), "{err}");

        let model = DiffusionModel::brownian(1, 1.0, InitialLaw::Point(vec![0.0])).unwrap();
        let n = 20_000;
        let ens = simulate(&model, &TimeGrid::new(1.0, 2.0, 100).unwrap(), n, 3).unwrap();
        let (mean, _) = ens.moments(100);
        assert!(mean[0].abs() <= 3.0 / (n as f64).sqrt());
        let incr: Vec<f64> = (0..n).map(|p| ens.state(100, p)[0] - ens.state(0, p)[0]).collect();
        let m = incr.iter().sum::<f64>() / n as f64;
        let var = incr.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() <= 0.05, "{var}");
    }

    #[test]
    fn density_at() {
        let (_, dm, _) = bm(1, 10, 1, 0);
        let pt = dm.density_at(1.0, &[0.0]).unwrap();
        assert!((pt.p - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert_eq!(pt.grad_p, vec![0.0]);

        let pt = DensityModel::dirac(2).density_at(1.3, &[0.4, -1.0]).unwrap();
        assert_eq!((pt.p, pt.grad_p, pt.div_a_p), (1.0, vec![0.0, 0.0], vec![0.0, 0.0]));

        let (_, dm, _) = stationary_ou(1, 10, 1, 0);
        let pt = dm.density_at(1.5, &[0.5]).unwrap();
        assert!((pt.grad_p[0] / pt.p + 1.0).abs() < 1e-12);
    }

    #[test]
    fn kde_fit_examples() {
        let (model, _, ens) = bm(1, 10, 20_000, 4);
        let kde = kde_fit(&ens, 1.0, BandwidthRule::Silverman, model.dispersion()).unwrap();
        let p = kde.density_at(1.0, &[0.0]).unwrap().p;
        let exact = 1.0 / (2.0 * PI).sqrt();
        assert!((p - exact).abs() / exact < 0.05, "{p}");

        let (model, _, ens) = stationary_ou(1, 10, 20_000, 5);
        let kde = kde_fit(&ens, 1.5, BandwidthRule::Silverman, model.dispersion()).unwrap();
        let pt = kde.density_at(1.5, &[0.5]).unwrap();
        assert!((pt.grad_p[0] / pt.p + 1.0).abs() < 0.1);

        let constant = PathEnsemble::from_fn(TimeGrid::new(0.0, 1.0, 10).unwrap(), 500, 1, |_, _, x| x[0] = 2.0).unwrap();
        assert!(kde_fit(&constant, 0.5, BandwidthRule::Silverman, model.dispersion()).is_err());
    }
}

mod nelson {
    use super::*;

    fn squares() -> PathEnsemble {
        PathEnsemble::from_fn(TimeGrid::new(0.0, 1.0, 100).unwrap(), 150, 1, |t, _, x| x[0] = t * t).unwrap()
    }

    #[test]
    fn forward_and_backward_on_a_parabola() {
        let ens = squares();
        let cfg = EstimatorConfig::default();
        let h = cfg.h(ens.grid());
        let fwd = forward_derivative(&ens, &cfg).unwrap();
        let bwd = backward_derivative(&ens, &cfg).unwrap();
        let t = ens.grid().time(40);
        assert!((fwd.value(fwd.slot_of(40).unwrap(), 0)[0].re - (2.0 * t + h)).abs() < 1e-9);
        assert!((bwd.value(bwd.slot_of(40).unwrap(), 0)[0].re - (2.0 * t - h)).abs() < 1e-9);
    }

    #[test]
    fn backward_of_a_constant_is_zero() {
        let ens = PathEnsemble::from_fn(TimeGrid::new(0.0, 1.0, 20).unwrap(), 150, 1, |_, p, x| x[0] = p as f64).unwrap();
        let bwd = backward_derivative(&ens, &EstimatorConfig::default()).unwrap();
        assert!((1..bwd.slots().len()).all(|s| bwd.slot_values(s).iter().all(|z| *z == c(0.0, 0.0))));
    }

    #[test]
    fn complex_derivative_of_a_parabola_is_real_up_to_h() {
        let ens = squares();
        let cx = regression_complex_derivative(&ens, &EstimatorConfig::default()).unwrap();
        let z = cx.value(cx.slot_of(50).unwrap(), 0)[0];
        assert!((z.re - 1.0).abs() < 1e-9 && (z.im - 0.01).abs() < 1e-9);
    }

    #[test]
    fn analytic_complex_derivative_examples() {
        let cfg = EstimatorConfig::default();
        let (model, dm, ens) = bm(1, 50, 500, 6);
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let (s, m) = (10, f.slots()[10]);
        let (t, x) = (ens.grid().time(m), ens.state(m, 7)[0]);
        assert!((f.value(s, 7)[0] - c(1.0, -1.0) * x / (2.0 * t)).norm() < 1e-14);

        let (model, dm, ens) = stationary_ou(2, 50, 500, 7);
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let x = ens.state(f.slots()[3], 1);
        assert!((f.value(3, 1)[1] - c(0.0, -x[1])).norm() < 1e-14);

        let drift = DiffusionModel::deterministic(1, |t, _, b| b[0] = 2.0 * t, vec![1.0]).unwrap();
        let ens = simulate(&drift, &TimeGrid::new(1.0, 2.0, 20).unwrap(), 2, 0).unwrap();
        let f = analytic_complex_derivative(&drift, &DensityModel::dirac(1), &ens, &cfg).unwrap();
        assert_eq!(f.value(5, 0)[0], c(2.0 * ens.grid().time(f.slots()[5]), 0.0));
    }

    #[test]
    fn derivative_of_functions() {
        let cfg = EstimatorConfig::default();
        let (model, dm, ens) = bm(1, 50, 300, 8);
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let g = derivative_of_function(&AffineMap::identity(1), &f, &model, &ens).unwrap();
        assert_eq!(f.slot_values(4), g.slot_values(4));

        let (model, dm, ens) = stationary_ou(1, 50, 300, 9);
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let g = derivative_of_function(&AffineMap::scaled(1, c(0.0, -1.0)), &f, &model, &ens).unwrap();
        let x = ens.state(g.slots()[6], 2)[0];
        assert!((g.value(6, 2)[0] - c(-x, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn second_derivative_examples() {
        let cfg = EstimatorConfig::default();
        let (model, dm, ens) = bm(1, 50, 300, 10);
        let f = second_derivative(&model, &dm, &ens, &cfg).unwrap();
        let m = f.slots()[20];
        let (t, x) = (ens.grid().time(m), ens.state(m, 0)[0]);
        assert!((f.value(20, 0)[0] - c(-x / (2.0 * t * t), 0.0)).norm() < 1e-14);

        let parabola = PathEnsemble::from_fn(TimeGrid::new(0.0, 1.0, 100).unwrap(), 1, 1, |t, _, x| x[0] = t * t).unwrap();
        let a = dirac_second_derivative(&parabola, &TimeSelection::All).unwrap();
        assert!((a.value(a.slot_of(50).unwrap(), 0)[0] - c(2.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn product_rule_examples() {
        let (model, dm, ens) = bm(1, 200, 20_000, 11);
        let f = analytic_complex_derivative(&model, &dm, &ens, &EstimatorConfig::default()).unwrap();
        let rep = product_rule_check(&f, &f.conjugate(), &ens, &ens, 1.5, 0.1).unwrap();
        assert!(rep.within(3.0), "{rep:?}");

        let consts = PathEnsemble::from_fn(TimeGrid::new(0.0, 1.0, 100).unwrap(), 200, 1, |_, _, x| x[0] = 3.0).unwrap();
        let cf = regression_complex_derivative(&consts, &EstimatorConfig::default()).unwrap();
        let rep = product_rule_check(&cf, &cf.conjugate(), &consts, &consts, 0.5, 0.05).unwrap();
        assert_eq!((rep.lhs, rep.residual), (0.0, 0.0));

        let time = PathEnsemble::from_fn(*ens.grid(), ens.n_paths(), 1, |t, _, x| x[0] = t).unwrap();
        let ft = regression_complex_derivative(&time, &EstimatorConfig::default()).unwrap();
        let rep = product_rule_check(&ft, &f.conjugate(), &time, &ens, 1.5, 0.1).unwrap();
        assert!(rep.within(3.0), "{rep:?}");
    }
}

mod variation {
    use super::*;

    fn embed(grid: TimeGrid, x: impl Fn(f64) -> f64) -> PathEnsemble {
        PathEnsemble::from_fn(grid, 1, 1, |t, _, s| s[0] = x(t)).unwrap()
    }

    fn shape(s: VariationShape, a: f64, b: f64) -> VariationProcess {
        VariationProcess::from_shape(&s, a, b).unwrap()
    }

    #[test]
    fn action_examples() {
        let ens = embed(TimeGrid::new(0.0, 2.0, 100).unwrap(), |_| 1.5);
        let f = dirac_complex_derivative(&ens, &TimeSelection::All).unwrap();
        assert_eq!(action(&ens, &f, &harmonic(1, 1.0)).unwrap().value, c(-2.25, 0.0));

        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let traj = classical_el_solve(&harmonic(1, 1.0), &[1.0], &[0.0], &grid).unwrap();
        let ens = traj.to_ensemble().unwrap();
        let f = dirac_complex_derivative(&ens, &TimeSelection::All).unwrap();
        let est = action(&ens, &f, &harmonic(1, 1.0)).unwrap();
        assert!((est.value.re + 2f64.sin() / 4.0).abs() <= 1e-6);

        let (model, dm, ens) = bm(1, 200, 20_000, 12);
        let f = analytic_complex_derivative(&model, &dm, &ens, &EstimatorConfig::default()).unwrap();
        let est = action(&ens, &f, &free(1)).unwrap();
        let target = -2f64.ln() / 4.0;
        assert!(est.value.re.abs() <= 3.0 * est.stderr_re);
        assert!((est.value.im - target).abs() <= 0.05 * target.abs(), "{est:?}");
    }

    #[test]
    fn fd_examples() {
        let (model, dm, ens) = bm(1, 100, 2000, 13);
        let cfg = EstimatorConfig::default();
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let zero = VariationProcess::zero(1).unwrap();
        assert_eq!(directional_derivative_fd(&ens, &f, &free(1), &zero, &FdOptions::default()).unwrap().value, c(0.0, 0.0));

        let sine = shape(VariationShape::Sine { amplitude: vec![1.0], harmonic: 1 }, 1.0, 2.0);
        let fd = directional_derivative_fd(&ens, &f, &free(1), &sine, &FdOptions::default()).unwrap();
        let second = second_derivative(&model, &dm, &ens, &cfg).unwrap();
        let formula = directional_derivative_formula(&ens, &f, &second, &free(1), &sine).unwrap();
        assert!((fd.value - formula.total).norm() <= 3.0 * fd.stderr.hypot(formula.stderr));

        let grid = TimeGrid::new(0.0, PI, 1000).unwrap();
        let ens = classical_el_solve(&harmonic(1, 1.0), &[1.0], &[0.3], &grid).unwrap().to_ensemble().unwrap();
        let f = dirac_complex_derivative(&ens, &TimeSelection::All).unwrap();
        let bump = shape(VariationShape::Bump { amplitude: vec![2.0] }, 0.0, PI);
        let est = directional_derivative_fd(&ens, &f, &harmonic(1, 1.0), &bump, &FdOptions::default()).unwrap();
        assert!(est.value.norm() <= 1e-4 * bump.sup_norm(&grid));
    }

    #[test]
    fn formula_examples() {
        let cfg = EstimatorConfig::default();
        let (model, dm, ens) = stationary_ou(1, 200, 4000, 14);
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let a = second_derivative(&model, &dm, &ens, &cfg).unwrap();
        let z = shape(VariationShape::Bump { amplitude: vec![1.0] }, 1.0, 2.0);
        let est = directional_derivative_formula(&ens, &f, &a, &harmonic(1, 1.0), &z).unwrap();
        assert!(est.total.norm() <= 3.0 * est.stderr, "{est:?}");

        let (model, dm, ens) = bm(1, 200, 4000, 15);
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let a = second_derivative(&model, &dm, &ens, &cfg).unwrap();
        let z = shape(VariationShape::Constant { value: vec![1.0] }, 1.0, 2.0);
        let formula = directional_derivative_formula(&ens, &f, &a, &free(1), &z).unwrap();
        let fd = directional_derivative_fd(&ens, &f, &free(1), &z, &FdOptions::default()).unwrap();
        assert!((fd.value - formula.total).norm() <= 3.0 * fd.stderr.hypot(formula.stderr));

        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let line = embed(grid, |t| t);
        let f = dirac_complex_derivative(&line, &TimeSelection::All).unwrap();
        let a = dirac_second_derivative(&line, &TimeSelection::All).unwrap();
        let ramp = shape(VariationShape::Ramp { amplitude: vec![1.0] }, 0.0, 1.0);
        let est = directional_derivative_formula(&line, &f, &a, &harmonic(1, 1.0), &ramp).unwrap();
        // ∫(−t)t dt + [1·Z]_0^1
        assert!((est.total.re - 2.0 / 3.0).abs() <= 1e-4);
    }

    #[test]
    fn el_residual_examples() {
        let cfg = EstimatorConfig::default();
        let (model, dm, ens) = stationary_ou(1, 100, 4000, 16);
        let res = el_residual(&ens, &model, &dm, &harmonic(1, 1.0), ResidualVariant::Complex, &cfg).unwrap();
        assert!(res.relative_size() <= 0.01);

        let (model, dm, ens) = bm(1, 100, 20_000, 17);
        let res = el_residual(&ens, &model, &dm, &harmonic(1, 1.0), ResidualVariant::Complex, &cfg).unwrap();
        for s in res.summary() {
            let closed = s.t * (1.0 - 0.5 / (s.t * s.t)).powi(2);
            assert!((s.mean_sq - closed).abs() <= 0.1 * closed, "{s:?}");
        }

        let grid = TimeGrid::new(0.0, PI, 1000).unwrap();
        let ens = classical_el_solve(&harmonic(1, 1.0), &[1.0], &[0.0], &grid).unwrap().to_ensemble().unwrap();
        let res = el_residual(
            &ens,
            &DiffusionModel::embedding(1),
            &DensityModel::dirac(1),
            &harmonic(1, 1.0),
            ResidualVariant::Complex,
            &cfg,
        )
        .unwrap();
        assert!(res.sup_norm() <= 1e-3);
    }

    #[test]
    fn classical_solver_examples() {
        let grid = TimeGrid::new(0.0, PI, 1000).unwrap();
        let traj = classical_el_solve(&harmonic(1, 1.0), &[1.0], &[0.0], &grid).unwrap();
        assert!((traj.position(1000)[0] + 1.0).abs() < 1e-6);

        let grid = TimeGrid::new(0.0, 2.0, 100).unwrap();
        let traj = classical_el_solve(&free(1), &[1.0], &[0.5], &grid).unwrap();
        assert!((0..=100).all(|m| (traj.position(m)[0] - (1.0 + 0.5 * grid.time(m))).abs() < 1e-12));
        let rest = classical_el_solve(&free(1), &[4.0], &[0.0], &grid).unwrap();
        assert!((0..=100).all(|m| traj.position(m).len() == 1 && rest.position(m)[0] == 4.0));
    }

    #[test]
    fn coherence_examples() {
        let rep = coherence_check(&harmonic(1, 1.0), &[1.0], &[0.0], &TimeGrid::new(0.0, PI, 1000).unwrap(), 1e-3).unwrap();
        assert!(rep.within_tolerance && rep.max_difference <= 1e-10);

        let parabola = embed(TimeGrid::new(0.0, 1.0, 1000).unwrap(), |t| t * t);
        let rep = coherence_check_path(&free(1), &parabola, 1e-3).unwrap();
        assert!(rep.commutes && rep.stochastic.iter().chain(&rep.classical).all(|r| (r + 2.0).abs() <= 1e-6));

        let rep = coherence_check(&free(2), &[0.0, 1.0], &[1.0, -1.0], &TimeGrid::new(0.0, 2.0, 500).unwrap(), 1e-9).unwrap();
        assert!(rep.within_tolerance && rep.commutes);
    }
}

mod noether {
    use super::*;

    #[test]
    fn apply_group_examples() {
        let (_, _, ens) = bm(2, 20, 50, 18);
        let same = apply_group(&ens, &OneParameterGroup::rotation(2, 0, 1).unwrap(), 0.0).unwrap();
        assert_eq!(same.values(), ens.values());

        let rot = apply_group(&ens, &OneParameterGroup::rotation(2, 0, 1).unwrap(), 0.83).unwrap();
        for (a, b) in ens.values().chunks(2).zip(rot.values().chunks(2)) {
            assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 1e-12);
        }

        let moved = apply_group(&ens, &OneParameterGroup::translation(vec![1.0, -2.0]).unwrap(), 1.0).unwrap();
        for (a, b) in ens.values().chunks(2).zip(moved.values().chunks(2)) {
            assert_eq!((b[0], b[1]), (a[0] + 1.0, a[1] - 2.0));
        }
    }

    #[test]
    fn invariance_examples() {
        let (model, dm, ens) = bm(2, 20, 200, 19);
        let f = analytic_complex_derivative(&model, &dm, &ens, &EstimatorConfig::default()).unwrap();
        let s = [-1.0, -0.5, 0.5, 1.0];
        let central = LagrangianSpec::natural(2, 1.0, Potential::central_power(1.0, 3.0).unwrap());
        let rot = OneParameterGroup::rotation(2, 0, 1).unwrap();
        assert!(invariance_check(&central, &rot, &ens, &f, &s, 1e-10).unwrap().invariant);

        let shift = OneParameterGroup::translation(vec![1.0, 0.0]).unwrap();
        let rep = invariance_check(&free(2), &shift, &ens, &f, &s, 1e-10).unwrap();
        assert_eq!(rep.max_mean_deviation, 0.0);
        assert!(!invariance_check(&harmonic(2, 1.0), &shift, &ens, &f, &s, 1e-10).unwrap().invariant);
    }

    #[test]
    fn commutation_examples() {
        let (model, dm, ens) = bm(2, 20, 200, 20);
        let cfg = EstimatorConfig::default();
        for (g, s) in [
            (OneParameterGroup::rotation(2, 0, 1).unwrap(), 0.0),
            (OneParameterGroup::translation(vec![0.0, 1.0]).unwrap(), 0.4),
            (OneParameterGroup::scaling(2).unwrap(), 0.2),
        ] {
            let rep = commutation_check(&g, &model, &dm, &ens, s, 1e-4, &cfg, true).unwrap();
            assert!(rep.max_discrepancy <= 1e-6, "{}: {rep:?}", g.label());
            assert!(rep.pushforward_discrepancy.unwrap() <= 1e-9, "{}: {rep:?}", g.label());
        }
    }

    #[test]
    fn conserved_quantity_examples() {
        let cfg = EstimatorConfig::default();
        let (model, dm, ens) = stationary_ou(2, 100, 4000, 21);
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let series = conserved_quantity(&harmonic(2, 1.0), &OneParameterGroup::rotation(2, 0, 1).unwrap(), &ens, &f).unwrap();
        assert!(series.warnings.is_empty());
        assert_eq!(constancy_test(&series).unwrap().verdict, Verdict::Conserved);

        let shift = OneParameterGroup::translation(vec![1.0, 0.0]).unwrap();
        let series = conserved_quantity(&harmonic(2, 1.0), &shift, &ens, &f).unwrap();
        assert!(series.warnings.iter().any(|w| w.contains(NOETHER_INAPPLICABLE)));

        let (model, dm, ens) = bm(1, 100, 4000, 22);
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let series = conserved_quantity(&free(1), &OneParameterGroup::translation(vec![1.0]).unwrap(), &ens, &f).unwrap();
        let (re, im): (Vec<f64>, Vec<f64>) = series.values.iter().map(|v| (v.re, v.im)).unzip();
        assert!(re.iter().zip(&series.stderr_re).all(|(v, se)| v.abs() <= 4.0 * se));
        assert!(im.iter().zip(&series.stderr_im).all(|(v, se)| v.abs() <= 4.0 * se));
    }

    #[test]
    fn constancy_examples() {
        let times: Vec<f64> = (0..20).map(|k| 1.0 + k as f64 * 0.05).collect();
        let flat = ConservedQuantitySeries::from_values(times.clone(), vec![c(0.7, -0.2); 20], vec![0.01; 20], vec![0.01; 20]).unwrap();
        assert_eq!(constancy_test(&flat).unwrap().verdict, Verdict::Conserved);

        let ramp = times.iter().map(|t| c(*t, 0.0)).collect();
        let drift = ConservedQuantitySeries::from_values(times, ramp, vec![1e-6; 20], vec![1e-6; 20]).unwrap();
        let rep = constancy_test(&drift).unwrap();
        assert_eq!(rep.verdict, Verdict::Drifting);
        assert!((rep.slope_re - 1.0).abs() < 1e-9);
    }
}

mod cli {
    use super::*;

    #[test]
    fn registries() {
        let text = list_registries();
        for name in ["free", "harmonic", "central_power"] {
            assert!(text.contains(name));
        }
        let mut reg = Registries::default();
        reg.register_potential("quartic", |_, _| Ok(Potential::central_power(1.0, 4.0).unwrap()));
        assert!(reg.list().contains("quartic"));
        let empty = Registries::empty();
        assert!(empty.potential_names().is_empty());
    }

    #[test]
    fn unknown_potential_names_registry_and_key() {
        let text = include_str!("../scenarios/harmonic_coherence.toml").replace("\"harmonic\"", "\"morse\"");
        assert!(Scenario::bundled("harmonic_coherence", &Registries::default()).is_ok());
        let err = Scenario::from_toml_str(&text, &Registries::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("potential") && msg.contains("lagrangian.potential") && msg.contains("morse"), "{msg}");
    }
}
