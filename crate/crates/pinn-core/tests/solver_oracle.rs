//! Finite-difference oracle for the composite loss: weight, PDE-parameter,
//! and multiplier gradients of random tiny problems must match central
//! differences of the total loss.

use pinn_core::conditions::{BcValue, Condition, ConditionFn, DirichletBc, InitialCondition};
use pinn_core::domain::{Dimension, Domain, PointSet, Role, Side, Strategy};
use pinn_core::dsl;
use pinn_core::net::{Activation, MLPSpec};
use pinn_core::solver::{
    compile, CompiledProblem, ParamSet, SampleSet, SelfAdaptive, SolutionForm, SolverConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn xt_domain() -> Domain {
    let mut d = Domain::new();
    d.add(Dimension::spatial("x", -1.0, 1.0).unwrap()).unwrap();
    d.add(Dimension::temporal("t", 0.0, 1.0).unwrap()).unwrap();
    d
}

/// Build one random tiny problem (Burgers or heat residual, optionally with
/// a learnable diffusivity) with self-adaptive weighting on.
fn random_problem(rng: &mut ChaCha8Rng, trial: u64) -> CompiledProblem {
    let d = xt_domain();
    let depth = rng.random_range(1..=3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
    let spec = MLPSpec::new(2, hidden, Activation::Tanh).unwrap();

    let with_param = trial % 3 == 2;
    let (residual, params) = if with_param {
        (
            dsl::parse("u_t - D*u_xx", &d, &["D"]).unwrap(),
            ParamSet::new(vec![("D".into(), 0.7, true)]).unwrap(),
        )
    } else if trial % 3 == 0 {
        (
            dsl::parse("u_t + u*u_x - (0.01/pi)*u_xx", &d, &[]).unwrap(),
            ParamSet::empty(),
        )
    } else {
        (dsl::parse("u_t - u_xx", &d, &[]).unwrap(), ParamSet::empty())
    };

    let conditions = vec![
        Condition::Initial(InitialCondition {
            f: ConditionFn::parse("-sin(pi*x)", &d).unwrap(),
            n_points: rng.random_range(3..=8),
            seed: 50 + trial,
        }),
        Condition::Dirichlet(DirichletBc {
            dim: "x".into(),
            side: Side::Lower,
            value: BcValue::Constant(0.0),
            n_points: rng.random_range(2..=5),
            seed: 60 + trial,
        }),
    ];

    let samples = if with_param {
        let n = rng.random_range(4..=8);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let pts = PointSet::from_rows(rows, 2, Role::Sample);
        Some(SampleSet::new(&d, pts, targets).unwrap())
    } else {
        None
    };

    let config = SolverConfig {
        n_r: rng.random_range(5..=20),
        strategy: Strategy::LatinHypercube,
        self_adaptive: SelfAdaptive::On { lr_lambda: 0.01 },
        workers: 1,
        seed: trial,
        ..SolverConfig::default()
    };

    let mut p = compile(
        d,
        residual,
        params,
        conditions,
        samples,
        SolutionForm::Mlp(spec),
        config,
    )
    .unwrap();

    // non-trivial multipliers so the lambda path is exercised
    let lr: Vec<f64> = (0..p.lambda_r().len())
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    let l0: Vec<f64> = (0..p.lambda_0().len())
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    p.set_lambda(&lr, &l0);
    p
}

fn fd_weight(p: &mut CompiledProblem, i: usize) -> f64 {
    let mut flat = p.weights().flat.clone();
    let v = flat[i];
    flat[i] = v + FD_STEP;
    p.set_weights(&flat);
    let up = p.loss().unwrap().total;
    flat[i] = v - FD_STEP;
    p.set_weights(&flat);
    let dn = p.loss().unwrap().total;
    flat[i] = v;
    p.set_weights(&flat);
    (up - dn) / (2.0 * FD_STEP)
}

fn fd_param(p: &mut CompiledProblem, i: usize) -> f64 {
    let mut vals = p.params().values().to_vec();
    let v = vals[i];
    vals[i] = v + FD_STEP;
    p.set_param_values(&vals);
    let up = p.loss().unwrap().total;
    vals[i] = v - FD_STEP;
    p.set_param_values(&vals);
    let dn = p.loss().unwrap().total;
    vals[i] = v;
    p.set_param_values(&vals);
    (up - dn) / (2.0 * FD_STEP)
}

fn fd_lambda_r(p: &mut CompiledProblem, i: usize) -> f64 {
    let mut lr = p.lambda_r().to_vec();
    let l0 = p.lambda_0().to_vec();
    let v = lr[i];
    lr[i] = v + FD_STEP;
    p.set_lambda(&lr, &l0);
    let up = p.loss().unwrap().total;
    lr[i] = v - FD_STEP;
    p.set_lambda(&lr, &l0);
    let dn = p.loss().unwrap().total;
    lr[i] = v;
    p.set_lambda(&lr, &l0);
    (up - dn) / (2.0 * FD_STEP)
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..12u64 {
        let mut p = random_problem(&mut rng, trial);
        let (_, grads) = p.loss_and_grad().unwrap();

        // all weights for small nets are cheap enough to check exhaustively
        let n_w = grads.weights.len();
        let step = (n_w / 10).max(1);
        for i in (0..n_w).step_by(step) {
            let fd = fd_weight(&mut p, i);
            assert!(
                rel_close(grads.weights[i], fd, 1e-5),
                "trial {trial} weight {i}: ad={} fd={fd}",
                grads.weights[i]
            );
        }

        for i in 0..grads.params.len() {
            let fd = fd_param(&mut p, i);
            assert!(
                rel_close(grads.params[i], fd, 1e-5),
                "trial {trial} param {i}: ad={} fd={fd}",
                grads.params[i]
            );
        }

        for i in (0..grads.lambda_r.len()).step_by(3) {
            let fd = fd_lambda_r(&mut p, i);
            assert!(
                rel_close(grads.lambda_r[i], fd, 1e-5),
                "trial {trial} lambda_r {i}: ad={} fd={fd}",
                grads.lambda_r[i]
            );
        }
    }
}

#[test]
fn loss_decomposition_sums_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..6u64 {
        let p = random_problem(&mut rng, 100 + trial);
        let l = p.loss().unwrap();
        assert_eq!(l.total.to_bits(), (l.l_s + l.l_r + l.l_b + l.l_0).to_bits());
        assert!(l.l_s >= 0.0 && l.l_r >= 0.0 && l.l_b >= 0.0 && l.l_0 >= 0.0);
    }
}
