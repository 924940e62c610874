use pinn_core::conditions::{BcValue, Condition, ConditionFn, DirichletBc, InitialCondition};
use pinn_core::domain::{Dimension, Domain, PointSet, Role, Side};
use pinn_core::dsl;
use pinn_core::net::{Activation, MLPSpec};
use pinn_core::solver::{compile, ParamSet, SolutionForm, SolverConfig};
use std::time::Instant;

fn main() {
    let workers: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(2);
    let mut d = Domain::new();
    d.add(Dimension::spatial("x", 0.0, 1.0).unwrap()).unwrap();
    d.add(Dimension::temporal("t", 0.0, 0.25).unwrap()).unwrap();
    let res = dsl::parse("u_t - u_xx", &d, &[]).unwrap();
    let conds = vec![
        Condition::Initial(InitialCondition {
            f: ConditionFn::parse("sin(pi*x)", &d).unwrap(),
            n_points: 100, seed: 2,
        }),
        Condition::Dirichlet(DirichletBc { dim: "x".into(), side: Side::Lower,
            value: BcValue::Constant(0.0), n_points: 100, seed: 3 }),
        Condition::Dirichlet(DirichletBc { dim: "x".into(), side: Side::Upper,
            value: BcValue::Constant(0.0), n_points: 100, seed: 4 }),
    ];
    let spec = MLPSpec::new(2, vec![20, 20], Activation::Tanh).unwrap();
    let cfg = SolverConfig { n_r: 5000, workers, seed: 0, ..Default::default() };
    let mut p = compile(d.clone(), res, ParamSet::empty(), conds, None,
        SolutionForm::Mlp(spec), cfg).unwrap();
    println!("{}", p.report());

    // relative L2 on a 50x50 grid vs analytic exp(-pi^2 t) sin(pi x)
    let grid = || {
        let mut rows = Vec::new();
        for i in 0..50 {
            for j in 0..50 {
                let x = i as f64 / 49.0;
                let t = 0.25 * j as f64 / 49.0;
                rows.push(vec![x, t]);
            }
        }
        PointSet::from_rows(rows, 2, Role::Sample)
    };
    let pts = grid();
    let rel_l2 = |p: &pinn_core::solver::CompiledProblem| {
        let pred = p.predict(&pts).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (i, v) in pred.values.iter().enumerate() {
            let x = pts.coord(i, 0);
            let t = pts.coord(i, 1);
            let exact = (-std::f64::consts::PI.powi(2) * t).exp() * (std::f64::consts::PI * x).sin();
            num += (v - exact).powi(2);
            den += exact * exact;
        }
        (num / den).sqrt()
    };

    let t0 = Instant::now();
    let rounds: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(20);
    for round in 0..rounds {
        p.fit(500).unwrap();
        let e = rel_l2(&p);
        let l = p.history().last().unwrap().loss;
        println!("iter {:5}  loss {:.3e}  relL2 {:.3e}  elapsed {:.1}s",
            (round + 1) * 500, l.total, e, t0.elapsed().as_secs_f64());
        if e <= 9e-3 { break; }
    }
}
