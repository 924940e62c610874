//! Finite-difference oracle for the expression-graph engine: on randomly
//! generated graphs, symbolic `derive` must agree with central differences,
//! and the one-sweep `derive_many` must agree with per-variable `derive`.

use pinn_core::autodiff::{ExprNode, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

struct RandomGraph {
    graph: Graph,
    x: ExprNode,
    y: ExprNode,
    output: ExprNode,
}

/// Build a random graph of at most 20 nodes whose values stay moderate at
/// the probe points (keeps the finite-difference comparison well
/// conditioned).
fn random_graph(rng: &mut ChaCha8Rng, probes: &[(f64, f64)]) -> RandomGraph {
    let mut g = Graph::new();
    let x = g.new_var("x").unwrap();
    let y = g.new_var("y").unwrap();
    let mut pool = vec![x, y, g.constant(rng.random_range(-2.0..2.0))];

    let in_range = |g: &mut Graph, x_n: ExprNode, y_n: ExprNode, node: ExprNode| -> bool {
        probes.iter().all(|&(xv, yv)| {
            g.bind_node(x_n, xv).unwrap();
            g.bind_node(y_n, yv).unwrap();
            matches!(g.eval(node), Ok(v) if v.abs() <= 30.0)
        })
    };

    let target_ops = rng.random_range(6..=16);
    let mut added = 0;
    let mut attempts = 0;
    while added < target_ops && attempts < 200 {
        attempts += 1;
        let a = pool[rng.random_range(0..pool.len())];
        let b = pool[rng.random_range(0..pool.len())];
        let candidate = match rng.random_range(0..10) {
            0 => g.add(a, b),
            1 => g.sub(a, b),
            2 => g.mul(a, b),
            3 => {
                // keep the denominator away from zero
                let bb = g.mul(b, b);
                let one = g.constant(1.0);
                let denom = g.add(one, bb);
                g.div(a, denom)
            }
            4 => g.neg(a),
            5 => {
                let e = if rng.random_range(0..2) == 0 { 2.0 } else { 3.0 };
                g.pow_const(a, e)
            }
            6 => g.tanh(a),
            7 => g.sin(a),
            8 => g.cos(a),
            _ => g.exp(a),
        };
        if in_range(&mut g, x, y, candidate) {
            pool.push(candidate);
            added += 1;
        }
    }
    // combine the pool tail so the output depends on several nodes
    let mut out = *pool.last().unwrap();
    for node in pool.iter().rev().skip(1).take(3) {
        out = g.add(out, *node);
    }
    RandomGraph {
        graph: g,
        x,
        y,
        output: out,
    }
}

fn eval_at(g: &mut Graph, rg: (ExprNode, ExprNode), node: ExprNode, xv: f64, yv: f64) -> f64 {
    g.bind_node(rg.0, xv).unwrap();
    g.bind_node(rg.1, yv).unwrap();
    g.eval(node).unwrap()
}

#[test]
fn derive_matches_central_differences_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240817);
    let probes: Vec<(f64, f64)> = (0..100)
        .map(|_| {
            (
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            )
        })
        .collect();

    for _ in 0..25 {
        let mut rgraph = random_graph(&mut rng, &probes);
        let before = rgraph.graph.len();
        let grads = rgraph
            .graph
            .derive(rgraph.output, &[rgraph.x, rgraph.y])
            .unwrap();
        let added = rgraph.graph.len() - before;
        assert!(
            added <= 8 * before,
            "derive added {added} nodes over {before}"
        );

        let g = &mut rgraph.graph;
        let vars = (rgraph.x, rgraph.y);
        for &(xv, yv) in &probes {
            let dx = eval_at(g, vars, grads[0], xv, yv);
            let dy = eval_at(g, vars, grads[1], xv, yv);
            let fx = (eval_at(g, vars, rgraph.output, xv + FD_STEP, yv)
                - eval_at(g, vars, rgraph.output, xv - FD_STEP, yv))
                / (2.0 * FD_STEP);
            let fy = (eval_at(g, vars, rgraph.output, xv, yv + FD_STEP)
                - eval_at(g, vars, rgraph.output, xv, yv - FD_STEP))
                / (2.0 * FD_STEP);
            assert!(
                rel_close(dx, fx, 1e-6),
                "d/dx mismatch at ({xv},{yv}): ad={dx}, fd={fx}"
            );
            assert!(
                rel_close(dy, fy, 1e-6),
                "d/dy mismatch at ({xv},{yv}): ad={dy}, fd={fy}"
            );

            // one reverse sweep equals per-variable derive
            eval_at(g, vars, rgraph.output, xv, yv);
            let many = g.derive_many(rgraph.output, &[rgraph.x, rgraph.y]).unwrap();
            assert!((many[0] - dx).abs() <= 1e-12 * dx.abs().max(1.0));
            assert!((many[1] - dy).abs() <= 1e-12 * dy.abs().max(1.0));
        }
    }
}

#[test]
fn toy_net_loss_gradient_matches_fd() {
    // 3-parameter toy network loss: l = (w2*tanh(w1*x + b1) - 0.7)^2
    let mut g = Graph::new();
    let x = g.new_var("x").unwrap();
    let w1 = g.new_var("w1").unwrap();
    let b1 = g.new_var("b1").unwrap();
    let w2 = g.new_var("w2").unwrap();
    let wx = g.mul(w1, x);
    let a = g.add(wx, b1);
    let h = g.tanh(a);
    let u = g.mul(w2, h);
    let target = g.constant(0.7);
    let diff = g.sub(u, target);
    let loss = g.mul(diff, diff);

    g.bind("x", 0.6).unwrap();
    let vals = [("w1", 0.9), ("b1", -0.2), ("w2", 1.3)];
    for (k, v) in vals {
        g.bind(k, v).unwrap();
    }
    let params = [w1, b1, w2];
    let grad = g.derive_many(loss, &params).unwrap();

    for (i, (key, v)) in vals.iter().enumerate() {
        g.bind(key, v + FD_STEP).unwrap();
        let up = g.eval(loss).unwrap();
        g.bind(key, v - FD_STEP).unwrap();
        let dn = g.eval(loss).unwrap();
        g.bind(key, *v).unwrap();
        let fd = (up - dn) / (2.0 * FD_STEP);
        assert!(
            rel_close(grad[i], fd, 1e-6),
            "{key}: ad={} fd={fd}",
            grad[i]
        );
    }
}

#[test]
fn nesting_reproduces_polynomial_derivatives_exactly() {
    // p(x) = 2x^3 - x^2 + 4x - 5 via pow_const
    let mut g = Graph::new();
    let x = g.new_var("x").unwrap();
    let two = g.constant(2.0);
    let x3 = g.pow_const(x, 3.0);
    let t1 = g.mul(two, x3);
    let x2 = g.pow_const(x, 2.0);
    let t2 = g.sub(t1, x2);
    let four = g.constant(4.0);
    let fx = g.mul(four, x);
    let t3 = g.add(t2, fx);
    let five = g.constant(5.0);
    let p = g.sub(t3, five);

    let d1 = g.derive(p, &[x]).unwrap()[0];
    let d2 = g.derive(d1, &[x]).unwrap()[0];
    let d3 = g.derive(d2, &[x]).unwrap()[0];
    for v in [-1.5, -0.3, 0.0, 0.8, 2.0] {
        g.bind("x", v).unwrap();
        let e1 = 6.0 * v * v - 2.0 * v + 4.0;
        let e2 = 12.0 * v - 2.0;
        assert!((g.eval(d1).unwrap() - e1).abs() <= 1e-12 * e1.abs().max(1.0));
        assert!((g.eval(d2).unwrap() - e2).abs() <= 1e-12 * e2.abs().max(1.0));
        assert!((g.eval(d3).unwrap() - 12.0).abs() <= 1e-12);
    }
}
