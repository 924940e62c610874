//! Batched graph evaluation over many binding points at once.
//!
//! A compiled problem evaluates the same graph at thousands of collocation
//! points per iteration. Rebuilding or re-walking the graph per point would
//! dominate runtime, so this module evaluates node-by-node over a *lane*
//! dimension: for each active node, a tight loop computes the value for all
//! points in the chunk. The numeric reverse sweep works the same way and
//! yields per-lane adjoints for every variable of interest (weights, PDE
//! parameters, per-point loss multipliers) in a single pass.

use super::{AdError, ExprNode, Graph, Op};

/// Per-variable-slot input for a batched evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Binding<'a> {
    /// Variable not supplied; evaluating a node that uses it is an error.
    Unbound,
    /// Same value in every lane (network weights, learnable parameters).
    Scalar(f64),
    /// One value per lane (point coordinates, per-point multipliers).
    Column(&'a [f64]),
}

/// Precomputed traversal for a fixed graph: which nodes to evaluate and
/// which of them lie on a path to a gradient target.
#[derive(Debug, Clone)]
pub struct EvalPlan {
    order: Vec<u32>,
    relevant: Vec<bool>,
    /// Gradient targets the outputs do not depend on: their adjoint rows
    /// must still be zeroed so stale buffer contents never leak out.
    unreachable_targets: Vec<u32>,
    n_nodes: usize,
}

impl EvalPlan {
    /// Plan evaluation of `outputs`, with reverse sweeps pruned to subgraphs
    /// that can reach one of `grad_targets`.
    pub fn new(graph: &Graph, outputs: &[ExprNode], grad_targets: &[ExprNode]) -> EvalPlan {
        let n_nodes = graph.len();
        let mut reach = vec![false; n_nodes];
        for out in outputs {
            reach[out.index()] = true;
        }
        for i in (0..n_nodes).rev() {
            if !reach[i] {
                continue;
            }
            let (p, q) = graph.nodes[i].parents();
            if let Some(p) = p {
                reach[p as usize] = true;
            }
            if let Some(q) = q {
                reach[q as usize] = true;
            }
        }
        let order: Vec<u32> = (0..n_nodes as u32).filter(|&i| reach[i as usize]).collect();

        let mut relevant = vec![false; n_nodes];
        for t in grad_targets {
            relevant[t.index()] = true;
        }
        for i in 0..n_nodes {
            if relevant[i] {
                continue;
            }
            let (p, q) = graph.nodes[i].parents();
            relevant[i] = p.map_or(false, |p| relevant[p as usize])
                || q.map_or(false, |q| relevant[q as usize]);
        }

        let unreachable_targets = grad_targets
            .iter()
            .map(|t| t.index() as u32)
            .filter(|&i| !reach[i as usize])
            .collect();

        EvalPlan {
            order,
            relevant,
            unreachable_targets,
            n_nodes,
        }
    }

    pub fn active_nodes(&self) -> usize {
        self.order.len()
    }
}

#[derive(Debug)]
pub enum BatchError {
    Unbound { key: String },
    NonFinite { node: usize, op: &'static str, lane: usize },
}

impl From<BatchError> for AdError {
    fn from(e: BatchError) -> AdError {
        match e {
            BatchError::Unbound { key } => AdError::UnboundVariable(key),
            BatchError::NonFinite { node, op, .. } => AdError::NonFinite {
                node,
                op,
                value: f64::NAN,
            },
        }
    }
}

/// Reusable value/adjoint storage for batched sweeps. One per worker thread.
#[derive(Debug, Default)]
pub struct BatchBuf {
    values: Vec<f64>,
    adjoints: Vec<f64>,
    stride: usize,
    n_nodes: usize,
}

impl BatchBuf {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure(&mut self, n_nodes: usize, lanes: usize) {
        if self.n_nodes < n_nodes || self.stride < lanes {
            self.stride = self.stride.max(lanes);
            self.n_nodes = self.n_nodes.max(n_nodes);
            self.values.resize(self.n_nodes * self.stride, 0.0);
            self.adjoints.resize(self.n_nodes * self.stride, 0.0);
        }
    }

    pub fn values_of(&self, node: ExprNode, lanes: usize) -> &[f64] {
        let start = node.index() * self.stride;
        &self.values[start..start + lanes]
    }

    pub fn adjoints_of(&self, node: ExprNode, lanes: usize) -> &[f64] {
        let start = node.index() * self.stride;
        &self.adjoints[start..start + lanes]
    }

    /// Forward sweep: fill values for every active node across `lanes`
    /// points. `bindings` is indexed by variable slot.
    pub fn forward(
        &mut self,
        graph: &Graph,
        plan: &EvalPlan,
        bindings: &[Binding],
        lanes: usize,
    ) -> Result<(), BatchError> {
        assert!(lanes > 0);
        self.ensure(plan.n_nodes, lanes);
        let stride = self.stride;
        for &id in &plan.order {
            let i = id as usize;
            // Split so the destination row can be written while parent rows
            // (always at lower indices) are read.
            let (head, tail) = self.values.split_at_mut(i * stride);
            let dst = &mut tail[..lanes];
            let row = |p: u32| -> &[f64] {
                let s = p as usize * stride;
                &head[s..s + lanes]
            };
            match graph.nodes[i] {
                Op::Const(c) => dst.fill(c),
                Op::Var(slot) => match bindings
                    .get(slot as usize)
                    .copied()
                    .unwrap_or(Binding::Unbound)
                {
                    Binding::Scalar(v) => dst.fill(v),
                    Binding::Column(col) => {
                        assert_eq!(col.len(), lanes, "binding column length mismatch");
                        dst.copy_from_slice(col);
                    }
                    Binding::Unbound => {
                        return Err(BatchError::Unbound {
                            key: graph.var_keys[slot as usize].clone(),
                        })
                    }
                },
                Op::Add(a, b) => {
                    let (ra, rb) = (row(a), row(b));
                    for k in 0..lanes {
                        dst[k] = ra[k] + rb[k];
                    }
                }
                Op::Sub(a, b) => {
                    let (ra, rb) = (row(a), row(b));
                    for k in 0..lanes {
                        dst[k] = ra[k] - rb[k];
                    }
                }
                Op::Mul(a, b) => {
                    let (ra, rb) = (row(a), row(b));
                    for k in 0..lanes {
                        dst[k] = ra[k] * rb[k];
                    }
                }
                Op::Div(a, b) => {
                    let (ra, rb) = (row(a), row(b));
                    for k in 0..lanes {
                        dst[k] = ra[k] / rb[k];
                    }
                }
                Op::Neg(a) => {
                    let ra = row(a);
                    for k in 0..lanes {
                        dst[k] = -ra[k];
                    }
                }
                Op::PowConst(a, e) => {
                    let ra = row(a);
                    if e == 2.0 {
                        for k in 0..lanes {
                            dst[k] = ra[k] * ra[k];
                        }
                    } else {
                        for k in 0..lanes {
                            dst[k] = ra[k].powf(e);
                        }
                    }
                }
                Op::Tanh(a) => {
                    let ra = row(a);
                    for k in 0..lanes {
                        dst[k] = ra[k].tanh();
                    }
                }
                Op::Sin(a) => {
                    let ra = row(a);
                    for k in 0..lanes {
                        dst[k] = ra[k].sin();
                    }
                }
                Op::Cos(a) => {
                    let ra = row(a);
                    for k in 0..lanes {
                        dst[k] = ra[k].cos();
                    }
                }
                Op::Exp(a) => {
                    let ra = row(a);
                    for k in 0..lanes {
                        dst[k] = ra[k].exp();
                    }
                }
            }
            if let Some(lane) = dst.iter().position(|v| !v.is_finite()) {
                return Err(BatchError::NonFinite {
                    node: i,
                    op: graph.nodes[i].name(),
                    lane,
                });
            }
        }
        Ok(())
    }

    /// Numeric reverse sweep from `output`, seeding every lane's output
    /// adjoint with `seed`. Must follow a `forward` with the same plan and
    /// lane count. Only nodes on a path to the plan's gradient targets are
    /// touched.
    pub fn backward(&mut self, graph: &Graph, plan: &EvalPlan, output: ExprNode, seed: f64, lanes: usize) {
        let stride = self.stride;
        for &id in &plan.order {
            let i = id as usize;
            if plan.relevant[i] {
                let s = i * stride;
                self.adjoints[s..s + lanes].fill(0.0);
            }
        }
        for &id in &plan.unreachable_targets {
            let s = id as usize * stride;
            self.adjoints[s..s + lanes].fill(0.0);
        }
        if !plan.relevant[output.index()] {
            return;
        }
        {
            let s = output.index() * stride;
            self.adjoints[s..s + lanes].fill(seed);
        }

        for &id in plan.order.iter().rev() {
            let i = id as usize;
            if !plan.relevant[i] {
                continue;
            }
            let (adj_head, adj_tail) = self.adjoints.split_at_mut(i * stride);
            let g = &adj_tail[..lanes];
            let vals = &self.values;
            let vrow = |p: u32| -> &[f64] {
                let s = p as usize * stride;
                &vals[s..s + lanes]
            };
            fn arow<'h>(head: &'h mut [f64], p: u32, stride: usize, lanes: usize) -> &'h mut [f64] {
                let s = p as usize * stride;
                &mut head[s..s + lanes]
            }
            let rel = |p: u32| plan.relevant[p as usize];
            match graph.nodes[i] {
                Op::Const(_) | Op::Var(_) => {}
                Op::Add(a, b) => {
                    if rel(a) {
                        let da = arow(adj_head, a, stride, lanes);
                        for k in 0..lanes {
                            da[k] += g[k];
                        }
                    }
                    if rel(b) {
                        let db = arow(adj_head, b, stride, lanes);
                        for k in 0..lanes {
                            db[k] += g[k];
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if rel(a) {
                        let da = arow(adj_head, a, stride, lanes);
                        for k in 0..lanes {
                            da[k] += g[k];
                        }
                    }
                    if rel(b) {
                        let db = arow(adj_head, b, stride, lanes);
                        for k in 0..lanes {
                            db[k] -= g[k];
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if rel(a) {
                        let vb = vrow(b);
                        let da = arow(adj_head, a, stride, lanes);
                        for k in 0..lanes {
                            da[k] += g[k] * vb[k];
                        }
                    }
                    if rel(b) {
                        let va = vrow(a);
                        let db = arow(adj_head, b, stride, lanes);
                        for k in 0..lanes {
                            db[k] += g[k] * va[k];
                        }
                    }
                }
                Op::Div(a, b) => {
                    if rel(a) {
                        let vb = vrow(b);
                        let da = arow(adj_head, a, stride, lanes);
                        for k in 0..lanes {
                            da[k] += g[k] / vb[k];
                        }
                    }
                    if rel(b) {
                        let vb = vrow(b);
                        let vn = vrow(id);
                        let db = arow(adj_head, b, stride, lanes);
                        for k in 0..lanes {
                            db[k] -= g[k] * vn[k] / vb[k];
                        }
                    }
                }
                Op::Neg(a) => {
                    if rel(a) {
                        let da = arow(adj_head, a, stride, lanes);
                        for k in 0..lanes {
                            da[k] -= g[k];
                        }
                    }
                }
                Op::PowConst(a, e) => {
                    if rel(a) {
                        let va = vrow(a);
                        let da = arow(adj_head, a, stride, lanes);
                        if e == 2.0 {
                            for k in 0..lanes {
                                da[k] += g[k] * 2.0 * va[k];
                            }
                        } else {
                            for k in 0..lanes {
                                da[k] += g[k] * e * va[k].powf(e - 1.0);
                            }
                        }
                    }
                }
                Op::Tanh(a) => {
                    if rel(a) {
                        let vn = vrow(id);
                        let da = arow(adj_head, a, stride, lanes);
                        for k in 0..lanes {
                            da[k] += g[k] * (1.0 - vn[k] * vn[k]);
                        }
                    }
                }
                Op::Sin(a) => {
                    if rel(a) {
                        let va = vrow(a);
                        let da = arow(adj_head, a, stride, lanes);
                        for k in 0..lanes {
                            da[k] += g[k] * va[k].cos();
                        }
                    }
                }
                Op::Cos(a) => {
                    if rel(a) {
                        let va = vrow(a);
                        let da = arow(adj_head, a, stride, lanes);
                        for k in 0..lanes {
                            da[k] -= g[k] * va[k].sin();
                        }
                    }
                }
                Op::Exp(a) => {
                    if rel(a) {
                        let vn = vrow(id);
                        let da = arow(adj_head, a, stride, lanes);
                        for k in 0..lanes {
                            da[k] += g[k] * vn[k];
                        }
                    }
                }
            }
        }
    }
}
