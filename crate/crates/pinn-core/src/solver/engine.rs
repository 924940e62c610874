//! Batched evaluation of loss-term groups.
//!
//! Each group (residual, initial, one per boundary condition, sample data)
//! owns a template graph: per-dimension input variables, the network's
//! weight variables, learnable PDE parameters, and one term node. The same
//! graph is evaluated at every point of the group by binding coordinate
//! columns, in fixed-size chunks of lanes.
//!
//! Reduction order is worker-independent: chunk boundaries are a fixed
//! constant, each chunk's partial sums accumulate lane-by-lane, and partials
//! combine in ascending chunk index regardless of how chunks were assigned
//! to workers. Two runs with different worker counts produce bitwise
//! identical losses and gradients.

use crate::autodiff::batch::{BatchBuf, BatchError, Binding, EvalPlan};
use crate::autodiff::{ExprNode, Graph};

use super::SolverError;

/// Points per evaluation chunk. Fixed: this is the floating-point reduction
/// granularity, so it must not depend on the worker count.
pub(crate) const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GroupKind {
    Residual,
    Initial,
    Boundary,
    Sample,
}

#[derive(Debug)]
pub(crate) enum VarBinding {
    /// Per-point values (coordinate columns, sample targets).
    Column(Vec<f64>),
    /// Same value at every point (pinned faces).
    Fixed(f64),
}

#[derive(Debug)]
pub(crate) struct BoundVar {
    pub slot: u32,
    pub binding: VarBinding,
}

#[derive(Debug)]
pub(crate) struct Group {
    pub kind: GroupKind,
    pub label: String,
    pub graph: Graph,
    pub plan: EvalPlan,
    /// Term node; for a periodic pair with both orders this is the sum of
    /// the value and slope terms.
    pub term: ExprNode,
    /// Residual node before squaring and weighting (residual group only).
    pub raw: Option<ExprNode>,
    pub inputs: Vec<BoundVar>,
    /// Per-point loss multiplier variable (residual and initial groups).
    pub lambda: Option<(u32, ExprNode)>,
    /// Weight variables aligned with the flat weight vector.
    pub weight_vars: Vec<(u32, ExprNode)>,
    /// Learnable-parameter variables aligned with the ParamSet.
    pub param_vars: Vec<(u32, ExprNode)>,
    pub n_points: usize,
    pub terms_per_point: usize,
}

impl Group {
    pub fn term_count(&self) -> usize {
        self.n_points * self.terms_per_point
    }
}

#[derive(Debug)]
pub(crate) struct GroupEval {
    /// Term value per point.
    pub values: Vec<f64>,
    /// Residual value per point (residual group only).
    pub raw_values: Option<Vec<f64>>,
    /// d(seed * sum of terms)/d(weights ++ params); empty without gradients.
    pub grad: Vec<f64>,
    /// d(seed * sum of terms)/d(lambda_i), per point.
    pub grad_lambda: Option<Vec<f64>>,
}

fn map_batch_err(group: &Group, start: usize, e: BatchError) -> SolverError {
    match e {
        BatchError::Unbound { key } => SolverError::Internal(format!(
            "unbound variable `{key}` in group `{}`",
            group.label
        )),
        BatchError::NonFinite { node, op, lane } => SolverError::NonFiniteLoss {
            group: group.label.clone(),
            point: start + lane,
            detail: format!("node {node} (`{op}`)"),
        },
    }
}

struct ChunkTask<'a> {
    chunk: usize,
    start: usize,
    end: usize,
    values: &'a mut [f64],
    raw: Option<&'a mut [f64]>,
    lam_grad: Option<&'a mut [f64]>,
}

/// Evaluate one chunk; returns the chunk's gradient partial when requested.
fn eval_chunk<'a>(
    group: &'a Group,
    weights: &[f64],
    params: &[f64],
    lambda: Option<&'a [f64]>,
    seed: f64,
    want_grad: bool,
    buf: &mut BatchBuf,
    bindings: &mut Vec<Binding<'a>>,
    task: &mut ChunkTask<'_>,
) -> Result<Vec<f64>, SolverError> {
    let lanes = task.end - task.start;
    bindings.clear();
    bindings.resize(group.graph.num_vars(), Binding::Unbound);
    for bv in &group.inputs {
        bindings[bv.slot as usize] = match &bv.binding {
            VarBinding::Column(col) => Binding::Column(&col[task.start..task.end]),
            VarBinding::Fixed(v) => Binding::Scalar(*v),
        };
    }
    for (i, (slot, _)) in group.weight_vars.iter().enumerate() {
        bindings[*slot as usize] = Binding::Scalar(weights[i]);
    }
    for (i, (slot, _)) in group.param_vars.iter().enumerate() {
        bindings[*slot as usize] = Binding::Scalar(params[i]);
    }
    if let Some((slot, _)) = group.lambda {
        bindings[slot as usize] = match lambda {
            Some(l) => Binding::Column(&l[task.start..task.end]),
            None => Binding::Scalar(1.0),
        };
    }

    buf.forward(&group.graph, &group.plan, bindings, lanes)
        .map_err(|e| map_batch_err(group, task.start, e))?;
    task.values
        .copy_from_slice(buf.values_of(group.term, lanes));
    if let (Some(raw), Some(node)) = (task.raw.as_deref_mut(), group.raw) {
        raw.copy_from_slice(buf.values_of(node, lanes));
    }

    if !want_grad {
        return Ok(Vec::new());
    }

    buf.backward(&group.graph, &group.plan, group.term, seed, lanes);
    let mut partial = vec![0.0; group.weight_vars.len() + group.param_vars.len()];
    for (i, (_, node)) in group.weight_vars.iter().enumerate() {
        let mut acc = 0.0;
        for &a in buf.adjoints_of(*node, lanes) {
            acc += a;
        }
        partial[i] = acc;
    }
    let off = group.weight_vars.len();
    for (i, (_, node)) in group.param_vars.iter().enumerate() {
        let mut acc = 0.0;
        for &a in buf.adjoints_of(*node, lanes) {
            acc += a;
        }
        partial[off + i] = acc;
    }
    if let (Some(lg), Some((_, node))) = (task.lam_grad.as_deref_mut(), group.lambda) {
        lg.copy_from_slice(buf.adjoints_of(node, lanes));
    }
    Ok(partial)
}

/// Evaluate a whole group across its points, fanning chunks out to
/// `workers` threads and reducing partial gradients in chunk order.
pub(crate) fn eval_group(
    group: &Group,
    weights: &[f64],
    params: &[f64],
    lambda: Option<&[f64]>,
    seed: f64,
    want_grad: bool,
    workers: usize,
    scratch: &mut [BatchBuf],
) -> Result<GroupEval, SolverError> {
    let n = group.n_points;
    let n_grad = group.weight_vars.len() + group.param_vars.len();
    if n == 0 {
        return Ok(GroupEval {
            values: Vec::new(),
            raw_values: group.raw.map(|_| Vec::new()),
            grad: vec![0.0; if want_grad { n_grad } else { 0 }],
            grad_lambda: group.lambda.map(|_| Vec::new()),
        });
    }
    if let Some(l) = lambda {
        assert_eq!(l.len(), n, "lambda length mismatch in `{}`", group.label);
    }

    let n_chunks = n.div_ceil(CHUNK);
    let mut values = vec![0.0; n];
    let mut raw_values = group.raw.map(|_| vec![0.0; n]);
    let want_lambda = want_grad && group.lambda.is_some();
    let mut lambda_grads = if want_lambda { Some(vec![0.0; n]) } else { None };

    // Cut the output slices at chunk boundaries.
    let mut tasks: Vec<ChunkTask> = Vec::with_capacity(n_chunks);
    {
        let mut v_rest: &mut [f64] = &mut values;
        let mut r_rest: Option<&mut [f64]> = raw_values.as_deref_mut();
        let mut l_rest: Option<&mut [f64]> = lambda_grads.as_deref_mut();
        for chunk in 0..n_chunks {
            let start = chunk * CHUNK;
            let end = (start + CHUNK).min(n);
            let lanes = end - start;
            let (v_head, v_tail) = v_rest.split_at_mut(lanes);
            v_rest = v_tail;
            let raw = r_rest.take().map(|r| {
                let (h, t) = r.split_at_mut(lanes);
                r_rest = Some(t);
                h
            });
            let lam_grad = l_rest.take().map(|l| {
                let (h, t) = l.split_at_mut(lanes);
                l_rest = Some(t);
                h
            });
            tasks.push(ChunkTask {
                chunk,
                start,
                end,
                values: v_head,
                raw,
                lam_grad,
            });
        }
    }

    // Contiguous runs of chunks per worker; arithmetic is identical for any
    // split because partials are kept per chunk.
    let workers = workers.max(1).min(n_chunks);
    let per = n_chunks.div_ceil(workers);
    let mut partials: Vec<Vec<f64>> = Vec::new();

    if workers == 1 {
        let buf = &mut scratch[0];
        let mut bindings = Vec::new();
        for task in tasks.iter_mut() {
            let p = eval_chunk(
                group, weights, params, lambda, seed, want_grad, buf, &mut bindings, task,
            )?;
            partials.push(p);
        }
    } else {
        let mut task_runs: Vec<Vec<ChunkTask>> = Vec::with_capacity(workers);
        let mut rest = tasks;
        for _ in 0..workers {
            let take = per.min(rest.len());
            let tail = rest.split_off(take);
            task_runs.push(rest);
            rest = tail;
        }
        let mut results: Vec<Result<Vec<(usize, Vec<f64>)>, SolverError>> = Vec::new();
        std::thread::scope(|s| {
            let mut handles = Vec::with_capacity(workers);
            for (run, buf) in task_runs.iter_mut().zip(scratch.iter_mut()) {
                handles.push(s.spawn(move || -> Result<Vec<(usize, Vec<f64>)>, SolverError> {
                    let mut out = Vec::with_capacity(run.len());
                    let mut bindings = Vec::new();
                    for task in run.iter_mut() {
                        let p = eval_chunk(
                            group, weights, params, lambda, seed, want_grad, buf,
                            &mut bindings, task,
                        )?;
                        out.push((task.chunk, p));
                    }
                    Ok(out)
                }));
            }
            for h in handles {
                results.push(h.join().expect("worker panicked"));
            }
        });
        let mut indexed: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n_chunks);
        for r in results {
            indexed.extend(r?);
        }
        debug_assert!(indexed.windows(2).all(|w| w[0].0 < w[1].0));
        partials = indexed.into_iter().map(|(_, p)| p).collect();
    }

    let grad = if want_grad {
        let mut grad = vec![0.0; n_grad];
        for p in &partials {
            for (gi, pi) in grad.iter_mut().zip(p) {
                *gi += pi;
            }
        }
        grad
    } else {
        Vec::new()
    };

    Ok(GroupEval {
        values,
        raw_values,
        grad,
        grad_lambda: lambda_grads,
    })
}
