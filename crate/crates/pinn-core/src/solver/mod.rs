//! Loss assembly and the forward (collocation) / inverse (discovery)
//! training loop.
//!
//! `compile` samples all point sets, instantiates one template graph per
//! loss group, and freezes the evaluation plans; `fit` runs the
//! descent/ascent loop. The composite loss is
//! `L = L_s + L_r + L_b + L_0`, each component a mean of squared terms;
//! with self-adaptive training on, residual and initial terms carry
//! per-point trainable multipliers applied as `lambda^2`.
//!
//! Graph-reuse strategy: groups are compiled once and never mutated.
//! Training rebinds inputs (coordinate columns, current weights, current
//! parameters, current multipliers) into the same graphs each iteration, in
//! fixed-size chunks evaluated by up to `workers` threads.

mod engine;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::batch::{BatchBuf, Binding, EvalPlan};
use crate::autodiff::{AdError, ExprNode, Graph};
use crate::conditions::{CondError, Condition};
use crate::derive_seed;
use crate::domain::{Domain, DomainError, PointSet, Strategy};
use crate::dsl::{self, CompileCtx, DslError, ResidualExpr};
use crate::net::{self, MLPSpec, NetError, WeightStore};
use crate::optim::{adam_step, sgd_step, AdamParams, AdamState, OptimError};

use engine::{eval_group, BoundVar, Group, GroupKind, VarBinding, CHUNK};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("network input width {net} does not match domain dimension count {domain}")]
    WidthMismatch { net: usize, domain: usize },
    #[error("initial condition requires a temporal dimension")]
    IcWithoutTemporal,
    #[error("discovery mode (trainable parameters) requires non-empty sample data")]
    InverseWithoutSamples,
    #[error("residual uses parameter `{0}` which is not declared")]
    UndeclaredParameter(String),
    #[error("domain has no dimensions")]
    EmptyDomain,
    #[error("collocation count n_r must be >= 1")]
    NoCollocationPoints,
    #[error("sample set invalid: {0}")]
    InvalidSamples(String),
    #[error("non-finite loss in {group} at point {point}: {detail}")]
    NonFiniteLoss {
        group: String,
        point: usize,
        detail: String,
    },
    #[error("training diverged at iteration {iteration}: {reason} (last finite iteration: {last_finite})")]
    Diverged {
        iteration: u64,
        last_finite: u64,
        reason: String,
    },
    #[error("λ update: {0}")]
    Lambda(String),
    #[error("no MLP weights in this problem (injected solution)")]
    NoWeights,
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Cond(#[from] CondError),
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Graph(#[from] AdError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("internal: {0}")]
    Internal(String),
}

/// Learnable PDE coefficients for discovery problems.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<f64>,
    trainable: Vec<bool>,
}

impl ParamSet {
    pub fn empty() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn new(entries: Vec<(String, f64, bool)>) -> Result<Self, SolverError> {
        let mut names = Vec::new();
        let mut values = Vec::new();
        let mut trainable = Vec::new();
        for (n, v, t) in entries {
            if names.contains(&n) {
                return Err(SolverError::Internal(format!("duplicate parameter `{n}`")));
            }
            if !v.is_finite() {
                return Err(SolverError::Internal(format!(
                    "parameter `{n}` has non-finite value"
                )));
            }
            names.push(n);
            values.push(v);
            trainable.push(t);
        }
        Ok(ParamSet {
            names,
            values,
            trainable,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn any_trainable(&self) -> bool {
        self.trainable.iter().any(|&t| t)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, f64, bool)> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.trainable)
            .map(|((n, &v), &t)| (n.as_str(), v, t))
    }
}

/// Observed data for assimilation / discovery: points and target values.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub points: PointSet,
    pub targets: Vec<f64>,
}

impl SampleSet {
    pub fn new(domain: &Domain, points: PointSet, targets: Vec<f64>) -> Result<Self, SolverError> {
        if points.len() != targets.len() {
            return Err(SolverError::InvalidSamples(format!(
                "{} points vs {} targets",
                points.len(),
                targets.len()
            )));
        }
        if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
            return Err(SolverError::InvalidSamples(format!(
                "target {i} is not finite"
            )));
        }
        for i in 0..points.len() {
            if !domain.contains(points.row(i)) {
                return Err(SolverError::InvalidSamples(format!(
                    "point {i} is outside the domain"
                )));
            }
        }
        Ok(SampleSet { points, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerChoice {
    Adam(AdamParams),
    Sgd { lr: f64 },
}

impl Default for OptimizerChoice {
    fn default() -> Self {
        OptimizerChoice::Adam(AdamParams::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelfAdaptive {
    Off,
    On { lr_lambda: f64 },
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub n_r: usize,
    pub strategy: Strategy,
    pub optimizer: OptimizerChoice,
    /// Learning rate for PDE parameters; defaults to the weight rate.
    pub param_lr: Option<f64>,
    pub self_adaptive: SelfAdaptive,
    pub workers: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            n_r: 10_000,
            strategy: Strategy::LatinHypercube,
            optimizer: OptimizerChoice::default(),
            param_lr: None,
            self_adaptive: SelfAdaptive::Off,
            workers: 1,
            seed: 0,
        }
    }
}

/// Loss components and their sum (`total = l_s + l_r + l_b + l_0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_r: f64,
    pub l_b: f64,
    pub l_0: f64,
    pub total: f64,
}

/// Gradients of the total loss for one evaluation.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub params: Vec<f64>,
    pub lambda_r: Vec<f64>,
    pub lambda_0: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: u64,
    pub loss: LossBreakdown,
    pub params: Vec<(String, f64)>,
    pub millis: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    records: Vec<IterationRecord>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// One JSON object per line: iteration, loss components, parameter
    /// estimates, wall time.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = write!(
                out,
                "{{\"iteration\":{},\"l_s\":{},\"l_r\":{},\"l_b\":{},\"l_0\":{},\"total\":{},\"params\":{{",
                r.iteration, r.loss.l_s, r.loss.l_r, r.loss.l_b, r.loss.l_0, r.loss.total
            );
            for (i, (name, value)) in r.params.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "\"{name}\":{value}");
            }
            let _ = writeln!(out, "}},\"millis\":{}}}", r.millis);
        }
        out
    }
}

/// Ascent step on per-point multipliers: `λ' = λ + lr_lambda · grad`.
pub fn self_adaptive_step(
    lambda: &mut [f64],
    grad: &[f64],
    lr_lambda: f64,
) -> Result<(), SolverError> {
    if lambda.len() != grad.len() {
        return Err(SolverError::Lambda(format!(
            "length mismatch: {} multipliers vs {} gradients",
            lambda.len(),
            grad.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(SolverError::Lambda(format!(
            "non-finite gradient component at index {i}"
        )));
    }
    for (l, g) in lambda.iter_mut().zip(grad) {
        *l += lr_lambda * g;
    }
    Ok(())
}

/// The solution ansatz: a real MLP, or (for tests) an injected closed form
/// built directly from the input nodes.
#[derive(Clone)]
pub enum SolutionForm {
    Mlp(MLPSpec),
    Injected(Arc<dyn Fn(&mut Graph, &[ExprNode]) -> ExprNode + Send + Sync>),
}

impl std::fmt::Debug for SolutionForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolutionForm::Mlp(spec) => f.debug_tuple("Mlp").field(spec).finish(),
            SolutionForm::Injected(_) => f.write_str("Injected(..)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermCounts {
    pub residual: usize,
    pub initial: usize,
    pub boundary: usize,
    pub sample: usize,
}

impl TermCounts {
    pub fn total(&self) -> usize {
        self.residual + self.initial + self.boundary + self.sample
    }
}

#[derive(Debug)]
struct PredictPlan {
    graph: Graph,
    plan: EvalPlan,
    u: ExprNode,
    dim_slots: Vec<u32>,
    weight_slots: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub values: Vec<f64>,
    /// Indices of supplied points outside the domain box (still evaluated).
    pub out_of_bounds: Vec<usize>,
}

#[derive(Debug)]
enum OptState {
    Adam(AdamState),
    Sgd { lr: f64 },
}

impl OptState {
    fn new(choice: OptimizerChoice, n: usize, lr_override: Option<f64>) -> Self {
        match choice {
            OptimizerChoice::Adam(mut p) => {
                if let Some(lr) = lr_override {
                    p.lr = lr;
                }
                OptState::Adam(AdamState::new(n, p))
            }
            OptimizerChoice::Sgd { lr } => OptState::Sgd {
                lr: lr_override.unwrap_or(lr),
            },
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), OptimError> {
        match self {
            OptState::Adam(st) => adam_step(st, params, grad),
            OptState::Sgd { lr } => sgd_step(params, grad, *lr),
        }
    }
}

/// A fully compiled problem: sampled points, template graphs, initialized
/// network, optimizer state, and training history.
#[derive(Debug)]
pub struct CompiledProblem {
    domain: Domain,
    config: SolverConfig,
    net_spec: Option<MLPSpec>,
    weights: WeightStore,
    params: ParamSet,
    lambda_r: Vec<f64>,
    lambda_0: Vec<f64>,
    groups: Vec<Group>,
    counts: TermCounts,
    history: TrainingHistory,
    opt_w: OptState,
    opt_p: OptState,
    predict: PredictPlan,
    collocation: PointSet,
    scratch: RefCell<Vec<BatchBuf>>,
}

struct GraphParts {
    graph: Graph,
    dim_vars: Vec<ExprNode>,
    weight_vars: Vec<(u32, ExprNode)>,
    param_vars: Vec<(u32, ExprNode)>,
    wv: Option<net::WeightVars>,
}

struct Builder<'a> {
    domain: &'a Domain,
    solution: &'a SolutionForm,
    weights: &'a WeightStore,
    params: &'a ParamSet,
}

impl<'a> Builder<'a> {
    fn new_graph(&self) -> Result<GraphParts, SolverError> {
        let mut graph = Graph::new();
        let mut dim_vars = Vec::with_capacity(self.domain.len());
        for d in self.domain.dims() {
            dim_vars.push(graph.new_var(&d.name)?);
        }
        let (weight_vars, wv) = match self.solution {
            SolutionForm::Mlp(_) => {
                let wv = net::register_weights(&mut graph, self.weights)?;
                let pairs = wv
                    .nodes()
                    .iter()
                    .map(|&n| (graph.var_slot(n).unwrap(), n))
                    .collect();
                (pairs, Some(wv))
            }
            SolutionForm::Injected(_) => (Vec::new(), None),
        };
        let mut param_vars = Vec::with_capacity(self.params.len());
        for name in self.params.names() {
            let node = graph.new_var(name)?;
            param_vars.push((graph.var_slot(node).unwrap(), node));
        }
        Ok(GraphParts {
            graph,
            dim_vars,
            weight_vars,
            param_vars,
            wv,
        })
    }

    fn u_at(&self, parts: &mut GraphParts, inputs: &[ExprNode]) -> Result<ExprNode, SolverError> {
        match self.solution {
            SolutionForm::Mlp(spec) => Ok(net::forward(
                spec,
                parts.wv.as_ref().unwrap(),
                self.weights,
                &mut parts.graph,
                inputs,
            )?),
            SolutionForm::Injected(f) => Ok(f(&mut parts.graph, inputs)),
        }
    }

    fn named_dims(&self, parts: &GraphParts) -> Vec<(String, ExprNode)> {
        self.domain
            .dims()
            .iter()
            .zip(&parts.dim_vars)
            .map(|(d, &n)| (d.name.clone(), n))
            .collect()
    }

    fn param_map(&self, parts: &GraphParts) -> HashMap<String, ExprNode> {
        self.params
            .names()
            .iter()
            .zip(&parts.param_vars)
            .map(|(n, &(_, node))| (n.clone(), node))
            .collect()
    }

    fn dim_inputs(&self, parts: &GraphParts, points: &PointSet) -> Vec<BoundVar> {
        (0..self.domain.len())
            .map(|j| BoundVar {
                slot: parts.graph.var_slot(parts.dim_vars[j]).unwrap(),
                binding: VarBinding::Column(points.column(j)),
            })
            .collect()
    }

    fn grad_targets(&self, parts: &GraphParts, lambda: Option<ExprNode>) -> Vec<ExprNode> {
        let mut t: Vec<ExprNode> = parts.weight_vars.iter().map(|&(_, n)| n).collect();
        t.extend(parts.param_vars.iter().map(|&(_, n)| n));
        t.extend(lambda);
        t
    }
}

fn wrap_lambda(graph: &mut Graph, sq_term: ExprNode) -> Result<(ExprNode, (u32, ExprNode)), SolverError> {
    let lam = graph.new_var("__lambda")?;
    let slot = graph.var_slot(lam).unwrap();
    let lam2 = graph.mul(lam, lam);
    let term = graph.mul(lam2, sq_term);
    Ok((term, (slot, lam)))
}

/// Compile a problem: validate, sample every point set, build one template
/// graph per loss group, initialize the network.
pub fn compile(
    domain: Domain,
    residual: ResidualExpr,
    params: ParamSet,
    conditions: Vec<Condition>,
    samples: Option<SampleSet>,
    solution: SolutionForm,
    config: SolverConfig,
) -> Result<CompiledProblem, SolverError> {
    if domain.is_empty() {
        return Err(SolverError::EmptyDomain);
    }
    if config.n_r == 0 {
        return Err(SolverError::NoCollocationPoints);
    }
    if let SolutionForm::Mlp(spec) = &solution {
        if spec.input_width != domain.len() {
            return Err(SolverError::WidthMismatch {
                net: spec.input_width,
                domain: domain.len(),
            });
        }
    }
    for p in residual.free_parameters() {
        if !params.names().iter().any(|n| n == p) {
            return Err(SolverError::UndeclaredParameter(p.clone()));
        }
    }
    let has_ic = conditions
        .iter()
        .any(|c| matches!(c, Condition::Initial(_)));
    if has_ic && domain.temporal().is_none() {
        return Err(SolverError::IcWithoutTemporal);
    }
    if params.any_trainable() && samples.as_ref().map_or(true, |s| s.is_empty()) {
        return Err(SolverError::InverseWithoutSamples);
    }

    let (net_spec, weights) = match &solution {
        SolutionForm::Mlp(spec) => (
            Some(spec.clone()),
            net::init_glorot(spec, derive_seed(config.seed, "weights")),
        ),
        SolutionForm::Injected(_) => (
            None,
            WeightStore {
                flat: Vec::new(),
                layout: Vec::new(),
                seed: 0,
            },
        ),
    };

    let builder = Builder {
        domain: &domain,
        solution: &solution,
        weights: &weights,
        params: &params,
    };

    let mut groups: Vec<Group> = Vec::new();

    // Residual group over collocation points.
    let collocation = domain.sample_collocation(
        config.n_r,
        config.strategy,
        derive_seed(config.seed, "collocation"),
    );
    {
        let mut parts = builder.new_graph()?;
        let dim_vars = parts.dim_vars.clone();
        let u = builder.u_at(&mut parts, &dim_vars)?;
        let named = builder.named_dims(&parts);
        let param_map = builder.param_map(&parts);
        let ctx = CompileCtx {
            dims: &named,
            u: Some(u),
            params: &param_map,
        };
        let r = dsl::compile(residual.ast(), &mut parts.graph, &ctx)?;
        let sq = parts.graph.mul(r, r);
        let (term, lambda) = wrap_lambda(&mut parts.graph, sq)?;
        let targets = builder.grad_targets(&parts, Some(lambda.1));
        let plan = EvalPlan::new(&parts.graph, &[term, r], &targets);
        let inputs = builder.dim_inputs(&parts, &collocation);
        groups.push(Group {
            kind: GroupKind::Residual,
            label: "residual".into(),
            plan,
            term,
            raw: Some(r),
            inputs,
            lambda: Some(lambda),
            weight_vars: parts.weight_vars,
            param_vars: parts.param_vars,
            n_points: collocation.len(),
            terms_per_point: 1,
            graph: parts.graph,
        });
    }

    for (ci, cond) in conditions.iter().enumerate() {
        match cond {
            Condition::Initial(ic) => {
                let points = domain.sample_initial(ic.n_points, ic.seed)?;
                let mut parts = builder.new_graph()?;
                let dim_vars = parts.dim_vars.clone();
                let u = builder.u_at(&mut parts, &dim_vars)?;
                let sq = ic.term_at(&mut parts.graph, &domain, &dim_vars, u)?;
                let (term, lambda) = wrap_lambda(&mut parts.graph, sq)?;
                let targets = builder.grad_targets(&parts, Some(lambda.1));
                let plan = EvalPlan::new(&parts.graph, &[term], &targets);
                let inputs = builder.dim_inputs(&parts, &points);
                groups.push(Group {
                    kind: GroupKind::Initial,
                    label: format!("initial[{ci}]"),
                    plan,
                    term,
                    raw: None,
                    inputs,
                    lambda: Some(lambda),
                    weight_vars: parts.weight_vars,
                    param_vars: parts.param_vars,
                    n_points: points.len(),
                    terms_per_point: 1,
                    graph: parts.graph,
                });
            }
            Condition::Dirichlet(bc) => {
                let points = domain.sample_boundary(&bc.dim, bc.side, bc.n_points, bc.seed)?;
                let mut parts = builder.new_graph()?;
                let dim_vars = parts.dim_vars.clone();
                let u = builder.u_at(&mut parts, &dim_vars)?;
                let term = bc.term_at(&mut parts.graph, &domain, &dim_vars, u)?;
                let targets = builder.grad_targets(&parts, None);
                let plan = EvalPlan::new(&parts.graph, &[term], &targets);
                let inputs = builder.dim_inputs(&parts, &points);
                groups.push(Group {
                    kind: GroupKind::Boundary,
                    label: format!("dirichlet[{ci}] {} {}", bc.dim, bc.side.as_str()),
                    plan,
                    term,
                    raw: None,
                    inputs,
                    lambda: None,
                    weight_vars: parts.weight_vars,
                    param_vars: parts.param_vars,
                    n_points: points.len(),
                    terms_per_point: 1,
                    graph: parts.graph,
                });
            }
            Condition::Periodic(bc) => {
                let idx = domain
                    .index_of(&bc.dim)
                    .ok_or_else(|| DomainError::UnknownDimension(bc.dim.clone()))?;
                let dim = domain.dims()[idx].clone();
                let points =
                    domain.sample_boundary(&bc.dim, crate::domain::Side::Lower, bc.n_points, bc.seed)?;
                let mut parts = builder.new_graph()?;
                let x_lo = parts.dim_vars[idx];
                let x_hi = parts.graph.new_var(&format!("__hi_{}", bc.dim))?;
                let lo_inputs = parts.dim_vars.clone();
                let mut hi_inputs = parts.dim_vars.clone();
                hi_inputs[idx] = x_hi;
                let u_lo = builder.u_at(&mut parts, &lo_inputs)?;
                let u_hi = builder.u_at(&mut parts, &hi_inputs)?;
                let terms = bc.terms_at(&mut parts.graph, u_lo, u_hi, x_lo, x_hi)?;
                let mut term = terms[0];
                for &t in &terms[1..] {
                    term = parts.graph.add(term, t);
                }
                let targets = builder.grad_targets(&parts, None);
                let plan = EvalPlan::new(&parts.graph, &[term], &targets);
                let mut inputs = Vec::with_capacity(domain.len() + 1);
                for j in 0..domain.len() {
                    let slot = parts.graph.var_slot(parts.dim_vars[j]).unwrap();
                    inputs.push(if j == idx {
                        BoundVar {
                            slot,
                            binding: VarBinding::Fixed(dim.lower),
                        }
                    } else {
                        BoundVar {
                            slot,
                            binding: VarBinding::Column(points.column(j)),
                        }
                    });
                }
                inputs.push(BoundVar {
                    slot: parts.graph.var_slot(x_hi).unwrap(),
                    binding: VarBinding::Fixed(dim.upper),
                });
                groups.push(Group {
                    kind: GroupKind::Boundary,
                    label: format!("periodic[{ci}] {}", bc.dim),
                    plan,
                    term,
                    raw: None,
                    inputs,
                    lambda: None,
                    weight_vars: parts.weight_vars,
                    param_vars: parts.param_vars,
                    n_points: points.len(),
                    terms_per_point: bc.orders(),
                    graph: parts.graph,
                });
            }
        }
    }

    if let Some(s) = &samples {
        if !s.is_empty() {
            let mut parts = builder.new_graph()?;
            let dim_vars = parts.dim_vars.clone();
            let u = builder.u_at(&mut parts, &dim_vars)?;
            let y = parts.graph.new_var("__target")?;
            let diff = parts.graph.sub(u, y);
            let term = parts.graph.mul(diff, diff);
            let targets = builder.grad_targets(&parts, None);
            let plan = EvalPlan::new(&parts.graph, &[term], &targets);
            let mut inputs = builder.dim_inputs(&parts, &s.points);
            inputs.push(BoundVar {
                slot: parts.graph.var_slot(y).unwrap(),
                binding: VarBinding::Column(s.targets.clone()),
            });
            groups.push(Group {
                kind: GroupKind::Sample,
                label: "samples".into(),
                plan,
                term,
                raw: None,
                inputs,
                lambda: None,
                weight_vars: parts.weight_vars,
                param_vars: parts.param_vars,
                n_points: s.len(),
                terms_per_point: 1,
                graph: parts.graph,
            });
        }
    }

    // Prediction graph: just u over the dimension variables.
    let predict = {
        let mut parts = builder.new_graph()?;
        let dim_vars = parts.dim_vars.clone();
        let u = builder.u_at(&mut parts, &dim_vars)?;
        let plan = EvalPlan::new(&parts.graph, &[u], &[]);
        PredictPlan {
            dim_slots: dim_vars
                .iter()
                .map(|&n| parts.graph.var_slot(n).unwrap())
                .collect(),
            weight_slots: parts.weight_vars.iter().map(|&(s, _)| s).collect(),
            plan,
            u,
            graph: parts.graph,
        }
    };

    let counts = TermCounts {
        residual: config.n_r,
        initial: groups
            .iter()
            .filter(|g| g.kind == GroupKind::Initial)
            .map(Group::term_count)
            .sum(),
        boundary: groups
            .iter()
            .filter(|g| g.kind == GroupKind::Boundary)
            .map(Group::term_count)
            .sum(),
        sample: samples.as_ref().map_or(0, SampleSet::len),
    };

    let lambda_r = vec![1.0; config.n_r];
    let lambda_0 = vec![1.0; counts.initial];

    let n_w = weights.flat.len();
    let n_trainable = params.trainable().iter().filter(|&&t| t).count();
    let opt_w = OptState::new(config.optimizer, n_w, None);
    let opt_p = OptState::new(config.optimizer, n_trainable, config.param_lr);

    Ok(CompiledProblem {
        domain,
        net_spec,
        weights,
        params,
        lambda_r,
        lambda_0,
        groups,
        counts,
        history: TrainingHistory::default(),
        opt_w,
        opt_p,
        predict,
        collocation,
        scratch: RefCell::new(Vec::new()),
        config,
    })
}

impl CompiledProblem {
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn net_spec(&self) -> Option<&MLPSpec> {
        self.net_spec.as_ref()
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    pub fn set_weights(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.weights.flat.len());
        self.weights.flat.copy_from_slice(flat);
    }

    /// Replace the weight store wholesale (e.g. loaded from an archive).
    pub fn load_weights(&mut self, store: WeightStore) -> Result<(), SolverError> {
        if store.flat.len() != self.weights.flat.len() {
            return Err(SolverError::Internal(format!(
                "weight count mismatch: problem has {}, archive has {}",
                self.weights.flat.len(),
                store.flat.len()
            )));
        }
        self.weights = store;
        Ok(())
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn set_param_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.params.values.len());
        self.params.values.copy_from_slice(values);
    }

    pub fn lambda_r(&self) -> &[f64] {
        &self.lambda_r
    }

    pub fn lambda_0(&self) -> &[f64] {
        &self.lambda_0
    }

    pub fn set_lambda(&mut self, lambda_r: &[f64], lambda_0: &[f64]) {
        assert_eq!(lambda_r.len(), self.lambda_r.len());
        assert_eq!(lambda_0.len(), self.lambda_0.len());
        self.lambda_r.copy_from_slice(lambda_r);
        self.lambda_0.copy_from_slice(lambda_0);
    }

    pub fn history(&self) -> &TrainingHistory {
        &self.history
    }

    pub fn term_counts(&self) -> TermCounts {
        self.counts
    }

    pub fn collocation_points(&self) -> &PointSet {
        &self.collocation
    }

    /// One-line validation report of what was compiled.
    pub fn report(&self) -> String {
        format!(
            "residual terms: {}, initial terms: {}, boundary terms: {}, sample terms: {}, weights: {}, parameters: {} ({} trainable)",
            self.counts.residual,
            self.counts.initial,
            self.counts.boundary,
            self.counts.sample,
            self.weights.flat.len(),
            self.params.len(),
            self.params.trainable().iter().filter(|&&t| t).count(),
        )
    }

    fn self_adaptive_on(&self) -> bool {
        matches!(self.config.self_adaptive, SelfAdaptive::On { .. })
    }

    fn evaluate(&self, want_grad: bool) -> Result<(LossBreakdown, Option<Gradients>), SolverError> {
        let workers = self.config.workers.max(1);
        let mut scratch = self.scratch.borrow_mut();
        while scratch.len() < workers {
            scratch.push(BatchBuf::new());
        }

        let sa = self.self_adaptive_on();
        let n_w = self.weights.flat.len();
        let n_p = self.params.len();

        let mut grads = want_grad.then(|| Gradients {
            weights: vec![0.0; n_w],
            params: vec![0.0; n_p],
            lambda_r: Vec::new(),
            lambda_0: Vec::new(),
        });

        let total_initial = self.counts.initial;
        let total_boundary = self.counts.boundary;

        let mut sum_r = 0.0;
        let mut sum_0 = 0.0;
        let mut sum_b = 0.0;
        let mut sum_s = 0.0;
        let mut ic_offset = 0usize;

        for group in &self.groups {
            let (count, seed) = match group.kind {
                GroupKind::Residual => (self.counts.residual, 1.0 / self.counts.residual as f64),
                GroupKind::Initial => (total_initial, 1.0 / total_initial as f64),
                GroupKind::Boundary => (total_boundary, 1.0 / total_boundary as f64),
                GroupKind::Sample => (self.counts.sample, 1.0 / self.counts.sample as f64),
            };
            if count == 0 || group.n_points == 0 {
                continue;
            }
            let lambda: Option<&[f64]> = if sa {
                match group.kind {
                    GroupKind::Residual => Some(&self.lambda_r),
                    GroupKind::Initial => {
                        Some(&self.lambda_0[ic_offset..ic_offset + group.n_points])
                    }
                    _ => None,
                }
            } else {
                None
            };
            let out = eval_group(
                group,
                &self.weights.flat,
                self.params.values(),
                lambda,
                seed,
                want_grad,
                workers,
                &mut scratch,
            )?;
            let sum: f64 = {
                let mut s = 0.0;
                for &v in &out.values {
                    s += v;
                }
                s
            };
            match group.kind {
                GroupKind::Residual => sum_r += sum,
                GroupKind::Initial => sum_0 += sum,
                GroupKind::Boundary => sum_b += sum,
                GroupKind::Sample => sum_s += sum,
            }
            if let Some(g) = grads.as_mut() {
                for (acc, v) in g.weights.iter_mut().zip(&out.grad[..n_w]) {
                    *acc += v;
                }
                for (acc, v) in g.params.iter_mut().zip(&out.grad[n_w..]) {
                    *acc += v;
                }
                if let Some(lg) = out.grad_lambda {
                    match group.kind {
                        GroupKind::Residual => g.lambda_r = lg,
                        GroupKind::Initial => g.lambda_0.extend(lg),
                        _ => {}
                    }
                }
            }
            if group.kind == GroupKind::Initial {
                ic_offset += group.n_points;
            }
        }

        let l_r = sum_r / self.counts.residual as f64;
        let l_0 = if total_initial > 0 {
            sum_0 / total_initial as f64
        } else {
            0.0
        };
        let l_b = if total_boundary > 0 {
            sum_b / total_boundary as f64
        } else {
            0.0
        };
        let l_s = if self.counts.sample > 0 {
            sum_s / self.counts.sample as f64
        } else {
            0.0
        };
        let total = l_s + l_r + l_b + l_0;
        if !total.is_finite() {
            return Err(SolverError::NonFiniteLoss {
                group: "total".into(),
                point: 0,
                detail: format!("l_s={l_s} l_r={l_r} l_b={l_b} l_0={l_0}"),
            });
        }
        Ok((
            LossBreakdown {
                l_s,
                l_r,
                l_b,
                l_0,
                total,
            },
            grads,
        ))
    }

    /// Loss components at the current state.
    pub fn loss(&self) -> Result<LossBreakdown, SolverError> {
        Ok(self.evaluate(false)?.0)
    }

    /// Loss plus gradients with respect to weights, trainable parameters,
    /// and per-point multipliers.
    pub fn loss_and_grad(&self) -> Result<(LossBreakdown, Gradients), SolverError> {
        let (l, g) = self.evaluate(true)?;
        Ok((l, g.expect("gradients requested")))
    }

    /// Residual values r_i at the collocation points (diagnostic).
    pub fn residual_values(&self) -> Result<Vec<f64>, SolverError> {
        let workers = self.config.workers.max(1);
        let mut scratch = self.scratch.borrow_mut();
        while scratch.len() < workers {
            scratch.push(BatchBuf::new());
        }
        let group = &self.groups[0];
        debug_assert_eq!(group.kind, GroupKind::Residual);
        let lambda = self.self_adaptive_on().then_some(self.lambda_r.as_slice());
        let out = eval_group(
            group,
            &self.weights.flat,
            self.params.values(),
            lambda,
            1.0,
            false,
            workers,
            &mut scratch,
        )?;
        Ok(out.raw_values.expect("residual group has a raw node"))
    }

    /// Run the descent/ascent loop for `iterations` steps, appending to the
    /// training history. On divergence the last state with finite loss is
    /// restored and an error is returned.
    pub fn fit(&mut self, iterations: usize) -> Result<&TrainingHistory, SolverError> {
        let mut checkpoint: Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
        for _ in 0..iterations {
            let iteration = self.history.len() as u64 + 1;
            let t0 = Instant::now();
            let (loss, grads) = match self.loss_and_grad() {
                Ok(x) => x,
                Err(e) => {
                    let last_finite = iteration.saturating_sub(1);
                    if let Some((w, p, lr, l0)) = checkpoint {
                        self.weights.flat = w;
                        self.params.values = p;
                        self.lambda_r = lr;
                        self.lambda_0 = l0;
                    }
                    return Err(SolverError::Diverged {
                        iteration,
                        last_finite,
                        reason: e.to_string(),
                    });
                }
            };
            checkpoint = Some((
                self.weights.flat.clone(),
                self.params.values.clone(),
                self.lambda_r.clone(),
                self.lambda_0.clone(),
            ));

            let step_result = (|| -> Result<(), SolverError> {
                self.opt_w.step(&mut self.weights.flat, &grads.weights)?;
                if self.params.any_trainable() {
                    let mut tp: Vec<f64> = Vec::new();
                    let mut tg: Vec<f64> = Vec::new();
                    for (i, &tr) in self.params.trainable.iter().enumerate() {
                        if tr {
                            tp.push(self.params.values[i]);
                            tg.push(grads.params[i]);
                        }
                    }
                    self.opt_p.step(&mut tp, &tg)?;
                    let mut k = 0;
                    for (i, &tr) in self.params.trainable.iter().enumerate() {
                        if tr {
                            self.params.values[i] = tp[k];
                            k += 1;
                        }
                    }
                }
                if let SelfAdaptive::On { lr_lambda } = self.config.self_adaptive {
                    self_adaptive_step(&mut self.lambda_r, &grads.lambda_r, lr_lambda)?;
                    self_adaptive_step(&mut self.lambda_0, &grads.lambda_0, lr_lambda)?;
                }
                Ok(())
            })();
            if let Err(e) = step_result {
                if let Some((w, p, lr, l0)) = checkpoint {
                    self.weights.flat = w;
                    self.params.values = p;
                    self.lambda_r = lr;
                    self.lambda_0 = l0;
                }
                return Err(SolverError::Diverged {
                    iteration,
                    last_finite: iteration,
                    reason: e.to_string(),
                });
            }

            let params_snapshot: Vec<(String, f64)> = self
                .params
                .names
                .iter()
                .cloned()
                .zip(self.params.values.iter().copied())
                .collect();
            self.history.records.push(IterationRecord {
                iteration,
                loss,
                params: params_snapshot,
                millis: t0.elapsed().as_millis() as u64,
            });
        }
        Ok(&self.history)
    }

    /// Network output at each point of the set; extrapolation outside the
    /// domain box is evaluated but flagged.
    pub fn predict(&self, points: &PointSet) -> Result<Prediction, SolverError> {
        assert_eq!(points.dim(), self.domain.len(), "point dimension mismatch");
        let n = points.len();
        let mut values = vec![0.0; n];
        let mut out_of_bounds = Vec::new();
        for i in 0..n {
            if !self.domain.contains(points.row(i)) {
                out_of_bounds.push(i);
            }
        }
        if n == 0 {
            return Ok(Prediction {
                values,
                out_of_bounds,
            });
        }
        let mut scratch = self.scratch.borrow_mut();
        if scratch.is_empty() {
            scratch.push(BatchBuf::new());
        }
        let buf = &mut scratch[0];
        let pp = &self.predict;
        let columns: Vec<Vec<f64>> = (0..points.dim()).map(|j| points.column(j)).collect();
        let mut bindings: Vec<Binding> = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let lanes = end - start;
            bindings.clear();
            bindings.resize(pp.graph.num_vars(), Binding::Unbound);
            for (j, &slot) in pp.dim_slots.iter().enumerate() {
                bindings[slot as usize] = Binding::Column(&columns[j][start..end]);
            }
            for (i, &slot) in pp.weight_slots.iter().enumerate() {
                bindings[slot as usize] = Binding::Scalar(self.weights.flat[i]);
            }
            buf.forward(&pp.graph, &pp.plan, &bindings, lanes)
                .map_err(|e| match e {
                    crate::autodiff::batch::BatchError::NonFinite { node, op, lane } => {
                        SolverError::NonFiniteLoss {
                            group: "predict".into(),
                            point: start + lane,
                            detail: format!("node {node} (`{op}`)"),
                        }
                    }
                    crate::autodiff::batch::BatchError::Unbound { key } => {
                        SolverError::Internal(format!("unbound `{key}` in predict"))
                    }
                })?;
            values[start..end].copy_from_slice(buf.values_of(pp.u, lanes));
            start = end;
        }
        Ok(Prediction {
            values,
            out_of_bounds,
        })
    }

    /// Current values of the trainable PDE parameters (empty for forward
    /// problems).
    pub fn recover_parameters(&self) -> Vec<(String, f64)> {
        self.params
            .entries()
            .filter(|&(_, _, t)| t)
            .map(|(n, v, _)| (n.to_string(), v))
            .collect()
    }

    /// Persist the current network weights as an archive.
    pub fn save_weights(&self, path: &std::path::Path) -> Result<(), SolverError> {
        let spec = self.net_spec.as_ref().ok_or(SolverError::NoWeights)?;
        net::save(&self.weights, spec, path)?;
        Ok(())
    }
}
