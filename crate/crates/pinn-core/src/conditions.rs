//! Initial and boundary conditions, each reduced to squared-mismatch terms
//! contributed to the composite loss.
//!
//! Condition functions use the same expression grammar as the PDE residual,
//! restricted to dimension identifiers and constants, so whole problems stay
//! definable from a config file.

use thiserror::Error;

use crate::autodiff::{AdError, ExprNode, Graph};
use crate::domain::{Domain, DomainError, PointSet, Side};
use crate::dsl::{self, Ast, CompileCtx, DslError};

#[derive(Debug, Error)]
pub enum CondError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error(transparent)]
    Graph(#[from] AdError),
    #[error("condition function references unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("periodic condition must match at least one of value/slope")]
    EmptyMatchOrders,
    #[error("failed to build the solution at a condition point: {0}")]
    Build(String),
}

fn map_missing(e: DslError) -> CondError {
    match e {
        DslError::MissingBinding(name) => CondError::UnknownDimension(name),
        other => CondError::Dsl(other),
    }
}

/// Scalar expression over dimension identifiers and constants (no `u`, no
/// derivatives, no learnable parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionFn {
    ast: Ast,
    text: String,
}

impl ConditionFn {
    pub fn parse(text: &str, domain: &Domain) -> Result<Self, DslError> {
        let ast = dsl::parse_condition(text, domain)?;
        Ok(ConditionFn {
            ast,
            text: text.to_string(),
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Compile against the given per-dimension nodes.
    pub fn node(
        &self,
        graph: &mut Graph,
        dims: &[(String, ExprNode)],
    ) -> Result<ExprNode, CondError> {
        let ctx = CompileCtx {
            dims,
            u: None,
            params: &Default::default(),
        };
        dsl::compile(&self.ast, graph, &ctx).map_err(map_missing)
    }
}

/// Builder of the solution node at a point: called with one graph node per
/// domain dimension, returns `u` at that point.
pub trait UForward {
    fn build(&mut self, graph: &mut Graph, point: &[ExprNode]) -> Result<ExprNode, CondError>;
}

impl<F> UForward for F
where
    F: FnMut(&mut Graph, &[ExprNode]) -> Result<ExprNode, CondError>,
{
    fn build(&mut self, graph: &mut Graph, point: &[ExprNode]) -> Result<ExprNode, CondError> {
        self(graph, point)
    }
}

#[derive(Debug, Clone)]
pub struct InitialCondition {
    pub f: ConditionFn,
    pub n_points: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum BcValue {
    Constant(f64),
    Function(ConditionFn),
}

#[derive(Debug, Clone)]
pub struct DirichletBc {
    pub dim: String,
    pub side: Side,
    pub value: BcValue,
    pub n_points: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PeriodicBc {
    pub dim: String,
    pub match_value: bool,
    pub match_slope: bool,
    pub n_points: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum Condition {
    Initial(InitialCondition),
    Dirichlet(DirichletBc),
    Periodic(PeriodicBc),
}

/// Per-point term nodes plus the points they were emitted at.
#[derive(Debug)]
pub struct TermSet {
    pub terms: Vec<ExprNode>,
    pub points: PointSet,
}

fn named_dims(domain: &Domain, nodes: &[ExprNode]) -> Vec<(String, ExprNode)> {
    domain
        .dims()
        .iter()
        .zip(nodes)
        .map(|(d, &n)| (d.name.clone(), n))
        .collect()
}

fn squared(graph: &mut Graph, v: ExprNode) -> ExprNode {
    graph.mul(v, v)
}

impl InitialCondition {
    /// `(u - h)^2` at one point, given the per-dimension nodes and the
    /// instantiated solution.
    pub fn term_at(
        &self,
        graph: &mut Graph,
        domain: &Domain,
        dim_nodes: &[ExprNode],
        u: ExprNode,
    ) -> Result<ExprNode, CondError> {
        let dims = named_dims(domain, dim_nodes);
        let h = self.f.node(graph, &dims)?;
        let diff = graph.sub(u, h);
        Ok(squared(graph, diff))
    }

    /// Sample initial points and emit one term per point.
    pub fn terms(
        &self,
        domain: &Domain,
        graph: &mut Graph,
        u_forward: &mut dyn UForward,
    ) -> Result<TermSet, CondError> {
        let points = domain.sample_initial(self.n_points, self.seed)?;
        let mut terms = Vec::with_capacity(points.len());
        for i in 0..points.len() {
            let nodes: Vec<ExprNode> = points.row(i).iter().map(|&c| graph.constant(c)).collect();
            let u = u_forward.build(graph, &nodes)?;
            terms.push(self.term_at(graph, domain, &nodes, u)?);
        }
        Ok(TermSet { terms, points })
    }
}

impl DirichletBc {
    pub fn term_at(
        &self,
        graph: &mut Graph,
        domain: &Domain,
        dim_nodes: &[ExprNode],
        u: ExprNode,
    ) -> Result<ExprNode, CondError> {
        let g_node = match &self.value {
            BcValue::Constant(c) => graph.constant(*c),
            BcValue::Function(f) => {
                let dims = named_dims(domain, dim_nodes);
                f.node(graph, &dims)?
            }
        };
        let diff = graph.sub(u, g_node);
        Ok(squared(graph, diff))
    }

    pub fn terms(
        &self,
        domain: &Domain,
        graph: &mut Graph,
        u_forward: &mut dyn UForward,
    ) -> Result<TermSet, CondError> {
        let points = domain.sample_boundary(&self.dim, self.side, self.n_points, self.seed)?;
        let mut terms = Vec::with_capacity(points.len());
        for i in 0..points.len() {
            let nodes: Vec<ExprNode> = points.row(i).iter().map(|&c| graph.constant(c)).collect();
            let u = u_forward.build(graph, &nodes)?;
            terms.push(self.term_at(graph, domain, &nodes, u)?);
        }
        Ok(TermSet { terms, points })
    }
}

impl PeriodicBc {
    pub fn orders(&self) -> usize {
        usize::from(self.match_value) + usize::from(self.match_slope)
    }

    /// Terms for one matched pair: `u` (and optionally its first derivative
    /// along the periodic dimension) must agree at the two faces. The pinned
    /// coordinates must be variable nodes so the slope can be taken.
    pub fn terms_at(
        &self,
        graph: &mut Graph,
        u_lo: ExprNode,
        u_hi: ExprNode,
        x_lo: ExprNode,
        x_hi: ExprNode,
    ) -> Result<Vec<ExprNode>, CondError> {
        if !self.match_value && !self.match_slope {
            return Err(CondError::EmptyMatchOrders);
        }
        let mut out = Vec::new();
        if self.match_value {
            let diff = graph.sub(u_lo, u_hi);
            out.push(squared(graph, diff));
        }
        if self.match_slope {
            let d_lo = graph.derive(u_lo, &[x_lo])?[0];
            let d_hi = graph.derive(u_hi, &[x_hi])?[0];
            let diff = graph.sub(d_lo, d_hi);
            out.push(squared(graph, diff));
        }
        Ok(out)
    }

    /// Sample pairs of opposite-face points (identical in all other
    /// coordinates) and emit value/slope matching terms.
    pub fn terms(
        &self,
        domain: &Domain,
        graph: &mut Graph,
        u_forward: &mut dyn UForward,
    ) -> Result<TermSet, CondError> {
        let idx = domain
            .index_of(&self.dim)
            .ok_or_else(|| DomainError::UnknownDimension(self.dim.clone()))?;
        let points = domain.sample_boundary(&self.dim, Side::Lower, self.n_points, self.seed)?;
        let dim = &domain.dims()[idx];
        let tag = graph.num_vars();
        let x_lo = graph.new_var(&format!("__per{}_{}_lo", tag, self.dim))?;
        let x_hi = graph.new_var(&format!("__per{}_{}_hi", tag, self.dim))?;
        graph.bind_node(x_lo, dim.lower)?;
        graph.bind_node(x_hi, dim.upper)?;
        let mut terms = Vec::with_capacity(points.len() * self.orders());
        for i in 0..points.len() {
            let mut lo_nodes = Vec::with_capacity(domain.len());
            let mut hi_nodes = Vec::with_capacity(domain.len());
            for (j, &c) in points.row(i).iter().enumerate() {
                if j == idx {
                    lo_nodes.push(x_lo);
                    hi_nodes.push(x_hi);
                } else {
                    let node = graph.constant(c);
                    lo_nodes.push(node);
                    hi_nodes.push(node);
                }
            }
            let u_lo = u_forward.build(graph, &lo_nodes)?;
            let u_hi = u_forward.build(graph, &hi_nodes)?;
            terms.extend(self.terms_at(graph, u_lo, u_hi, x_lo, x_hi)?);
        }
        Ok(TermSet { terms, points })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Dimension;

    fn xt_domain() -> Domain {
        let mut d = Domain::new();
        d.add(Dimension::spatial("x", -1.0, 1.0).unwrap()).unwrap();
        d.add(Dimension::temporal("t", 0.0, 1.0).unwrap()).unwrap();
        d
    }

    fn unit_domain() -> Domain {
        let mut d = Domain::new();
        d.add(Dimension::spatial("x", 0.0, 1.0).unwrap()).unwrap();
        d.add(Dimension::temporal("t", 0.0, 1.0).unwrap()).unwrap();
        d
    }

    fn eval_terms(g: &Graph, terms: &[ExprNode]) -> Vec<f64> {
        terms.iter().map(|&t| g.eval(t).unwrap()).collect()
    }

    #[test]
    fn ic_exact_solution_zeroes_terms() {
        // h(x) = -sin(pi x); inject u(x,t) = -sin(pi x)
        let d = xt_domain();
        let ic = InitialCondition {
            f: ConditionFn::parse("-sin(pi*x)", &d).unwrap(),
            n_points: 8,
            seed: 3,
        };
        let mut g = Graph::new();
        let mut u = |g: &mut Graph, pt: &[ExprNode]| -> Result<ExprNode, CondError> {
            let pi = g.constant(std::f64::consts::PI);
            let px = g.mul(pi, pt[0]);
            let s = g.sin(px);
            Ok(g.neg(s))
        };
        let ts = ic.terms(&d, &mut g, &mut u).unwrap();
        assert_eq!(ts.terms.len(), 8);
        for v in eval_terms(&g, &ts.terms) {
            assert!(v.abs() <= 1e-12);
        }
    }

    #[test]
    fn ic_zero_points_empty() {
        let d = xt_domain();
        let ic = InitialCondition {
            f: ConditionFn::parse("0", &d).unwrap(),
            n_points: 0,
            seed: 0,
        };
        let mut g = Graph::new();
        let mut u = |g: &mut Graph, _: &[ExprNode]| Ok(g.constant(0.0));
        let ts = ic.terms(&d, &mut g, &mut u).unwrap();
        assert!(ts.terms.is_empty());
    }

    #[test]
    fn ic_unknown_dimension_in_fn() {
        let d = xt_domain();
        let f = ConditionFn::parse("-sin(pi*x)", &d).unwrap();
        // use against a domain that lacks `x`
        let mut other = Domain::new();
        other
            .add(Dimension::spatial("y", 0.0, 1.0).unwrap())
            .unwrap();
        other
            .add(Dimension::temporal("t", 0.0, 1.0).unwrap())
            .unwrap();
        let ic = InitialCondition {
            f,
            n_points: 2,
            seed: 0,
        };
        let mut g = Graph::new();
        let mut u = |g: &mut Graph, _: &[ExprNode]| Ok(g.constant(0.0));
        match ic.terms(&other, &mut g, &mut u) {
            Err(CondError::UnknownDimension(name)) => assert_eq!(name, "x"),
            other => panic!("expected unknown dimension, got {other:?}"),
        }
    }

    #[test]
    fn dirichlet_constant_values() {
        let d = xt_domain();
        let mut g = Graph::new();
        // u == 0 injected, BC value 0 -> all terms 0
        let bc0 = DirichletBc {
            dim: "x".into(),
            side: Side::Lower,
            value: BcValue::Constant(0.0),
            n_points: 5,
            seed: 1,
        };
        let mut u0 = |g: &mut Graph, _: &[ExprNode]| Ok(g.constant(0.0));
        let ts = bc0.terms(&d, &mut g, &mut u0).unwrap();
        assert!(eval_terms(&g, &ts.terms).iter().all(|&v| v == 0.0));

        // u == 0, BC value 1 -> every term exactly 1
        let bc1 = DirichletBc {
            value: BcValue::Constant(1.0),
            ..bc0
        };
        let ts = bc1.terms(&d, &mut g, &mut u0).unwrap();
        assert!(eval_terms(&g, &ts.terms).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dirichlet_function_value() {
        // g = exp(-t) at face x = lower; with u == 1 injected the term is
        // (1 - e^{-t})^2 at each sampled t.
        let d = xt_domain();
        let bc = DirichletBc {
            dim: "x".into(),
            side: Side::Lower,
            value: BcValue::Function(ConditionFn::parse("exp(-t)", &d).unwrap()),
            n_points: 6,
            seed: 9,
        };
        let mut g = Graph::new();
        let mut u1 = |g: &mut Graph, _: &[ExprNode]| Ok(g.constant(1.0));
        let ts = bc.terms(&d, &mut g, &mut u1).unwrap();
        for (i, v) in eval_terms(&g, &ts.terms).iter().enumerate() {
            let t = ts.points.coord(i, 1);
            let expect = (1.0 - (-t).exp()).powi(2);
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn periodic_constant_u_all_zero() {
        let d = unit_domain();
        let bc = PeriodicBc {
            dim: "x".into(),
            match_value: true,
            match_slope: true,
            n_points: 4,
            seed: 2,
        };
        let mut g = Graph::new();
        let mut u = |g: &mut Graph, _: &[ExprNode]| Ok(g.constant(3.5));
        let ts = bc.terms(&d, &mut g, &mut u).unwrap();
        assert_eq!(ts.terms.len(), 8); // order-1 doubles the count
        assert!(eval_terms(&g, &ts.terms).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn periodic_linear_u_value_mismatch() {
        // u = x on x in [0,1]: order-0 term (0-1)^2 = 1
        let d = unit_domain();
        let bc = PeriodicBc {
            dim: "x".into(),
            match_value: true,
            match_slope: false,
            n_points: 3,
            seed: 2,
        };
        let mut g = Graph::new();
        let mut u = |_: &mut Graph, pt: &[ExprNode]| Ok(pt[0]);
        let ts = bc.terms(&d, &mut g, &mut u).unwrap();
        assert_eq!(ts.terms.len(), 3);
        assert!(eval_terms(&g, &ts.terms).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn periodic_sine_matches_both_orders() {
        // u = sin(2 pi x) is C1-periodic on [0,1]
        let d = unit_domain();
        let bc = PeriodicBc {
            dim: "x".into(),
            match_value: true,
            match_slope: true,
            n_points: 5,
            seed: 4,
        };
        let mut g = Graph::new();
        let mut u = |g: &mut Graph, pt: &[ExprNode]| -> Result<ExprNode, CondError> {
            let c = g.constant(2.0 * std::f64::consts::PI);
            let cx = g.mul(c, pt[0]);
            Ok(g.sin(cx))
        };
        let ts = bc.terms(&d, &mut g, &mut u).unwrap();
        assert_eq!(ts.terms.len(), 10);
        for v in eval_terms(&g, &ts.terms) {
            assert!(v.abs() <= 1e-12, "term {v} not ~0");
        }
    }

    #[test]
    fn terms_are_nonnegative() {
        let d = xt_domain();
        let ic = InitialCondition {
            f: ConditionFn::parse("x*x - 0.3", &d).unwrap(),
            n_points: 20,
            seed: 11,
        };
        let mut g = Graph::new();
        let mut u = |g: &mut Graph, pt: &[ExprNode]| -> Result<ExprNode, CondError> {
            Ok(g.sin(pt[0]))
        };
        let ts = ic.terms(&d, &mut g, &mut u).unwrap();
        assert!(eval_terms(&g, &ts.terms).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn periodic_requires_an_order() {
        let d = unit_domain();
        let bc = PeriodicBc {
            dim: "x".into(),
            match_value: false,
            match_slope: false,
            n_points: 1,
            seed: 0,
        };
        let mut g = Graph::new();
        let mut u = |g: &mut Graph, _: &[ExprNode]| Ok(g.constant(0.0));
        assert!(matches!(
            bc.terms(&d, &mut g, &mut u),
            Err(CondError::EmptyMatchOrders)
        ));
    }
}
