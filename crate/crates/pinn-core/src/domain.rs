//! Problem-domain definition and point sampling.
//!
//! A domain is an ordered list of named bounded dimensions (spatial plus at
//! most one temporal). Collocation, boundary-face, and initial-time point
//! sets are sampled from it; Latin hypercube sampling is the default so each
//! dimension's marginal hits every stratum exactly once.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Names that the expression language reserves; a dimension may not shadow
/// them.
pub const RESERVED_IDENTIFIERS: &[&str] = &["u", "pi", "tanh", "sin", "cos", "exp"];

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("dimension name `{0}` already present")]
    DuplicateName(String),
    #[error("domain already has a temporal dimension (`{existing}`); cannot add `{new}`")]
    MultipleTemporal { existing: String, new: String },
    #[error("invalid bounds for `{name}`: lower ({lower}) must be < upper ({upper})")]
    InvalidBounds {
        name: String,
        lower: f64,
        upper: f64,
    },
    #[error("`{0}` is not a valid dimension identifier")]
    InvalidName(String),
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("dimension `{0}` is temporal; boundary faces require a spatial dimension")]
    NotSpatial(String),
    #[error("domain has no temporal dimension")]
    NoTemporalDimension,
    #[error("domain has no dimensions")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimKind {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Lower,
    Upper,
}

impl Side {
    pub fn as_str(&self) -> &'static str {
        match self {
            Side::Lower => "lower",
            Side::Upper => "upper",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dimension {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub kind: DimKind,
}

fn valid_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl Dimension {
    pub fn new(name: &str, lower: f64, upper: f64, kind: DimKind) -> Result<Self, DomainError> {
        if !valid_identifier(name) || RESERVED_IDENTIFIERS.contains(&name) || name.starts_with("u_")
        {
            return Err(DomainError::InvalidName(name.to_string()));
        }
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(DomainError::InvalidBounds {
                name: name.to_string(),
                lower,
                upper,
            });
        }
        Ok(Dimension {
            name: name.to_string(),
            lower,
            upper,
            kind,
        })
    }

    pub fn spatial(name: &str, lower: f64, upper: f64) -> Result<Self, DomainError> {
        Self::new(name, lower, upper, DimKind::Spatial)
    }

    pub fn temporal(name: &str, lower: f64, upper: f64) -> Result<Self, DomainError> {
        Self::new(name, lower, upper, DimKind::Temporal)
    }
}

/// Ordered collection of dimensions; built iteratively with [`Domain::add`].
#[derive(Debug, Clone, Default)]
pub struct Domain {
    dims: Vec<Dimension>,
}

impl Domain {
    pub fn new() -> Self {
        Domain { dims: Vec::new() }
    }

    pub fn add(&mut self, dim: Dimension) -> Result<(), DomainError> {
        if self.dims.iter().any(|d| d.name == dim.name) {
            return Err(DomainError::DuplicateName(dim.name));
        }
        if dim.kind == DimKind::Temporal {
            if let Some(t) = self.temporal() {
                return Err(DomainError::MultipleTemporal {
                    existing: t.name.clone(),
                    new: dim.name,
                });
            }
        }
        self.dims.push(dim);
        Ok(())
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.dims.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    pub fn temporal(&self) -> Option<&Dimension> {
        self.dims.iter().find(|d| d.kind == DimKind::Temporal)
    }

    pub fn temporal_index(&self) -> Option<usize> {
        self.dims.iter().position(|d| d.kind == DimKind::Temporal)
    }

    /// Collocation points inside the box.
    pub fn sample_collocation(&self, n: usize, strategy: Strategy, seed: u64) -> PointSet {
        assert!(n >= 1, "collocation sampling requires n >= 1");
        assert!(!self.dims.is_empty(), "domain has no dimensions");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut columns = Vec::with_capacity(self.dims.len());
        for dim in &self.dims {
            columns.push(match strategy {
                Strategy::LatinHypercube => lhs_column(&mut rng, n, dim.lower, dim.upper),
                Strategy::UniformRandom => uniform_column(&mut rng, n, dim.lower, dim.upper),
            });
        }
        PointSet::from_columns(columns, Role::Collocation)
    }

    /// Points pinned to one face of a spatial dimension; the remaining
    /// coordinates are Latin-hypercube sampled.
    pub fn sample_boundary(
        &self,
        dim_name: &str,
        side: Side,
        n: usize,
        seed: u64,
    ) -> Result<PointSet, DomainError> {
        let idx = self
            .index_of(dim_name)
            .ok_or_else(|| DomainError::UnknownDimension(dim_name.to_string()))?;
        if self.dims[idx].kind == DimKind::Temporal {
            return Err(DomainError::NotSpatial(dim_name.to_string()));
        }
        let pinned = match side {
            Side::Lower => self.dims[idx].lower,
            Side::Upper => self.dims[idx].upper,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut columns = Vec::with_capacity(self.dims.len());
        for (j, dim) in self.dims.iter().enumerate() {
            columns.push(if j == idx {
                vec![pinned; n]
            } else {
                lhs_column(&mut rng, n, dim.lower, dim.upper)
            });
        }
        Ok(PointSet::from_columns(
            columns,
            Role::Boundary {
                dim: dim_name.to_string(),
                side,
            },
        ))
    }

    /// Points at the temporal lower bound; spatial coordinates LHS-sampled.
    pub fn sample_initial(&self, n: usize, seed: u64) -> Result<PointSet, DomainError> {
        let t_idx = self
            .temporal_index()
            .ok_or(DomainError::NoTemporalDimension)?;
        let t0 = self.dims[t_idx].lower;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut columns = Vec::with_capacity(self.dims.len());
        for (j, dim) in self.dims.iter().enumerate() {
            columns.push(if j == t_idx {
                vec![t0; n]
            } else {
                lhs_column(&mut rng, n, dim.lower, dim.upper)
            });
        }
        Ok(PointSet::from_columns(columns, Role::Initial))
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dims.len()
            && self
                .dims
                .iter()
                .zip(point)
                .all(|(d, &v)| v >= d.lower && v <= d.upper)
    }
}

/// One stratified sample per stratum, randomly jittered and permuted.
fn lhs_column(rng: &mut ChaCha8Rng, n: usize, lower: f64, upper: f64) -> Vec<f64> {
    let width = (upper - lower) / n as f64;
    let mut vals: Vec<f64> = (0..n)
        .map(|j| {
            let u: f64 = open_unit(rng);
            lower + (j as f64 + u) * width
        })
        .collect();
    // Fisher-Yates over the stratum assignment.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    vals
}

fn uniform_column(rng: &mut ChaCha8Rng, n: usize, lower: f64, upper: f64) -> Vec<f64> {
    (0..n)
        .map(|_| lower + open_unit(rng) * (upper - lower))
        .collect()
}

/// Uniform draw from (0, 1): keeps sampled points strictly inside bounds.
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Role {
    Collocation,
    Boundary { dim: String, side: Side },
    Initial,
    Sample,
}

/// N x d matrix of points, column order matching the domain's dimensions.
#[derive(Debug, Clone)]
pub struct PointSet {
    data: Vec<f64>,
    n: usize,
    d: usize,
    pub role: Role,
}

impl PointSet {
    pub fn from_columns(columns: Vec<Vec<f64>>, role: Role) -> PointSet {
        let d = columns.len();
        let n = columns.first().map_or(0, |c| c.len());
        debug_assert!(columns.iter().all(|c| c.len() == n));
        let mut data = vec![0.0; n * d];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * d + j] = v;
            }
        }
        PointSet { data, n, d, role }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, d: usize, role: Role) -> PointSet {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            debug_assert_eq!(r.len(), d);
            data.extend_from_slice(&r);
        }
        PointSet { data, n, d, role }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn coord(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.d + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.coord(i, j)).collect()
    }

    /// CSV rendering: header = dimension names, one row per point.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut out = String::new();
        out.push_str(&names.join(","));
        out.push('\n');
        for i in 0..self.n {
            for j in 0..self.d {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", self.coord(i, j));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    LatinHypercube,
    UniformRandom,
}
