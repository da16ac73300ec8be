//! Calculation trees.
//!
//! Vertices are numbered `1..=k`. Vertices `1..=m` are leaves carrying input
//! samples (or their summary statistics); vertices `m+1..=k` are internal
//! and evaluate an [`Expr`] over the values of their children. The root is
//! vertex `k`. Every child has a smaller number than its parent and every
//! vertex except the root feeds exactly one parent.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Index, IndexMut};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, Expr, ParseError};
use crate::variance::leaf_moments;

pub type VertexId = usize;

/// Dense per-vertex storage addressed by 1-based vertex id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PerVertex<T>(Vec<T>);

impl<T> PerVertex<T> {
    /// Wraps values listed for vertices `1, 2, ..., len` in that order.
    pub fn from_vec(values: Vec<T>) -> Self {
        PerVertex(values)
    }

    pub fn from_fn(k: usize, f: impl FnMut(VertexId) -> T) -> Self {
        PerVertex((1..=k).map(f).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = (VertexId, &T)> {
        self.0.iter().enumerate().map(|(i, x)| (i + 1, x))
    }
}

impl<T: Clone> PerVertex<T> {
    pub fn filled(k: usize, value: T) -> Self {
        PerVertex(vec![value; k])
    }
}

impl<T> Index<VertexId> for PerVertex<T> {
    type Output = T;

    fn index(&self, id: VertexId) -> &T {
        &self.0[id - 1]
    }
}

impl<T> IndexMut<VertexId> for PerVertex<T> {
    fn index_mut(&mut self, id: VertexId) -> &mut T {
        &mut self.0[id - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VertexKind {
    Leaf,
    Internal,
}

/// One vertex as written by the user, before validation.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexSpec {
    pub id: VertexId,
    pub kind: VertexKind,
    pub cost: u64,
    pub children: Vec<VertexId>,
    pub expr: Option<Expr>,
    /// Explicit leaf mean; overrides the sample estimate.
    pub mean: Option<f64>,
    /// Explicit leaf variance; overrides the sample estimate.
    pub variance: Option<f64>,
    pub samples: Option<Vec<f64>>,
    pub samples_file: Option<String>,
}

impl VertexSpec {
    pub fn leaf(id: VertexId, mean: f64, variance: f64) -> Self {
        VertexSpec {
            id,
            kind: VertexKind::Leaf,
            cost: 1,
            children: Vec::new(),
            expr: None,
            mean: Some(mean),
            variance: Some(variance),
            samples: None,
            samples_file: None,
        }
    }

    pub fn internal(id: VertexId, children: Vec<VertexId>, expr: Expr) -> Self {
        VertexSpec {
            id,
            kind: VertexKind::Internal,
            cost: 1,
            children,
            expr: Some(expr),
            mean: None,
            variance: None,
            samples: None,
            samples_file: None,
        }
    }

    pub fn with_cost(mut self, cost: u64) -> Self {
        self.cost = cost;
        self
    }

    pub fn with_samples(mut self, samples: Vec<f64>) -> Self {
        self.samples = Some(samples);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    DuplicateId,
    IdsNotContiguous,
    LeafAfterInternal,
    LeafWithChildren,
    InternalWithoutInputs,
    UnknownChild,
    CorrectNumbering,
    MultipleOutgoingArcs,
    NoOutgoingArc,
    MissingExpression,
    ExpressionUnknownVariable,
    ExpressionUnusedChild,
    LeafWithoutStatistics,
    NegativeVariance,
    InternalWithStatistics,
    Empty,
}

impl Rule {
    pub fn describe(self) -> &'static str {
        match self {
            Rule::DuplicateId => "duplicate vertex id",
            Rule::IdsNotContiguous => "vertex ids must be exactly 1..k",
            Rule::LeafAfterInternal => "leaves must be numbered before internal vertices",
            Rule::LeafWithChildren => "leaf with inputs",
            Rule::InternalWithoutInputs => "internal vertex without inputs",
            Rule::UnknownChild => "unknown child id",
            Rule::CorrectNumbering => "correct-numbering violated (child id must be smaller)",
            Rule::MultipleOutgoingArcs => "multiple outgoing arcs",
            Rule::NoOutgoingArc => "no outgoing arc (vertex is disconnected from the root)",
            Rule::MissingExpression => "internal vertex without expression",
            Rule::ExpressionUnknownVariable => "expression references a non-child variable",
            Rule::ExpressionUnusedChild => "child not referenced by expression",
            Rule::LeafWithoutStatistics => "leaf without statistics or samples",
            Rule::NegativeVariance => "negative leaf variance",
            Rule::InternalWithStatistics => "internal vertex with leaf statistics",
            Rule::Empty => "tree has no vertices",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub vertex: Option<VertexId>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.vertex {
            Some(v) => write!(f, "vertex {v}: {}", self.rule.describe())?,
            None => f.write_str(self.rule.describe())?,
        }
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("malformed tree document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("vertex {vertex}: {source}")]
    Expression {
        vertex: VertexId,
        #[source]
        source: ParseError,
    },
    #[error("vertex {vertex}: unknown kind '{kind}'")]
    UnknownKind { vertex: VertexId, kind: String },
    #[error("vertex {vertex}: cannot read samples file {path}: {message}")]
    Samples {
        vertex: VertexId,
        path: String,
        message: String,
    },
    #[error("invalid tree: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("vertex {vertex}: {source}")]
    Domain {
        vertex: VertexId,
        #[source]
        source: EvalError,
    },
}

fn join_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Checks every structural rule and reports all violations found.
pub fn validate_tree(vertices: &[VertexSpec]) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut push = |vertex: Option<VertexId>, rule: Rule, detail: String| {
        out.push(Violation {
            vertex,
            rule,
            detail,
        })
    };
    if vertices.is_empty() {
        push(None, Rule::Empty, String::new());
        return Err(out);
    }

    let k = vertices.len();
    let mut by_id: BTreeMap<VertexId, &VertexSpec> = BTreeMap::new();
    for v in vertices {
        if by_id.insert(v.id, v).is_some() {
            push(Some(v.id), Rule::DuplicateId, String::new());
        }
    }
    for v in vertices {
        if v.id == 0 || v.id > k {
            push(Some(v.id), Rule::IdsNotContiguous, format!("k = {k}"));
        }
    }

    let mut seen_internal: Option<VertexId> = None;
    let mut parents: BTreeMap<VertexId, Vec<VertexId>> = BTreeMap::new();
    for (&id, v) in &by_id {
        match v.kind {
            VertexKind::Leaf => {
                if let Some(w) = seen_internal {
                    push(
                        Some(id),
                        Rule::LeafAfterInternal,
                        format!("internal vertex {w} precedes it"),
                    );
                }
                if !v.children.is_empty() {
                    push(Some(id), Rule::LeafWithChildren, String::new());
                }
                if v.samples.is_none() && (v.mean.is_none() || v.variance.is_none()) {
                    push(Some(id), Rule::LeafWithoutStatistics, String::new());
                }
                if v.variance.is_some_and(|s2| s2.is_nan() || s2 < 0.0) {
                    push(Some(id), Rule::NegativeVariance, String::new());
                }
            }
            VertexKind::Internal => {
                seen_internal.get_or_insert(id);
                if v.children.is_empty() {
                    push(Some(id), Rule::InternalWithoutInputs, String::new());
                }
                if v.mean.is_some() || v.variance.is_some() || v.samples.is_some() {
                    push(Some(id), Rule::InternalWithStatistics, String::new());
                }
                match &v.expr {
                    None => push(Some(id), Rule::MissingExpression, String::new()),
                    Some(expr) => {
                        let vars = expr.variables();
                        for var in &vars {
                            if !v.children.contains(var) {
                                push(Some(id), Rule::ExpressionUnknownVariable, format!("x{var}"));
                            }
                        }
                        for child in &v.children {
                            if !vars.contains(child) {
                                push(Some(id), Rule::ExpressionUnusedChild, format!("x{child}"));
                            }
                        }
                    }
                }
            }
        }
        for &child in &v.children {
            if child >= id {
                push(Some(id), Rule::CorrectNumbering, format!("child {child}"));
            } else if !by_id.contains_key(&child) {
                push(Some(id), Rule::UnknownChild, format!("child {child}"));
            }
            parents.entry(child).or_default().push(id);
        }
    }

    let root = by_id.keys().next_back().copied();
    for &id in by_id.keys() {
        match parents.get(&id).map(Vec::len).unwrap_or(0) {
            0 if Some(id) != root => push(Some(id), Rule::NoOutgoingArc, String::new()),
            n if n > 1 => push(
                Some(id),
                Rule::MultipleOutgoingArcs,
                format!("listed by {:?}", parents[&id]),
            ),
            _ => {}
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// A vertex of a validated tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Vertex {
    pub spec: VertexSpec,
    /// Partial derivatives of the expression, one per child, in `children` order.
    pub partials: Vec<Expr>,
    pub parent: Option<VertexId>,
}

/// A validated calculation tree. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct CalcTree {
    vertices: Vec<Vertex>,
    leaf_count: usize,
    leaf_mean: Vec<f64>,
    leaf_variance: Vec<f64>,
}

impl CalcTree {
    /// Validates the vertex list and builds the tree. The list may be in any
    /// order; it is sorted by id.
    pub fn new(mut specs: Vec<VertexSpec>) -> Result<CalcTree, TreeError> {
        validate_tree(&specs).map_err(TreeError::Invalid)?;
        specs.sort_by_key(|v| v.id);
        let leaf_count = specs
            .iter()
            .take_while(|v| v.kind == VertexKind::Leaf)
            .count();

        let mut leaf_mean = Vec::with_capacity(leaf_count);
        let mut leaf_variance = Vec::with_capacity(leaf_count);
        for v in &specs[..leaf_count] {
            // explicit statistics take precedence over sample estimates
            let estimated = match (&v.samples, v.mean, v.variance) {
                (Some(samples), None, _) | (Some(samples), _, None) => {
                    Some(leaf_moments(samples).map_err(|e| TreeError::Samples {
                        vertex: v.id,
                        path: v.samples_file.clone().unwrap_or_default(),
                        message: e.to_string(),
                    })?)
                }
                _ => None,
            };
            leaf_mean.push(v.mean.or(estimated.map(|e| e.0)).expect("validated"));
            leaf_variance.push(v.variance.or(estimated.map(|e| e.1)).expect("validated"));
        }

        let mut parent = vec![None; specs.len()];
        for v in &specs {
            for &c in &v.children {
                parent[c - 1] = Some(v.id);
            }
        }
        let vertices = specs
            .into_iter()
            .zip(parent)
            .map(|(spec, parent)| {
                let partials = match &spec.expr {
                    Some(e) => spec.children.iter().map(|&c| e.derivative(c)).collect(),
                    None => Vec::new(),
                };
                Vertex {
                    spec,
                    partials,
                    parent,
                }
            })
            .collect();
        Ok(CalcTree {
            vertices,
            leaf_count,
            leaf_mean,
            leaf_variance,
        })
    }

    /// Number of vertices `k`.
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Number of leaves `m`.
    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn root(&self) -> VertexId {
        self.vertices.len()
    }

    pub fn is_leaf(&self, v: VertexId) -> bool {
        v <= self.leaf_count
    }

    pub fn vertex(&self, v: VertexId) -> &Vertex {
        &self.vertices[v - 1]
    }

    pub fn vertices(&self) -> impl Iterator<Item = &Vertex> {
        self.vertices.iter()
    }

    pub fn internal_ids(&self) -> std::ops::RangeInclusive<VertexId> {
        self.leaf_count + 1..=self.vertices.len()
    }

    pub fn children(&self, v: VertexId) -> &[VertexId] {
        &self.vertex(v).spec.children
    }

    pub fn parent(&self, v: VertexId) -> Option<VertexId> {
        self.vertex(v).parent
    }

    pub fn expr(&self, v: VertexId) -> Option<&Expr> {
        self.vertex(v).spec.expr.as_ref()
    }

    pub fn cost(&self, v: VertexId) -> u64 {
        self.vertex(v).spec.cost
    }

    pub fn costs(&self) -> PerVertex<u64> {
        PerVertex::from_fn(self.vertex_count(), |v| self.cost(v))
    }

    /// Effective leaf mean (explicit or estimated from samples).
    pub fn leaf_mean(&self, v: VertexId) -> f64 {
        self.leaf_mean[v - 1]
    }

    /// Effective leaf variance (explicit or estimated from samples).
    pub fn leaf_variance(&self, v: VertexId) -> f64 {
        self.leaf_variance[v - 1]
    }

    pub fn leaf_samples(&self, v: VertexId) -> Option<&[f64]> {
        self.vertex(v).spec.samples.as_deref()
    }

    /// Vertices of the subtree rooted at `v`, including `v`.
    pub fn subtree(&self, v: VertexId) -> Vec<VertexId> {
        let mut out = vec![v];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(self.children(out[i]));
            i += 1;
        }
        out.sort_unstable();
        out
    }

    /// Evaluates internal vertex `v` given a lookup of child values by id.
    pub fn eval_vertex<F>(&self, v: VertexId, values: &F) -> Result<f64, TreeError>
    where
        F: Fn(VertexId) -> f64,
    {
        let expr = self.expr(v).expect("internal vertex");
        expr.eval(values)
            .map_err(|source| TreeError::Domain { vertex: v, source })
    }

    /// First-order means: leaves keep their means, each internal vertex is
    /// evaluated at its children's means, in increasing id order.
    pub fn propagate_means(&self) -> Result<PerVertex<f64>, TreeError> {
        let k = self.vertex_count();
        let mut means = Vec::with_capacity(k);
        means.extend_from_slice(&self.leaf_mean);
        for v in self.internal_ids() {
            let value = self.eval_vertex(v, &|id| means[id - 1])?;
            means.push(value);
        }
        Ok(PerVertex(means))
    }

    /// Partial derivatives of `phi_v` at the children's means, in child order.
    pub fn gradient_at_mean(
        &self,
        means: &PerVertex<f64>,
        v: VertexId,
    ) -> Result<Vec<f64>, TreeError> {
        self.vertex(v)
            .partials
            .iter()
            .map(|d| {
                d.eval(&|id| means[id])
                    .map_err(|source| TreeError::Domain { vertex: v, source })
            })
            .collect()
    }

    /// The root function written directly over the leaf variables.
    pub fn composed_root(&self) -> Expr {
        self.composed(self.root())
    }

    fn composed(&self, v: VertexId) -> Expr {
        match self.expr(v) {
            None => Expr::Var(v),
            Some(e) => e.substitute(&|id| Some(self.composed(id))),
        }
    }

    /// Replaces every internal expression by its first-order expansion
    /// `mu_v + sum_i g_i (x_i - mu_i)` around the propagated means.
    pub fn linearized(&self) -> Result<CalcTree, TreeError> {
        let means = self.propagate_means()?;
        let mut specs = Vec::with_capacity(self.vertex_count());
        for vertex in &self.vertices {
            let mut spec = vertex.spec.clone();
            if spec.expr.is_some() {
                let v = spec.id;
                let grad = self.gradient_at_mean(&means, v)?;
                let mut e = Expr::Const(means[v]);
                for (&c, g) in spec.children.iter().zip(grad) {
                    let shifted = Expr::Binary(
                        crate::expr::BinaryOp::Sub,
                        Box::new(Expr::Var(c)),
                        Box::new(Expr::Const(means[c])),
                    );
                    let term = Expr::Binary(
                        crate::expr::BinaryOp::Mul,
                        Box::new(Expr::Const(g)),
                        Box::new(shifted),
                    );
                    e = Expr::Binary(crate::expr::BinaryOp::Add, Box::new(e), Box::new(term));
                }
                spec.expr = Some(e);
            }
            specs.push(spec);
        }
        CalcTree::new(specs)
    }

    /// Serializes back to the JSON document format.
    pub fn to_document(&self) -> TreeDocument {
        TreeDocument {
            vertices: self
                .vertices
                .iter()
                .map(|v| {
                    let s = &v.spec;
                    VertexDoc {
                        id: s.id,
                        kind: match s.kind {
                            VertexKind::Leaf => "leaf".into(),
                            VertexKind::Internal => "internal".into(),
                        },
                        cost: Some(s.cost),
                        mean: s.mean,
                        variance: s.variance,
                        samples_file: s.samples_file.clone(),
                        children: (s.kind == VertexKind::Internal).then(|| s.children.clone()),
                        expr: s.expr.as_ref().map(ToString::to_string),
                    }
                })
                .collect(),
        }
    }

    /// Parses a tree document; sample files are resolved against the
    /// working directory.
    pub fn parse(text: &str) -> Result<CalcTree, TreeError> {
        parse_tree(text, Path::new("."))
    }
}

/// On-disk vertex record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexDoc {
    pub id: VertexId,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub children: Option<Vec<VertexId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub vertices: Vec<VertexDoc>,
}

impl TreeDocument {
    pub fn from_json(text: &str) -> Result<TreeDocument, TreeError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serializes")
    }

    /// Compiles expressions and loads sample files into vertex specs.
    pub fn into_specs(self, base_dir: &Path) -> Result<Vec<VertexSpec>, TreeError> {
        self.vertices
            .into_iter()
            .map(|doc| {
                let kind = match doc.kind.as_str() {
                    "leaf" => VertexKind::Leaf,
                    "internal" => VertexKind::Internal,
                    other => {
                        return Err(TreeError::UnknownKind {
                            vertex: doc.id,
                            kind: other.to_string(),
                        })
                    }
                };
                let expr = doc
                    .expr
                    .as_deref()
                    .map(Expr::parse)
                    .transpose()
                    .map_err(|source| TreeError::Expression {
                        vertex: doc.id,
                        source,
                    })?;
                let samples = doc
                    .samples_file
                    .as_deref()
                    .map(|file| read_samples(&base_dir.join(file)))
                    .transpose()
                    .map_err(|message| TreeError::Samples {
                        vertex: doc.id,
                        path: doc.samples_file.clone().unwrap_or_default(),
                        message,
                    })?;
                Ok(VertexSpec {
                    id: doc.id,
                    kind,
                    cost: doc.cost.unwrap_or(1),
                    children: doc.children.unwrap_or_default(),
                    expr,
                    mean: doc.mean,
                    variance: doc.variance,
                    samples,
                    samples_file: doc.samples_file,
                })
            })
            .collect()
    }
}

/// Reads a CSV of one real per line, no header. Blank lines are skipped.
pub fn read_samples(path: &Path) -> Result<Vec<f64>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    parse_samples(&text)
}

pub fn parse_samples(text: &str) -> Result<Vec<f64>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| format!("line {}: {e}", i + 1))
        })
        .collect()
}

/// Parses a JSON tree document, loading `samples_file`s relative to `base_dir`.
pub fn parse_tree(text: &str, base_dir: &Path) -> Result<CalcTree, TreeError> {
    let specs = TreeDocument::from_json(text)?.into_specs(base_dir)?;
    CalcTree::new(specs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Vec<VertexSpec> {
        vec![
            VertexSpec::leaf(1, 2.0, 1.0),
            VertexSpec::internal(2, vec![1], Expr::parse("x1").unwrap()),
        ]
    }

    fn rules(specs: &[VertexSpec]) -> Vec<Rule> {
        validate_tree(specs)
            .unwrap_err()
            .into_iter()
            .map(|v| v.rule)
            .collect()
    }

    #[test]
    fn minimal_chain_document() {
        let doc = r#"{"vertices":[{"id":1,"kind":"leaf","mean":0.0,"variance":1.0},
                                  {"id":2,"kind":"internal","children":[1],"expr":"x1"}]}"#;
        let tree = CalcTree::parse(doc).unwrap();
        assert_eq!((tree.leaf_count(), tree.vertex_count()), (1, 2));
        assert_eq!(tree.parent(1), Some(2));
        assert_eq!(tree.cost(2), 1);
    }

    #[test]
    fn forward_reference_is_rejected() {
        let doc = r#"{"vertices":[{"id":1,"kind":"leaf","mean":0.0,"variance":1.0},
                                  {"id":2,"kind":"internal","children":[3],"expr":"x3"},
                                  {"id":3,"kind":"internal","children":[1],"expr":"x1"}]}"#;
        let err = CalcTree::parse(doc).unwrap_err();
        assert!(
            err.to_string().contains("correct-numbering violated"),
            "{err}"
        );
    }

    #[test]
    fn five_vertex_tree() {
        // three leaves, one intermediate vertex, one root
        let doc = r#"{"vertices":[
            {"id":1,"kind":"leaf","mean":1.0,"variance":1.0},
            {"id":2,"kind":"leaf","mean":2.0,"variance":1.0},
            {"id":3,"kind":"leaf","mean":3.0,"variance":1.0},
            {"id":4,"kind":"internal","children":[1,2],"expr":"x1*x2"},
            {"id":5,"kind":"internal","cost":2,"children":[3,4],"expr":"x4+x3"}]}"#;
        let tree = CalcTree::parse(doc).unwrap();
        assert_eq!((tree.leaf_count(), tree.vertex_count()), (3, 5));
        assert_eq!(tree.subtree(4), vec![1, 2, 4]);
        assert_eq!(tree.costs().into_vec(), vec![1, 1, 1, 1, 2]);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(CalcTree::parse("{"), Err(TreeError::Json(_))));
        let bad_expr = r#"{"vertices":[{"id":1,"kind":"leaf","mean":0,"variance":1},
                                       {"id":2,"kind":"internal","children":[1],"expr":"x1 +"}]}"#;
        assert!(matches!(
            CalcTree::parse(bad_expr),
            Err(TreeError::Expression { vertex: 2, .. })
        ));
        let dup = r#"{"vertices":[{"id":1,"kind":"leaf","mean":0,"variance":1},
                                  {"id":1,"kind":"leaf","mean":0,"variance":1}]}"#;
        let err = CalcTree::parse(dup).unwrap_err().to_string();
        assert!(err.contains("duplicate vertex id"), "{err}");
        let unknown_var = r#"{"vertices":[{"id":1,"kind":"leaf","mean":0,"variance":1},
                                  {"id":2,"kind":"internal","children":[1],"expr":"x1+x7"}]}"#;
        let err = CalcTree::parse(unknown_var).unwrap_err().to_string();
        assert!(err.contains("non-child variable"), "{err}");
    }

    #[test]
    fn valid_chain_passes() {
        assert_eq!(validate_tree(&chain()), Ok(()));
    }

    #[test]
    fn shared_child_is_multiple_arcs() {
        let specs = vec![
            VertexSpec::leaf(1, 0.0, 1.0),
            VertexSpec::internal(2, vec![1], Expr::parse("x1").unwrap()),
            VertexSpec::internal(3, vec![1, 2], Expr::parse("x1+x2").unwrap()),
        ];
        assert!(rules(&specs).contains(&Rule::MultipleOutgoingArcs));
    }

    #[test]
    fn internal_without_inputs() {
        let specs = vec![
            VertexSpec::leaf(1, 0.0, 1.0),
            VertexSpec::internal(2, vec![], Expr::Const(1.0)),
            VertexSpec::internal(3, vec![1], Expr::parse("x1").unwrap()),
        ];
        let r = rules(&specs);
        assert!(r.contains(&Rule::InternalWithoutInputs));
        assert!(r.contains(&Rule::NoOutgoingArc));
    }

    #[test]
    fn leaf_rules() {
        let mut bare = VertexSpec::leaf(1, 0.0, 1.0);
        bare.variance = None;
        let specs = vec![
            bare,
            VertexSpec::internal(2, vec![1], Expr::parse("x1").unwrap()),
        ];
        assert_eq!(rules(&specs), vec![Rule::LeafWithoutStatistics]);

        let specs = vec![
            VertexSpec::leaf(1, 0.0, -1.0),
            VertexSpec::internal(2, vec![1], Expr::parse("x1").unwrap()),
        ];
        assert_eq!(rules(&specs), vec![Rule::NegativeVariance]);
    }

    #[test]
    fn leaf_statistics_precedence() {
        let mut leaf = VertexSpec::leaf(1, 10.0, 0.5).with_samples(vec![1.0, 2.0, 3.0, 4.0]);
        let root = VertexSpec::internal(2, vec![1], Expr::parse("x1").unwrap());
        let tree = CalcTree::new(vec![leaf.clone(), root.clone()]).unwrap();
        assert_eq!((tree.leaf_mean(1), tree.leaf_variance(1)), (10.0, 0.5));

        leaf.variance = None;
        let tree = CalcTree::new(vec![leaf.clone(), root.clone()]).unwrap();
        assert_eq!(tree.leaf_mean(1), 10.0);
        assert!((tree.leaf_variance(1) - 5.0 / 3.0).abs() < 1e-15);

        leaf.mean = None;
        let tree = CalcTree::new(vec![leaf, root]).unwrap();
        assert_eq!(tree.leaf_mean(1), 2.5);
    }

    #[test]
    fn means_propagate_in_order() {
        let sum = CalcTree::new(vec![
            VertexSpec::leaf(1, 1.0, 1.0),
            VertexSpec::leaf(2, 2.0, 1.0),
            VertexSpec::internal(3, vec![1, 2], Expr::parse("x1 + x2").unwrap()),
        ])
        .unwrap();
        assert_eq!(sum.propagate_means().unwrap()[3], 3.0);

        let product = CalcTree::new(vec![
            VertexSpec::leaf(1, 2.0, 1.0),
            VertexSpec::leaf(2, 3.0, 1.0),
            VertexSpec::internal(3, vec![1, 2], Expr::parse("x1 * x2").unwrap()),
        ])
        .unwrap();
        assert_eq!(product.propagate_means().unwrap()[3], 6.0);

        let chain = CalcTree::new(vec![
            VertexSpec::leaf(1, 2.0, 1.0),
            VertexSpec::internal(2, vec![1], Expr::parse("x1^2").unwrap()),
            VertexSpec::internal(3, vec![2], Expr::parse("x2 + 1").unwrap()),
        ])
        .unwrap();
        let means = chain.propagate_means().unwrap();
        assert_eq!((means[2], means[3]), (4.0, 5.0));
        assert_eq!(chain.propagate_means().unwrap(), means);
    }

    #[test]
    fn mean_domain_error_names_vertex() {
        let tree = CalcTree::new(vec![
            VertexSpec::leaf(1, -1.0, 1.0),
            VertexSpec::internal(2, vec![1], Expr::parse("log(x1)").unwrap()),
        ])
        .unwrap();
        assert!(matches!(
            tree.propagate_means(),
            Err(TreeError::Domain { vertex: 2, .. })
        ));
    }

    #[test]
    fn gradients_at_mean() {
        let tree = CalcTree::new(vec![
            VertexSpec::leaf(1, 2.0, 1.0),
            VertexSpec::leaf(2, 3.0, 1.0),
            VertexSpec::internal(3, vec![1, 2], Expr::parse("x1 * x2").unwrap()),
        ])
        .unwrap();
        let means = tree.propagate_means().unwrap();
        assert_eq!(tree.gradient_at_mean(&means, 3).unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn document_round_trip() {
        let doc = r#"{"vertices":[
            {"id":1,"kind":"leaf","cost":3,"mean":1.0,"variance":1.0},
            {"id":2,"kind":"leaf","mean":2.0,"variance":0.5},
            {"id":3,"kind":"internal","children":[1,2],"expr":"exp(-x1)*x2^1.5 - 2"}]}"#;
        let tree = CalcTree::parse(doc).unwrap();
        let again = CalcTree::parse(&tree.to_document().to_json()).unwrap();
        assert_eq!(tree, again);
    }

    #[test]
    fn document_floats_round_trip_exactly() {
        let specs = vec![
            VertexSpec::leaf(1, 1.2678766459581865, 0.1 + 0.2),
            VertexSpec::internal(2, vec![1], Expr::parse("x1").unwrap()),
        ];
        let tree = CalcTree::new(specs).unwrap();
        let again = CalcTree::parse(&tree.to_document().to_json()).unwrap();
        assert_eq!(
            again.leaf_mean(1).to_bits(),
            1.2678766459581865f64.to_bits()
        );
        assert_eq!(again.leaf_variance(1).to_bits(), (0.1f64 + 0.2).to_bits());
    }
}
