//! Budget-constrained choice of sample sizes.
//!
//! Minimizes the estimator variance over positive integer sizes `n_v` subject
//! to `sum_v a_v n_v <= b`. Three solvers share one result type:
//!
//! * [`collapsed_dp`]: exact dynamic program over budgets only. Because
//!   `psi_v(alpha) = alpha sigma2_v + (1 - alpha) cov_v` and `sigma2_v` does
//!   not depend on the sizes, the Bellman function splits as
//!   `Phi_v(alpha, z) = alpha sigma2_v + (1 - alpha) K_v(z)` with
//!   `K_v(z)` the smallest achievable `cov_v` within budget `z`.
//! * [`backward_dp_grid`] + [`forward_recovery`]: the Bellman recursion over
//!   a discretized mixing weight `alpha` with linear interpolation between
//!   grid points, followed by the forward pass that reads off the sizes.
//! * [`brute_force_oracle`]: exhaustive enumeration, for testing.
//!
//! Ties are broken toward the smallest `n_v`; when splitting a budget among
//! children, lower-numbered children receive the larger share.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::Execution;
use crate::tree::{CalcTree, PerVertex, VertexId};
use crate::variance::{mix, VarianceModel};

/// Largest budget accepted by the solvers.
pub const MAX_BUDGET: u64 = 1_000_000;

/// Largest number of feasible allocations the oracle will enumerate.
pub const MAX_SEARCH_SPACE: u128 = 10_000_000;

const INFEASIBLE: f64 = f64::INFINITY;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum AllocError {
    #[error("infeasible: budget {budget} is below the all-ones cost {minimum}")]
    Infeasible { budget: u64, minimum: u64 },
    #[error("budget {0} exceeds the limit of {MAX_BUDGET}")]
    BudgetTooLarge(u64),
    #[error("vertex {0} has zero cost, so its sample size is unbounded")]
    ZeroCost(VertexId),
    #[error("{got} costs given for {expected} vertices")]
    CostCount { expected: usize, got: usize },
    #[error("search space too large: more than {MAX_SEARCH_SPACE} allocations")]
    SearchSpaceTooLarge,
    #[error("inconsistent Bellman table: no argmin at vertex {vertex}, z = {budget}")]
    InconsistentTable { vertex: VertexId, budget: u64 },
    #[error("invalid alpha grid: {0}")]
    InvalidGrid(&'static str),
}

/// Discretization of the mixing weight `alpha` on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaGrid {
    points: Vec<f64>,
}

impl AlphaGrid {
    /// `count` equally spaced points including both endpoints.
    pub fn uniform(count: usize) -> Result<Self, AllocError> {
        if count < 2 {
            return Err(AllocError::InvalidGrid("at least 2 points are required"));
        }
        let last = (count - 1) as f64;
        Ok(AlphaGrid {
            points: (0..count).map(|g| g as f64 / last).collect(),
        })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self, AllocError> {
        if points.len() < 2 || points[0] != 0.0 || *points.last().unwrap() != 1.0 {
            return Err(AllocError::InvalidGrid("must start at 0 and end at 1"));
        }
        if points
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
        {
            return Err(AllocError::InvalidGrid("must be strictly increasing"));
        }
        Ok(AlphaGrid { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of a grid point equal to `alpha` up to rounding.
    pub fn index_of(&self, alpha: f64) -> Option<usize> {
        let g = self.points.partition_point(|&p| p < alpha - 1e-12);
        (g < self.points.len() && (self.points[g] - alpha).abs() <= 1e-12).then_some(g)
    }

    /// Lower bracketing index and interpolation weight of the upper point.
    fn locate(&self, alpha: f64) -> (usize, f64) {
        let last = self.points.len() - 1;
        let hi = self.points.partition_point(|&p| p < alpha).clamp(1, last);
        let lo = hi - 1;
        let t = (alpha - self.points[lo]) / (self.points[hi] - self.points[lo]);
        (lo, t.clamp(0.0, 1.0))
    }
}

impl Default for AlphaGrid {
    fn default() -> Self {
        AlphaGrid::uniform(101).expect("valid grid")
    }
}

/// Optimal sizes and the quantities the forward pass produces alongside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub sizes: PerVertex<u64>,
    /// Budget assigned to each vertex's subtree.
    pub budgets: PerVertex<u64>,
    /// Minimal estimator variance.
    pub variance: f64,
    /// Mixing weight carried down to each vertex's children:
    /// `alpha_v = alpha_parent + (1 - alpha_parent) / n_v`, with 0 above the root.
    pub alphas: PerVertex<f64>,
}

impl OptimizationResult {
    pub fn total_cost(&self, costs: &PerVertex<u64>) -> u64 {
        self.sizes
            .as_slice()
            .iter()
            .zip(costs.as_slice())
            .map(|(n, a)| n * a)
            .sum()
    }
}

fn alphas_for(tree: &CalcTree, sizes: &PerVertex<u64>) -> PerVertex<f64> {
    let k = tree.vertex_count();
    let mut alphas = PerVertex::filled(k, 0.0);
    for v in (1..=k).rev() {
        let above = tree.parent(v).map_or(0.0, |p| alphas[p]);
        alphas[v] = above + (1.0 - above) / sizes[v] as f64;
    }
    alphas
}

/// Checked inputs shared by all solvers.
struct Problem<'m, 't> {
    model: &'m VarianceModel<'t>,
    costs: &'m PerVertex<u64>,
    budget: u64,
}

impl<'m, 't> Problem<'m, 't> {
    fn new(
        model: &'m VarianceModel<'t>,
        costs: &'m PerVertex<u64>,
        budget: u64,
    ) -> Result<Self, AllocError> {
        let k = model.tree().vertex_count();
        if costs.len() != k {
            return Err(AllocError::CostCount {
                expected: k,
                got: costs.len(),
            });
        }
        if let Some((v, _)) = costs.iter().find(|(_, &a)| a == 0) {
            return Err(AllocError::ZeroCost(v));
        }
        if budget > MAX_BUDGET {
            return Err(AllocError::BudgetTooLarge(budget));
        }
        let minimum: u64 = costs.as_slice().iter().sum();
        if budget < minimum {
            return Err(AllocError::Infeasible { budget, minimum });
        }
        Ok(Problem {
            model,
            costs,
            budget,
        })
    }

    fn tree(&self) -> &'t CalcTree {
        self.model.tree()
    }

    fn width(&self) -> usize {
        self.budget as usize + 1
    }

    fn max_size(&self, v: VertexId, z: u64) -> u64 {
        z / self.costs[v]
    }
}

fn weighted(weight: f64, value: f64) -> f64 {
    if value == INFEASIBLE {
        INFEASIBLE
    } else {
        weight * value
    }
}

/// Optimal division of a budget among the children of one vertex:
/// minimizes `sum_j values[j][z_j]` subject to `sum_j z_j <= y`, for every `y`.
struct ChildSplit {
    best: Vec<f64>,
    /// `choice[j][y]`: budget of child `j` when children `j..` share `y`.
    choice: Vec<Vec<u32>>,
}

impl ChildSplit {
    fn solve(values: &[Vec<f64>], exec: Execution) -> ChildSplit {
        let width = values[0].len();
        let mut rest = vec![0.0; width];
        let mut choice = vec![Vec::new(); values.len()];
        // fold from the last child so reconstruction starts at the first one
        for (j, vals) in values.iter().enumerate().rev() {
            let row = exec.map_indexed(width, |y| {
                let mut best = (INFEASIBLE, 0u32);
                for z in (0..=y).rev() {
                    let candidate = vals[z] + rest[y - z];
                    if candidate < best.0 {
                        best = (candidate, z as u32);
                    }
                }
                best
            });
            rest = row.iter().map(|r| r.0).collect();
            choice[j] = row.into_iter().map(|r| r.1).collect();
        }
        ChildSplit { best: rest, choice }
    }

    fn split(&self, mut y: usize) -> Vec<u64> {
        self.choice
            .iter()
            .map(|c| {
                let z = c[y] as usize;
                y -= z;
                z as u64
            })
            .collect()
    }
}

/// Backward tables of the collapsed program.
pub struct CollapsedTable {
    /// `K_v(z)`: smallest achievable `cov_v` with budget `z` for the subtree.
    min_cov: PerVertex<Vec<f64>>,
    /// Chosen `n_v` for each `z` (internal vertices).
    size_choice: PerVertex<Vec<u64>>,
    splits: PerVertex<Option<ChildSplit>>,
    sigma2: PerVertex<f64>,
    budget: u64,
}

impl CollapsedTable {
    /// `K_v(z)`; infinite when the subtree cannot be afforded.
    pub fn min_cov(&self, v: VertexId, z: u64) -> f64 {
        self.min_cov[v][z as usize]
    }

    /// `Phi_v(alpha, z) = alpha sigma2_v + (1 - alpha) K_v(z)`.
    pub fn phi(&self, v: VertexId, alpha: f64, z: u64) -> f64 {
        let k = self.min_cov(v, z);
        if k == INFEASIBLE {
            INFEASIBLE
        } else {
            alpha * self.sigma2[v] + (1.0 - alpha) * k
        }
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }
}

/// Builds the collapsed tables for all budgets `0..=budget`.
pub fn collapsed_backward(
    model: &VarianceModel<'_>,
    costs: &PerVertex<u64>,
    budget: u64,
    exec: Execution,
) -> Result<CollapsedTable, AllocError> {
    let problem = Problem::new(model, costs, budget)?;
    let tree = problem.tree();
    let k = tree.vertex_count();
    let width = problem.width();
    let sigma2 = model.sigma2().clone();
    let mut min_cov: PerVertex<Vec<f64>> = PerVertex::filled(k, Vec::new());
    let mut size_choice: PerVertex<Vec<u64>> = PerVertex::filled(k, Vec::new());
    let mut splits = PerVertex::from_fn(k, |_| None);

    for v in 1..=k {
        if tree.is_leaf(v) {
            let (table, sizes): (Vec<f64>, Vec<u64>) = (0..width as u64)
                .map(|z| {
                    let n = problem.max_size(v, z);
                    let value = if n == 0 {
                        INFEASIBLE
                    } else {
                        sigma2[v] / n as f64
                    };
                    (value, n)
                })
                .unzip();
            min_cov[v] = table;
            size_choice[v] = sizes;
            continue;
        }
        let child_values: Vec<Vec<f64>> = tree
            .children(v)
            .iter()
            .zip(model.weights(v))
            .map(|(&i, &w)| min_cov[i].iter().map(|&x| weighted(w, x)).collect())
            .collect();
        let split = ChildSplit::solve(&child_values, exec);
        let a = costs[v];
        let row = exec.map_indexed(width, |z| {
            let mut best = (INFEASIBLE, 0u64);
            for n in 1..=problem.max_size(v, z as u64) {
                let c = split.best[z - (a * n) as usize];
                if c == INFEASIBLE {
                    continue;
                }
                let value = mix(sigma2[v], c, n);
                if value < best.0 {
                    best = (value, n);
                }
            }
            best
        });
        min_cov[v] = row.iter().map(|r| r.0).collect();
        size_choice[v] = row.into_iter().map(|r| r.1).collect();
        splits[v] = Some(split);
    }

    Ok(CollapsedTable {
        min_cov,
        size_choice,
        splits,
        sigma2,
        budget,
    })
}

/// Exact optimal allocation via the collapsed program.
pub fn collapsed_dp(
    model: &VarianceModel<'_>,
    costs: &PerVertex<u64>,
    budget: u64,
    exec: Execution,
) -> Result<OptimizationResult, AllocError> {
    let table = collapsed_backward(model, costs, budget, exec)?;
    let tree = model.tree();
    let k = tree.vertex_count();
    let mut sizes = PerVertex::filled(k, 0u64);
    let mut budgets = PerVertex::filled(k, 0u64);
    budgets[k] = budget;
    for v in (1..=k).rev() {
        let z = budgets[v] as usize;
        let n = table.size_choice[v][z];
        if n == 0 {
            return Err(AllocError::InconsistentTable {
                vertex: v,
                budget: z as u64,
            });
        }
        sizes[v] = n;
        if let Some(split) = &table.splits[v] {
            let rest = z - (costs[v] * n) as usize;
            for (&child, share) in tree.children(v).iter().zip(split.split(rest)) {
                budgets[child] = share;
            }
        }
    }
    Ok(OptimizationResult {
        alphas: alphas_for(tree, &sizes),
        sizes,
        budgets,
        variance: table.min_cov(k, budget),
    })
}

/// Argmin recorded for one `(alpha, z)` cell of a Bellman table.
#[derive(Clone, Debug, PartialEq)]
pub struct Choice {
    pub size: u64,
    /// Budgets handed to the children, in child order. Empty for leaves.
    pub splits: Vec<u64>,
}

type Row = (Vec<f64>, Vec<Option<Choice>>);

/// Bellman functions `Phi_v(alpha_g, z)` on a grid of mixing weights.
pub struct BellmanTable {
    grid: AlphaGrid,
    costs: PerVertex<u64>,
    budget: u64,
    /// `values[v][g][z]`
    values: PerVertex<Vec<Vec<f64>>>,
    records: PerVertex<Vec<Vec<Option<Choice>>>>,
}

impl BellmanTable {
    pub fn grid(&self) -> &AlphaGrid {
        &self.grid
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    /// `Phi_v` at grid point `g`.
    pub fn at_grid(&self, v: VertexId, g: usize, z: u64) -> f64 {
        self.values[v][g][z as usize]
    }

    /// `Phi_v(alpha, z)`, interpolating linearly between grid points.
    pub fn value(&self, v: VertexId, alpha: f64, z: u64) -> f64 {
        interpolate(&self.grid, &self.values[v], alpha, z as usize)
    }

    pub fn record(&self, v: VertexId, g: usize, z: u64) -> Option<&Choice> {
        self.records[v][g][z as usize].as_ref()
    }
}

fn interpolate(grid: &AlphaGrid, rows: &[Vec<f64>], alpha: f64, z: usize) -> f64 {
    let (lo, t) = grid.locate(alpha);
    let a = rows[lo][z];
    if t == 0.0 || a == INFEASIBLE {
        return a;
    }
    (1.0 - t) * a + t * rows[lo + 1][z]
}

/// Computes `Phi_v(alpha, z)` for all `z` at one `alpha`, given the finished
/// tables of `v`'s children.
fn bellman_row(
    problem: &Problem<'_, '_>,
    grid: &AlphaGrid,
    values: &PerVertex<Vec<Vec<f64>>>,
    v: VertexId,
    alpha: f64,
) -> Row {
    let tree = problem.tree();
    let width = problem.width();
    let sigma2 = problem.model.sigma2()[v];
    if tree.is_leaf(v) {
        return (0..width as u64)
            .map(|z| match problem.max_size(v, z) {
                0 => (INFEASIBLE, None),
                n => (
                    alpha * sigma2 + (1.0 - alpha) * (1.0 / n as f64) * sigma2,
                    Some(Choice {
                        size: n,
                        splits: Vec::new(),
                    }),
                ),
            })
            .unzip();
    }

    let a = problem.costs[v];
    let weights = problem.model.weights(v);
    let mut best = vec![INFEASIBLE; width];
    let mut argmin: Vec<Option<Choice>> = vec![None; width];
    for n in 1..=problem.max_size(v, problem.budget) {
        let inner = (alpha + (1.0 - alpha) / n as f64).min(1.0);
        let child_values: Vec<Vec<f64>> = tree
            .children(v)
            .iter()
            .zip(weights)
            .map(|(&i, &w)| {
                (0..width)
                    .map(|z| weighted(w, interpolate(grid, &values[i], inner, z)))
                    .collect()
            })
            .collect();
        let split = ChildSplit::solve(&child_values, Execution::Sequential);
        let spent = (a * n) as usize;
        for z in spent..width {
            let candidate = split.best[z - spent];
            if candidate < best[z] {
                best[z] = candidate;
                argmin[z] = Some(Choice {
                    size: n,
                    splits: split.split(z - spent),
                });
            }
        }
    }
    (best, argmin)
}

/// Backward pass: Bellman tables for every vertex, grid point and budget.
pub fn backward_dp_grid(
    model: &VarianceModel<'_>,
    costs: &PerVertex<u64>,
    budget: u64,
    grid: &AlphaGrid,
    exec: Execution,
) -> Result<BellmanTable, AllocError> {
    let problem = Problem::new(model, costs, budget)?;
    let k = problem.tree().vertex_count();
    let mut values: PerVertex<Vec<Vec<f64>>> = PerVertex::filled(k, Vec::new());
    let mut records: PerVertex<Vec<Vec<Option<Choice>>>> = PerVertex::filled(k, Vec::new());
    for v in 1..=k {
        let rows = exec.map_indexed(grid.len(), |g| {
            bellman_row(&problem, grid, &values, v, grid.points()[g])
        });
        let (vals, recs) = rows.into_iter().unzip();
        values[v] = vals;
        records[v] = recs;
    }
    Ok(BellmanTable {
        grid: grid.clone(),
        costs: costs.clone(),
        budget,
        values,
        records,
    })
}

/// Forward pass over a finished Bellman table.
///
/// Starting at the root with `alpha = 0` and the full budget, each vertex
/// reads the argmin recorded at its parent's mixing weight and its own
/// budget, then hands `alpha_v = alpha_parent + (1 - alpha_parent) / n_v` and
/// the recorded budgets to its children. Leaves take `n = floor(z / a)`.
/// When `alpha_parent` falls between grid points the argmin is recomputed
/// at that exact weight.
pub fn forward_recovery(
    model: &VarianceModel<'_>,
    table: &BellmanTable,
) -> Result<OptimizationResult, AllocError> {
    let problem = Problem::new(model, &table.costs, table.budget)?;
    let tree = problem.tree();
    let k = tree.vertex_count();
    let mut sizes = PerVertex::filled(k, 0u64);
    let mut budgets = PerVertex::filled(k, 0u64);
    let mut alphas = PerVertex::filled(k, 0.0);
    budgets[k] = table.budget;

    for v in (1..=k).rev() {
        let z = budgets[v];
        let above = tree.parent(v).map_or(0.0, |p| alphas[p]);
        let missing = AllocError::InconsistentTable {
            vertex: v,
            budget: z,
        };
        let n = if tree.is_leaf(v) {
            problem.max_size(v, z)
        } else {
            let choice = match table.grid.index_of(above) {
                Some(g) => table.record(v, g, z).cloned(),
                None => {
                    let (_, mut recs) = bellman_row(&problem, &table.grid, &table.values, v, above);
                    recs.swap_remove(z as usize)
                }
            }
            .ok_or(missing.clone())?;
            for (&child, &share) in tree.children(v).iter().zip(&choice.splits) {
                budgets[child] = share;
            }
            choice.size
        };
        if n == 0 {
            return Err(missing);
        }
        sizes[v] = n;
        alphas[v] = above + (1.0 - above) / n as f64;
    }

    Ok(OptimizationResult {
        sizes,
        budgets,
        variance: table.at_grid(k, 0, table.budget),
        alphas,
    })
}

/// Exhaustive search over all feasible allocations with `n_v <= cap`.
/// Ties go to the lexicographically smallest `(n_1, ..., n_k)`.
pub fn brute_force_oracle(
    model: &VarianceModel<'_>,
    costs: &PerVertex<u64>,
    budget: u64,
    cap: u64,
    exec: Execution,
) -> Result<OptimizationResult, AllocError> {
    let problem = Problem::new(model, costs, budget)?;
    let tree = problem.tree();
    let k = tree.vertex_count();
    let total_min: u64 = costs.as_slice().iter().sum();
    let upper = PerVertex::from_fn(k, |v| {
        cap.min((budget - (total_min - costs[v])) / costs[v]).max(1)
    });
    if count_allocations(costs, &upper, budget, MAX_SEARCH_SPACE) > MAX_SEARCH_SPACE {
        return Err(AllocError::SearchSpaceTooLarge);
    }
    // minimal cost of vertices after v
    let mut tail = vec![0u64; k + 1];
    for v in (1..k).rev() {
        tail[v] = tail[v + 1] + costs[v + 1];
    }

    let search = Search {
        model,
        costs,
        upper: &upper,
        tail: &tail,
    };
    let per_first = exec.map_indexed(upper[1] as usize, |i| {
        let n1 = i as u64 + 1;
        let mut sizes = PerVertex::filled(k, 1u64);
        sizes[1] = n1;
        let mut best = None;
        search.descend(2, budget - costs[1] * n1, &mut sizes, &mut best);
        best
    });
    let (variance, sizes) = per_first
        .into_iter()
        .flatten()
        .fold(None::<(f64, PerVertex<u64>)>, |acc, cand| match acc {
            Some(a) if a.0 <= cand.0 => Some(a),
            _ => Some(cand),
        })
        .expect("the all-ones allocation is feasible");

    let mut budgets = PerVertex::filled(k, 0u64);
    for v in 1..=k {
        budgets[v] = tree.subtree(v).iter().map(|&u| costs[u] * sizes[u]).sum();
    }
    Ok(OptimizationResult {
        alphas: alphas_for(tree, &sizes),
        sizes,
        budgets,
        variance,
    })
}

struct Search<'a, 't> {
    model: &'a VarianceModel<'t>,
    costs: &'a PerVertex<u64>,
    upper: &'a PerVertex<u64>,
    tail: &'a [u64],
}

impl Search<'_, '_> {
    fn descend(
        &self,
        v: VertexId,
        remaining: u64,
        sizes: &mut PerVertex<u64>,
        best: &mut Option<(f64, PerVertex<u64>)>,
    ) {
        let k = sizes.len();
        if v > k {
            let value = self.model.estimator_variance_unchecked(sizes);
            if best.as_ref().is_none_or(|b| value < b.0) {
                *best = Some((value, sizes.clone()));
            }
            return;
        }
        let a = self.costs[v];
        let reserve = self.tail[v];
        if remaining < reserve + a {
            return;
        }
        let top = self.upper[v].min((remaining - reserve) / a);
        for n in 1..=top {
            sizes[v] = n;
            self.descend(v + 1, remaining - a * n, sizes, best);
        }
        sizes[v] = 1;
    }
}

/// Upper bound on the number of vectors with `1 <= n_v <= upper_v` and
/// `sum a_v n_v <= budget`. Exact whenever the box product exceeds `limit`;
/// saturates at `limit + 1`.
fn count_allocations(
    costs: &PerVertex<u64>,
    upper: &PerVertex<u64>,
    budget: u64,
    limit: u128,
) -> u128 {
    let product = upper
        .as_slice()
        .iter()
        .fold(1u128, |acc, &u| acc.saturating_mul(u as u128));
    if product <= limit {
        return product;
    }
    let cap = limit + 1;
    let work: u128 = upper
        .as_slice()
        .iter()
        .map(|&u| u as u128 * (budget as u128 + 1))
        .sum();
    if work > 200_000_000 {
        return cap;
    }
    let width = budget as usize + 1;
    let mut ways = vec![0u128; width];
    ways[0] = 1;
    for (v, &a) in costs.iter() {
        let mut next = vec![0u128; width];
        for (spent, &w) in ways.iter().enumerate() {
            if w == 0 {
                continue;
            }
            for n in 1..=upper[v] {
                let total = spent + (a * n) as usize;
                if total >= width {
                    break;
                }
                next[total] = (next[total] + w).min(cap);
            }
        }
        ways = next;
    }
    ways.iter().fold(0u128, |acc, &w| (acc + w).min(cap))
}
