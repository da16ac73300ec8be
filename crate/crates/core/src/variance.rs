//! First-order variance model of the hierarchical bootstrap estimator.
//!
//! For every vertex `v` the model tracks
//!
//! * `sigma2[v]`: variance of one value produced at `v`,
//! * `c[v]`: covariance of two distinct elements of the population `H_v`,
//! * `cov[v]`: covariance of two independent uniform draws from `H_v`,
//!   which coincide with probability `1/n_v`.
//!
//! Leaves have `c = 0` and `cov = sigma2 / n`. An internal vertex with
//! squared partial derivatives `w_i` at the mean has
//!
//! ```text
//! sigma2[v] = sum_i w_i sigma2[i]
//! c[v]      = sum_i w_i cov[i]
//! cov[v]    = sigma2[v] / n_v + (1 - 1/n_v) c[v]
//! ```
//!
//! and the estimator variance is `cov[root]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{CalcTree, PerVertex, TreeError, VertexId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("insufficient data: {0} sample(s), at least 2 needed")]
    InsufficientData(usize),
    #[error("invalid allocation: vertex {vertex} has n = {size}")]
    InvalidAllocation { vertex: VertexId, size: u64 },
    #[error("invalid allocation: {got} sizes given for {expected} vertices")]
    SizeCount { expected: usize, got: usize },
    #[error("invalid mixing weight {0}: must lie in [0, 1]")]
    InvalidMixingWeight(f64),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Sample mean and unbiased sample variance.
pub fn leaf_moments(samples: &[f64]) -> Result<(f64, f64), ModelError> {
    if samples.len() < 2 {
        return Err(ModelError::InsufficientData(samples.len()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    Ok((mean, ss / (n - 1.0)))
}

/// Propagates variances up the tree: leaves keep `leaf_sigma2`, internal
/// vertices take `sum_i g_i^2 sigma2[i]`.
pub fn sigma2_recursion(
    tree: &CalcTree,
    gradients: &PerVertex<Vec<f64>>,
    leaf_sigma2: &[f64],
) -> PerVertex<f64> {
    let k = tree.vertex_count();
    let mut sigma2 = Vec::with_capacity(k);
    sigma2.extend_from_slice(&leaf_sigma2[..tree.leaf_count()]);
    for v in tree.internal_ids() {
        let s: f64 = tree
            .children(v)
            .iter()
            .zip(&gradients[v])
            .map(|(&i, g)| g * g * sigma2[i - 1])
            .sum();
        sigma2.push(s);
    }
    PerVertex::from_vec(sigma2)
}

/// Integer sample sizes for every vertex together with the budget they are
/// meant to respect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub sizes: PerVertex<u64>,
    pub costs: PerVertex<u64>,
    pub budget: u64,
}

impl AllocationPlan {
    pub fn new(sizes: PerVertex<u64>, costs: PerVertex<u64>, budget: u64) -> Self {
        AllocationPlan {
            sizes,
            costs,
            budget,
        }
    }

    pub fn total_cost(&self) -> u64 {
        self.sizes
            .as_slice()
            .iter()
            .zip(self.costs.as_slice())
            .map(|(n, a)| n * a)
            .sum()
    }

    pub fn is_feasible(&self) -> bool {
        self.sizes.as_slice().iter().all(|&n| n >= 1) && self.total_cost() <= self.budget
    }
}

/// Per-vertex moments for one allocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub mean: PerVertex<f64>,
    pub sigma2: PerVertex<f64>,
    pub c: PerVertex<f64>,
    pub cov: PerVertex<f64>,
}

impl MomentState {
    /// `alpha * sigma2[v] + (1 - alpha) * cov[v]`.
    pub fn psi(&self, v: VertexId, alpha: f64) -> Result<f64, ModelError> {
        check_alpha(alpha)?;
        Ok(alpha * self.sigma2[v] + (1.0 - alpha) * self.cov[v])
    }
}

fn check_alpha(alpha: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(ModelError::InvalidMixingWeight(alpha))
    }
}

/// The plan-independent part of the model: means, gradients and variances.
/// Build once per tree, then evaluate any number of allocations.
#[derive(Clone, Debug)]
pub struct VarianceModel<'t> {
    tree: &'t CalcTree,
    means: PerVertex<f64>,
    gradients: PerVertex<Vec<f64>>,
    /// Squared gradients, aligned with `tree.children(v)`.
    weights: PerVertex<Vec<f64>>,
    sigma2: PerVertex<f64>,
}

impl<'t> VarianceModel<'t> {
    pub fn new(tree: &'t CalcTree) -> Result<Self, ModelError> {
        let means = tree.propagate_means()?;
        let k = tree.vertex_count();
        let mut gradients = PerVertex::filled(k, Vec::new());
        for v in tree.internal_ids() {
            gradients[v] = tree.gradient_at_mean(&means, v)?;
        }
        let weights = PerVertex::from_fn(k, |v| gradients[v].iter().map(|g| g * g).collect());
        let leaf_sigma2: Vec<f64> = (1..=tree.leaf_count())
            .map(|v| tree.leaf_variance(v))
            .collect();
        let sigma2 = sigma2_recursion(tree, &gradients, &leaf_sigma2);
        Ok(VarianceModel {
            tree,
            means,
            gradients,
            weights,
            sigma2,
        })
    }

    pub fn tree(&self) -> &'t CalcTree {
        self.tree
    }

    pub fn means(&self) -> &PerVertex<f64> {
        &self.means
    }

    pub fn gradients(&self) -> &PerVertex<Vec<f64>> {
        &self.gradients
    }

    pub fn weights(&self, v: VertexId) -> &[f64] {
        &self.weights[v]
    }

    pub fn sigma2(&self) -> &PerVertex<f64> {
        &self.sigma2
    }

    fn check_sizes(&self, sizes: &PerVertex<u64>) -> Result<(), ModelError> {
        let k = self.tree.vertex_count();
        if sizes.len() != k {
            return Err(ModelError::SizeCount {
                expected: k,
                got: sizes.len(),
            });
        }
        match sizes.iter().find(|(_, &n)| n < 1) {
            Some((vertex, &size)) => Err(ModelError::InvalidAllocation { vertex, size }),
            None => Ok(()),
        }
    }

    /// Runs the covariance recursions for the given sample sizes.
    pub fn moments(&self, sizes: &PerVertex<u64>) -> Result<MomentState, ModelError> {
        self.check_sizes(sizes)?;
        let k = self.tree.vertex_count();
        let mut c = PerVertex::filled(k, 0.0);
        let mut cov = PerVertex::filled(k, 0.0);
        for v in 1..=k {
            cov[v] = if self.tree.is_leaf(v) {
                self.sigma2[v] / sizes[v] as f64
            } else {
                c[v] = self.children_cov(v, &cov);
                mix(self.sigma2[v], c[v], sizes[v])
            };
        }
        Ok(MomentState {
            mean: self.means.clone(),
            sigma2: self.sigma2.clone(),
            c,
            cov,
        })
    }

    fn children_cov(&self, v: VertexId, cov: &PerVertex<f64>) -> f64 {
        self.tree
            .children(v)
            .iter()
            .zip(&self.weights[v])
            .map(|(&i, w)| w * cov[i])
            .sum()
    }

    /// Variance of the estimator (the average of the root population).
    pub fn estimator_variance(&self, sizes: &PerVertex<u64>) -> Result<f64, ModelError> {
        self.check_sizes(sizes)?;
        Ok(self.estimator_variance_unchecked(sizes))
    }

    /// Same as [`estimator_variance`](Self::estimator_variance) without the
    /// size checks or intermediate allocations beyond one scratch vector.
    pub(crate) fn estimator_variance_unchecked(&self, sizes: &PerVertex<u64>) -> f64 {
        let k = self.tree.vertex_count();
        let mut cov = PerVertex::filled(k, 0.0);
        for v in 1..=k {
            cov[v] = if self.tree.is_leaf(v) {
                self.sigma2[v] / sizes[v] as f64
            } else {
                mix(self.sigma2[v], self.children_cov(v, &cov), sizes[v])
            };
        }
        cov[k]
    }

    /// `psi_v(alpha)` computed through the children:
    /// `sum_i w_i psi_i(alpha + (1 - alpha) / n_v)`.
    pub fn psi_recursive(
        &self,
        state: &MomentState,
        sizes: &PerVertex<u64>,
        v: VertexId,
        alpha: f64,
    ) -> Result<f64, ModelError> {
        check_alpha(alpha)?;
        if self.tree.is_leaf(v) {
            return state.psi(v, alpha);
        }
        let inner = alpha + (1.0 - alpha) / sizes[v] as f64;
        let mut total = 0.0;
        for (&i, w) in self.tree.children(v).iter().zip(&self.weights[v]) {
            total += w * state.psi(i, inner.min(1.0))?;
        }
        Ok(total)
    }

    /// Second-order correction to the mean, `1/2 sum_i sigma_i^2 d2phi/dx_i^2`,
    /// over the leaves of the fully composed root function. Diagnostic only.
    pub fn mean_bias_second_order(&self) -> Result<f64, ModelError> {
        let tree = self.tree;
        let phi = tree.composed_root();
        let at_mean = |id: usize| self.means[id];
        let mut total = 0.0;
        for leaf in 1..=tree.leaf_count() {
            let d2 = phi.derivative(leaf).derivative(leaf);
            let value = d2.eval(&at_mean).map_err(|source| {
                ModelError::Tree(TreeError::Domain {
                    vertex: tree.root(),
                    source,
                })
            })?;
            total += tree.leaf_variance(leaf) * value;
        }
        Ok(0.5 * total)
    }
}

/// `sigma2 / n + (1 - 1/n) c`.
pub(crate) fn mix(sigma2: f64, c: f64, n: u64) -> f64 {
    let inv = 1.0 / n as f64;
    inv * sigma2 + (1.0 - inv) * c
}
