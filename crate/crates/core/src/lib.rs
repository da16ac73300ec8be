//! Hierarchical bootstrap on calculation trees.
//!
//! A function of interest is evaluated through a tree of sub-functions whose
//! leaves are input samples. Every internal vertex materializes its own
//! resampled population before the next level is processed (the wave
//! algorithm), and the root population's average is the estimator.
//!
//! The crate provides:
//!
//! * [`tree`]: parsing, validation and first-order evaluation of the tree,
//! * [`variance`]: the analytic first-order variance of the estimator for a
//!   given allocation of sample sizes,
//! * [`allocator`]: budget-constrained optimal sample sizes by dynamic
//!   programming, with an exhaustive oracle,
//! * [`sim`]: Monte Carlo execution of the wave and sweep procedures.
//!
//! Data-parallel loops go through [`Execution`]; building without the
//! default `parallel` feature makes every mode run sequentially.

pub mod allocator;
pub mod expr;
mod par;
pub mod sim;
pub mod tree;
pub mod variance;

pub use allocator::{AlphaGrid, BellmanTable, OptimizationResult};
pub use expr::Expr;
pub use par::Execution;
pub use tree::{CalcTree, PerVertex, VertexId};
pub use variance::{AllocationPlan, MomentState, VarianceModel};
