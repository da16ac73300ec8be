//! Monte Carlo execution of the hierarchical bootstrap.
//!
//! [`wave_run`] builds the populations `H_{m+1}, ..., H_k` one vertex at a
//! time; each element of `H_v` evaluates `phi_v` on one uniform draw (with
//! replacement) from every child population. The estimate is the average of
//! the root population. [`sweep_run`] is the baseline that evaluates the
//! whole tree once per realization without intermediate populations.
//!
//! [`replicate`] repeats the wave procedure to measure the spread of the
//! estimate. In synthetic mode the leaf populations are redrawn for every
//! replicate, which is the randomness the analytic variance describes.
//!
//! All randomness comes from [`Streams`]: one seed, split into independent
//! ChaCha streams addressed by `(replicate, vertex, purpose)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::EvalError;
use crate::par::Execution;
use crate::tree::{CalcTree, PerVertex, TreeError, VertexId};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("vertex {vertex}: {source} at inputs {inputs:?}")]
    Domain {
        vertex: VertexId,
        inputs: Vec<(VertexId, f64)>,
        #[source]
        source: EvalError,
    },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("vertex {vertex}: population has {got} values, plan says {expected}")]
    PopulationSize {
        vertex: VertexId,
        expected: u64,
        got: usize,
    },
    #[error("vertex {0}: sample size must be at least 1")]
    EmptyPopulation(VertexId),
    #[error("{got} sizes given for {expected} vertices")]
    SizeCount { expected: usize, got: usize },
    #[error("{got} leaf sources given for {expected} leaves")]
    SourceCount { expected: usize, got: usize },
    #[error("leaf {0} has no sample data")]
    MissingLeafData(VertexId),
    #[error("at least 2 replications are needed to report a variance, got {0}")]
    TooFewReplications(u64),
    #[error("{0} exceeds the addressable stream range")]
    StreamRange(&'static str),
}

/// What a stream is used for. Part of the stream address.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    LeafData = 0,
    Resample = 1,
    Sweep = 2,
}

const VERTEX_BITS: u32 = 20;
const PURPOSE_BITS: u32 = 4;
const REPLICATE_BITS: u32 = 64 - VERTEX_BITS - PURPOSE_BITS;

/// Splits one seed into independent, individually addressable streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The generator for one `(replicate, vertex, purpose)` address.
    /// Panics if the replicate or vertex index does not fit the address.
    pub fn rng(&self, replicate: u64, vertex: VertexId, purpose: Purpose) -> ChaCha8Rng {
        assert!(
            replicate < 1 << REPLICATE_BITS,
            "replicate index out of range"
        );
        assert!((vertex as u64) < 1 << VERTEX_BITS, "vertex id out of range");
        let stream = (replicate << (VERTEX_BITS + PURPOSE_BITS))
            | ((vertex as u64) << PURPOSE_BITS)
            | purpose as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Synthetic leaf distributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LeafDistribution {
    Normal { mean: f64, variance: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { rate: f64 },
}

impl LeafDistribution {
    pub fn mean(&self) -> f64 {
        match *self {
            LeafDistribution::Normal { mean, .. } => mean,
            LeafDistribution::Uniform { low, high } => 0.5 * (low + high),
            LeafDistribution::Exponential { rate } => 1.0 / rate,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            LeafDistribution::Normal { variance, .. } => variance,
            LeafDistribution::Uniform { low, high } => (high - low).powi(2) / 12.0,
            LeafDistribution::Exponential { rate } => 1.0 / (rate * rate),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = match *self {
            LeafDistribution::Normal { mean, variance } => {
                mean.is_finite() && variance.is_finite() && variance >= 0.0
            }
            LeafDistribution::Uniform { low, high } => {
                low.is_finite() && high.is_finite() && low < high
            }
            LeafDistribution::Exponential { rate } => rate.is_finite() && rate > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidDistribution(self.to_string()))
        }
    }

    fn sampler(&self) -> Result<Sampler, SimError> {
        self.validate()?;
        let bad = |e: &dyn fmt::Display| SimError::InvalidDistribution(format!("{self}: {e}"));
        Ok(match *self {
            LeafDistribution::Normal { mean, variance } => {
                Sampler::Normal(Normal::new(mean, variance.sqrt()).map_err(|e| bad(&e))?)
            }
            LeafDistribution::Uniform { low, high } => {
                Sampler::Uniform(Uniform::new(low, high).map_err(|e| bad(&e))?)
            }
            LeafDistribution::Exponential { rate } => {
                Sampler::Exp(Exp::new(rate).map_err(|e| bad(&e))?)
            }
        })
    }
}

impl fmt::Display for LeafDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LeafDistribution::Normal { mean, variance } => write!(f, "normal({mean},{variance})"),
            LeafDistribution::Uniform { low, high } => write!(f, "uniform({low},{high})"),
            LeafDistribution::Exponential { rate } => write!(f, "exponential({rate})"),
        }
    }
}

/// Parses `normal(mean,variance)`, `uniform(low,high)` or `exponential(rate)`.
impl FromStr for LeafDistribution {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        let bad = || SimError::InvalidDistribution(s.to_string());
        let s = s.trim();
        let open = s.find('(').ok_or_else(bad)?;
        let args = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let args: Vec<f64> = args
            .split(',')
            .map(|a| a.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        let dist = match (&s[..open], args.as_slice()) {
            ("normal", &[mean, variance]) => LeafDistribution::Normal { mean, variance },
            ("uniform", &[low, high]) => LeafDistribution::Uniform { low, high },
            ("exponential", &[rate]) => LeafDistribution::Exponential { rate },
            _ => return Err(bad()),
        };
        dist.validate()?;
        Ok(dist)
    }
}

enum Sampler {
    Normal(Normal<f64>),
    Uniform(Uniform<f64>),
    Exp(Exp<f64>),
}

impl Sampler {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Sampler::Normal(d) => d.sample(rng),
            Sampler::Uniform(d) => d.sample(rng),
            Sampler::Exp(d) => d.sample(rng),
        }
    }
}

/// Values held by one vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePopulation {
    pub vertex: VertexId,
    pub values: Vec<f64>,
}

impl SamplePopulation {
    pub fn size(&self) -> usize {
        self.values.len()
    }
}

/// `size` i.i.d. draws from `distribution`.
pub fn generate_leaf_population<R: Rng>(
    vertex: VertexId,
    distribution: &LeafDistribution,
    size: u64,
    rng: &mut R,
) -> Result<SamplePopulation, SimError> {
    if size == 0 {
        return Err(SimError::EmptyPopulation(vertex));
    }
    let sampler = distribution.sampler()?;
    Ok(SamplePopulation {
        vertex,
        values: (0..size).map(|_| sampler.draw(rng)).collect(),
    })
}

fn check_leaves<P: AsRef<[f64]>>(tree: &CalcTree, leaves: &[P]) -> Result<(), SimError> {
    if leaves.len() != tree.leaf_count() {
        return Err(SimError::SourceCount {
            expected: tree.leaf_count(),
            got: leaves.len(),
        });
    }
    match leaves.iter().position(|p| p.as_ref().is_empty()) {
        Some(i) => Err(SimError::EmptyPopulation(i + 1)),
        None => Ok(()),
    }
}

fn eval_at(tree: &CalcTree, v: VertexId, scratch: &[f64]) -> Result<f64, SimError> {
    tree.eval_vertex(v, &|id| scratch[id]).map_err(|e| match e {
        TreeError::Domain { vertex, source } => SimError::Domain {
            vertex,
            inputs: tree.children(v).iter().map(|&c| (c, scratch[c])).collect(),
            source,
        },
        other => unreachable!("evaluation only fails on domain errors: {other}"),
    })
}

/// Builds every internal population with the wave procedure and returns all
/// populations, leaves included, indexed by vertex.
pub fn wave_populations<P, R, F>(
    tree: &CalcTree,
    sizes: &PerVertex<u64>,
    leaves: &[P],
    mut rng_for: F,
) -> Result<PerVertex<Vec<f64>>, SimError>
where
    P: AsRef<[f64]>,
    R: Rng,
    F: FnMut(VertexId) -> R,
{
    let k = tree.vertex_count();
    if sizes.len() != k {
        return Err(SimError::SizeCount {
            expected: k,
            got: sizes.len(),
        });
    }
    check_leaves(tree, leaves)?;
    let mut pops: Vec<Vec<f64>> = leaves.iter().map(|p| p.as_ref().to_vec()).collect();
    let mut scratch = vec![0.0; k + 1];
    for v in tree.internal_ids() {
        if sizes[v] == 0 {
            return Err(SimError::EmptyPopulation(v));
        }
        let mut rng = rng_for(v);
        let mut population = Vec::with_capacity(sizes[v] as usize);
        for _ in 0..sizes[v] {
            for &i in tree.children(v) {
                let source = &pops[i - 1];
                scratch[i] = source[rng.random_range(0..source.len())];
            }
            population.push(eval_at(tree, v, &scratch)?);
        }
        pops.push(population);
    }
    Ok(PerVertex::from_vec(pops))
}

/// One hierarchical bootstrap estimate: the mean of the root population.
/// Leaf sizes are taken from the given populations.
pub fn wave_run<P, R, F>(
    tree: &CalcTree,
    sizes: &PerVertex<u64>,
    leaves: &[P],
    rng_for: F,
) -> Result<f64, SimError>
where
    P: AsRef<[f64]>,
    R: Rng,
    F: FnMut(VertexId) -> R,
{
    let pops = wave_populations(tree, sizes, leaves, rng_for)?;
    let root = &pops[tree.root()];
    Ok(root.iter().sum::<f64>() / root.len() as f64)
}

/// One sweep-method estimate: `r` independent leaf-to-root evaluations,
/// averaged.
pub fn sweep_run<P: AsRef<[f64]>, R: Rng>(
    tree: &CalcTree,
    leaves: &[P],
    r: u64,
    rng: &mut R,
) -> Result<f64, SimError> {
    check_leaves(tree, leaves)?;
    if r == 0 {
        return Err(SimError::EmptyPopulation(tree.root()));
    }
    let k = tree.vertex_count();
    let m = tree.leaf_count();
    let mut scratch = vec![0.0; k + 1];
    let mut total = 0.0;
    for _ in 0..r {
        for (i, pop) in leaves.iter().enumerate() {
            let pop = pop.as_ref();
            scratch[i + 1] = pop[rng.random_range(0..pop.len())];
        }
        for v in m + 1..=k {
            scratch[v] = eval_at(tree, v, &scratch)?;
        }
        total += scratch[k];
    }
    Ok(total / r as f64)
}

/// Where leaf populations come from in [`replicate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeafSource {
    /// Fresh draws for every replicate, one distribution per leaf.
    Synthetic(Vec<LeafDistribution>),
    /// The samples attached to the tree, reused for every replicate.
    Fixed,
}

impl LeafSource {
    /// Normal leaves with the tree's leaf means and variances.
    pub fn normal_from_tree(tree: &CalcTree) -> LeafSource {
        LeafSource::Synthetic(
            (1..=tree.leaf_count())
                .map(|v| LeafDistribution::Normal {
                    mean: tree.leaf_mean(v),
                    variance: tree.leaf_variance(v),
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationConfig {
    pub replications: u64,
    pub seed: u64,
    pub source: LeafSource,
    pub sizes: PerVertex<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub replications: u64,
    pub mean: f64,
    /// Unbiased (divisor `R - 1`).
    pub variance: f64,
    pub se_mean: f64,
    /// From the fourth central moment.
    pub se_variance: f64,
    pub values: Vec<f64>,
}

impl SimulationReport {
    pub fn from_values(seed: u64, values: Vec<f64>) -> SimulationReport {
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let (mut m2, mut m4) = (0.0, 0.0);
        for x in &values {
            let d = x - mean;
            let d2 = d * d;
            m2 += d2;
            m4 += d2 * d2;
        }
        let variance = m2 / (r - 1.0);
        let m4 = m4 / r;
        let var_of_var = (m4 - (r - 3.0) / (r - 1.0) * variance * variance) / r;
        SimulationReport {
            seed,
            replications: values.len() as u64,
            mean,
            variance,
            se_mean: (variance / r).sqrt(),
            se_variance: var_of_var.max(0.0).sqrt(),
            values,
        }
    }
}

/// Runs `config.replications` independent wave estimates.
pub fn replicate(
    config: &ReplicationConfig,
    tree: &CalcTree,
    exec: Execution,
) -> Result<SimulationReport, SimError> {
    if config.replications < 2 {
        return Err(SimError::TooFewReplications(config.replications));
    }
    if config.replications >= 1 << REPLICATE_BITS {
        return Err(SimError::StreamRange("replication count"));
    }
    let k = tree.vertex_count();
    if config.sizes.len() != k {
        return Err(SimError::SizeCount {
            expected: k,
            got: config.sizes.len(),
        });
    }
    let m = tree.leaf_count();
    let streams = Streams::new(config.seed);

    let fixed: Vec<&[f64]>;
    let samplers: Vec<Sampler>;
    match &config.source {
        LeafSource::Fixed => {
            fixed = (1..=m)
                .map(|v| tree.leaf_samples(v).ok_or(SimError::MissingLeafData(v)))
                .collect::<Result<_, _>>()?;
            for (v, data) in (1..=m).zip(&fixed) {
                if data.len() as u64 != config.sizes[v] {
                    return Err(SimError::PopulationSize {
                        vertex: v,
                        expected: config.sizes[v],
                        got: data.len(),
                    });
                }
            }
            samplers = Vec::new();
        }
        LeafSource::Synthetic(dists) => {
            if dists.len() != m {
                return Err(SimError::SourceCount {
                    expected: m,
                    got: dists.len(),
                });
            }
            if let Some(v) = (1..=m).find(|&v| config.sizes[v] == 0) {
                return Err(SimError::EmptyPopulation(v));
            }
            samplers = dists
                .iter()
                .map(LeafDistribution::sampler)
                .collect::<Result<_, _>>()?;
            fixed = Vec::new();
        }
    }

    let one = |rep: usize| -> Result<f64, SimError> {
        let rep = rep as u64;
        let resample = |v| streams.rng(rep, v, Purpose::Resample);
        if samplers.is_empty() {
            return wave_run(tree, &config.sizes, &fixed, resample);
        }
        let leaves: Vec<Vec<f64>> = samplers
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let v = i + 1;
                let mut rng = streams.rng(rep, v, Purpose::LeafData);
                (0..config.sizes[v]).map(|_| s.draw(&mut rng)).collect()
            })
            .collect();
        wave_run(tree, &config.sizes, &leaves, resample)
    };
    let values = exec
        .map_indexed(config.replications as usize, one)
        .into_iter()
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(SimulationReport::from_values(config.seed, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::tree::VertexSpec;

    fn sizes(n: &[u64]) -> PerVertex<u64> {
        PerVertex::from_vec(n.to_vec())
    }

    fn identity_tree() -> CalcTree {
        CalcTree::new(vec![
            VertexSpec::leaf(1, 1.0, 1.0),
            VertexSpec::internal(2, vec![1], Expr::parse("x1").unwrap()),
        ])
        .unwrap()
    }

    fn sum_tree() -> CalcTree {
        CalcTree::new(vec![
            VertexSpec::leaf(1, 0.0, 1.0),
            VertexSpec::leaf(2, 0.0, 1.0),
            VertexSpec::internal(3, vec![1, 2], Expr::parse("x1 + x2").unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn distribution_parsing() {
        assert_eq!(
            "normal(0, 1)".parse::<LeafDistribution>().unwrap(),
            LeafDistribution::Normal {
                mean: 0.0,
                variance: 1.0
            }
        );
        assert_eq!(
            "exponential(2)".parse::<LeafDistribution>().unwrap().mean(),
            0.5
        );
        assert!("uniform(1,0)".parse::<LeafDistribution>().is_err());
        assert!("normal(0,-1)".parse::<LeafDistribution>().is_err());
        assert!("cauchy(0,1)".parse::<LeafDistribution>().is_err());
        assert!("normal(0)".parse::<LeafDistribution>().is_err());
        let u: LeafDistribution = "uniform(0,1)".parse().unwrap();
        assert_eq!(u.to_string().parse::<LeafDistribution>().unwrap(), u);
    }

    #[test]
    fn populations_reproducible() {
        let d = LeafDistribution::Normal {
            mean: 0.0,
            variance: 1.0,
        };
        let streams = Streams::new(7);
        let a =
            generate_leaf_population(1, &d, 3, &mut streams.rng(0, 1, Purpose::LeafData)).unwrap();
        let b =
            generate_leaf_population(1, &d, 3, &mut streams.rng(0, 1, Purpose::LeafData)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.size(), 3);
        let c =
            generate_leaf_population(1, &d, 3, &mut streams.rng(1, 1, Purpose::LeafData)).unwrap();
        assert_ne!(a, c);
        assert!(
            generate_leaf_population(1, &d, 0, &mut streams.rng(0, 1, Purpose::LeafData)).is_err()
        );
    }

    #[test]
    fn streams_are_independent_per_vertex() {
        let s = Streams::new(99);
        let mut a = s.rng(3, 1, Purpose::LeafData);
        let mut b = s.rng(3, 2, Purpose::LeafData);
        let xa: Vec<u64> = (0..4).map(|_| a.random()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.random()).collect();
        assert_ne!(xa, xb);
        assert_ne!(s.rng(3, 1, Purpose::Resample).random::<u64>(), xa[0]);
    }

    #[test]
    fn singleton_leaves_are_deterministic() {
        let tree = CalcTree::new(vec![
            VertexSpec::leaf(1, 0.0, 1.0),
            VertexSpec::leaf(2, 0.0, 1.0),
            VertexSpec::internal(3, vec![1, 2], Expr::parse("x1 * x2 + 1").unwrap()),
        ])
        .unwrap();
        let leaves = [vec![2.0], vec![3.0]];
        for seed in 0..5 {
            let theta = wave_run(&tree, &sizes(&[1, 1, 4]), &leaves, |v| {
                Streams::new(seed).rng(0, v, Purpose::Resample)
            })
            .unwrap();
            assert_eq!(theta, 7.0);
            let sweep = sweep_run(
                &tree,
                &leaves,
                5,
                &mut Streams::new(seed).rng(0, 0, Purpose::Sweep),
            )
            .unwrap();
            assert_eq!(sweep, 7.0);
        }
    }

    #[test]
    fn wave_honors_sizes() {
        let tree = CalcTree::new(vec![
            VertexSpec::leaf(1, 0.0, 1.0),
            VertexSpec::leaf(2, 0.0, 1.0),
            VertexSpec::internal(3, vec![1], Expr::parse("x1^2").unwrap()),
            VertexSpec::internal(4, vec![2, 3], Expr::parse("x2 - x3").unwrap()),
        ])
        .unwrap();
        let leaves = [vec![1.0, 2.0, 3.0], vec![0.5, 0.25]];
        let n = sizes(&[3, 2, 7, 5]);
        let pops = wave_populations(&tree, &n, &leaves, |v| {
            Streams::new(1).rng(0, v, Purpose::Resample)
        })
        .unwrap();
        for v in 1..=4 {
            assert_eq!(pops[v].len() as u64, n[v]);
        }
        assert!(pops[3].iter().all(|x| [1.0, 4.0, 9.0].contains(x)));
    }

    #[test]
    fn two_point_law_of_large_numbers() {
        let tree = identity_tree();
        let leaves = [vec![0.0, 2.0]];
        let r = 100_000;
        // population mean of {0, 2} is 1 with per-draw sd 1
        let band = 3.0 / (r as f64).sqrt();
        let wave = wave_run(&tree, &sizes(&[2, r]), &leaves, |v| {
            Streams::new(5).rng(0, v, Purpose::Resample)
        })
        .unwrap();
        assert!((wave - 1.0).abs() < band, "{wave}");
        let sweep = sweep_run(
            &tree,
            &leaves,
            r,
            &mut Streams::new(5).rng(0, 0, Purpose::Sweep),
        )
        .unwrap();
        assert!((sweep - 1.0).abs() < band, "{sweep}");
    }

    #[test]
    fn domain_error_reports_inputs() {
        let tree = CalcTree::new(vec![
            VertexSpec::leaf(1, 1.0, 1.0),
            VertexSpec::internal(2, vec![1], Expr::parse("log(x1)").unwrap()),
        ])
        .unwrap();
        let err = wave_run(&tree, &sizes(&[1, 1]), &[vec![-2.0]], |v| {
            Streams::new(0).rng(0, v, Purpose::Resample)
        })
        .unwrap_err();
        match err {
            SimError::Domain { vertex, inputs, .. } => {
                assert_eq!(vertex, 2);
                assert_eq!(inputs, vec![(1, -2.0)]);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn identical_replicates_under_equal_streams() {
        // R = 2 with both replicates drawing from the same addresses
        let tree = sum_tree();
        let n = sizes(&[2, 2, 2]);
        let streams = Streams::new(11);
        let dist = LeafDistribution::Normal {
            mean: 0.0,
            variance: 1.0,
        };
        let run = || {
            let leaves: Vec<Vec<f64>> = (1..=2)
                .map(|v| {
                    generate_leaf_population(v, &dist, 2, &mut streams.rng(0, v, Purpose::LeafData))
                        .unwrap()
                        .values
                })
                .collect();
            wave_run(&tree, &n, &leaves, |v| streams.rng(0, v, Purpose::Resample)).unwrap()
        };
        let report = SimulationReport::from_values(11, vec![run(), run()]);
        assert_eq!(report.values[0], report.values[1]);
        assert_eq!(report.variance, 0.0);
    }

    #[test]
    fn replicate_is_schedule_independent() {
        let tree = sum_tree();
        let config = ReplicationConfig {
            replications: 2_000,
            seed: 3,
            source: LeafSource::normal_from_tree(&tree),
            sizes: sizes(&[2, 2, 2]),
        };
        let a = replicate(&config, &tree, Execution::Parallel).unwrap();
        let b = replicate(&config, &tree, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.len(), 2_000);
    }

    #[test]
    fn replicate_rejects_bad_configs() {
        let tree = sum_tree();
        let mut config = ReplicationConfig {
            replications: 1,
            seed: 0,
            source: LeafSource::normal_from_tree(&tree),
            sizes: sizes(&[2, 2, 2]),
        };
        assert!(matches!(
            replicate(&config, &tree, Execution::Sequential),
            Err(SimError::TooFewReplications(1))
        ));
        config.replications = 10;
        config.source = LeafSource::Fixed;
        assert!(matches!(
            replicate(&config, &tree, Execution::Sequential),
            Err(SimError::MissingLeafData(1))
        ));
        config.source =
            LeafSource::Synthetic(vec![LeafDistribution::Exponential { rate: -1.0 }; 2]);
        assert!(matches!(
            replicate(&config, &tree, Execution::Sequential),
            Err(SimError::InvalidDistribution(_))
        ));
    }

    #[test]
    fn fixed_mode_uses_attached_samples() {
        let tree = CalcTree::new(vec![
            VertexSpec::leaf(1, 0.0, 1.0).with_samples(vec![1.0, 2.0, 3.0]),
            VertexSpec::internal(2, vec![1], Expr::parse("2*x1").unwrap()),
        ])
        .unwrap();
        let mut config = ReplicationConfig {
            replications: 500,
            seed: 1,
            source: LeafSource::Fixed,
            sizes: sizes(&[3, 4]),
        };
        let report = replicate(&config, &tree, Execution::Sequential).unwrap();
        assert!(report.values.iter().all(|x| (2.0..=6.0).contains(x)));
        config.sizes = sizes(&[2, 4]);
        assert!(matches!(
            replicate(&config, &tree, Execution::Sequential),
            Err(SimError::PopulationSize { vertex: 1, .. })
        ));
    }

    #[test]
    fn report_statistics() {
        let r = SimulationReport::from_values(0, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.mean, 2.5);
        assert!((r.variance - 5.0 / 3.0).abs() < 1e-15);
        assert!((r.se_mean - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert!(r.se_variance >= 0.0);
    }
}
