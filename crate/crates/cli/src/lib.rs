//! Front-end for the `hboot` binary: argument model, command dispatch and
//! report rendering. [`run`] never prints or exits, so it can be driven from
//! tests; the binary only forwards its [`Outcome`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, ValueEnum};
use hboot::allocator::{self, AllocError};
use hboot::sim::{self, LeafDistribution, LeafSource, ReplicationConfig, SimError};
use hboot::tree::{self, TreeError};
use hboot::variance::ModelError;
use hboot::{
    AlphaGrid, CalcTree, Execution, OptimizationResult, PerVertex, VarianceModel, VertexId,
};
use serde_json::json;
use thiserror::Error;

/// Absolute tolerance for `oracle-check` between the exact DP and the oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-12;
/// Absolute tolerance for `oracle-check` between the grid DP and the exact DP.
pub const GRID_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Validate,
    Variance,
    Optimize,
    Simulate,
    OracleCheck,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Human,
    JsonLike,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Method {
    #[default]
    Collapsed,
    Grid,
}

/// `VERTEX=COST`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostOverride {
    pub vertex: VertexId,
    pub cost: u64,
}

impl FromStr for CostOverride {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (v, c) = s
            .split_once('=')
            .ok_or_else(|| format!("expected VERTEX=COST, got '{s}'"))?;
        let vertex = v
            .trim()
            .parse()
            .map_err(|_| format!("bad vertex id in '{s}'"))?;
        let cost = c.trim().parse().map_err(|_| format!("bad cost in '{s}'"))?;
        Ok(CostOverride { vertex, cost })
    }
}

/// `DIST` for every leaf, or `LEAF=DIST` for one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistOverride {
    pub leaf: Option<VertexId>,
    pub dist: LeafDistribution,
}

impl FromStr for DistOverride {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (leaf, spec) = match s.split_once('=') {
            Some((v, d)) => (
                Some(
                    v.trim()
                        .parse()
                        .map_err(|_| format!("bad leaf id in '{s}'"))?,
                ),
                d,
            ),
            None => (None, s),
        };
        let dist = spec.parse().map_err(|e: SimError| e.to_string())?;
        Ok(DistOverride { leaf, dist })
    }
}

#[derive(Clone, Debug, Parser)]
#[command(
    name = "hboot",
    version,
    about = "Hierarchical bootstrap: variance, optimal sample sizes, simulation"
)]
pub struct RunConfig {
    #[arg(value_enum)]
    pub command: Command,
    /// Tree document (JSON).
    #[arg(long)]
    pub tree: PathBuf,
    /// Total budget b.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Sample sizes n_1..n_k.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<u64>>,
    /// Per-vertex cost overrides, e.g. `3=2`.
    #[arg(long, alias = "cost", value_delimiter = ',')]
    pub costs: Vec<CostOverride>,
    #[arg(long = "alpha-grid", default_value_t = 101)]
    pub alpha_grid: usize,
    #[arg(long, default_value_t = 10_000)]
    pub replications: u64,
    /// Defaults to a clock-derived value; always echoed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    #[arg(long, value_enum, default_value_t)]
    pub method: Method,
    /// Leaf distribution for `simulate`: `normal(m,v)`, `uniform(lo,hi)`,
    /// `exponential(rate)`, optionally prefixed by `LEAF=`. Repeatable.
    /// Default: normal with the leaf's mean and variance.
    #[arg(long)]
    pub dist: Vec<DistOverride>,
    /// Resample the leaf data attached to the tree instead of drawing
    /// synthetic leaves.
    #[arg(long, conflicts_with = "dist")]
    pub fixed: bool,
    /// Include every replicate value in the `simulate` report.
    #[arg(long)]
    pub emit_values: bool,
    /// Per-vertex size cap for the `oracle-check` search (default: budget).
    #[arg(long)]
    pub cap: Option<u64>,
    #[arg(long)]
    pub sequential: bool,
}

impl RunConfig {
    /// A config with defaults for everything but the command and tree.
    pub fn new(command: Command, tree: impl Into<PathBuf>) -> RunConfig {
        RunConfig {
            command,
            tree: tree.into(),
            budget: None,
            sizes: None,
            costs: Vec::new(),
            alpha_grid: 101,
            replications: 10_000,
            seed: None,
            format: Format::Human,
            method: Method::Collapsed,
            dist: Vec::new(),
            fixed: false,
            emit_values: false,
            cap: None,
            sequential: false,
        }
    }

    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cli-io: {0}")]
    Config(String),
    #[error("tree-model: {0}")]
    Tree(TreeError),
    #[error("variance-model: {0}")]
    Model(ModelError),
    #[error("variance-model: infeasible plan: cost {cost} exceeds budget {budget}")]
    OverBudget { cost: u64, budget: u64 },
    #[error("allocator: {0}")]
    Alloc(#[from] AllocError),
    #[error("bootstrap-sim: {0}")]
    Sim(#[from] SimError),
}

impl From<TreeError> for CliError {
    fn from(e: TreeError) -> Self {
        CliError::Tree(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tree(t) => CliError::Tree(t),
            other => CliError::Model(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::OverBudget { .. } | CliError::Alloc(AllocError::Infeasible { .. }) => 2,
            _ => 1,
        }
    }

    /// One line per problem.
    pub fn diagnostics(&self) -> Vec<String> {
        match self {
            CliError::Tree(TreeError::Invalid(violations)) => violations
                .iter()
                .map(|v| format!("tree-model: {v}"))
                .collect(),
            other => vec![other.to_string()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run(config: &RunConfig) -> Outcome {
    match dispatch(config) {
        Ok(Report { code, text }) => Outcome {
            code,
            stdout: text,
            stderr: String::new(),
        },
        Err(e) => {
            let mut stderr = e.diagnostics().join("\n");
            stderr.push('\n');
            let stdout = match config.format {
                Format::Human => String::new(),
                Format::JsonLike => render_json(&json!({
                    "error": {
                        "exit_code": e.exit_code(),
                        "diagnostics": e.diagnostics(),
                    }
                })),
            };
            Outcome {
                code: e.exit_code(),
                stdout,
                stderr,
            }
        }
    }
}

struct Report {
    code: i32,
    text: String,
}

impl Report {
    fn ok(text: String) -> Report {
        Report { code: 0, text }
    }
}

fn dispatch(config: &RunConfig) -> Result<Report, CliError> {
    let tree = load_tree(&config.tree)?;
    match config.command {
        Command::Validate => validate(config, &tree),
        Command::Variance => variance(config, &tree),
        Command::Optimize => optimize(config, &tree),
        Command::Simulate => simulate(config, &tree),
        Command::OracleCheck => oracle_check(config, &tree),
    }
}

fn load_tree(path: &Path) -> Result<CalcTree, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(tree::parse_tree(&text, base)?)
}

fn effective_costs(config: &RunConfig, tree: &CalcTree) -> Result<PerVertex<u64>, CliError> {
    let mut costs = tree.costs();
    for o in &config.costs {
        if o.vertex == 0 || o.vertex > tree.vertex_count() {
            return Err(CliError::Config(format!(
                "cost override for unknown vertex {}",
                o.vertex
            )));
        }
        if o.cost == 0 {
            return Err(CliError::Alloc(AllocError::ZeroCost(o.vertex)));
        }
        costs[o.vertex] = o.cost;
    }
    Ok(costs)
}

fn required_sizes(config: &RunConfig, tree: &CalcTree) -> Result<PerVertex<u64>, CliError> {
    let sizes = config.sizes.clone().ok_or_else(|| {
        CliError::Config(format!("{} needs --sizes", command_name(config.command)))
    })?;
    if sizes.len() != tree.vertex_count() {
        return Err(CliError::Model(ModelError::SizeCount {
            expected: tree.vertex_count(),
            got: sizes.len(),
        }));
    }
    Ok(PerVertex::from_vec(sizes))
}

fn required_budget(config: &RunConfig) -> Result<u64, CliError> {
    config
        .budget
        .ok_or_else(|| CliError::Config(format!("{} needs --budget", command_name(config.command))))
}

fn command_name(c: Command) -> &'static str {
    match c {
        Command::Validate => "validate",
        Command::Variance => "variance",
        Command::Optimize => "optimize",
        Command::Simulate => "simulate",
        Command::OracleCheck => "oracle-check",
    }
}

fn validate(config: &RunConfig, tree: &CalcTree) -> Result<Report, CliError> {
    let costs = effective_costs(config, tree)?;
    let model = VarianceModel::new(tree)?;
    let k = tree.vertex_count();
    let text = match config.format {
        Format::JsonLike => render_json(&json!({
            "valid": true,
            "vertices": k,
            "leaves": tree.leaf_count(),
            "root": tree.root(),
            "costs": costs,
            "means": model.means(),
            "sigma2": model.sigma2(),
        })),
        Format::Human => {
            let rows = (1..=k)
                .map(|v| {
                    vec![
                        v.to_string(),
                        if tree.is_leaf(v) { "leaf" } else { "internal" }.to_string(),
                        costs[v].to_string(),
                        tree.children(v)
                            .iter()
                            .map(ToString::to_string)
                            .collect::<Vec<_>>()
                            .join(","),
                        tree.expr(v).map(ToString::to_string).unwrap_or_default(),
                        fmt_f(model.means()[v]),
                        fmt_f(model.sigma2()[v]),
                    ]
                })
                .collect();
            let mut out = table(
                &[
                    "vertex", "kind", "cost", "children", "phi", "mean", "sigma2",
                ],
                rows,
            );
            writeln!(
                out,
                "valid: {k} vertices, {} leaves, root {}",
                tree.leaf_count(),
                tree.root()
            )
            .unwrap();
            out
        }
    };
    Ok(Report::ok(text))
}

fn variance(config: &RunConfig, tree: &CalcTree) -> Result<Report, CliError> {
    let costs = effective_costs(config, tree)?;
    let sizes = required_sizes(config, tree)?;
    let model = VarianceModel::new(tree)?;
    let state = model.moments(&sizes)?;
    let d = model.estimator_variance(&sizes)?;
    let cost: u64 = sizes
        .as_slice()
        .iter()
        .zip(costs.as_slice())
        .map(|(n, a)| n * a)
        .sum();
    if let Some(budget) = config.budget {
        if cost > budget {
            return Err(CliError::OverBudget { cost, budget });
        }
    }
    let text = match config.format {
        Format::JsonLike => render_json(&json!({
            "sizes": sizes,
            "total_cost": cost,
            "budget": config.budget,
            "variance": d,
            "moments": state,
        })),
        Format::Human => {
            let rows = (1..=tree.vertex_count())
                .map(|v| {
                    vec![
                        v.to_string(),
                        sizes[v].to_string(),
                        costs[v].to_string(),
                        fmt_f(state.sigma2[v]),
                        fmt_f(state.c[v]),
                        fmt_f(state.cov[v]),
                    ]
                })
                .collect();
            let mut out = table(&["vertex", "n", "cost", "sigma2", "C", "Cov"], rows);
            writeln!(out, "total cost: {cost}").unwrap();
            writeln!(out, "estimator variance: {d}").unwrap();
            out
        }
    };
    Ok(Report::ok(text))
}

fn solve(
    config: &RunConfig,
    model: &VarianceModel<'_>,
    costs: &PerVertex<u64>,
    budget: u64,
    method: Method,
) -> Result<OptimizationResult, CliError> {
    let exec = config.execution();
    Ok(match method {
        Method::Collapsed => allocator::collapsed_dp(model, costs, budget, exec)?,
        Method::Grid => {
            let grid = AlphaGrid::uniform(config.alpha_grid)?;
            let table = allocator::backward_dp_grid(model, costs, budget, &grid, exec)?;
            allocator::forward_recovery(model, &table)?
        }
    })
}

fn optimize(config: &RunConfig, tree: &CalcTree) -> Result<Report, CliError> {
    let costs = effective_costs(config, tree)?;
    let budget = required_budget(config)?;
    let model = VarianceModel::new(tree)?;
    let result = solve(config, &model, &costs, budget, config.method)?;
    let text = match config.format {
        Format::JsonLike => render_json(&result),
        Format::Human => {
            let rows = (1..=tree.vertex_count())
                .map(|v| {
                    vec![
                        v.to_string(),
                        result.sizes[v].to_string(),
                        costs[v].to_string(),
                        result.budgets[v].to_string(),
                        fmt_f(result.alphas[v]),
                    ]
                })
                .collect();
            let mut out = table(&["vertex", "n", "cost", "budget", "alpha"], rows);
            writeln!(out, "n* = {}", tuple(result.sizes.as_slice())).unwrap();
            writeln!(out, "D* = {}", result.variance).unwrap();
            writeln!(out, "cost: {} of {budget}", result.total_cost(&costs)).unwrap();
            out
        }
    };
    Ok(Report::ok(text))
}

fn leaf_source(config: &RunConfig, tree: &CalcTree) -> Result<LeafSource, CliError> {
    if config.fixed {
        return Ok(LeafSource::Fixed);
    }
    let LeafSource::Synthetic(mut dists) = LeafSource::normal_from_tree(tree) else {
        unreachable!()
    };
    for o in &config.dist {
        match o.leaf {
            None => dists.iter_mut().for_each(|d| *d = o.dist),
            Some(v) if (1..=dists.len()).contains(&v) => dists[v - 1] = o.dist,
            Some(v) => {
                return Err(CliError::Config(format!(
                    "--dist for vertex {v}, which is not a leaf"
                )))
            }
        }
    }
    Ok(LeafSource::Synthetic(dists))
}

fn simulate(config: &RunConfig, tree: &CalcTree) -> Result<Report, CliError> {
    let sizes = required_sizes(config, tree)?;
    let model = VarianceModel::new(tree)?;
    let analytic = model.estimator_variance(&sizes)?;
    let seed = config.seed.unwrap_or_else(clock_seed);
    let replication = ReplicationConfig {
        replications: config.replications,
        seed,
        source: leaf_source(config, tree)?,
        sizes,
    };
    let report = sim::replicate(&replication, tree, config.execution())?;
    let relative = (report.variance - analytic) / analytic;
    let text = match config.format {
        Format::JsonLike => {
            let mut doc = serde_json::to_value(&report).expect("report serializes");
            let fields = doc.as_object_mut().expect("report is an object");
            if !config.emit_values {
                fields.remove("values");
            }
            fields.insert("analytic_variance".into(), json!(analytic));
            fields.insert("relative_discrepancy".into(), json!(relative));
            fields.insert(
                "leaves".into(),
                serde_json::to_value(&replication.source).expect("source serializes"),
            );
            render_json(&doc)
        }
        Format::Human => {
            let rows = vec![
                vec!["seed".into(), seed.to_string()],
                vec!["replications".into(), report.replications.to_string()],
                vec!["mean".into(), fmt_f(report.mean)],
                vec!["se(mean)".into(), fmt_f(report.se_mean)],
                vec!["variance".into(), fmt_f(report.variance)],
                vec!["se(variance)".into(), fmt_f(report.se_variance)],
                vec!["analytic variance".into(), fmt_f(analytic)],
                vec!["relative discrepancy".into(), fmt_f(relative)],
            ];
            let mut out = table(&["quantity", "value"], rows);
            if config.emit_values {
                for x in &report.values {
                    writeln!(out, "{x}").unwrap();
                }
            }
            out
        }
    };
    Ok(Report::ok(text))
}

fn oracle_check(config: &RunConfig, tree: &CalcTree) -> Result<Report, CliError> {
    let costs = effective_costs(config, tree)?;
    let budget = required_budget(config)?;
    let model = VarianceModel::new(tree)?;
    let exact = solve(config, &model, &costs, budget, Method::Collapsed)?;
    let grid = solve(config, &model, &costs, budget, Method::Grid)?;
    let oracle = allocator::brute_force_oracle(
        &model,
        &costs,
        budget,
        config.cap.unwrap_or(budget),
        config.execution(),
    )?;
    let oracle_gap = (exact.variance - oracle.variance).abs();
    let grid_gap = (grid.variance - exact.variance).abs();
    let pass = oracle_gap <= ORACLE_TOLERANCE && grid_gap <= GRID_TOLERANCE;
    let code = if pass { 0 } else { 1 };
    let text = match config.format {
        Format::JsonLike => render_json(&json!({
            "budget": budget,
            "collapsed": exact,
            "grid": grid,
            "oracle": oracle,
            "oracle_gap": oracle_gap,
            "grid_gap": grid_gap,
            "pass": pass,
        })),
        Format::Human => {
            let row = |name: &str, r: &OptimizationResult| {
                vec![
                    name.to_string(),
                    tuple(r.sizes.as_slice()),
                    r.total_cost(&costs).to_string(),
                    format!("{}", r.variance),
                ]
            };
            let rows = vec![
                row("collapsed", &exact),
                row("grid", &grid),
                row("oracle", &oracle),
            ];
            let mut out = table(&["method", "n", "cost", "variance"], rows);
            writeln!(
                out,
                "|collapsed - oracle| = {oracle_gap:e} (tolerance {ORACLE_TOLERANCE:e})"
            )
            .unwrap();
            writeln!(
                out,
                "|grid - collapsed| = {grid_gap:e} (tolerance {GRID_TOLERANCE:e})"
            )
            .unwrap();
            writeln!(out, "{}", if pass { "PASS" } else { "FAIL" }).unwrap();
            out
        }
    };
    Ok(Report { code, text })
}

fn clock_seed() -> u64 {
    let d = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default();
    d.as_secs() ^ (u64::from(d.subsec_nanos()) << 20)
}

fn render_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn fmt_f(x: f64) -> String {
    if x == 0.0 || (1e-4..1e6).contains(&x.abs()) {
        format!("{x:.6}")
    } else {
        format!("{x:.6e}")
    }
}

fn tuple(values: &[u64]) -> String {
    let inner: Vec<String> = values.iter().map(ToString::to_string).collect();
    format!("({})", inner.join(", "))
}

fn table(headers: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        writeln!(out, "{}", padded.join("  ").trim_end()).unwrap();
    };
    line(
        &mut out,
        &headers.iter().map(ToString::to_string).collect::<Vec<_>>(),
    );
    line(
        &mut out,
        &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(),
    );
    for row in &rows {
        line(&mut out, row);
    }
    out
}

/// Parses the arguments, runs, and maps clap failures onto exit status 1
/// (help and version still exit 0).
pub fn main_with_args<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match RunConfig::try_parse_from(args) {
        Ok(config) => run(&config),
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                Outcome {
                    code,
                    stdout: text,
                    stderr: String::new(),
                }
            } else {
                Outcome {
                    code,
                    stdout: String::new(),
                    stderr: text,
                }
            }
        }
    }
}
