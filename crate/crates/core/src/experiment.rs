//! Experiment configuration and orchestration: single runs, block-count
//! sweeps, the pure consensus demo and structural validation.
//!
//! Configs are flat `key = value` text. `#` starts a comment, blank lines and
//! `[section]` headers are ignored, and every key is optional:
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `agents` | 10 | number of agents |
//! | `dim` | 200 | length of the decision vector |
//! | `blocks` | 4 | number of blocks; must divide `dim` |
//! | `samples` | 40 | measurements per agent |
//! | `graph_p` | | Erdos-Renyi edge probability |
//! | `target_connectivity` | 6 | smallest edge probability (in steps of 0.01) whose graph reaches this algebraic connectivity; used when `graph_p` is absent |
//! | `lambda` | 0.1 | regularization weight |
//! | `theta` | 20 | log-regularizer sharpness |
//! | `noise_variance` | 0.1 | measurement noise variance |
//! | `sparsity` | 0.8 | fraction of zero entries in the ground truth |
//! | `gamma0`, `mu` | 0.5, 1e-5 | step-size rule `gamma <- gamma (1 - mu gamma)` |
//! | `surrogate` | PL | `PL`, `L` or `prox-linear` |
//! | `tau_pl`, `tau_l`, `tau_prox` | 3.5, 4.5, 1 | proximal coefficients per surrogate |
//! | `lambda_on_correction` | true | scale the linearized concave correction by `lambda` |
//! | `schedule` | shifted-round-robin | also `round-robin`, `random-permutation` |
//! | `algorithm` | b-sonata | or `d-grad` |
//! | `box_lower`, `box_upper` | -10, 10 | coordinate bounds |
//! | `max_iterations` | 20000 | iteration cap |
//! | `tolerance` | 1e-4 | stop once both merits are below it; `none` disables |
//! | `subproblem_tol`, `subproblem_max_iterations` | 1e-10, 50000 | iterative block solver |
//! | `seed` | 1 | master seed |
//! | `output` | out | output directory |

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::algorithm::{run, AlgorithmError, RunOptions};
use crate::baseline::run_dgrad;
use crate::block_consensus::{
    build_block_weights, check_t_connectivity, consensus_step, fit_decay, BlockSchedule, ConsensusError,
    DecayEstimate, ScheduleRule,
};
use crate::metrics::{completion_row, MetricsLog};
use crate::prox::BoxSet;
use crate::regression::{generate_instance, InstanceParams, RegressionError, RegressionProblem, SurrogateKind};
use crate::seeding::{derived_seed, substream, Stream};
use crate::surrogates::SolverOptions;
use crate::topology::{
    algebraic_connectivity, build_column_stochastic, generate_connected_erdos_renyi,
    generate_erdos_renyi_with_connectivity, is_strongly_connected, Digraph, TopologyError,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid `{key}`: {invariant}")]
    Invalid { key: &'static str, invariant: String },
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphSpec {
    Probability(f64),
    Connectivity(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    RoundRobin,
    ShiftedRoundRobin,
    RandomPermutation,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::RoundRobin => "round-robin",
            Self::ShiftedRoundRobin => "shifted-round-robin",
            Self::RandomPermutation => "random-permutation",
        }
    }

    /// The schedule rule, drawing the permutation seed from the schedule substream.
    pub fn rule(&self, seed: u64) -> ScheduleRule {
        match self {
            Self::RoundRobin => ScheduleRule::RoundRobin,
            Self::ShiftedRoundRobin => ScheduleRule::ShiftedRoundRobin,
            Self::RandomPermutation => ScheduleRule::RandomPermutation { seed: derived_seed(seed, Stream::Schedule) },
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "round-robin" => Ok(Self::RoundRobin),
            "shifted-round-robin" => Ok(Self::ShiftedRoundRobin),
            "random-permutation" => Ok(Self::RandomPermutation),
            other => Err(format!(
                "unknown schedule {other:?} (expected round-robin, shifted-round-robin or random-permutation)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgorithmKind {
    BSonata,
    DGrad,
}

impl AlgorithmKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::BSonata => "b-sonata",
            Self::DGrad => "d-grad",
        }
    }
}

impl FromStr for AlgorithmKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "b-sonata" => Ok(Self::BSonata),
            "d-grad" => Ok(Self::DGrad),
            other => Err(format!("unknown algorithm {other:?} (expected b-sonata or d-grad)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub agents: usize,
    pub dim: usize,
    pub blocks: usize,
    pub samples: usize,
    pub graph: GraphSpec,
    pub lambda: f64,
    pub theta: f64,
    pub noise_variance: f64,
    pub sparsity: f64,
    pub gamma0: f64,
    pub mu: f64,
    pub surrogate: SurrogateKind,
    pub tau_pl: f64,
    pub tau_l: f64,
    pub tau_prox: f64,
    pub lambda_on_correction: bool,
    pub schedule: ScheduleKind,
    pub algorithm: AlgorithmKind,
    pub box_lower: f64,
    pub box_upper: f64,
    pub max_iterations: usize,
    pub tolerance: Option<f64>,
    pub subproblem_tol: f64,
    pub subproblem_max_iterations: usize,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            agents: 10,
            dim: 200,
            blocks: 4,
            samples: 40,
            graph: GraphSpec::Connectivity(6.0),
            lambda: 0.1,
            theta: 20.0,
            noise_variance: 0.1,
            sparsity: 0.8,
            gamma0: 0.5,
            mu: 1e-5,
            surrogate: SurrogateKind::PartialLinearization,
            tau_pl: 3.5,
            tau_l: 4.5,
            tau_prox: 1.0,
            lambda_on_correction: true,
            schedule: ScheduleKind::ShiftedRoundRobin,
            algorithm: AlgorithmKind::BSonata,
            box_lower: -10.0,
            box_upper: 10.0,
            max_iterations: 20_000,
            tolerance: Some(1e-4),
            subproblem_tol: 1e-10,
            subproblem_max_iterations: 50_000,
            seed: 1,
            output: PathBuf::from("out"),
        }
    }
}

fn invalid(key: &'static str, invariant: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, invariant: invariant.into() }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut graph_p = None;
        let mut connectivity = None;
        for (index, raw) in text.lines().enumerate() {
            let line_no = index + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let err = |reason: String| ConfigError::Parse { line: line_no, reason };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String>
            where
                T::Err: fmt::Display,
            {
                value.parse().map_err(|e| format!("`{key}`: cannot parse {value:?}: {e}"))
            }
            let result: Result<(), String> = (|| {
                match key {
                    "agents" => cfg.agents = num(key, value)?,
                    "dim" => cfg.dim = num(key, value)?,
                    "blocks" => cfg.blocks = num(key, value)?,
                    "samples" => cfg.samples = num(key, value)?,
                    "graph_p" => graph_p = Some(num(key, value)?),
                    "target_connectivity" => connectivity = Some(num(key, value)?),
                    "lambda" => cfg.lambda = num(key, value)?,
                    "theta" => cfg.theta = num(key, value)?,
                    "noise_variance" => cfg.noise_variance = num(key, value)?,
                    "sparsity" => cfg.sparsity = num(key, value)?,
                    "gamma0" => cfg.gamma0 = num(key, value)?,
                    "mu" => cfg.mu = num(key, value)?,
                    "surrogate" => cfg.surrogate = value.parse()?,
                    "tau_pl" => cfg.tau_pl = num(key, value)?,
                    "tau_l" => cfg.tau_l = num(key, value)?,
                    "tau_prox" => cfg.tau_prox = num(key, value)?,
                    "lambda_on_correction" => cfg.lambda_on_correction = num(key, value)?,
                    "schedule" => cfg.schedule = value.parse()?,
                    "algorithm" => cfg.algorithm = value.parse()?,
                    "box_lower" => cfg.box_lower = num(key, value)?,
                    "box_upper" => cfg.box_upper = num(key, value)?,
                    "max_iterations" => cfg.max_iterations = num(key, value)?,
                    "tolerance" => {
                        cfg.tolerance = if value == "none" { None } else { Some(num(key, value)?) };
                    }
                    "subproblem_tol" => cfg.subproblem_tol = num(key, value)?,
                    "subproblem_max_iterations" => cfg.subproblem_max_iterations = num(key, value)?,
                    "seed" => cfg.seed = num(key, value)?,
                    "output" => cfg.output = PathBuf::from(value),
                    other => return Err(format!("unknown key `{other}`")),
                }
                Ok(())
            })();
            result.map_err(err)?;
        }
        cfg.graph = match (graph_p, connectivity) {
            (Some(_), Some(_)) => {
                return Err(invalid("graph_p", "give either graph_p or target_connectivity, not both"));
            }
            (Some(p), None) => GraphSpec::Probability(p),
            (None, Some(c)) => GraphSpec::Connectivity(c),
            (None, None) => cfg.graph,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes every key; `parse` of the result reproduces `self` exactly.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("agents", &self.agents);
        kv("dim", &self.dim);
        kv("blocks", &self.blocks);
        kv("samples", &self.samples);
        match self.graph {
            GraphSpec::Probability(p) => kv("graph_p", &p),
            GraphSpec::Connectivity(c) => kv("target_connectivity", &c),
        }
        kv("lambda", &self.lambda);
        kv("theta", &self.theta);
        kv("noise_variance", &self.noise_variance);
        kv("sparsity", &self.sparsity);
        kv("gamma0", &self.gamma0);
        kv("mu", &self.mu);
        kv("surrogate", &self.surrogate.name());
        kv("tau_pl", &self.tau_pl);
        kv("tau_l", &self.tau_l);
        kv("tau_prox", &self.tau_prox);
        kv("lambda_on_correction", &self.lambda_on_correction);
        kv("schedule", &self.schedule.name());
        kv("algorithm", &self.algorithm.name());
        kv("box_lower", &self.box_lower);
        kv("box_upper", &self.box_upper);
        kv("max_iterations", &self.max_iterations);
        match self.tolerance {
            Some(t) => kv("tolerance", &t),
            None => kv("tolerance", &"none"),
        }
        kv("subproblem_tol", &self.subproblem_tol);
        kv("subproblem_max_iterations", &self.subproblem_max_iterations);
        kv("seed", &self.seed);
        kv("output", &self.output.display());
        s
    }

    /// Checks every range constraint, naming the violated invariant.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key: &'static str, v: usize| if v == 0 { Err(invalid(key, "must be at least 1")) } else { Ok(()) };
        positive("agents", self.agents)?;
        positive("dim", self.dim)?;
        positive("blocks", self.blocks)?;
        positive("samples", self.samples)?;
        if self.dim % self.blocks != 0 {
            return Err(invalid("blocks", format!("dim = {} must be divisible by blocks = {}", self.dim, self.blocks)));
        }
        match self.graph {
            GraphSpec::Probability(p) if !(p > 0.0 && p <= 1.0) => {
                return Err(invalid("graph_p", format!("edge probability must lie in (0, 1], got {p}")));
            }
            GraphSpec::Connectivity(c) if !(c > 0.0 && c.is_finite()) => {
                return Err(invalid("target_connectivity", format!("must be positive and finite, got {c}")));
            }
            _ => {}
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(invalid("theta", format!("must be finite and > 0, got {}", self.theta)));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(invalid("noise_variance", format!("must be finite and >= 0, got {}", self.noise_variance)));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(invalid("sparsity", format!("must lie in [0, 1], got {}", self.sparsity)));
        }
        if !(self.gamma0 > 0.0 && self.gamma0 <= 1.0) {
            return Err(invalid("gamma0", format!("must lie in (0, 1], got {}", self.gamma0)));
        }
        if !(self.mu > 0.0 && self.mu * self.gamma0 < 1.0) {
            return Err(invalid("mu", format!("must lie in (0, 1/gamma0) = (0, {}), got {}", 1.0 / self.gamma0, self.mu)));
        }
        for (key, tau) in [("tau_pl", self.tau_pl), ("tau_l", self.tau_l), ("tau_prox", self.tau_prox)] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(invalid(key, format!("must be finite and > 0, got {tau}")));
            }
        }
        if !(self.box_lower <= self.box_upper) {
            return Err(invalid("box_lower", format!("box [{}, {}] is empty", self.box_lower, self.box_upper)));
        }
        if let Some(t) = self.tolerance {
            if !(t > 0.0) {
                return Err(invalid("tolerance", format!("must be > 0, got {t}")));
            }
        }
        if !(self.subproblem_tol > 0.0) {
            return Err(invalid("subproblem_tol", format!("must be > 0, got {}", self.subproblem_tol)));
        }
        positive("subproblem_max_iterations", self.subproblem_max_iterations)?;
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        match self.surrogate {
            SurrogateKind::PartialLinearization => self.tau_pl,
            SurrogateKind::Linearization => self.tau_l,
            SurrogateKind::ProxLinear => self.tau_prox,
        }
    }

    pub fn set(&self) -> BoxSet {
        BoxSet::new(self.box_lower, self.box_upper)
    }

    pub fn instance_params(&self) -> InstanceParams {
        InstanceParams {
            agents: self.agents,
            dim: self.dim,
            samples: self.samples,
            sparsity: self.sparsity,
            noise_variance: self.noise_variance,
            lambda: self.lambda,
            theta: self.theta,
            set: self.set(),
            blocks: self.blocks,
        }
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            gamma0: self.gamma0,
            mu: self.mu,
            solver: SolverOptions { tol: self.subproblem_tol, max_iterations: self.subproblem_max_iterations },
        }
    }

    pub fn schedule(&self) -> BlockSchedule {
        BlockSchedule::new(self.schedule.rule(self.seed), self.blocks)
    }
}

/// The communication graph of an experiment with the facts recorded in its metadata.
#[derive(Debug, Clone)]
pub struct NetworkSetup {
    pub graph: Digraph,
    pub edge_probability: f64,
    pub algebraic_connectivity: f64,
    pub graph_seed: u64,
}

pub fn build_network(config: &ExperimentConfig) -> Result<NetworkSetup, ExperimentError> {
    let graph_seed = derived_seed(config.seed, Stream::Graph);
    let (graph, edge_probability, algebraic_connectivity) = match config.graph {
        GraphSpec::Probability(p) => {
            let (g, _) = generate_connected_erdos_renyi(config.agents, p, graph_seed)?;
            let c = algebraic_connectivity(&g)?;
            (g, p, c)
        }
        GraphSpec::Connectivity(target) => generate_erdos_renyi_with_connectivity(config.agents, target, graph_seed)?,
    };
    Ok(NetworkSetup { graph, edge_probability, algebraic_connectivity, graph_seed })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: MetricsLog,
    /// Ordered `key = value` metadata, ending with the full config echo.
    pub meta: Vec<(String, String)>,
}

impl RunOutput {
    pub fn meta_text(&self) -> String {
        self.meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn run_with(
    config: &ExperimentConfig,
    network: &NetworkSetup,
    problem: &RegressionProblem,
) -> Result<MetricsLog, ExperimentError> {
    let options = config.run_options();
    Ok(match config.algorithm {
        AlgorithmKind::BSonata => run(problem, &network.graph, config.schedule(), &options)?,
        AlgorithmKind::DGrad => run_dgrad(&problem.instance, &network.graph, &options)?,
    })
}

fn metadata(config: &ExperimentConfig, network: &NetworkSetup, log: &MetricsLog) -> Vec<(String, String)> {
    let mut meta: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| meta.push((k.to_string(), v));
    put("graph_edges", network.graph.edge_count().to_string());
    put("graph_edge_probability", network.edge_probability.to_string());
    put("algebraic_connectivity", network.algebraic_connectivity.to_string());
    put("seed_graph", network.graph_seed.to_string());
    put("seed_data", derived_seed(config.seed, Stream::Data).to_string());
    put("seed_noise", derived_seed(config.seed, Stream::Noise).to_string());
    put("seed_schedule", derived_seed(config.seed, Stream::Schedule).to_string());
    if let Some(last) = log.last() {
        put("iterations", last.t.to_string());
        put("final_J", format!("{:e}", last.stationarity));
        put("final_D", format!("{:e}", last.disagreement));
        put("msgs", last.msgs.to_string());
        put("reals_tx", last.reals_tx.to_string());
    }
    let t_end = config.tolerance.and_then(|tol| completion_row(log, tol)).map(|r| r.t);
    put("t_end", t_end.map_or_else(|| "none".to_string(), |t| t.to_string()));
    for line in config.serialize().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            put(&format!("config.{k}"), v.to_string());
        }
    }
    meta
}

/// Generates the graph and instance from the config's seed and runs the
/// configured algorithm.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    config.validate()?;
    let network = build_network(config)?;
    let instance = generate_instance(&config.instance_params(), config.seed)?
        .with_lambda_on_correction(config.lambda_on_correction);
    let problem = RegressionProblem::new(instance, config.surrogate, config.tau());
    let log = run_with(config, &network, &problem)?;
    log::info!("run finished after {} iterations", log.last().map_or(0, |r| r.t));
    let meta = metadata(config, &network, &log);
    Ok(RunOutput { log, meta })
}

fn write(path: PathBuf, contents: &str) -> Result<(), ExperimentError> {
    fs::write(&path, contents).map_err(|source| ExperimentError::Io { path, source })
}

fn create_dir(dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.to_path_buf(), source })
}

/// Writes `trace.csv` and `meta.txt` into `dir`.
pub fn write_run(dir: &Path, output: &RunOutput) -> Result<(), ExperimentError> {
    create_dir(dir)?;
    write(dir.join("trace.csv"), &output.log.to_csv())?;
    write(dir.join("meta.txt"), &output.meta_text())
}

/// Exact header of the sweep summary.
pub const SUMMARY_HEADER: &str = "B,t_end,t_end_norm,reals_tx";

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub blocks: usize,
    pub t_end: Option<usize>,
    pub t_end_norm: Option<f64>,
    /// Cumulative reals transmitted at `t_end`.
    pub reals_tx: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub runs: Vec<(usize, RunOutput)>,
    pub summary: Vec<SummaryRow>,
}

/// Summary CSV; runs that never reach the tolerance leave their fields empty.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.blocks,
            opt(r.t_end.map(|t| t.to_string())),
            opt(r.t_end_norm.map(|t| format!("{t:.16e}"))),
            opt(r.reals_tx.map(|t| t.to_string()))
        );
    }
    out
}

/// Runs the config once per block count on the same graph and data.
pub fn sweep_blocks(config: &ExperimentConfig, blocks: &[usize]) -> Result<SweepOutput, ExperimentError> {
    let configs: Vec<ExperimentConfig> = blocks
        .iter()
        .map(|&b| {
            let c = ExperimentConfig { blocks: b, ..config.clone() };
            c.validate().map(|_| c)
        })
        .collect::<Result<_, _>>()?;
    let tol = config.tolerance;
    let runs: Vec<(usize, RunOutput)> = configs
        .par_iter()
        .map(|c| run_experiment(c).map(|out| (c.blocks, out)))
        .collect::<Result<_, _>>()?;
    let summary = runs
        .iter()
        .map(|(b, out)| {
            let row = tol.and_then(|t| completion_row(&out.log, t));
            SummaryRow {
                blocks: *b,
                t_end: row.map(|r| r.t),
                t_end_norm: row.map(|r| r.t as f64 / *b as f64),
                reals_tx: row.map(|r| r.reals_tx),
            }
        })
        .collect();
    Ok(SweepOutput { runs, summary })
}

/// Writes `trace_B<b>.csv` and `meta_B<b>.txt` per block count, plus `summary.csv`.
pub fn write_sweep(dir: &Path, output: &SweepOutput) -> Result<(), ExperimentError> {
    create_dir(dir)?;
    for (b, run) in &output.runs {
        write(dir.join(format!("trace_B{b}.csv")), &run.log.to_csv())?;
        write(dir.join(format!("meta_B{b}.txt")), &run.meta_text())?;
    }
    write(dir.join("summary.csv"), &summary_csv(&output.summary))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusDemoOptions {
    pub agents: usize,
    pub blocks: usize,
    pub schedule: ScheduleKind,
    pub graph_p: f64,
    pub seed: u64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for ConsensusDemoOptions {
    fn default() -> Self {
        Self {
            agents: 10,
            blocks: 4,
            schedule: ScheduleKind::ShiftedRoundRobin,
            graph_p: 0.3,
            seed: 7,
            tolerance: 1e-10,
            max_iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConsensusDemo {
    /// Largest block-wise distance of any agent to the weighted average, per iteration.
    pub deviation: Vec<f64>,
    /// Per-block weighted average of the initial values.
    pub limit: Vec<f64>,
    /// Final values, `[agent][block]`.
    pub values: Vec<Vec<f64>>,
    pub decay: DecayEstimate,
}

impl ConsensusDemo {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,max_deviation\n");
        for (t, d) in self.deviation.iter().enumerate() {
            let _ = writeln!(out, "{t},{d:.16e}");
        }
        out
    }
}

/// Pure block consensus (no optimization) on a random connected graph with
/// one scalar per block, drawn uniformly from `[-1, 1]`, and unit weights.
pub fn consensus_demo(options: &ConsensusDemoOptions) -> Result<ConsensusDemo, ExperimentError> {
    let n = options.agents;
    let b = options.blocks;
    if n == 0 || b == 0 {
        return Err(ConfigError::Invalid { key: "agents", invariant: "agents and blocks must be at least 1".into() }.into());
    }
    let (graph, _) = generate_connected_erdos_renyi(n, options.graph_p, derived_seed(options.seed, Stream::Graph))?;
    let base = build_column_stochastic(&graph);
    let schedule = BlockSchedule::new(options.schedule.rule(options.seed), b);
    let mut rng = substream(options.seed, Stream::Consensus);
    let mut values: Vec<Vec<f64>> = (0..n).map(|_| (0..b).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
    let limit: Vec<f64> = (0..b).map(|l| values.iter().map(|v| v[l]).sum::<f64>() / n as f64).collect();
    let mut weights = vec![vec![1.0; n]; b];

    let deviation_of = |values: &[Vec<f64>]| {
        values
            .iter()
            .flat_map(|v| v.iter().zip(&limit).map(|(a, m)| (a - m).abs()))
            .fold(0.0, f64::max)
    };
    let mut deviation = vec![deviation_of(&values)];
    for t in 0..options.max_iterations {
        if *deviation.last().unwrap_or(&0.0) < options.tolerance {
            break;
        }
        let selections = schedule.selections(n, t);
        for l in 0..b {
            let a = build_block_weights(&graph, &base, &selections, l);
            let column: Vec<Vec<f64>> = values.iter().map(|v| vec![v[l]]).collect();
            let (w, x) = consensus_step(&weights[l], &column, &a)?;
            weights[l] = w;
            for (v, xi) in values.iter_mut().zip(x) {
                v[l] = xi[0];
            }
        }
        deviation.push(deviation_of(&values));
    }
    let decay = fit_decay(deviation[1..].to_vec())?;
    Ok(ConsensusDemo { deviation, limit, values, decay })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Structural checks of an experiment: graph connectivity, column
/// stochasticity of every block weight matrix over one schedule period,
/// essential cyclicity of the schedule, per-block joint connectivity over
/// the cycle window, and the step-size parameters.
pub fn validate_experiment(config: &ExperimentConfig) -> Result<Vec<Check>, ExperimentError> {
    config.validate()?;
    let mut checks = Vec::new();
    let mut check = |name: &str, passed: bool, detail: String| {
        checks.push(Check { name: name.to_string(), passed, detail });
    };
    let network = build_network(config)?;
    let g = &network.graph;
    let n = g.node_count();
    check(
        "graph strongly connected",
        is_strongly_connected(g),
        format!("{n} nodes, {} edges, algebraic connectivity {:.6}", g.edge_count(), network.algebraic_connectivity),
    );

    let base = build_column_stochastic(g);
    let schedule = config.schedule();
    let horizon = schedule.check_horizon();
    let mut worst = base.column_sum_error();
    for t in 0..horizon {
        let selections = schedule.selections(n, t);
        for l in 0..config.blocks {
            let sums = build_block_weights(g, &base, &selections, l).column_sums();
            worst = sums.iter().map(|s| (s - 1.0).abs()).fold(worst, f64::max);
        }
    }
    check("weights column stochastic", worst <= 1e-12, format!("max column-sum error {worst:e}"));

    let window = schedule.cycle_bound();
    let mut cyclic = true;
    for i in 0..n {
        for start in 0..horizon {
            let mut seen = vec![false; config.blocks];
            for t in start..start + window {
                seen[schedule.next_block(i, t)] = true;
            }
            cyclic &= seen.iter().all(|&s| s);
        }
    }
    check("schedule essentially cyclic", cyclic, format!("every agent visits all blocks within {window} iterations"));

    let connected = (0..config.blocks).all(|l| check_t_connectivity(&schedule, g, l, window));
    check("block graphs jointly connected", connected, format!("window {window}"));

    let step_ok = config.gamma0 > 0.0 && config.gamma0 <= 1.0 && config.mu > 0.0 && config.mu * config.gamma0 < 1.0;
    check("step size", step_ok, format!("gamma0 = {}, mu = {}", config.gamma0, config.mu));
    Ok(checks)
}
