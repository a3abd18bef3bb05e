//! The block-iterative distributed SCA algorithm with block-wise push-sum
//! consensus and gradient tracking.
//!
//! Each iteration has two barrier-separated phases:
//!
//! 1. Optimization. Agent `i` selects block `l`, minimizes a strongly convex
//!    surrogate of its cost plus the tracked gradient of the other agents'
//!    costs over that block, and moves its block a step `gamma` toward the
//!    minimizer. All other blocks of `v` equal the current `x`.
//! 2. Communication. Agent `i` sends `(v, phi, y)` of its selected block to
//!    its out-neighbors, then mixes every block with whatever it received for
//!    that block. The gradient tracker `y` is corrected by the change of the
//!    local block gradient, and `pi = N y - grad f_i` estimates the gradient
//!    of the other agents' costs.
//!
//! Agents that neither send nor receive a block keep it unchanged.

use rayon::prelude::*;
use thiserror::Error;

use crate::block_consensus::{block_weight, BlockLayout, BlockSchedule, ConsensusError};
use crate::metrics::{disagreement, z_bar, MetricsLog, MetricsRow};
use crate::prox::{BlockRegularizer, BoxSet};
use crate::surrogates::{
    make_partial_convexity, make_prox_linear, make_second_order, solve_block_subproblem, CompositeBlockProblem,
    Objective, SolverOptions, Surrogate, SurrogateError,
};
use crate::topology::{build_column_stochastic, Digraph, WeightMatrix};

/// Abort threshold on `||x||_inf`.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Error, PartialEq)]
pub enum AlgorithmError {
    #[error("agent {agent}: {source}")]
    Subproblem { agent: usize, source: SurrogateError },
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("iterate diverged at t = {t}: ||x||_inf = {norm:e} exceeds {limit:e}")]
    Diverged { t: usize, norm: f64, limit: f64 },
    #[error("invalid step size: need gamma0 in (0, 1] and mu in (0, 1/gamma0), got gamma0 = {gamma0}, mu = {mu}")]
    InvalidStepSize { gamma0: f64, mu: f64 },
    #[error("problem has {problem} agents but the graph has {graph} nodes")]
    SizeMismatch { problem: usize, graph: usize },
}

/// `gamma * (1 - mu * gamma)`
pub fn step_size_next(gamma: f64, mu: f64) -> f64 {
    gamma * (1.0 - mu * gamma)
}

/// Diminishing step size `gamma^{t+1} = gamma^t (1 - mu gamma^t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    gamma0: f64,
    mu: f64,
    gamma: f64,
}

impl StepSchedule {
    pub fn new(gamma0: f64, mu: f64) -> Result<Self, AlgorithmError> {
        if !(gamma0 > 0.0 && gamma0 <= 1.0 && mu > 0.0 && mu * gamma0 < 1.0) {
            return Err(AlgorithmError::InvalidStepSize { gamma0, mu });
        }
        Ok(Self { gamma0, mu, gamma: gamma0 })
    }

    pub fn current(&self) -> f64 {
        self.gamma
    }

    pub fn advance(&mut self) -> f64 {
        self.gamma = step_size_next(self.gamma, self.mu);
        self.gamma
    }

    /// Lower ratio bound: `gamma^{t+1} >= eta * gamma^t` with `eta = 1 - mu gamma0`.
    pub fn ratio_bound(&self) -> f64 {
        1.0 - self.mu * self.gamma0
    }
}

/// Local state of one agent, stored as full vectors; block `l` of each vector
/// occupies `layout.range(l)`. `phi` holds one push-sum weight per block.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub phi: Vec<f64>,
    pub y: Vec<f64>,
    pub pi: Vec<f64>,
    /// Gradient of the agent's tracked cost at `x`.
    pub grad: Vec<f64>,
}

impl AgentState {
    /// `phi = 1`, `y = grad f_i(x0)`, `pi = N y - grad f_i(x0)`.
    pub fn initial<P: DistributedProblem + ?Sized>(problem: &P, agent: usize, x0: Vec<f64>) -> Self {
        let mut grad = vec![0.0; x0.len()];
        problem.local_gradient(agent, &x0, &mut grad);
        let n = problem.agents() as f64;
        let pi = grad.iter().map(|g| n * g - g).collect();
        Self {
            v: x0.clone(),
            phi: vec![1.0; problem.layout().blocks()],
            y: grad.clone(),
            pi,
            grad,
            x: x0,
        }
    }
}

/// What an agent broadcasts for its selected block.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: usize,
    pub block: usize,
    pub v: Vec<f64>,
    pub phi: f64,
    pub y: Vec<f64>,
}

impl Message {
    /// Reals carried by the message: two block vectors and one weight.
    pub fn reals(&self) -> usize {
        self.v.len() + self.y.len() + 1
    }
}

/// A problem `min sum_i f_i(x) + sum_l g_l(x_l)` over a box, split across agents.
pub trait DistributedProblem: Sync {
    fn agents(&self) -> usize;

    fn layout(&self) -> BlockLayout;

    /// Box constraint shared by every coordinate.
    fn feasible_set(&self) -> BoxSet;

    fn regularizer(&self, block: usize) -> BlockRegularizer;

    /// Gradient of agent `agent`'s tracked smooth cost `f_i`.
    fn local_gradient(&self, agent: usize, x: &[f64], out: &mut [f64]);

    /// Surrogate of agent `agent`'s model around `x` in `block`.
    fn surrogate<'a>(&'a self, agent: usize, block: usize, x: &'a [f64]) -> Result<Box<dyn Surrogate + 'a>, SurrogateError>;

    /// Distance-from-stationarity merit at a network average.
    fn stationarity(&self, z: &[f64]) -> f64;

    fn initial_point(&self, _agent: usize) -> Vec<f64> {
        let set = self.feasible_set();
        vec![set.project(0.0); self.layout().total()]
    }
}

/// Optimization phase for one agent: sets `v` to `x` and replaces block
/// `block` of `v` with `x_l + gamma (x_hat - x_l)`.
pub fn optimization_step<P: DistributedProblem + ?Sized>(
    problem: &P,
    agent: usize,
    state: &mut AgentState,
    block: usize,
    gamma: f64,
    solver: &SolverOptions,
) -> Result<(), SurrogateError> {
    let range = problem.layout().range(block);
    let set = problem.feasible_set();
    let x_hat = {
        let surrogate = problem.surrogate(agent, block, &state.x)?;
        let subproblem = CompositeBlockProblem {
            surrogate: surrogate.as_ref(),
            linear: &state.pi[range.clone()],
            regularizer: problem.regularizer(block),
            set,
        };
        solve_block_subproblem(&subproblem, solver)?
    };
    state.v.copy_from_slice(&state.x);
    for (v, xh) in state.v[range].iter_mut().zip(x_hat) {
        // Convex combination of feasible points; the projection only absorbs rounding.
        *v = set.project(*v + gamma * (xh - *v));
    }
    Ok(())
}

/// Message traffic of one communication phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    pub messages: u64,
    pub reals: u64,
}

/// Communication phase: broadcast the selected blocks, then mix every block
/// and update the gradient trackers. `selections[i]` is the block agent `i`
/// optimized in this iteration.
pub fn communication_step<P: DistributedProblem + ?Sized>(
    problem: &P,
    graph: &Digraph,
    base: &WeightMatrix,
    states: &mut [AgentState],
    selections: &[usize],
) -> Result<Traffic, AlgorithmError> {
    let layout = problem.layout();
    let outbox: Vec<Message> = states
        .iter()
        .zip(selections)
        .enumerate()
        .map(|(sender, (s, &block))| {
            let r = layout.range(block);
            Message { sender, block, v: s.v[r.clone()].to_vec(), phi: s.phi[block], y: s.y[r].to_vec() }
        })
        .collect();

    let mut traffic = Traffic::default();
    for m in &outbox {
        let fanout = graph.out_neighbors(m.sender).len() as u64;
        traffic.messages += fanout;
        traffic.reals += fanout * m.reals() as u64;
    }

    let frozen: &[AgentState] = states;
    let next: Vec<AgentState> = (0..frozen.len())
        .into_par_iter()
        .map(|i| receive(problem, graph, base, &frozen[i], i, &outbox, selections))
        .collect::<Result<_, _>>()?;
    states.clone_from_slice(&next);
    Ok(traffic)
}

fn receive<P: DistributedProblem + ?Sized>(
    problem: &P,
    graph: &Digraph,
    base: &WeightMatrix,
    own: &AgentState,
    i: usize,
    outbox: &[Message],
    selections: &[usize],
) -> Result<AgentState, AlgorithmError> {
    let layout = problem.layout();
    let set = problem.feasible_set();
    let total = layout.total();
    let mut phi = vec![0.0; layout.blocks()];
    let mut x = vec![0.0; total];
    let mut y_mass = vec![0.0; total];

    for block in 0..layout.blocks() {
        let range = layout.range(block);
        let self_weight = block_weight(base, selections, block, i, i) * own.phi[block];
        let mut weight = self_weight;
        for k in range.clone() {
            x[k] = self_weight * own.v[k];
            y_mass[k] = self_weight * own.y[k];
        }
        for &j in graph.in_neighbors(i) {
            let m = &outbox[j];
            if m.block != block {
                continue;
            }
            let w = block_weight(base, selections, block, i, j) * m.phi;
            weight += w;
            for (k, (v, y)) in range.clone().zip(m.v.iter().zip(&m.y)) {
                x[k] += w * v;
                y_mass[k] += w * y;
            }
        }
        if !(weight > 0.0) {
            return Err(ConsensusError::NonPositiveWeight { agent: i, value: weight }.into());
        }
        for k in range {
            x[k] = set.project(x[k] / weight);
        }
        phi[block] = weight;
    }

    let mut grad = vec![0.0; total];
    problem.local_gradient(i, &x, &mut grad);
    let n = problem.agents() as f64;
    let mut y = vec![0.0; total];
    let mut pi = vec![0.0; total];
    for block in 0..layout.blocks() {
        for k in layout.range(block) {
            y[k] = (y_mass[k] + grad[k] - own.grad[k]) / phi[block];
            pi[k] = n * y[k] - grad[k];
        }
    }
    Ok(AgentState { v: x.clone(), x, phi, y, pi, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub max_iterations: usize,
    /// Stop once both merits drop below this level.
    pub tolerance: Option<f64>,
    pub gamma0: f64,
    pub mu: f64,
    pub solver: SolverOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { max_iterations: 1000, tolerance: None, gamma0: 0.5, mu: 1e-5, solver: SolverOptions::default() }
    }
}

/// Iteration-synchronous network simulator.
pub struct Simulator<'a, P: DistributedProblem + ?Sized> {
    problem: &'a P,
    graph: &'a Digraph,
    base: WeightMatrix,
    schedule: BlockSchedule,
    states: Vec<AgentState>,
    step: StepSchedule,
    solver: SolverOptions,
    t: usize,
    traffic: Traffic,
    last_selections: Vec<usize>,
}

impl<'a, P: DistributedProblem + ?Sized> Simulator<'a, P> {
    pub fn new(problem: &'a P, graph: &'a Digraph, schedule: BlockSchedule, options: &RunOptions) -> Result<Self, AlgorithmError> {
        let n = problem.agents();
        if graph.node_count() != n {
            return Err(AlgorithmError::SizeMismatch { problem: n, graph: graph.node_count() });
        }
        let states = (0..n).map(|i| AgentState::initial(problem, i, problem.initial_point(i))).collect();
        Ok(Self {
            problem,
            graph,
            base: build_column_stochastic(graph),
            schedule,
            states,
            step: StepSchedule::new(options.gamma0, options.mu)?,
            solver: options.solver,
            t: 0,
            traffic: Traffic::default(),
            last_selections: Vec::new(),
        })
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn gamma(&self) -> f64 {
        self.step.current()
    }

    pub fn traffic(&self) -> Traffic {
        self.traffic
    }

    pub fn base_weights(&self) -> &WeightMatrix {
        &self.base
    }

    /// Block selections used by the most recent iteration.
    pub fn last_selections(&self) -> &[usize] {
        &self.last_selections
    }

    /// Runs one optimization phase and one communication phase.
    pub fn step(&mut self) -> Result<(), AlgorithmError> {
        let n = self.states.len();
        let selections = self.schedule.selections(n, self.t);
        let gamma = self.step.current();
        let problem = self.problem;
        let solver = self.solver;
        self.states
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(i, s)| {
                optimization_step(problem, i, s, selections[i], gamma, &solver)
                    .map_err(|source| AlgorithmError::Subproblem { agent: i, source })
            })?;
        let traffic = communication_step(problem, self.graph, &self.base, &mut self.states, &selections)?;
        self.traffic.messages += traffic.messages;
        self.traffic.reals += traffic.reals;
        self.t += 1;
        self.step.advance();
        self.last_selections = selections;

        let norm = self
            .states
            .iter()
            .flat_map(|s| s.x.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        if !(norm <= DIVERGENCE_LIMIT) {
            return Err(AlgorithmError::Diverged { t: self.t, norm, limit: DIVERGENCE_LIMIT });
        }
        Ok(())
    }

    /// `(1/N) sum_i Phi_i x_i`
    pub fn z_bar(&self) -> Vec<f64> {
        z_bar(&self.problem.layout(), self.states.iter().map(|s| (s.x.as_slice(), s.phi.as_slice())))
    }

    pub fn metrics(&self) -> MetricsRow {
        let z = self.z_bar();
        MetricsRow {
            t: self.t,
            t_norm: self.t as f64 / self.problem.layout().blocks() as f64,
            stationarity: self.problem.stationarity(&z),
            disagreement: disagreement(&z, self.states.iter().map(|s| s.x.as_slice())),
            gamma: self.step.current(),
            msgs: self.traffic.messages,
            reals_tx: self.traffic.reals,
        }
    }
}

/// Runs the algorithm, recording a metrics row before every iteration and
/// after the last one.
pub fn run<P: DistributedProblem + ?Sized>(
    problem: &P,
    graph: &Digraph,
    schedule: BlockSchedule,
    options: &RunOptions,
) -> Result<MetricsLog, AlgorithmError> {
    run_observed(problem, graph, schedule, options, |_| {})
}

/// As [`run`], calling `observer` on the simulator at every recorded state.
pub fn run_observed<P: DistributedProblem + ?Sized>(
    problem: &P,
    graph: &Digraph,
    schedule: BlockSchedule,
    options: &RunOptions,
    mut observer: impl FnMut(&Simulator<'_, P>),
) -> Result<MetricsLog, AlgorithmError> {
    let mut sim = Simulator::new(problem, graph, schedule, options)?;
    let mut log = MetricsLog::default();
    loop {
        observer(&sim);
        let row = sim.metrics();
        let done = options
            .tolerance
            .is_some_and(|tol| row.stationarity < tol && row.disagreement < tol);
        log.push(row);
        if done || sim.iteration() >= options.max_iterations {
            break;
        }
        sim.step()?;
    }
    log::debug!("run finished after {} iterations", sim.iteration());
    Ok(log)
}

/// Surrogate family used by [`SmoothNetworkProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateFamily {
    ProxLinear,
    SecondOrder,
    PartialConvexity,
}

/// Sum of arbitrary smooth agent costs plus a common separable regularizer
/// over a box, with a generic surrogate family.
pub struct SmoothNetworkProblem {
    pub costs: Vec<Box<dyn Objective>>,
    pub layout: BlockLayout,
    pub set: BoxSet,
    pub regularizer: BlockRegularizer,
    pub family: SurrogateFamily,
    pub tau: f64,
}

impl SmoothNetworkProblem {
    pub fn total_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut total = vec![0.0; x.len()];
        let mut g = vec![0.0; x.len()];
        for f in &self.costs {
            f.gradient(x, &mut g);
            total.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
        }
        total
    }
}

impl DistributedProblem for SmoothNetworkProblem {
    fn agents(&self) -> usize {
        self.costs.len()
    }

    fn layout(&self) -> BlockLayout {
        self.layout
    }

    fn feasible_set(&self) -> BoxSet {
        self.set
    }

    fn regularizer(&self, _block: usize) -> BlockRegularizer {
        self.regularizer
    }

    fn local_gradient(&self, agent: usize, x: &[f64], out: &mut [f64]) {
        self.costs[agent].gradient(x, out);
    }

    fn surrogate<'a>(&'a self, agent: usize, block: usize, x: &'a [f64]) -> Result<Box<dyn Surrogate + 'a>, SurrogateError> {
        let f = self.costs[agent].as_ref();
        let range = self.layout.range(block);
        Ok(match self.family {
            SurrogateFamily::ProxLinear => Box::new(make_prox_linear(f, x, block, range, self.tau)),
            SurrogateFamily::SecondOrder => Box::new(make_second_order(f, x, block, range, self.tau)?),
            SurrogateFamily::PartialConvexity => Box::new(make_partial_convexity(f, x, block, range, self.tau)),
        })
    }

    /// `|| z - prox_g(z - grad F(z)) ||_inf`
    fn stationarity(&self, z: &[f64]) -> f64 {
        let grad = self.total_gradient(z);
        z.iter()
            .zip(&grad)
            .map(|(zk, gk)| (zk - self.regularizer.prox(zk - gk, 1.0, &self.set)).abs())
            .fold(0.0, f64::max)
    }
}
