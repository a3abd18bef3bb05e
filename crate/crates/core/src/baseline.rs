//! D-Grad: a full-vector distributed projected subgradient method with
//! push-sum mixing, used as a comparison baseline on the regression problem.
//!
//! Each agent steps along a subgradient of its own cost plus a `1/N` share of
//! the common regularizer, projects onto the box, and mixes the whole vector
//! with the column-stochastic base weights.

use rayon::prelude::*;

use crate::algorithm::{AlgorithmError, RunOptions, StepSchedule, Traffic, DIVERGENCE_LIMIT};
use crate::block_consensus::ConsensusError;
use crate::metrics::{disagreement, merit_j, MetricsLog, MetricsRow};
use crate::regression::{dg0_minus, eta, RegressionInstance};
use crate::topology::{build_column_stochastic, Digraph, WeightMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct DGradState {
    pub x: Vec<f64>,
    pub phi: f64,
}

/// Subgradient of `f_i + (lambda / N) sum_j g0(x_j)`, taking `sign(0) = 0`
/// in the `g0_plus` part.
pub fn dgrad_subgradient(instance: &RegressionInstance, agent: usize, x: &[f64], out: &mut [f64]) {
    instance.local_gradient(agent, x, out);
    let share = instance.lambda() / instance.agents() as f64;
    let theta = instance.theta();
    let e = eta(theta);
    for (o, &v) in out.iter_mut().zip(x) {
        let sign = if v == 0.0 { 0.0 } else { v.signum() };
        *o += share * (e * sign - dg0_minus(v, theta));
    }
}

/// One local step followed by one push-sum mixing round over the whole vector.
pub fn dgrad_step(
    instance: &RegressionInstance,
    graph: &Digraph,
    base: &WeightMatrix,
    states: &mut [DGradState],
    gamma: f64,
) -> Result<Traffic, AlgorithmError> {
    let set = instance.feasible_set();
    let local: Vec<Vec<f64>> = states
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut g = vec![0.0; s.x.len()];
            dgrad_subgradient(instance, i, &s.x, &mut g);
            s.x.iter().zip(&g).map(|(x, g)| set.project(x - gamma * g)).collect()
        })
        .collect();

    let frozen: &[DGradState] = states;
    let next: Vec<DGradState> = (0..frozen.len())
        .into_par_iter()
        .map(|i| {
            let own = base.get(i, i) * frozen[i].phi;
            let mut phi = own;
            let mut x: Vec<f64> = local[i].iter().map(|v| own * v).collect();
            for &j in graph.in_neighbors(i) {
                let w = base.get(i, j) * frozen[j].phi;
                phi += w;
                x.iter_mut().zip(&local[j]).for_each(|(a, v)| *a += w * v);
            }
            if !(phi > 0.0) {
                return Err(ConsensusError::NonPositiveWeight { agent: i, value: phi }.into());
            }
            x.iter_mut().for_each(|v| *v = set.project(*v / phi));
            Ok(DGradState { x, phi })
        })
        .collect::<Result<_, AlgorithmError>>()?;
    states.clone_from_slice(&next);

    let messages = graph.edge_count() as u64;
    Ok(Traffic { messages, reals: messages * (instance.dim() as u64 + 1) })
}

fn metrics(instance: &RegressionInstance, states: &[DGradState], t: usize, gamma: f64, traffic: Traffic) -> MetricsRow {
    let n = states.len() as f64;
    let mut z = vec![0.0; instance.dim()];
    for s in states {
        z.iter_mut().zip(&s.x).for_each(|(a, x)| *a += s.phi * x / n);
    }
    MetricsRow {
        t,
        t_norm: t as f64,
        stationarity: merit_j(&z, instance),
        disagreement: disagreement(&z, states.iter().map(|s| s.x.as_slice())),
        gamma,
        msgs: traffic.messages,
        reals_tx: traffic.reals,
    }
}

/// Runs D-Grad from the projected origin with the shared step-size rule.
pub fn run_dgrad(instance: &RegressionInstance, graph: &Digraph, options: &RunOptions) -> Result<MetricsLog, AlgorithmError> {
    let n = instance.agents();
    if graph.node_count() != n {
        return Err(AlgorithmError::SizeMismatch { problem: n, graph: graph.node_count() });
    }
    let base = build_column_stochastic(graph);
    let x0 = vec![instance.feasible_set().project(0.0); instance.dim()];
    let mut states = vec![DGradState { x: x0, phi: 1.0 }; n];
    let mut step = StepSchedule::new(options.gamma0, options.mu)?;
    let mut total = Traffic::default();
    let mut log = MetricsLog::default();
    let mut t = 0;
    loop {
        let row = metrics(instance, &states, t, step.current(), total);
        let done = options.tolerance.is_some_and(|tol| row.stationarity < tol && row.disagreement < tol);
        log.push(row);
        if done || t >= options.max_iterations {
            return Ok(log);
        }
        let traffic = dgrad_step(instance, graph, &base, &mut states, step.current())?;
        total.messages += traffic.messages;
        total.reals += traffic.reals;
        step.advance();
        t += 1;
        let norm = states.iter().flat_map(|s| s.x.iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
        if !(norm <= DIVERGENCE_LIMIT) {
            return Err(AlgorithmError::Diverged { t, norm, limit: DIVERGENCE_LIMIT });
        }
    }
}
