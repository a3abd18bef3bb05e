//! Block partitioning, block-selection schedules, per-block mixing weights and
//! the block-wise push-sum protocol.
//!
//! At iteration `t` every agent `j` selects one block `l_j^t` and sends only
//! that block to its out-neighbors. For block `l`, column `j` of the mixing
//! matrix is column `j` of the base matrix when `j` sent `l`, and the `j`-th
//! canonical basis vector otherwise. Each column therefore stays stochastic.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::topology::{reaches_all, Digraph, WeightMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum ConsensusError {
    #[error("push-sum weight of agent {agent} is {value}, must be positive")]
    NonPositiveWeight { agent: usize, value: f64 },
    #[error("block layout needs at least one block of dimension at least one (got {blocks} x {dim})")]
    EmptyLayout { blocks: usize, dim: usize },
    #[error("dimension {total} is not divisible into {blocks} equal blocks")]
    UnevenBlocks { total: usize, blocks: usize },
    #[error("decay fit gave rho = {rho}, expected rho < 1")]
    NoGeometricDecay { rho: f64 },
}

/// Partition of a `blocks * dim` vector into equal contiguous blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    blocks: usize,
    dim: usize,
}

impl BlockLayout {
    pub fn new(blocks: usize, dim: usize) -> Result<Self, ConsensusError> {
        if blocks == 0 || dim == 0 {
            return Err(ConsensusError::EmptyLayout { blocks, dim });
        }
        Ok(Self { blocks, dim })
    }

    /// Splits `total` coordinates into `blocks` equal blocks.
    pub fn split(total: usize, blocks: usize) -> Result<Self, ConsensusError> {
        if blocks == 0 || total == 0 {
            return Err(ConsensusError::EmptyLayout { blocks, dim: 0 });
        }
        if total % blocks != 0 {
            return Err(ConsensusError::UnevenBlocks { total, blocks });
        }
        Self::new(blocks, total / blocks)
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total(&self) -> usize {
        self.blocks * self.dim
    }

    /// Coordinate range covered by `block`.
    pub fn range(&self, block: usize) -> Range<usize> {
        debug_assert!(block < self.blocks);
        block * self.dim..(block + 1) * self.dim
    }
}

/// Block-selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleRule {
    /// Every agent selects block `t mod B`.
    RoundRobin,
    /// Agent `i` selects block `(i + t) mod B`.
    ShiftedRoundRobin,
    /// Each agent walks a fresh seeded permutation of the blocks every `B` iterations.
    RandomPermutation { seed: u64 },
}

/// Essentially cyclic block schedule. Stateless: the selection of agent `i`
/// at iteration `t` is a pure function of `(rule, B, i, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSchedule {
    rule: ScheduleRule,
    blocks: usize,
}

impl BlockSchedule {
    pub fn new(rule: ScheduleRule, blocks: usize) -> Self {
        assert!(blocks >= 1, "schedule needs at least one block");
        Self { rule, blocks }
    }

    pub fn rule(&self) -> ScheduleRule {
        self.rule
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Block selected by `agent` at iteration `t` (0-based).
    pub fn next_block(&self, agent: usize, t: usize) -> usize {
        let b = self.blocks;
        match self.rule {
            ScheduleRule::RoundRobin => t % b,
            ScheduleRule::ShiftedRoundRobin => (agent + t) % b,
            ScheduleRule::RandomPermutation { seed } => {
                let cycle = (t / b) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (agent as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
                rng.set_stream(cycle);
                let mut perm: Vec<usize> = (0..b).collect();
                perm.shuffle(&mut rng);
                perm[t % b]
            }
        }
    }

    /// Selections of all `agents` at iteration `t`.
    pub fn selections(&self, agents: usize, t: usize) -> Vec<usize> {
        (0..agents).map(|i| self.next_block(i, t)).collect()
    }

    /// Window length `T_i` within which every agent is guaranteed to select
    /// every block.
    pub fn cycle_bound(&self) -> usize {
        match self.rule {
            ScheduleRule::RoundRobin | ScheduleRule::ShiftedRoundRobin => self.blocks,
            // A window of 2B - 1 iterations always contains a whole permutation cycle.
            ScheduleRule::RandomPermutation { .. } => 2 * self.blocks - 1,
        }
    }

    /// Number of window starts to enumerate when checking window properties.
    /// Deterministic rules repeat with period `B`; the random rule is sampled
    /// over a bounded number of cycles.
    pub fn check_horizon(&self) -> usize {
        match self.rule {
            ScheduleRule::RoundRobin | ScheduleRule::ShiftedRoundRobin => self.blocks,
            ScheduleRule::RandomPermutation { .. } => 16 * self.blocks,
        }
    }
}

/// Mixing matrix of one block at one iteration, stored row-wise as
/// `(sender, weight)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeightMatrix {
    rows: Vec<Vec<(usize, f64)>>,
}

impl BlockWeightMatrix {
    pub fn size(&self) -> usize {
        self.rows.len()
    }

    /// Nonzero weights that agent `i` applies, as `(j, a_ij)`.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.rows.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, a) in row {
                m[(i, j)] = a;
            }
        }
        m
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.rows.len()];
        for row in &self.rows {
            for &(j, a) in row {
                sums[j] += a;
            }
        }
        sums
    }
}

/// Weight agent `i` gives to agent `j` on `block`, given every agent's
/// current selection.
pub fn block_weight(base: &WeightMatrix, selections: &[usize], block: usize, i: usize, j: usize) -> f64 {
    if selections[j] == block {
        base.get(i, j)
    } else if i == j {
        1.0
    } else {
        0.0
    }
}

/// Builds the mixing matrix of `block` for the given selections.
pub fn build_block_weights(g: &Digraph, base: &WeightMatrix, selections: &[usize], block: usize) -> BlockWeightMatrix {
    let n = g.node_count();
    debug_assert_eq!(selections.len(), n);
    let rows = (0..n)
        .map(|i| {
            let mut row: Vec<(usize, f64)> = g
                .in_neighbors(i)
                .iter()
                .copied()
                .chain(std::iter::once(i))
                .map(|j| (j, block_weight(base, selections, block, i, j)))
                .filter(|&(_, a)| a > 0.0)
                .collect();
            row.sort_unstable_by_key(|&(j, _)| j);
            row
        })
        .collect();
    BlockWeightMatrix { rows }
}

/// One push-sum step on a single block. `values[i]` is agent `i`'s block
/// vector. Returns the mixed weights and values.
pub fn consensus_step(
    weights: &[f64],
    values: &[Vec<f64>],
    a: &BlockWeightMatrix,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), ConsensusError> {
    check_positive(weights)?;
    let dim = values.first().map_or(0, Vec::len);
    let mut next_weights = Vec::with_capacity(weights.len());
    let mut next_values = Vec::with_capacity(values.len());
    for i in 0..a.size() {
        let mut phi = 0.0;
        let mut mass = vec![0.0; dim];
        for &(j, aij) in a.row(i) {
            let w = aij * weights[j];
            phi += w;
            for (m, v) in mass.iter_mut().zip(&values[j]) {
                *m += w * v;
            }
        }
        if !(phi > 0.0) {
            return Err(ConsensusError::NonPositiveWeight { agent: i, value: phi });
        }
        mass.iter_mut().for_each(|m| *m /= phi);
        next_weights.push(phi);
        next_values.push(mass);
    }
    Ok((next_weights, next_values))
}

pub(crate) fn check_positive(weights: &[f64]) -> Result<(), ConsensusError> {
    match weights.iter().position(|&w| !(w > 0.0)) {
        Some(agent) => Err(ConsensusError::NonPositiveWeight { agent, value: weights[agent] }),
        None => Ok(()),
    }
}

/// Checks that for every window start in the schedule's check horizon, the
/// union of the block-`block` communication graphs over `window` consecutive
/// iterations is strongly connected.
pub fn check_t_connectivity(schedule: &BlockSchedule, g: &Digraph, block: usize, window: usize) -> bool {
    if window == 0 {
        return false;
    }
    let n = g.node_count();
    (0..schedule.check_horizon()).all(|start| {
        let mut outs = vec![Vec::new(); n];
        for t in start..start + window {
            for (j, i) in g.edges() {
                if schedule.next_block(j, t) == block {
                    outs[j].push(i);
                }
            }
        }
        let mut ins = vec![Vec::new(); n];
        for (j, list) in outs.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            for &i in list.iter() {
                ins[i].push(j);
            }
        }
        reaches_all(n, |v| &outs[v]) && reaches_all(n, |v| &ins[v])
    })
}

/// Fitted geometric decay of the spread of block mixing-matrix products.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayEstimate {
    pub c: f64,
    pub rho: f64,
    /// `spreads[k]` is the spread of the product of the first `k + 1` matrices.
    pub spreads: Vec<f64>,
}

/// Spreads at or below this level are treated as exact consensus and excluded
/// from the log-linear fit.
const SPREAD_FLOOR: f64 = 1e-13;

/// Largest entrywise deviation of any column from the mean column.
pub fn column_spread(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols() as f64;
    let mean = m.column_sum() / n;
    m.column_iter()
        .map(|c| (c - &mean).amax())
        .fold(0.0, f64::max)
}

/// Multiplies the block mixing matrices `A^{t-1} ... A^0` for
/// `t = 1..=horizon`, records each product's column spread and fits
/// `spread(t) <= c * rho^t` by least squares on the log-spread. `c` is then
/// raised so the bound holds at every recorded point.
///
/// When fewer than two spreads sit above numerical zero the products reach
/// consensus immediately and the estimate is `rho = 0`.
pub fn measure_geometric_decay(
    schedule: &BlockSchedule,
    g: &Digraph,
    base: &WeightMatrix,
    block: usize,
    horizon: usize,
) -> Result<DecayEstimate, ConsensusError> {
    let n = g.node_count();
    let mut product = DMatrix::<f64>::identity(n, n);
    let mut spreads = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let a = build_block_weights(g, base, &schedule.selections(n, t), block).to_dense();
        product = a * product;
        spreads.push(column_spread(&product));
    }
    fit_decay(spreads)
}

/// Least-squares fit of `log spread = log c + t log rho` over points above
/// the numerical floor. `spreads[k]` belongs to `t = k + 1`.
pub fn fit_decay(spreads: Vec<f64>) -> Result<DecayEstimate, ConsensusError> {
    let points: Vec<(f64, f64)> = spreads
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > SPREAD_FLOOR)
        .map(|(k, &s)| ((k + 1) as f64, s.ln()))
        .collect();
    if points.len() < 2 {
        let c = spreads.iter().copied().fold(0.0, f64::max);
        return Ok(DecayEstimate { c, rho: 0.0, spreads });
    }
    let count = points.len() as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / count;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / count;
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let rho = (sxy / sxx).exp();
    if !(rho < 1.0) {
        return Err(ConsensusError::NoGeometricDecay { rho });
    }
    let c = spreads
        .iter()
        .enumerate()
        .map(|(k, &s)| s / rho.powi(k as i32 + 1))
        .fold(0.0, f64::max);
    Ok(DecayEstimate { c, rho, spreads })
}
