//! Merit functions, the weighted network average and the per-iteration trace.

use std::fmt::Write as _;

use crate::block_consensus::BlockLayout;
use crate::prox::soft_threshold;
use crate::regression::{dg0_minus, eta, RegressionInstance};

/// Exact CSV header of a trace file.
pub const TRACE_HEADER: &str = "t,t_norm,J,D,gamma,msgs,reals_tx";

/// One trace row. `msgs` and `reals_tx` are cumulative counts of block
/// messages and transmitted reals before iteration `t` runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t: usize,
    pub t_norm: f64,
    pub stationarity: f64,
    pub disagreement: f64,
    pub gamma: f64,
    pub msgs: u64,
    pub reals_tx: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        debug_assert!(self.rows.last().is_none_or(|last| last.t < row.t && last.msgs <= row.msgs));
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// Serializes with [`TRACE_HEADER`]; reals use 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
                r.t, r.t_norm, r.stationarity, r.disagreement, r.gamma, r.msgs, r.reals_tx
            );
        }
        out
    }
}

/// First iteration whose stationarity merit is below `tol`.
pub fn completion_time(log: &MetricsLog, tol: f64) -> Option<usize> {
    log.rows.iter().find(|r| r.stationarity < tol).map(|r| r.t)
}

/// Row at the completion time, if reached.
pub fn completion_row(log: &MetricsLog, tol: f64) -> Option<&MetricsRow> {
    log.rows.iter().find(|r| r.stationarity < tol)
}

/// `(1/N) sum_i Phi_i x_i`, where `Phi_i` repeats each block weight of agent
/// `i` over the block's coordinates.
pub fn z_bar<'a>(layout: &BlockLayout, states: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Vec<f64> {
    let mut z = vec![0.0; layout.total()];
    let mut n = 0usize;
    for (x, phi) in states {
        n += 1;
        for (block, &w) in phi.iter().enumerate() {
            for k in layout.range(block) {
                z[k] += w * x[k];
            }
        }
    }
    z.iter_mut().for_each(|v| *v /= n as f64);
    z
}

/// `max_i ||x_i - z||_2`
pub fn disagreement<'a>(z: &[f64], xs: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    xs.into_iter()
        .map(|x| x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Distance from stationarity of `z` for the sparse regression problem:
/// `|| z - P_K(S_{lambda eta}(z - grad F(z) + lambda grad G^-(z))) ||_inf`
/// with `F = sum_i f_i` and `G^-` the concave part of the log regularizer.
/// Zero exactly at stationary points.
pub fn merit_j(z: &[f64], instance: &RegressionInstance) -> f64 {
    let grad = instance.total_gradient(z);
    let lambda = instance.lambda();
    let theta = instance.theta();
    let threshold = lambda * eta(theta);
    let set = instance.feasible_set();
    z.iter()
        .zip(&grad)
        .map(|(&zk, &gk)| {
            let point = zk - gk + lambda * dg0_minus(zk, theta);
            (zk - set.project(soft_threshold(point, threshold))).abs()
        })
        .fold(0.0, f64::max)
}
