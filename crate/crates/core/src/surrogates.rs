//! Strongly convex block surrogates and the composite block subproblem.
//!
//! A surrogate approximates an agent's smooth cost in one block around an
//! anchor point `x`. It is strongly convex in the block variable and its
//! gradient at the anchor block equals the block gradient of the cost.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::prox::{BlockRegularizer, BoxSet};

/// Default coefficient of the proximal term for the generic surrogates.
pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum SurrogateError {
    #[error("block Hessian is not positive semidefinite (smallest eigenvalue {min_eigenvalue})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },
    #[error("objective provides no block Hessian")]
    MissingHessian,
    #[error("subproblem solver stopped after {iterations} iterations with residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
}

/// Smooth function of the full decision vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes the full gradient into `out`.
    fn gradient(&self, x: &[f64], out: &mut [f64]);

    /// Hessian restricted to the coordinates in `range`, when available.
    fn block_hessian(&self, _x: &[f64], _range: Range<usize>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Strongly convex model of a smooth cost in one block.
pub trait Surrogate: Sync {
    fn block(&self) -> usize;

    /// Anchor point restricted to the block.
    fn anchor_block(&self) -> &[f64];

    /// Coefficient `c` of the proximal term `c * ||w - x_l||^2`. The surrogate
    /// is strongly convex with modulus at least `2c`.
    fn prox_weight(&self) -> f64;

    /// Value at `w`, writing the gradient into `grad`.
    fn value_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, w: &[f64]) -> f64 {
        let mut grad = vec![0.0; w.len()];
        self.value_and_gradient(w, &mut grad)
    }

    fn gradient(&self, w: &[f64], grad: &mut [f64]) {
        self.value_and_gradient(w, grad);
    }

    /// Upper estimate of the gradient's Lipschitz constant, used to seed the
    /// iterative solver's step size.
    fn curvature_hint(&self) -> Option<f64> {
        None
    }

    /// Exact minimizer of `surrogate + linear^T (w - x_l) + g(w)` over the
    /// box, for surrogates that admit one.
    fn closed_form(&self, _linear: &[f64], _regularizer: &BlockRegularizer, _set: &BoxSet) -> Option<Vec<f64>> {
        None
    }
}

enum Model<'a> {
    ProxLinear { grad: Vec<f64> },
    SecondOrder { value: f64, grad: Vec<f64>, hessian: DMatrix<f64>, hessian_bound: f64 },
    PartialConvexity { f: &'a dyn Objective },
    DcSplit { convex: &'a dyn Objective, concave_grad: Vec<f64> },
}

/// The generic surrogate families: proximal linearization, second-order
/// expansion, partial convexity and difference-of-convex splitting.
pub struct GenericSurrogate<'a> {
    block: usize,
    range: Range<usize>,
    anchor: &'a [f64],
    tau: f64,
    model: Model<'a>,
}

fn block_gradient(f: &dyn Objective, x: &[f64], range: &Range<usize>) -> Vec<f64> {
    let mut full = vec![0.0; x.len()];
    f.gradient(x, &mut full);
    full[range.clone()].to_vec()
}

/// `grad_l f(x)^T (w - x_l) + tau ||w - x_l||^2`
pub fn make_prox_linear<'a>(f: &dyn Objective, x: &'a [f64], block: usize, range: Range<usize>, tau: f64) -> GenericSurrogate<'a> {
    assert!(tau > 0.0, "tau must be positive");
    let grad = block_gradient(f, x, &range);
    GenericSurrogate { block, range, anchor: x, tau, model: Model::ProxLinear { grad } }
}

/// `f(x) + grad_l f(x)^T (w - x_l) + (w - x_l)^T H_ll (w - x_l) / 2 + tau ||w - x_l||^2`
pub fn make_second_order<'a>(
    f: &dyn Objective,
    x: &'a [f64],
    block: usize,
    range: Range<usize>,
    tau: f64,
) -> Result<GenericSurrogate<'a>, SurrogateError> {
    assert!(tau > 0.0, "tau must be positive");
    let hessian = f.block_hessian(x, range.clone()).ok_or(SurrogateError::MissingHessian)?;
    let eigen = SymmetricEigen::new(hessian.clone());
    let min_eigenvalue = eigen.eigenvalues.min();
    let max_eigenvalue = eigen.eigenvalues.max();
    if min_eigenvalue < -1e-10 * max_eigenvalue.abs().max(1.0) {
        return Err(SurrogateError::NotPositiveSemidefinite { min_eigenvalue });
    }
    let grad = block_gradient(f, x, &range);
    Ok(GenericSurrogate {
        block,
        range,
        anchor: x,
        tau,
        model: Model::SecondOrder { value: f.value(x), grad, hessian, hessian_bound: max_eigenvalue.max(0.0) },
    })
}

/// `f(w, x_{-l}) + tau ||w - x_l||^2`
pub fn make_partial_convexity<'a>(f: &'a dyn Objective, x: &'a [f64], block: usize, range: Range<usize>, tau: f64) -> GenericSurrogate<'a> {
    assert!(tau > 0.0, "tau must be positive");
    GenericSurrogate { block, range, anchor: x, tau, model: Model::PartialConvexity { f } }
}

/// For `f = f_a - f_b` with both parts convex:
/// `f_a(w, x_{-l}) - grad_l f_b(x)^T (w - x_l) + tau ||w - x_l||^2`
pub fn make_dc_split<'a>(
    convex: &'a dyn Objective,
    concave: &dyn Objective,
    x: &'a [f64],
    block: usize,
    range: Range<usize>,
    tau: f64,
) -> GenericSurrogate<'a> {
    assert!(tau > 0.0, "tau must be positive");
    let concave_grad = block_gradient(concave, x, &range);
    GenericSurrogate { block, range, anchor: x, tau, model: Model::DcSplit { convex, concave_grad } }
}

impl GenericSurrogate<'_> {
    fn embed(&self, w: &[f64]) -> Vec<f64> {
        let mut full = self.anchor.to_vec();
        full[self.range.clone()].copy_from_slice(w);
        full
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Surrogate for GenericSurrogate<'_> {
    fn block(&self) -> usize {
        self.block
    }

    fn anchor_block(&self) -> &[f64] {
        &self.anchor[self.range.clone()]
    }

    fn prox_weight(&self) -> f64 {
        self.tau
    }

    fn value_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let anchor = self.anchor_block();
        let delta: Vec<f64> = w.iter().zip(anchor).map(|(a, b)| a - b).collect();
        let prox = self.tau * dot(&delta, &delta);
        let value = match &self.model {
            Model::ProxLinear { grad: g } => {
                grad.copy_from_slice(g);
                dot(g, &delta)
            }
            Model::SecondOrder { value, grad: g, hessian, .. } => {
                let hd = hessian * DVector::from_column_slice(&delta);
                for ((out, gk), hk) in grad.iter_mut().zip(g).zip(hd.iter()) {
                    *out = gk + hk;
                }
                value + dot(g, &delta) + 0.5 * dot(&delta, hd.as_slice())
            }
            Model::PartialConvexity { f } => {
                let full = self.embed(w);
                let mut full_grad = vec![0.0; full.len()];
                f.gradient(&full, &mut full_grad);
                grad.copy_from_slice(&full_grad[self.range.clone()]);
                f.value(&full)
            }
            Model::DcSplit { convex, concave_grad } => {
                let full = self.embed(w);
                let mut full_grad = vec![0.0; full.len()];
                convex.gradient(&full, &mut full_grad);
                for ((out, a), b) in grad.iter_mut().zip(&full_grad[self.range.clone()]).zip(concave_grad) {
                    *out = a - b;
                }
                convex.value(&full) - dot(concave_grad, &delta)
            }
        };
        for (g, d) in grad.iter_mut().zip(&delta) {
            *g += 2.0 * self.tau * d;
        }
        value + prox
    }

    fn curvature_hint(&self) -> Option<f64> {
        match &self.model {
            Model::ProxLinear { .. } => Some(2.0 * self.tau),
            Model::SecondOrder { hessian_bound, .. } => Some(hessian_bound + 2.0 * self.tau),
            _ => None,
        }
    }

    fn closed_form(&self, linear: &[f64], regularizer: &BlockRegularizer, set: &BoxSet) -> Option<Vec<f64>> {
        match &self.model {
            Model::ProxLinear { grad } => {
                let step = 1.0 / (2.0 * self.tau);
                Some(
                    self.anchor_block()
                        .iter()
                        .zip(grad)
                        .zip(linear)
                        .map(|((x, g), p)| regularizer.prox(x - step * (g + p), step, set))
                        .collect(),
                )
            }
            _ => None,
        }
    }
}

/// Block subproblem `min_{w in K_l} surrogate(w) + linear^T (w - x_l) + g_l(w)`.
pub struct CompositeBlockProblem<'a> {
    pub surrogate: &'a dyn Surrogate,
    pub linear: &'a [f64],
    pub regularizer: BlockRegularizer,
    pub set: BoxSet,
}

impl CompositeBlockProblem<'_> {
    /// Full objective value at `w` (infinite outside the box).
    pub fn objective(&self, w: &[f64]) -> f64 {
        if !self.set.contains_all(w) {
            return f64::INFINITY;
        }
        let anchor = self.surrogate.anchor_block();
        let shift: f64 = w.iter().zip(anchor).zip(self.linear).map(|((a, b), p)| (a - b) * p).sum();
        self.surrogate.value(w) + shift + self.regularizer.value(w)
    }

    fn smooth(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let value = self.surrogate.value_and_gradient(w, grad);
        let anchor = self.surrogate.anchor_block();
        let mut shift = 0.0;
        for (((g, p), a), b) in grad.iter_mut().zip(self.linear).zip(w).zip(anchor) {
            *g += p;
            shift += p * (a - b);
        }
        value + shift
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stop when the proximal-gradient fixed-point residual (sup norm of the
    /// gradient mapping) drops to this level.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iterations: 50_000 }
    }
}

/// Solves the block subproblem, using the surrogate's closed form when it has one.
pub fn solve_block_subproblem(p: &CompositeBlockProblem, opts: &SolverOptions) -> Result<Vec<f64>, SurrogateError> {
    match p.surrogate.closed_form(p.linear, &p.regularizer, &p.set) {
        Some(w) => Ok(w),
        None => solve_iterative(p, opts),
    }
}

/// Accelerated proximal gradient with backtracking on the strongly convex
/// composite subproblem, warm-started at the projected anchor.
pub fn solve_iterative(p: &CompositeBlockProblem, opts: &SolverOptions) -> Result<Vec<f64>, SurrogateError> {
    let dim = p.linear.len();
    let mu = 2.0 * p.surrogate.prox_weight();
    let mut lipschitz = p.surrogate.curvature_hint().unwrap_or(mu).max(mu);

    let mut w: Vec<f64> = p.surrogate.anchor_block().iter().map(|&x| p.set.project(x)).collect();
    let mut y = w.clone();
    let mut grad_y = vec![0.0; dim];
    let mut grad_c = vec![0.0; dim];
    let mut candidate = vec![0.0; dim];
    let mut residual = f64::INFINITY;

    for _ in 0..opts.max_iterations {
        let h_y = p.smooth(&y, &mut grad_y);
        loop {
            let step = 1.0 / lipschitz;
            for k in 0..dim {
                candidate[k] = p.regularizer.prox(y[k] - step * grad_y[k], step, &p.set);
            }
            let mut linear_term = 0.0;
            let mut sq = 0.0;
            for k in 0..dim {
                let d = candidate[k] - y[k];
                linear_term += grad_y[k] * d;
                sq += d * d;
            }
            let h_c = p.smooth(&candidate, &mut grad_c);
            let slack = 1e-13 * (1.0 + h_y.abs());
            if h_c <= h_y + linear_term + 0.5 * lipschitz * sq + slack || lipschitz > 1e20 {
                break;
            }
            lipschitz *= 2.0;
        }
        residual = candidate
            .iter()
            .zip(&y)
            .map(|(c, yk)| (c - yk).abs())
            .fold(0.0, f64::max)
            * lipschitz;
        if residual <= opts.tol {
            return Ok(candidate);
        }
        let (sl, sm) = (lipschitz.sqrt(), mu.sqrt());
        let momentum = (sl - sm) / (sl + sm);
        for k in 0..dim {
            let next = candidate[k];
            y[k] = p.set.project(next + momentum * (next - w[k]));
            w[k] = next;
        }
    }
    Err(SurrogateError::NotConverged { iterations: opts.max_iterations, residual })
}

/// Largest deviation between the surrogate gradient at its anchor and central
/// finite differences (step `1e-5`) of `f` in the surrogate's block, relative
/// to `max(1, ||finite-difference gradient||_inf)`.
pub fn verify_gradient_consistency(s: &dyn Surrogate, f: &dyn Objective, x: &[f64], range: Range<usize>) -> f64 {
    const STEP: f64 = 1e-5;
    let anchor = s.anchor_block();
    let mut grad = vec![0.0; anchor.len()];
    s.gradient(anchor, &mut grad);

    let mut probe = x.to_vec();
    let fd: Vec<f64> = range
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + STEP;
            let up = f.value(&probe);
            probe[k] = orig - STEP;
            let down = f.value(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect();
    let scale = fd.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    grad.iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}
