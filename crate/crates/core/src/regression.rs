//! Distributed sparse linear regression with a nonconvex log regularizer:
//!
//! `min_{x in K} sum_i ||D_i x - b_i||^2 + lambda sum_j g0(x_j)`,
//! `g0(x) = ln(1 + theta |x|) / ln(1 + theta)`.
//!
//! `g0` is split as `g0 = g0_plus - g0_minus` with `g0_plus = eta |x|`. The
//! weighted l1 term `lambda eta ||x||_1` is the nonsmooth part of every block
//! subproblem, and `-lambda g0_minus` is linearized inside the surrogates.

use std::fmt::Write as _;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::algorithm::DistributedProblem;
use crate::block_consensus::{BlockLayout, ConsensusError};
use crate::metrics::merit_j;
use crate::prox::{BlockRegularizer, BoxSet};
use crate::seeding::{substream, Stream};
use crate::surrogates::{Objective, Surrogate, SurrogateError};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_THETA: f64 = 20.0;
pub const DEFAULT_TAU_PL: f64 = 3.5;
pub const DEFAULT_TAU_L: f64 = 4.5;

#[derive(Debug, Error)]
pub enum RegressionError {
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error(transparent)]
    Layout(#[from] ConsensusError),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("reference solver stopped after {iterations} iterations with merit {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
}

fn invalid(name: &'static str, reason: impl Into<String>) -> RegressionError {
    RegressionError::InvalidParameter { name, reason: reason.into() }
}

/// `theta / ln(1 + theta)`
pub fn eta(theta: f64) -> f64 {
    theta / theta.ln_1p()
}

pub fn g0(x: f64, theta: f64) -> f64 {
    (theta * x.abs()).ln_1p() / theta.ln_1p()
}

pub fn g0_plus(x: f64, theta: f64) -> f64 {
    eta(theta) * x.abs()
}

pub fn g0_minus(x: f64, theta: f64) -> f64 {
    g0_plus(x, theta) - g0(x, theta)
}

/// Derivative of [`g0_minus`]: `sign(x) theta^2 |x| / (ln(1 + theta) (1 + theta |x|))`.
pub fn dg0_minus(x: f64, theta: f64) -> f64 {
    let a = x.abs();
    x.signum() * theta * theta * a / (theta.ln_1p() * (1.0 + theta * a))
}

/// Lipschitz constant of [`dg0_minus`].
pub fn dg0_minus_lipschitz(theta: f64) -> f64 {
    theta * theta / theta.ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceParams {
    pub agents: usize,
    pub dim: usize,
    pub samples: usize,
    /// Fraction of zero entries in the ground truth.
    pub sparsity: f64,
    pub noise_variance: f64,
    pub lambda: f64,
    pub theta: f64,
    pub set: BoxSet,
    pub blocks: usize,
}

impl Default for InstanceParams {
    fn default() -> Self {
        Self {
            agents: 10,
            dim: 200,
            samples: 40,
            sparsity: 0.8,
            noise_variance: 0.1,
            lambda: DEFAULT_LAMBDA,
            theta: DEFAULT_THETA,
            set: BoxSet::new(-10.0, 10.0),
            blocks: 4,
        }
    }
}

/// Number of nonzeros kept in a ground truth of length `dim`.
pub fn nonzero_count(dim: usize, sparsity: f64) -> usize {
    // The small offset keeps exact products such as 0.2 * 200 from rounding up.
    (((1.0 - sparsity) * dim as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionInstance {
    data: Vec<DMatrix<f64>>,
    targets: Vec<DVector<f64>>,
    truth: Vec<f64>,
    lambda: f64,
    theta: f64,
    set: BoxSet,
    layout: BlockLayout,
    lambda_on_correction: bool,
    /// Squared spectral norm of each agent's column block, `[agent][block]`.
    block_norms: Vec<Vec<f64>>,
}

fn squared_spectral_norm(m: &DMatrix<f64>) -> f64 {
    let gram = if m.nrows() <= m.ncols() { m * m.transpose() } else { m.transpose() * m };
    SymmetricEigen::new(gram).eigenvalues.max().max(0.0)
}

fn block_norms(data: &[DMatrix<f64>], layout: &BlockLayout) -> Vec<Vec<f64>> {
    data.iter()
        .map(|d| {
            (0..layout.blocks())
                .map(|l| {
                    let r = layout.range(l);
                    squared_spectral_norm(&d.columns(r.start, r.len()).clone_owned())
                })
                .collect()
        })
        .collect()
}

impl RegressionInstance {
    /// Builds an instance from explicit data. Rows are used as given.
    pub fn new(
        data: Vec<DMatrix<f64>>,
        targets: Vec<DVector<f64>>,
        truth: Vec<f64>,
        lambda: f64,
        theta: f64,
        set: BoxSet,
        blocks: usize,
    ) -> Result<Self, RegressionError> {
        if data.is_empty() {
            return Err(invalid("agents", "need at least one agent"));
        }
        let m = truth.len();
        if data.len() != targets.len() {
            return Err(invalid("targets", format!("{} data matrices but {} target vectors", data.len(), targets.len())));
        }
        for (i, (d, b)) in data.iter().zip(&targets).enumerate() {
            if d.ncols() != m || d.nrows() != b.len() || d.nrows() == 0 {
                return Err(invalid(
                    "data",
                    format!("agent {i}: matrix is {}x{}, targets {}, dimension {m}", d.nrows(), d.ncols(), b.len()),
                ));
            }
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid("lambda", format!("must be finite and nonnegative, got {lambda}")));
        }
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(invalid("theta", format!("must be finite and positive, got {theta}")));
        }
        let layout = BlockLayout::split(m, blocks)?;
        let block_norms = block_norms(&data, &layout);
        Ok(Self { data, targets, truth, lambda, theta, set, layout, lambda_on_correction: true, block_norms })
    }

    /// Same data with a different block partition.
    pub fn with_blocks(&self, blocks: usize) -> Result<Self, RegressionError> {
        let layout = BlockLayout::split(self.dim(), blocks)?;
        Ok(Self { layout, block_norms: block_norms(&self.data, &layout), ..self.clone() })
    }

    /// When disabled, the linearized concave correction inside the surrogates
    /// is not scaled by `lambda`.
    pub fn with_lambda_on_correction(mut self, enabled: bool) -> Self {
        self.lambda_on_correction = enabled;
        self
    }

    pub fn agents(&self) -> usize {
        self.data.len()
    }

    pub fn dim(&self) -> usize {
        self.truth.len()
    }

    pub fn samples(&self, agent: usize) -> usize {
        self.data[agent].nrows()
    }

    pub fn data(&self, agent: usize) -> &DMatrix<f64> {
        &self.data[agent]
    }

    pub fn targets(&self, agent: usize) -> &DVector<f64> {
        &self.targets[agent]
    }

    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn feasible_set(&self) -> BoxSet {
        self.set
    }

    pub fn layout(&self) -> BlockLayout {
        self.layout
    }

    pub fn lambda_on_correction(&self) -> bool {
        self.lambda_on_correction
    }

    /// Weight of the linearized concave correction.
    pub fn correction_weight(&self) -> f64 {
        if self.lambda_on_correction {
            self.lambda
        } else {
            1.0
        }
    }

    /// The nonsmooth part `lambda eta ||.||_1` of every block.
    pub fn block_regularizer(&self) -> BlockRegularizer {
        BlockRegularizer::L1 { weight: self.lambda * eta(self.theta) }
    }

    pub fn residual(&self, agent: usize, x: &[f64]) -> DVector<f64> {
        &self.data[agent] * DVector::from_column_slice(x) - &self.targets[agent]
    }

    /// `||D_i x - b_i||^2`
    pub fn local_value(&self, agent: usize, x: &[f64]) -> f64 {
        self.residual(agent, x).norm_squared()
    }

    /// `2 D_i^T (D_i x - b_i)`
    pub fn local_gradient(&self, agent: usize, x: &[f64], out: &mut [f64]) {
        let r = self.residual(agent, x);
        let g = self.data[agent].tr_mul(&r);
        for (o, v) in out.iter_mut().zip(g.iter()) {
            *o = 2.0 * v;
        }
    }

    /// Gradient of `sum_i f_i`.
    pub fn total_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut total = vec![0.0; x.len()];
        let mut g = vec![0.0; x.len()];
        for i in 0..self.agents() {
            self.local_gradient(i, x, &mut g);
            total.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
        }
        total
    }

    /// `sum_i f_i(x) + lambda sum_j g0(x_j)`
    pub fn objective(&self, x: &[f64]) -> f64 {
        let smooth: f64 = (0..self.agents()).map(|i| self.local_value(i, x)).sum();
        smooth + self.lambda * x.iter().map(|&v| g0(v, self.theta)).sum::<f64>()
    }

    /// Smooth function approximated by agent `agent`'s surrogates:
    /// `f_i - c sum_j g0_minus(x_j)` with `c` the correction weight.
    pub fn smooth_part(&self, agent: usize) -> SmoothPart<'_> {
        SmoothPart { instance: self, agent }
    }

    fn check_invariants(&self, sparsity: Option<f64>) -> Result<(), RegressionError> {
        for (i, d) in self.data.iter().enumerate() {
            for (r, row) in d.row_iter().enumerate() {
                let norm = row.norm();
                if (norm - 1.0).abs() > 1e-12 {
                    return Err(invalid("data", format!("agent {i} row {r} has norm {norm}")));
                }
            }
        }
        if let Some(s) = sparsity {
            let nnz = self.truth.iter().filter(|v| **v != 0.0).count();
            let expected = nonzero_count(self.dim(), s);
            if nnz != expected {
                return Err(invalid("truth", format!("{nnz} nonzeros, expected {expected}")));
            }
        }
        Ok(())
    }

    /// Checks unit row norms and, if given, the ground-truth sparsity.
    pub fn validate(&self, sparsity: Option<f64>) -> Result<(), RegressionError> {
        self.check_invariants(sparsity)
    }

    /// Text dump. The first line is
    /// `regression <agents> <dim> <samples> <blocks> <lambda> <theta> <lower> <upper>`,
    /// the second holds the ground truth, and every following line is one data
    /// row followed by its target value, agent by agent. Reals are written in
    /// shortest round-trip form, so loading reproduces the instance bit for bit.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let n_i = self.samples(0);
        let _ = writeln!(
            out,
            "regression {} {} {} {} {:e} {:e} {:e} {:e}",
            self.agents(),
            self.dim(),
            n_i,
            self.layout.blocks(),
            self.lambda,
            self.theta,
            self.set.lower,
            self.set.upper
        );
        let join = |vals: &mut dyn Iterator<Item = f64>| vals.map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "{}", join(&mut self.truth.iter().copied()));
        for (d, b) in self.data.iter().zip(&self.targets) {
            for r in 0..d.nrows() {
                let _ = writeln!(out, "{}", join(&mut d.row(r).iter().copied().chain(std::iter::once(b[r]))));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, RegressionError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse_err = |line: usize, reason: String| RegressionError::Parse { line: line + 1, reason };
        let reals = |line: usize, s: &str| -> Result<Vec<f64>, RegressionError> {
            s.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| parse_err(line, format!("bad real {t:?}: {e}"))))
                .collect()
        };

        let (hl, header) = lines.next().ok_or_else(|| parse_err(0, "empty input".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 9 || fields[0] != "regression" {
            return Err(parse_err(hl, "expected `regression N m n_i B lambda theta lower upper`".into()));
        }
        let int = |k: usize| fields[k].parse::<usize>().map_err(|e| parse_err(hl, format!("field {k}: {e}")));
        let real = |k: usize| fields[k].parse::<f64>().map_err(|e| parse_err(hl, format!("field {k}: {e}")));
        let (agents, m, n_i, blocks) = (int(1)?, int(2)?, int(3)?, int(4)?);
        let (lambda, theta, lower, upper) = (real(5)?, real(6)?, real(7)?, real(8)?);
        if !(lower <= upper) {
            return Err(parse_err(hl, format!("empty box [{lower}, {upper}]")));
        }

        let (tl, truth_line) = lines.next().ok_or_else(|| parse_err(hl + 1, "missing ground truth".into()))?;
        let truth = reals(tl, truth_line)?;
        if truth.len() != m {
            return Err(parse_err(tl, format!("ground truth has {} entries, expected {m}", truth.len())));
        }

        let mut data = Vec::with_capacity(agents);
        let mut targets = Vec::with_capacity(agents);
        for i in 0..agents {
            let mut d = DMatrix::zeros(n_i, m);
            let mut b = DVector::zeros(n_i);
            for r in 0..n_i {
                let (ln, line) = lines
                    .next()
                    .ok_or_else(|| parse_err(usize::MAX - 1, format!("missing row {r} of agent {i}")))?;
                let row = reals(ln, line)?;
                if row.len() != m + 1 {
                    return Err(parse_err(ln, format!("row has {} entries, expected {}", row.len(), m + 1)));
                }
                for k in 0..m {
                    d[(r, k)] = row[k];
                }
                b[r] = row[m];
            }
            data.push(d);
            targets.push(b);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(parse_err(ln, "trailing data".into()));
        }
        Self::new(data, targets, truth, lambda, theta, BoxSet::new(lower, upper), blocks)
    }
}

/// Draws a synthetic instance: standard normal ground truth with its smallest
/// entries (by magnitude) zeroed, standard normal data with unit-norm rows,
/// and Gaussian measurement noise.
pub fn generate_instance(params: &InstanceParams, seed: u64) -> Result<RegressionInstance, RegressionError> {
    let p = params;
    if p.agents == 0 {
        return Err(invalid("agents", "must be positive"));
    }
    if p.dim == 0 {
        return Err(invalid("dim", "must be positive"));
    }
    if p.samples == 0 {
        return Err(invalid("samples", "must be positive"));
    }
    if !(0.0..=1.0).contains(&p.sparsity) {
        return Err(invalid("sparsity", format!("must lie in [0, 1], got {}", p.sparsity)));
    }
    if !(p.noise_variance >= 0.0 && p.noise_variance.is_finite()) {
        return Err(invalid("noise_variance", format!("must be finite and nonnegative, got {}", p.noise_variance)));
    }

    let mut rng = substream(seed, Stream::Data);
    let mut truth: Vec<f64> = (0..p.dim).map(|_| rng.sample(StandardNormal)).collect();
    let zeros = p.dim - nonzero_count(p.dim, p.sparsity);
    let mut order: Vec<usize> = (0..p.dim).collect();
    order.sort_by(|&a, &b| truth[a].abs().total_cmp(&truth[b].abs()).then(a.cmp(&b)));
    for &k in &order[..zeros] {
        truth[k] = 0.0;
    }

    let data: Vec<DMatrix<f64>> = (0..p.agents)
        .map(|_| {
            let mut d = DMatrix::from_fn(p.samples, p.dim, |_, _| 0.0);
            for r in 0..p.samples {
                for k in 0..p.dim {
                    d[(r, k)] = rng.sample(StandardNormal);
                }
                let norm = d.row(r).norm();
                d.row_mut(r).unscale_mut(norm);
            }
            d
        })
        .collect();

    let mut noise = substream(seed, Stream::Noise);
    let sigma = p.noise_variance.sqrt();
    let x0 = DVector::from_column_slice(&truth);
    let targets = data
        .iter()
        .map(|d| {
            let mut b = d * &x0;
            for v in b.iter_mut() {
                let n: f64 = noise.sample(StandardNormal);
                *v += sigma * n;
            }
            b
        })
        .collect();

    let instance = RegressionInstance::new(data, targets, truth, p.lambda, p.theta, p.set, p.blocks)?;
    instance.check_invariants(Some(p.sparsity))?;
    Ok(instance)
}

/// See [`RegressionInstance::smooth_part`].
pub struct SmoothPart<'a> {
    instance: &'a RegressionInstance,
    agent: usize,
}

impl Objective for SmoothPart<'_> {
    fn dim(&self) -> usize {
        self.instance.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let c = self.instance.correction_weight();
        let theta = self.instance.theta;
        self.instance.local_value(self.agent, x) - c * x.iter().map(|&v| g0_minus(v, theta)).sum::<f64>()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.instance.local_gradient(self.agent, x, out);
        let c = self.instance.correction_weight();
        for (o, &v) in out.iter_mut().zip(x) {
            *o -= c * dg0_minus(v, self.instance.theta);
        }
    }
}

/// Surrogate choice for the regression problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateKind {
    /// Exact block least squares, `(tau/2)` proximal term, linearized concave part.
    PartialLinearization,
    /// Linearized least squares, `(tau/2)` proximal term, linearized concave part.
    Linearization,
    /// Linearization of the whole smooth part with a `tau` proximal term.
    ProxLinear,
}

impl SurrogateKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PartialLinearization => "PL",
            Self::Linearization => "L",
            Self::ProxLinear => "prox-linear",
        }
    }

    pub fn default_tau(&self) -> f64 {
        match self {
            Self::PartialLinearization => DEFAULT_TAU_PL,
            Self::Linearization => DEFAULT_TAU_L,
            Self::ProxLinear => crate::surrogates::DEFAULT_TAU,
        }
    }
}

impl FromStr for SurrogateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PL" | "pl" => Ok(Self::PartialLinearization),
            "L" | "l" => Ok(Self::Linearization),
            "prox-linear" => Ok(Self::ProxLinear),
            other => Err(format!("unknown surrogate {other:?} (expected PL, L or prox-linear)")),
        }
    }
}

/// Block surrogate of `f_i - c sum_j g0_minus(x_j)` around `x`.
pub struct RegressionSurrogate<'a> {
    kind: SurrogateKind,
    block: usize,
    range: Range<usize>,
    anchor: &'a [f64],
    data: &'a DMatrix<f64>,
    /// `D_i x - b_i`
    residual: DVector<f64>,
    /// `2 D_il^T (D_i x - b_i)`
    grad_ls: Vec<f64>,
    /// `c * dg0_minus(x_k)` over the block
    correction: Vec<f64>,
    prox_weight: f64,
    block_norm: f64,
}

impl<'a> RegressionSurrogate<'a> {
    pub fn new(
        instance: &'a RegressionInstance,
        kind: SurrogateKind,
        agent: usize,
        block: usize,
        x: &'a [f64],
        tau: f64,
    ) -> Self {
        assert!(tau > 0.0, "tau must be positive");
        let range = instance.layout.range(block);
        let data = &instance.data[agent];
        let residual = instance.residual(agent, x);
        let grad_ls = data.columns(range.start, range.len()).tr_mul(&residual).iter().map(|v| 2.0 * v).collect();
        let c = instance.correction_weight();
        let correction = x[range.clone()].iter().map(|&v| c * dg0_minus(v, instance.theta)).collect();
        let prox_weight = match kind {
            SurrogateKind::PartialLinearization | SurrogateKind::Linearization => tau / 2.0,
            SurrogateKind::ProxLinear => tau,
        };
        Self {
            kind,
            block,
            anchor: &x[range.clone()],
            range,
            data,
            residual,
            grad_ls,
            correction,
            prox_weight,
            block_norm: instance.block_norms[agent][block],
        }
    }
}

impl Surrogate for RegressionSurrogate<'_> {
    fn block(&self) -> usize {
        self.block
    }

    fn anchor_block(&self) -> &[f64] {
        self.anchor
    }

    fn prox_weight(&self) -> f64 {
        self.prox_weight
    }

    fn value_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let delta: Vec<f64> = w.iter().zip(self.anchor).map(|(a, b)| a - b).collect();
        let mut value = 0.0;
        match self.kind {
            SurrogateKind::PartialLinearization => {
                let cols = self.data.columns(self.range.start, self.range.len());
                let r = cols * DVector::from_column_slice(&delta) + &self.residual;
                let g = cols.tr_mul(&r);
                for (o, v) in grad.iter_mut().zip(g.iter()) {
                    *o = 2.0 * v;
                }
                value += r.norm_squared();
            }
            SurrogateKind::Linearization | SurrogateKind::ProxLinear => {
                grad.copy_from_slice(&self.grad_ls);
                value += self.grad_ls.iter().zip(&delta).map(|(g, d)| g * d).sum::<f64>();
            }
        }
        for ((o, d), c) in grad.iter_mut().zip(&delta).zip(&self.correction) {
            value += self.prox_weight * d * d - c * d;
            *o += 2.0 * self.prox_weight * d - c;
        }
        value
    }

    fn curvature_hint(&self) -> Option<f64> {
        Some(match self.kind {
            SurrogateKind::PartialLinearization => 2.0 * self.block_norm + 2.0 * self.prox_weight,
            _ => 2.0 * self.prox_weight,
        })
    }

    /// For the linearized kinds: `P_K(S_{g/(2c)}(x_l - (grad_ls - correction + linear) / (2c)))`
    /// with `c` the proximal coefficient and `g` the l1 weight.
    fn closed_form(&self, linear: &[f64], regularizer: &BlockRegularizer, set: &BoxSet) -> Option<Vec<f64>> {
        if self.kind == SurrogateKind::PartialLinearization {
            return None;
        }
        let step = 1.0 / (2.0 * self.prox_weight);
        Some(
            self.anchor
                .iter()
                .zip(&self.grad_ls)
                .zip(&self.correction)
                .zip(linear)
                .map(|(((x, g), c), p)| regularizer.prox(x - step * (g - c + p), step, set))
                .collect(),
        )
    }
}

/// The regression instance seen as a distributed problem with a fixed
/// surrogate choice.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    pub instance: RegressionInstance,
    pub kind: SurrogateKind,
    pub tau: f64,
}

impl RegressionProblem {
    pub fn new(instance: RegressionInstance, kind: SurrogateKind, tau: f64) -> Self {
        Self { instance, kind, tau }
    }
}

impl DistributedProblem for RegressionProblem {
    fn agents(&self) -> usize {
        self.instance.agents()
    }

    fn layout(&self) -> BlockLayout {
        self.instance.layout
    }

    fn feasible_set(&self) -> BoxSet {
        self.instance.set
    }

    fn regularizer(&self, _block: usize) -> BlockRegularizer {
        self.instance.block_regularizer()
    }

    fn local_gradient(&self, agent: usize, x: &[f64], out: &mut [f64]) {
        self.instance.local_gradient(agent, x, out);
    }

    fn surrogate<'a>(&'a self, agent: usize, block: usize, x: &'a [f64]) -> Result<Box<dyn Surrogate + 'a>, SurrogateError> {
        Ok(Box::new(RegressionSurrogate::new(&self.instance, self.kind, agent, block, x, self.tau)))
    }

    fn stationarity(&self, z: &[f64]) -> f64 {
        merit_j(z, &self.instance)
    }
}

/// Centralized proximal-gradient solve of the full problem (accelerated when
/// `lambda = 0`), stopped once the stationarity merit drops below `tol`. The
/// iterates start at the projected origin.
pub fn centralized_reference_solve(instance: &RegressionInstance, tol: f64) -> Result<Vec<f64>, RegressionError> {
    const MAX_ITERATIONS: usize = 1_000_000;
    let m = instance.dim();
    let mut hessian = DMatrix::zeros(m, m);
    let mut linear = DVector::zeros(m);
    for (d, b) in instance.data.iter().zip(&instance.targets) {
        hessian += d.tr_mul(d) * 2.0;
        linear += d.tr_mul(b) * 2.0;
    }
    let lipschitz_ls = SymmetricEigen::new(hessian.clone()).eigenvalues.max().max(0.0);
    let lipschitz = (lipschitz_ls + instance.lambda * dg0_minus_lipschitz(instance.theta)).max(1e-12);
    let step = 1.0 / lipschitz;
    let reg = instance.block_regularizer();
    let set = instance.set;
    let theta = instance.theta;
    let lambda = instance.lambda;
    let accelerate = lambda == 0.0;

    let gradient = |x: &DVector<f64>| -> DVector<f64> {
        let mut g = &hessian * x - &linear;
        if lambda != 0.0 {
            for (gk, xk) in g.iter_mut().zip(x.iter()) {
                *gk -= lambda * dg0_minus(*xk, theta);
            }
        }
        g
    };

    let mut x = DVector::from_element(m, set.project(0.0));
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut merit = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        merit = merit_j(x.as_slice(), instance);
        if merit < tol {
            return Ok(x.as_slice().to_vec());
        }
        let g = gradient(&y);
        let next = DVector::from_iterator(m, y.iter().zip(g.iter()).map(|(yk, gk)| reg.prox(yk - step * gk, step, &set)));
        if accelerate {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            // Restart the momentum whenever it points uphill.
            let uphill = (&y - &next).dot(&(&next - &x)) > 0.0;
            if uphill {
                t = 1.0;
                y = next.clone();
            } else {
                y = &next + (&next - &x) * beta;
                t = t_next;
            }
        } else {
            y = next.clone();
        }
        x = next;
    }
    Err(RegressionError::NotConverged { iterations: MAX_ITERATIONS, residual: merit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogates::{solve_iterative, verify_gradient_consistency, CompositeBlockProblem, SolverOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_params() -> InstanceParams {
        InstanceParams { agents: 3, dim: 12, samples: 5, blocks: 3, ..InstanceParams::default() }
    }

    #[test]
    fn eta_at_default_theta() {
        // 20 / ln(21), evaluated independently in extended precision.
        assert!((eta(20.0) - 6.569_174_775_061_021).abs() < 1e-12);
        assert!((eta(20.0) - 6.5692).abs() < 1e-4);
    }

    #[test]
    fn regularizer_vanishes_at_zero() {
        assert_eq!(g0(0.0, 20.0), 0.0);
        assert_eq!(dg0_minus(0.0, 20.0), 0.0);
        assert_eq!(dg0_minus(-0.0, 20.0), 0.0);
    }

    #[test]
    fn dc_identity_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(-10.0..10.0);
            let theta: f64 = rng.random_range(0.1..50.0);
            assert!((g0_plus(x, theta) - g0_minus(x, theta) - g0(x, theta)).abs() < 1e-12);
            assert!(g0_minus(x, theta) >= -1e-12);
            assert!(g0(x, theta) <= eta(theta) * x.abs() + 1e-12);
            assert_eq!(g0(x, theta), g0(-x, theta));
        }
    }

    #[test]
    fn g0_nondecreasing_in_magnitude() {
        let mut prev = 0.0;
        for k in 1..=1000 {
            let v = g0(k as f64 * 0.01, 20.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn dg0_minus_matches_finite_differences() {
        for &x in &[-3.0, -0.2, 0.01, 0.5, 4.0] {
            let h = 1e-6;
            let fd = (g0_minus(x + h, 20.0) - g0_minus(x - h, 20.0)) / (2.0 * h);
            assert!((fd - dg0_minus(x, 20.0)).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn dg0_minus_vanishes_as_theta_shrinks() {
        assert!(dg0_minus(1.0, 1e-9).abs() < 1e-8);
    }

    #[test]
    fn nonzero_count_examples() {
        assert_eq!(nonzero_count(200, 0.8), 40);
        assert_eq!(nonzero_count(2000, 0.8), 400);
        assert_eq!(nonzero_count(10, 0.0), 10);
        assert_eq!(nonzero_count(10, 1.0), 0);
        assert_eq!(nonzero_count(7, 0.8), 2);
    }

    #[test]
    fn desk_instance_passes_invariants() {
        let inst = generate_instance(&InstanceParams::default(), 1).unwrap();
        assert_eq!(inst.agents(), 10);
        assert_eq!(inst.samples(3), 40);
        assert_eq!(inst.truth().iter().filter(|v| **v != 0.0).count(), 40);
        inst.validate(Some(0.8)).unwrap();
    }

    #[test]
    fn kept_entries_are_the_largest() {
        let inst = generate_instance(&small_params(), 5).unwrap();
        let smallest_kept = inst.truth().iter().filter(|v| **v != 0.0).map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        assert!(smallest_kept > 0.0);
        assert_eq!(inst.truth().iter().filter(|v| **v != 0.0).count(), nonzero_count(12, 0.8));
    }

    #[test]
    fn generation_is_deterministic_and_block_independent() {
        let a = generate_instance(&small_params(), 9).unwrap();
        let b = generate_instance(&small_params(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_instance(&InstanceParams { blocks: 4, ..small_params() }, 9).unwrap();
        assert_eq!(a.data(1), c.data(1));
        assert_eq!(a.targets(2), c.targets(2));
        assert_ne!(a, generate_instance(&small_params(), 10).unwrap());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(generate_instance(&InstanceParams { sparsity: 1.5, ..small_params() }, 0).is_err());
        assert!(generate_instance(&InstanceParams { samples: 0, ..small_params() }, 0).is_err());
        assert!(generate_instance(&InstanceParams { blocks: 5, ..small_params() }, 0).is_err());
        assert!(generate_instance(&InstanceParams { theta: 0.0, ..small_params() }, 0).is_err());
    }

    #[test]
    fn noiseless_orthogonal_data_reconstructs_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = DMatrix::from_fn(6, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let truth: Vec<f64> = (0..6).map(|k| k as f64 - 2.5).collect();
        let b = &q * DVector::from_column_slice(&truth);
        let inst = RegressionInstance::new(vec![q.clone()], vec![b], truth.clone(), 0.0, 20.0, BoxSet::unbounded(), 1).unwrap();
        inst.validate(None).unwrap();
        let ls = (q.transpose() * &q).lu().solve(&q.tr_mul(inst.targets(0))).unwrap();
        for (a, b) in ls.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let inst = generate_instance(&small_params(), 2).unwrap();
        let text = inst.to_text();
        assert!(text.starts_with("regression 3 12 5 3 "));
        let back = RegressionInstance::from_text(&text).unwrap();
        assert_eq!(back, inst);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn malformed_text_is_rejected() {
        let inst = generate_instance(&small_params(), 2).unwrap();
        let text = inst.to_text();
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(RegressionInstance::from_text(&truncated).is_err());
        assert!(RegressionInstance::from_text("regression 1 2").is_err());
        let garbled = text.replacen(" ", " x", 12);
        assert!(RegressionInstance::from_text(&garbled).is_err());
    }

    fn random_x(m: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn surrogates_are_gradient_consistent() {
        let inst = generate_instance(&small_params(), 6).unwrap();
        let x = random_x(12, 1);
        for kind in [SurrogateKind::PartialLinearization, SurrogateKind::Linearization, SurrogateKind::ProxLinear] {
            for agent in 0..3 {
                for block in 0..3 {
                    let s = RegressionSurrogate::new(&inst, kind, agent, block, &x, kind.default_tau());
                    let err = verify_gradient_consistency(&s, &inst.smooth_part(agent), &x, inst.layout().range(block));
                    assert!(err < 1e-6, "{kind:?} agent {agent} block {block}: {err}");
                }
            }
        }
    }

    #[test]
    fn compatibility_flag_drops_lambda_from_correction() {
        let inst = generate_instance(&small_params(), 6).unwrap().with_lambda_on_correction(false);
        assert_eq!(inst.correction_weight(), 1.0);
        let x = random_x(12, 2);
        let s = RegressionSurrogate::new(&inst, SurrogateKind::Linearization, 0, 1, &x, 4.5);
        assert!(verify_gradient_consistency(&s, &inst.smooth_part(0), &x, inst.layout().range(1)) < 1e-6);
    }

    #[test]
    fn linearized_closed_form_matches_iterative_solver() {
        let inst = generate_instance(&small_params(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let x = random_x(12, 100 + trial);
            let linear: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = RegressionSurrogate::new(&inst, SurrogateKind::Linearization, 1, 2, &x, 4.5);
            let p = CompositeBlockProblem {
                surrogate: &s,
                linear: &linear,
                regularizer: inst.block_regularizer(),
                set: inst.feasible_set(),
            };
            let closed = s.closed_form(&linear, &p.regularizer, &p.set).unwrap();
            let iterative = solve_iterative(&p, &SolverOptions::default()).unwrap();
            for (a, b) in closed.iter().zip(&iterative) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn partial_linearization_uses_block_least_squares() {
        // With every other block frozen, the surrogate minus its proximal and
        // correction terms equals f_i restricted to the block.
        let inst = generate_instance(&small_params(), 3).unwrap();
        let x = random_x(12, 5);
        let s = RegressionSurrogate::new(&inst, SurrogateKind::PartialLinearization, 2, 1, &x, 3.5);
        let w: Vec<f64> = (0..4).map(|k| 0.3 * k as f64 - 0.5).collect();
        let mut full = x.clone();
        full[4..8].copy_from_slice(&w);
        let c = inst.correction_weight();
        let mut expected = inst.local_value(2, &full);
        for k in 0..4 {
            let d = w[k] - x[4 + k];
            expected += 1.75 * d * d - c * dg0_minus(x[4 + k], inst.theta()) * d;
        }
        assert!((s.value(&w) - expected).abs() < 1e-10 * expected.abs().max(1.0));
    }

    #[test]
    fn reference_solve_matches_normal_equations() {
        let params = InstanceParams { lambda: 0.0, set: BoxSet::unbounded(), ..small_params() };
        let inst = generate_instance(&params, 12).unwrap();
        let x = centralized_reference_solve(&inst, 1e-12).unwrap();
        let mut h = DMatrix::zeros(12, 12);
        let mut c = DVector::zeros(12);
        for i in 0..3 {
            h += inst.data(i).tr_mul(inst.data(i));
            c += inst.data(i).tr_mul(inst.targets(i));
        }
        let exact = h.lu().solve(&c).unwrap();
        for (a, b) in x.iter().zip(exact.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn reference_solve_on_zero_data_returns_origin() {
        let inst = RegressionInstance::new(
            vec![DMatrix::zeros(2, 4)],
            vec![DVector::zeros(2)],
            vec![0.0; 4],
            0.1,
            20.0,
            BoxSet::new(-10.0, 10.0),
            2,
        )
        .unwrap();
        assert_eq!(merit_j(&[0.0; 4], &inst), 0.0);
        assert_eq!(centralized_reference_solve(&inst, 1e-10).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn reference_solve_with_active_box_satisfies_kkt() {
        let params = InstanceParams { lambda: 0.0, noise_variance: 0.0, set: BoxSet::new(-0.3, 0.3), ..small_params() };
        let inst = generate_instance(&params, 13).unwrap();
        let x = centralized_reference_solve(&inst, 1e-10).unwrap();
        assert!(x.iter().any(|v| v.abs() == 0.3), "box should be active");
        // KKT: at an upper bound the gradient is nonpositive, at a lower bound nonnegative, zero inside.
        let g = inst.total_gradient(&x);
        for (xk, gk) in x.iter().zip(&g) {
            if *xk == 0.3 {
                assert!(*gk <= 1e-9);
            } else if *xk == -0.3 {
                assert!(*gk >= -1e-9);
            } else {
                assert!(gk.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn merit_is_zero_only_at_stationary_points() {
        let params = InstanceParams { lambda: 0.0, set: BoxSet::unbounded(), ..small_params() };
        let inst = generate_instance(&params, 14).unwrap();
        let x = centralized_reference_solve(&inst, 1e-12).unwrap();
        assert!(merit_j(&x, &inst) < 1e-8);
        let mut off = x.clone();
        off[3] += 1e-3;
        assert!(merit_j(&off, &inst) > 1e-6);
    }
}
