//! Separable proximal building blocks: soft thresholding, box projection and
//! the block regularizers used by the subproblems.

/// `sign(x) * max(|x| - threshold, 0)`.
pub fn soft_threshold(x: f64, threshold: f64) -> f64 {
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

/// Coordinate-wise box `[lower, upper]`, possibly unbounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSet {
    pub lower: f64,
    pub upper: f64,
}

impl BoxSet {
    /// Panics if `lower > upper` or either bound is NaN.
    pub fn new(lower: f64, upper: f64) -> Self {
        assert!(lower <= upper, "empty box [{lower}, {upper}]");
        Self { lower, upper }
    }

    pub fn unbounded() -> Self {
        Self { lower: f64::NEG_INFINITY, upper: f64::INFINITY }
    }

    pub fn project(&self, x: f64) -> f64 {
        x.clamp(self.lower, self.upper)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn contains_all(&self, xs: &[f64]) -> bool {
        xs.iter().all(|&x| self.contains(x))
    }
}

impl Default for BoxSet {
    fn default() -> Self {
        Self::unbounded()
    }
}

/// Convex nonsmooth block term `g_l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockRegularizer {
    Zero,
    /// `weight * ||w||_1`
    L1 { weight: f64 },
}

impl BlockRegularizer {
    pub fn value(&self, w: &[f64]) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::L1 { weight } => weight * w.iter().map(|v| v.abs()).sum::<f64>(),
        }
    }

    /// Proximal map of `step * g + indicator(set)` at the scalar `v`. Both
    /// terms are separable and one-dimensional, so the prox is the projection
    /// of the unconstrained prox.
    pub fn prox(&self, v: f64, step: f64, set: &BoxSet) -> f64 {
        let unconstrained = match *self {
            Self::Zero => v,
            Self::L1 { weight } => soft_threshold(v, step * weight),
        };
        set.project(unconstrained)
    }
}
