//! Hard Concrete gates.
//!
//! A gate `z ∈ [0, 1]` is a stretched and rectified binary-concrete sample:
//! `z = clamp((r − l)·σ((logit(u) + log α)/β) + l, 0, 1)` with
//! `u ~ U(0, 1)`. The stretch puts finite mass on exactly 0 and exactly 1,
//! and `P(z ≠ 0) = σ(log α − β·log(−l/r))` in closed form.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Lower bound on uniform draws; keeps `logit(u)` finite.
pub const UNIFORM_EPS: f64 = 1e-8;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardConcreteParams {
    pub beta: f64,
    pub stretch_lo: f64,
    pub stretch_hi: f64,
}

impl Default for HardConcreteParams {
    fn default() -> Self {
        HardConcreteParams { beta: 2.0 / 3.0, stretch_lo: -0.1, stretch_hi: 1.1 }
    }
}

impl HardConcreteParams {
    pub fn new(beta: f64, stretch_lo: f64, stretch_hi: f64) -> Result<Self> {
        let p = HardConcreteParams { beta, stretch_lo, stretch_hi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.stretch_lo < 0.0 && self.stretch_hi > 1.0) {
            return Err(Error::Config(format!(
                "hard concrete needs beta > 0 and l < 0 < 1 < r, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `β·log(−l/r)`, the logit shift between `log α` and the keep probability.
    pub fn keep_shift(&self) -> f64 {
        self.beta * (-self.stretch_lo / self.stretch_hi).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    ConvChannel,
    AttnHead,
    FfnIntermediate,
    HiddenDim,
}

#[derive(Debug, Clone)]
pub struct GateGroup {
    /// Trainable `log α`, one entry per gate.
    pub log_alpha: Tensor,
    pub params: HardConcreteParams,
    pub unit_kind: UnitKind,
    /// Model parameters removed together with one unit of this group, at
    /// full width of every other dimension.
    pub params_per_gate: usize,
}

impl GateGroup {
    pub fn new(n: usize, unit_kind: UnitKind, params_per_gate: usize, params: HardConcreteParams) -> Self {
        Self::with_log_alpha(vec![0.0; n], unit_kind, params_per_gate, params)
    }

    pub fn with_log_alpha(
        log_alpha: Vec<f64>,
        unit_kind: UnitKind,
        params_per_gate: usize,
        params: HardConcreteParams,
    ) -> Self {
        assert!(!log_alpha.is_empty(), "gate group needs at least one gate");
        let n = log_alpha.len();
        GateGroup {
            log_alpha: Tensor::param(&[n], log_alpha).expect("1-d"),
            params,
            unit_kind,
            params_per_gate,
        }
    }

    pub fn len(&self) -> usize {
        self.log_alpha.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draws one uniform per gate on `(ε, 1 − ε)`.
    pub fn draw_uniform(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.len()).map(|_| rng.random_range(UNIFORM_EPS..1.0 - UNIFORM_EPS)).collect()
    }

    /// Training-time gate sample, differentiable w.r.t. `log α`.
    pub fn sample(&self, rng: &mut Rng) -> Tensor {
        let u = self.draw_uniform(rng);
        self.sample_with_uniform(&u)
    }

    /// Gate sample for given uniforms `u` (one per gate).
    pub fn sample_with_uniform(&self, u: &[f64]) -> Tensor {
        assert_eq!(u.len(), self.len());
        let HardConcreteParams { beta, stretch_lo: l, stretch_hi: r } = self.params;
        let noise: Vec<f64> = u.iter().map(|&u| (u / (1.0 - u)).ln()).collect();
        let noise = Tensor::new(&[u.len()], noise).expect("1-d");
        noise
            .add(&self.log_alpha)
            .expect("same shape")
            .scale(1.0 / beta)
            .sigmoid()
            .scale(r - l)
            .shift(l)
            .clamp(0.0, 1.0)
    }

    /// `P(z_j ≠ 0)` for every gate, differentiable w.r.t. `log α`.
    pub fn keep_probability(&self) -> Tensor {
        self.log_alpha.shift(-self.params.keep_shift()).sigmoid()
    }

    /// Hard 0/1 gates: 1 iff the keep probability is at least `threshold`.
    pub fn deterministic(&self, threshold: f64) -> Tensor {
        let keep = self.keep_mask(threshold);
        let v = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[self.len()], v).expect("1-d")
    }

    pub fn keep_mask(&self, threshold: f64) -> Vec<bool> {
        self.keep_probability().data().iter().map(|&p| p >= threshold).collect()
    }

    /// Expected number of kept units, `Σ_j P(z_j ≠ 0)`.
    pub fn expected_kept(&self) -> Tensor {
        self.keep_probability().sum()
    }
}

/// Free-function form of [`GateGroup::sample`].
pub fn sample_gates(group: &GateGroup, rng: &mut Rng) -> Tensor {
    group.sample(rng)
}

/// Free-function form of [`GateGroup::keep_probability`].
pub fn keep_probability(group: &GateGroup) -> Tensor {
    group.keep_probability()
}

/// Free-function form of [`GateGroup::deterministic`].
pub fn deterministic_gates(group: &GateGroup, threshold: f64) -> Tensor {
    group.deterministic(threshold)
}
