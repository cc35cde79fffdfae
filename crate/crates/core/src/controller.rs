//! Augmented-Lagrangian sparsity controller.
//!
//! The penalty `g = λ1 (s − t) + λ2 (s − t)²` is added to the task loss.
//! Weights and gate parameters descend on the sum while `λ1, λ2` ascend on
//! it, so persistent violation of `s = t` grows the multipliers until the
//! gates comply. With separate CNN/Transformer targets the penalty has one
//! such pair of terms per component.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::sparsity::{RegimeKind, SparsityRegime, SparsityReport};

/// Target sparsity: one overall value, or one per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Overall(f64),
    Separate { cnn: f64, trans: f64 },
}

impl Target {
    pub fn values(&self) -> Vec<f64> {
        match *self {
            Target::Overall(t) => vec![t],
            Target::Separate { cnn, trans } => vec![cnn, trans],
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Target {
        match *self {
            Target::Overall(t) => Target::Overall(f(t)),
            Target::Separate { cnn, trans } => Target::Separate { cnn: f(cnn), trans: f(trans) },
        }
    }

    /// Checks that the target shape fits the regime.
    pub fn check_arity(&self, regime: RegimeKind) -> Result<()> {
        match (regime, self) {
            (RegimeKind::SizeSeparate, Target::Separate { .. }) => Ok(()),
            (RegimeKind::SizeOverall | RegimeKind::MacOverall, Target::Overall(_)) => Ok(()),
            (r, t) => Err(Error::TargetArity { regime: r.name(), detail: format!("got target {t:?}") }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSchedule {
    pub final_target: Target,
    pub warmup_steps: usize,
    /// Length of the pruning stage; 0 lets the pipeline fill it in.
    #[serde(default)]
    pub total_steps: usize,
}

impl TargetSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "schedule needs 0 < warmup_steps ≤ total_steps, got {} / {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.final_target.values().iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config(format!("targets must lie in [0, 1]: {:?}", self.final_target)));
        }
        Ok(())
    }

    /// `t(step) = t_final · min(1, step / warmup)`.
    pub fn current_target(&self, step: usize) -> Target {
        let frac = (step as f64 / self.warmup_steps as f64).min(1.0);
        self.final_target.map(|t| t * frac)
    }
}

/// Free-function form of [`TargetSchedule::current_target`].
pub fn current_target(schedule: &TargetSchedule, step: usize) -> Target {
    schedule.current_target(step)
}

/// One `(λ1, λ2)` pair as trainable scalars.
#[derive(Debug, Clone)]
pub struct Multipliers {
    pub lambda1: Tensor,
    pub lambda2: Tensor,
}

impl Multipliers {
    fn new(l1: f64, l2: f64) -> Self {
        Multipliers { lambda1: Tensor::param(&[], vec![l1]).unwrap(), lambda2: Tensor::param(&[], vec![l2]).unwrap() }
    }
}

#[derive(Debug, Clone)]
pub struct LagrangeState {
    /// One pair for overall regimes; `[cnn, transformer]` for separate sizes.
    pub terms: Vec<Multipliers>,
}

impl LagrangeState {
    /// Multipliers start at zero.
    pub fn new(regime: RegimeKind) -> Self {
        let n = if regime == RegimeKind::SizeSeparate { 2 } else { 1 };
        LagrangeState { terms: (0..n).map(|_| Multipliers::new(0.0, 0.0)).collect() }
    }

    pub fn from_values(values: &[(f64, f64)]) -> Self {
        LagrangeState { terms: values.iter().map(|&(a, b)| Multipliers::new(a, b)).collect() }
    }

    pub fn values(&self) -> Vec<(f64, f64)> {
        self.terms.iter().map(|m| (m.lambda1.item(), m.lambda2.item())).collect()
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.terms.iter().flat_map(|m| [m.lambda1.clone(), m.lambda2.clone()]).collect()
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(Tensor::zero_grad);
    }

    /// Gradient ascent `λ ← λ + lr · ∂L/∂λ`.
    pub fn ascend(&self, lr: f64) {
        for p in self.parameters() {
            if let Some(g) = p.grad() {
                p.update_data(|v| v[0] += lr * g[0]);
            }
        }
    }
}

fn term(m: &Multipliers, s: &Tensor, t: f64) -> Result<Tensor> {
    let gap = s.shift(-t);
    m.lambda1.mul(&gap)?.add(&m.lambda2.mul(&gap.square())?)
}

/// `g(λ, α)` for the report's regime; two components for separate sizes.
pub fn penalty(state: &LagrangeState, report: &SparsityReport, target: Target, regime: SparsityRegime) -> Result<Tensor> {
    if report.regime.kind != regime.kind {
        return Err(Error::TargetArity {
            regime: regime.kind.name(),
            detail: format!("report computed under {}", report.regime.kind.name()),
        });
    }
    target.check_arity(regime.kind)?;
    match (target, state.terms.as_slice()) {
        (Target::Overall(t), [m]) => term(m, &report.overall, t),
        (Target::Separate { cnn, trans }, [mc, mt]) => term(mc, &report.cnn, cnn)?.add(&term(mt, &report.transformer, trans)?),
        _ => Err(Error::TargetArity {
            regime: regime.kind.name(),
            detail: format!("{} multiplier pairs for target {target:?}", state.terms.len()),
        }),
    }
}

/// Optimizers driven by one adversarial step.
pub struct OptimizerHandles<'a> {
    pub weights: &'a mut AdamW,
    pub gates: &'a mut AdamW,
    pub weight_lr: f64,
    pub gate_lr: f64,
    pub lambda_lr: f64,
}

/// Applies one min-max update after `backward` on task loss + penalty:
/// descent for weights and gates, ascent for the multipliers. Nothing is
/// modified when any gradient is non-finite.
pub fn adversarial_step(state: &LagrangeState, handles: OptimizerHandles<'_>) -> Result<()> {
    if let Some(i) = handles.weights.first_non_finite() {
        return Err(Error::NonFiniteGradient(format!("weight tensor #{i}")));
    }
    if let Some(i) = handles.gates.first_non_finite() {
        return Err(Error::NonFiniteGradient(format!("gate group #{i}")));
    }
    if state.parameters().iter().any(|p| p.grad().is_some_and(|g| !g[0].is_finite())) {
        return Err(Error::NonFiniteGradient("lagrange multipliers".into()));
    }
    handles.weights.step(handles.weight_lr);
    handles.gates.step(handles.gate_lr);
    state.ascend(handles.lambda_lr);
    Ok(())
}

/// One row of the per-step controller log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerLogRow {
    pub step: usize,
    pub target: f64,
    pub target_trans: Option<f64>,
    pub sparsity: f64,
    pub sparsity_cnn: f64,
    pub sparsity_trans: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda1_trans: Option<f64>,
    pub lambda2_trans: Option<f64>,
    pub task_loss: f64,
    pub penalty: f64,
}

impl ControllerLogRow {
    pub fn new(step: usize, target: Target, report: &SparsityReport, state: &LagrangeState, task_loss: f64, penalty: f64) -> Self {
        let t = target.values();
        let l = state.values();
        ControllerLogRow {
            step,
            target: t[0],
            target_trans: t.get(1).copied(),
            sparsity: report.overall.item(),
            sparsity_cnn: report.cnn.item(),
            sparsity_trans: report.transformer.item(),
            lambda1: l[0].0,
            lambda2: l[0].1,
            lambda1_trans: l.get(1).map(|p| p.0),
            lambda2_trans: l.get(1).map(|p| p.1),
            task_loss,
            penalty,
        }
    }
}

pub fn write_controller_log<W: Write>(rows: &[ControllerLogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
