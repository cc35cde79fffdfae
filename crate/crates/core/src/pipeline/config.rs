use serde::{Deserialize, Serialize};

use super::task::SyntheticTask;
use crate::controller::{Target, TargetSchedule};
use crate::error::{Error, Result};
use crate::gates::HardConcreteParams;
use crate::model::{toy_descriptor, wav2vec2_base_descriptor, ArchDescriptor};
use crate::sparsity::{RegimeKind, SparsityRegime};

/// Gate and multiplier learning rates the controller is tuned for.
pub const GATE_LRS: [f64; 2] = [0.02, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Prune,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Prune => "prune",
            Stage::Finetune => "finetune",
        }
    }

    pub(crate) fn data_stream(self) -> u64 {
        use crate::rng::stream;
        match self {
            Stage::Train => stream::TRAIN_DATA,
            Stage::Prune => stream::PRUNE_DATA,
            Stage::Finetune => stream::FINETUNE_DATA,
        }
    }
}

/// One value per stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerStage<T> {
    pub train: T,
    pub prune: T,
    pub finetune: T,
}

impl<T: Copy> PerStage<T> {
    pub fn get(&self, stage: Stage) -> T {
        match stage {
            Stage::Train => self.train,
            Stage::Prune => self.prune,
            Stage::Finetune => self.finetune,
        }
    }
}

/// A preset name or an inline descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSource {
    Preset(String),
    Inline(ArchDescriptor),
}

impl ArchSource {
    pub fn resolve(&self) -> Result<ArchDescriptor> {
        match self {
            ArchSource::Preset(name) => preset(name),
            ArchSource::Inline(d) => {
                d.validate()?;
                Ok(d.clone())
            }
        }
    }
}

pub fn preset(name: &str) -> Result<ArchDescriptor> {
    match name {
        "toy" => Ok(toy_descriptor()),
        "wav2vec2_base" => Ok(wav2vec2_base_descriptor()),
        other => Err(Error::Config(format!("unknown architecture preset {other:?} (expected toy or wav2vec2_base)"))),
    }
}

fn default_arch() -> ArchSource {
    ArchSource::Preset("toy".into())
}
fn default_threshold() -> f64 {
    0.5
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_initial_log_alpha() -> f64 {
    2.0
}
fn default_log_alpha_bound() -> f64 {
    100f64.ln()
}
fn default_eval_size() -> usize {
    512
}
fn default_tolerance() -> f64 {
    0.02
}

/// Everything needed to reproduce a train / prune / fine-tune run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneRunConfig {
    #[serde(default = "default_arch")]
    pub architecture: ArchSource,
    pub regime: RegimeKind,
    /// Input length assumed by MAC accounting; defaults to the task's input length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub virtual_seconds: Option<f64>,
    pub schedule: TargetSchedule,
    pub epochs: PerStage<usize>,
    pub steps_per_epoch: usize,
    pub learning_rates: PerStage<f64>,
    pub lr_warmup_steps: PerStage<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub gate_lr: f64,
    /// Gate parameters are clamped to `[-b, b]` after every update.
    #[serde(default = "default_log_alpha_bound")]
    pub log_alpha_bound: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_initial_log_alpha")]
    pub initial_log_alpha: f64,
    #[serde(default)]
    pub hard_concrete: HardConcreteParams,
    pub task: SyntheticTask,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// Allowed terminal gap `|s − t|`.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Mid-stage checkpoint interval in steps; 0 writes only at stage end.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl PruneRunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: PruneRunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn descriptor(&self) -> Result<ArchDescriptor> {
        self.architecture.resolve()
    }

    pub fn regime(&self) -> Result<SparsityRegime> {
        let seconds = match self.virtual_seconds {
            Some(s) => s,
            None => self.task.seq_len as f64 / self.descriptor()?.sample_rate as f64,
        };
        let r = SparsityRegime::with_seconds(self.regime, seconds);
        r.validate()?;
        Ok(r)
    }

    pub fn stage_steps(&self, stage: Stage) -> usize {
        self.epochs.get(stage) * self.steps_per_epoch
    }

    /// The target schedule with its length tied to the pruning stage.
    pub fn target_schedule(&self) -> TargetSchedule {
        let mut s = self.schedule;
        if s.total_steps == 0 {
            s.total_steps = self.stage_steps(Stage::Prune);
        }
        s
    }

    pub fn final_target(&self) -> Target {
        self.schedule.final_target
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let desc = self.descriptor()?;
        self.schedule.final_target.check_arity(self.regime)?;
        let sched = self.target_schedule();
        if self.stage_steps(Stage::Prune) > 0 {
            sched.validate()?;
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for stage in [Stage::Train, Stage::Prune, Stage::Finetune] {
            let lr = self.learning_rates.get(stage);
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("learning_rates.{} must be positive, got {lr}", stage.name()));
            }
        }
        if !GATE_LRS.contains(&self.gate_lr) {
            return bad(format!("gate_lr must be one of {GATE_LRS:?}, got {}", self.gate_lr));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.log_alpha_bound > 0.0 && self.log_alpha_bound.is_finite()) {
            return bad(format!("log_alpha_bound must be positive, got {}", self.log_alpha_bound));
        }
        if !(self.initial_log_alpha.abs() <= self.log_alpha_bound) {
            return bad(format!("initial_log_alpha must lie in [-{b}, {b}]", b = self.log_alpha_bound));
        }
        if !(self.tolerance >= 0.0) {
            return bad(format!("tolerance must be non-negative, got {}", self.tolerance));
        }
        if self.eval_size == 0 {
            return bad("eval_size must be positive".into());
        }
        self.hard_concrete.validate()?;
        self.task.validate()?;
        desc.conv_lengths(self.task.seq_len)?;
        self.regime()?;
        Ok(())
    }

    /// Desk-scale defaults: 25 / 30 / 10 epochs of 134 steps each.
    pub fn toy(regime: RegimeKind, final_target: Target) -> Self {
        PruneRunConfig {
            architecture: default_arch(),
            regime,
            virtual_seconds: None,
            schedule: TargetSchedule { final_target, warmup_steps: 1000, total_steps: 0 },
            epochs: PerStage { train: 25, prune: 30, finetune: 10 },
            steps_per_epoch: 134,
            learning_rates: PerStage { train: 2e-3, prune: 2e-3, finetune: 1e-3 },
            lr_warmup_steps: PerStage { train: 150, prune: 150, finetune: 50 },
            batch_size: 8,
            seed: 0,
            gate_lr: 0.05,
            log_alpha_bound: default_log_alpha_bound(),
            weight_decay: default_weight_decay(),
            threshold: default_threshold(),
            initial_log_alpha: default_initial_log_alpha(),
            hard_concrete: HardConcreteParams::default(),
            task: SyntheticTask::default(),
            eval_size: default_eval_size(),
            tolerance: default_tolerance(),
            checkpoint_every: 0,
        }
    }
}

/// Applies a dotted-path override such as `schedule.final_target=0.3`.
/// The value is parsed as JSON when possible and as a string otherwise.
pub fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(Error::Config("empty override key".into()))
}

/// Parses a config document, applies overrides, then validates.
pub fn load_config(text: &str, overrides: &[String]) -> Result<PruneRunConfig> {
    let mut doc: serde_json::Value = serde_json::from_str(text)?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let config: PruneRunConfig = serde_json::from_value(doc)?;
    config.validate()?;
    Ok(config)
}
