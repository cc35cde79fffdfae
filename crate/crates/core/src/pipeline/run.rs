use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::{PruneRunConfig, Stage};
use super::task::{generate_batch, SyntheticTask};
use crate::autodiff::Tensor;
use crate::controller::{adversarial_step, penalty, write_controller_log, ControllerLogRow, LagrangeState, OptimizerHandles, Target};
use crate::error::{Error, Result};
use crate::extract::{architecture_report, binarize, extract, write_report, ExtractedModel};
use crate::model::{accuracy, cross_entropy, GateMode, GatedModel, Network};
use crate::optim::{AdamW, AdamWConfig, LinearSchedule};
use crate::rng::{for_step, seeded, stream};
use crate::sparsity::{exact_profile, expected_sparsity, expected_sparsity_from, SparsityRegime, SparsityReport};

/// The model as it moves through the stages.
#[derive(Debug, Clone)]
pub enum ModelState {
    Dense(Network),
    Gated(GatedModel),
    Extracted(ExtractedModel),
}

impl ModelState {
    pub fn network(&self) -> &Network {
        match self {
            ModelState::Dense(n) => n,
            ModelState::Gated(m) => &m.network,
            ModelState::Extracted(e) => &e.network,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelState::Dense(_) => "dense",
            ModelState::Gated(_) => "gated",
            ModelState::Extracted(_) => "extracted",
        }
    }

    /// Inference logits; gated models use thresholded gates.
    pub fn eval_logits(&self, x: &Tensor, threshold: f64) -> Result<Tensor> {
        match self {
            ModelState::Gated(m) => m.logits(x, GateMode::Eval { threshold }),
            other => other.network().forward(x, None),
        }
    }

    pub fn deep_clone(&self) -> ModelState {
        match self {
            ModelState::Dense(n) => ModelState::Dense(n.deep_clone()),
            ModelState::Gated(m) => ModelState::Gated(m.deep_clone()),
            ModelState::Extracted(e) => ModelState::Extracted(ExtractedModel { network: e.network.deep_clone(), ..e.clone() }),
        }
    }
}

/// Dense network initialized from the config seed.
pub fn init_model(config: &PruneRunConfig) -> Result<ModelState> {
    let net = Network::init(&config.descriptor()?, config.task.num_classes, &mut seeded(config.seed, stream::INIT))?;
    Ok(ModelState::Dense(net))
}

/// Sparsity and expected MACs in the run's regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SparsitySnapshot {
    pub overall: f64,
    pub cnn: f64,
    pub trans: f64,
    pub macs: f64,
}

impl SparsitySnapshot {
    fn of(report: &SparsityReport) -> Self {
        SparsitySnapshot {
            overall: report.overall.item(),
            cnn: report.cnn.item(),
            trans: report.transformer.item(),
            macs: report.kept_macs.item(),
        }
    }

    /// Largest `|s − t|` over the target's components.
    pub fn gap(&self, target: Target) -> f64 {
        match target {
            Target::Overall(t) => (self.overall - t).abs(),
            Target::Separate { cnn, trans } => (self.cnn - cnn).abs().max((self.trans - trans).abs()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub accuracy: f64,
    pub sparsity_overall: f64,
    pub sparsity_cnn: f64,
    pub sparsity_trans: f64,
    pub macs_expected: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
}

/// Steps one stage and owns everything needed to resume it.
pub struct StageRunner {
    pub stage: Stage,
    pub model: ModelState,
    weights: AdamW,
    gates: Option<AdamW>,
    lagrange: Option<LagrangeState>,
    step: usize,
    total: usize,
    regime: SparsityRegime,
    /// Sparsity of a model whose gates are not learned in this stage.
    fixed: SparsitySnapshot,
    pub controller_log: Vec<ControllerLogRow>,
}

fn fixed_snapshot(model: &ModelState, regime: SparsityRegime) -> Result<SparsitySnapshot> {
    match model {
        ModelState::Extracted(e) => {
            let report = expected_sparsity_from(&e.original, &e.provenance.gate_values(), regime)?;
            Ok(SparsitySnapshot::of(&report))
        }
        other => {
            let p = exact_profile(&other.network().descriptor, regime.virtual_seconds)?;
            Ok(SparsitySnapshot { overall: 0.0, cnn: 0.0, trans: 0.0, macs: p.macs as f64 })
        }
    }
}

impl StageRunner {
    /// Starts `stage` from its first step.
    pub fn new(stage: Stage, model: ModelState, config: &PruneRunConfig) -> Result<Self> {
        let model = match (stage, model) {
            (Stage::Train, m @ ModelState::Dense(_)) => m,
            (Stage::Prune, ModelState::Dense(net)) => {
                let m = GatedModel::new(net, config.hard_concrete)?;
                for g in m.gate_groups() {
                    g.log_alpha.set_data(&vec![config.initial_log_alpha; g.len()]);
                }
                ModelState::Gated(m)
            }
            (Stage::Prune, m @ ModelState::Gated(_)) => m,
            (Stage::Finetune, m @ ModelState::Extracted(_)) => m,
            (stage, m) => {
                let need = match stage {
                    Stage::Train => "a dense model",
                    Stage::Prune => "a dense or gated model",
                    Stage::Finetune => "an extracted model (run extraction first)",
                };
                return Err(Error::Config(format!("{} stage needs {need}, got a {} model", stage.name(), m.kind())));
            }
        };
        let regime = config.regime()?;
        let weights = AdamW::new(
            model.network().parameters(),
            AdamWConfig { weight_decay: config.weight_decay, ..Default::default() },
        );
        let (gates, lagrange) = match &model {
            ModelState::Gated(m) if stage == Stage::Prune => (
                Some(AdamW::new(
                    m.gate_parameters(),
                    AdamWConfig { weight_decay: 0.0, ..Default::default() },
                )),
                Some(LagrangeState::new(regime.kind)),
            ),
            _ => (None, None),
        };
        let fixed = fixed_snapshot(&model, regime)?;
        Ok(StageRunner {
            stage,
            model,
            weights,
            gates,
            lagrange,
            step: 0,
            total: config.stage_steps(stage),
            regime,
            fixed,
            controller_log: Vec::new(),
        })
    }

    /// Continues a stage from a checkpoint it wrote.
    pub fn resume(checkpoint: Checkpoint, config: &PruneRunConfig) -> Result<Self> {
        let stage = checkpoint.stage.ok_or_else(|| Error::Config("checkpoint was not written by a stage".into()))?;
        let mut runner = StageRunner::new(stage, checkpoint.model, config)?;
        if let Some(s) = checkpoint.weight_optimizer {
            runner.weights.load_state(s)?;
        }
        if let (Some(opt), Some(s)) = (runner.gates.as_mut(), checkpoint.gate_optimizer) {
            opt.load_state(s)?;
        }
        if let Some(values) = checkpoint.lagrange {
            if runner.lagrange.as_ref().map(|l| l.terms.len()) != Some(values.len()) {
                return Err(Error::Config("checkpoint multipliers do not match the regime".into()));
            }
            runner.lagrange = Some(LagrangeState::from_values(&values));
        }
        runner.step = checkpoint.step;
        Ok(runner)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            stage: Some(self.stage),
            step: self.step,
            lagrange: self.lagrange.as_ref().map(LagrangeState::values),
            weight_optimizer: Some(self.weights.state().clone()),
            gate_optimizer: self.gates.as_ref().map(|g| g.state().clone()),
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total
    }

    pub fn lambdas(&self) -> (f64, f64) {
        self.lagrange.as_ref().map_or((0.0, 0.0), |l| l.values()[0])
    }

    /// Current sparsity: expected for a gated model, exact otherwise.
    pub fn sparsity(&self) -> Result<SparsitySnapshot> {
        match &self.model {
            ModelState::Gated(m) => Ok(SparsitySnapshot::of(&expected_sparsity(m, self.regime)?)),
            _ => Ok(self.fixed),
        }
    }

    /// One optimizer step on a fresh batch.
    pub fn step(&mut self, config: &PruneRunConfig) -> Result<MetricsRow> {
        let step = self.step;
        let lr = LinearSchedule { base: config.learning_rates.get(self.stage), warmup: config.lr_warmup_steps.get(self.stage), total: self.total }
            .lr(step);
        let (x, labels) = generate_batch(&config.task, &mut for_step(config.seed, self.stage.data_stream(), step), config.batch_size);
        self.weights.zero_grad();
        if let Some(g) = &self.gates {
            g.zero_grad();
        }
        if let Some(l) = &self.lagrange {
            l.zero_grad();
        }

        let nan = || Error::NanLoss { stage: self.stage.name().into(), step };
        let (logits, extra) = match (&self.model, &self.lagrange) {
            (ModelState::Gated(m), Some(lagrange)) => {
                let logits = m.logits(&x, GateMode::Train(&mut for_step(config.seed, stream::GATES, step)))?;
                let report = expected_sparsity(m, self.regime)?;
                let target = config.target_schedule().current_target(step);
                let pen = penalty(lagrange, &report, target, self.regime)?;
                (logits, Some((report, target, pen)))
            }
            (model, _) => (model.network().forward(&x, None)?, None),
        };
        let task_loss = cross_entropy(&logits, &labels)?;
        let loss = match &extra {
            Some((_, _, pen)) => task_loss.add(pen)?,
            None => task_loss.clone(),
        };
        if !loss.item().is_finite() {
            return Err(nan());
        }
        loss.backward()?;

        let snapshot = match (&extra, self.gates.as_mut(), &self.lagrange) {
            (Some((report, target, pen)), Some(gates), Some(lagrange)) => {
                adversarial_step(
                    lagrange,
                    OptimizerHandles { weights: &mut self.weights, gates, weight_lr: lr, gate_lr: config.gate_lr, lambda_lr: config.gate_lr },
                )?;
                if let ModelState::Gated(m) = &self.model {
                    let b = config.log_alpha_bound;
                    for g in m.gate_groups() {
                        g.log_alpha.update_data(|v| v.iter_mut().for_each(|a| *a = a.clamp(-b, b)));
                    }
                }
                self.controller_log.push(ControllerLogRow::new(step, *target, report, lagrange, task_loss.item(), pen.item()));
                SparsitySnapshot::of(report)
            }
            _ => {
                if let Some(i) = self.weights.first_non_finite() {
                    return Err(Error::NonFiniteGradient(format!("weight tensor #{i}")));
                }
                self.weights.step(lr);
                self.fixed
            }
        };
        self.step += 1;
        let (lambda1, lambda2) = self.lambdas();
        Ok(MetricsRow {
            step,
            stage: self.stage,
            loss: task_loss.item(),
            accuracy: accuracy(&logits, &labels),
            sparsity_overall: snapshot.overall,
            sparsity_cnn: snapshot.cnn,
            sparsity_trans: snapshot.trans,
            macs_expected: snapshot.macs,
            lambda1,
            lambda2,
            lr,
        })
    }
}

/// Accuracy on the fixed evaluation set derived from the config seed.
pub fn evaluate(model: &ModelState, config: &PruneRunConfig) -> Result<f64> {
    evaluate_on(model, &config.task, config.seed, config.eval_size, config.threshold)
}

pub fn evaluate_on(model: &ModelState, task: &SyntheticTask, seed: u64, size: usize, threshold: f64) -> Result<f64> {
    const CHUNK: usize = 128;
    let mut rng = seeded(seed, stream::EVAL);
    let (mut correct, mut seen) = (0.0, 0);
    while seen < size {
        let n = CHUNK.min(size - seen);
        let (x, y) = generate_batch(task, &mut rng, n);
        correct += accuracy(&model.eval_logits(&x, threshold)?, &y) * n as f64;
        seen += n;
    }
    Ok(correct / size as f64)
}

pub fn append_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub stage: Stage,
    pub model: ModelState,
    pub rows: Vec<MetricsRow>,
    pub eval_accuracy: f64,
    /// Sparsity after the last step.
    pub terminal: SparsitySnapshot,
    pub checkpoint: Option<PathBuf>,
}

pub fn checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}.ckpt", stage.name()))
}

/// Runs `stage` to completion. With an output directory, metrics are
/// appended to `metrics.csv` and the stage checkpoint is written at the end
/// (and every `checkpoint_every` steps). A NaN loss aborts the stage and
/// leaves the last good checkpoint in place.
pub fn run_stage(stage: Stage, config: &PruneRunConfig, model: ModelState, out_dir: Option<&Path>) -> Result<StageResult> {
    finish_stage(StageRunner::new(stage, model, config)?, config, out_dir)
}

pub fn finish_stage(mut runner: StageRunner, config: &PruneRunConfig, out_dir: Option<&Path>) -> Result<StageResult> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let ckpt_path = out_dir.map(|d| checkpoint_path(d, runner.stage));
    let mut rows = Vec::new();
    while !runner.is_done() {
        match runner.step(config) {
            Ok(row) => rows.push(row),
            Err(e) => {
                if let Some(dir) = out_dir {
                    append_metrics(&rows, &dir.join("metrics.csv"))?;
                }
                return Err(e);
            }
        }
        if let Some(path) = &ckpt_path {
            if config.checkpoint_every > 0 && runner.steps_done() % config.checkpoint_every == 0 && !runner.is_done() {
                runner.checkpoint().save(path)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        append_metrics(&rows, &dir.join("metrics.csv"))?;
        if runner.stage == Stage::Prune {
            write_controller_log(&runner.controller_log, fs::File::create(dir.join("controller.csv"))?)?;
        }
    }
    if let Some(path) = &ckpt_path {
        runner.checkpoint().save(path)?;
    }
    let terminal = runner.sparsity()?;
    let eval_accuracy = evaluate(&runner.model, config)?;
    Ok(StageResult { stage: runner.stage, model: runner.model, rows, eval_accuracy, terminal, checkpoint: ckpt_path })
}

/// Binarizes the gates at the config threshold and removes pruned units.
pub fn extract_model(model: &GatedModel, config: &PruneRunConfig) -> Result<ExtractedModel> {
    extract(model, &binarize(model, config.threshold))
}

/// Writes the extracted checkpoint and architecture report.
pub fn save_extracted(extracted: &ExtractedModel, config: &PruneRunConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    Checkpoint::fresh(ModelState::Extracted(extracted.clone())).save(&out_dir.join("extracted.ckpt"))?;
    let rows = architecture_report(extracted, config.regime()?.virtual_seconds)?;
    write_report(&rows, fs::File::create(out_dir.join("architecture.csv"))?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneOutcome {
    pub regime: &'static str,
    pub target: Target,
    pub terminal: SparsitySnapshot,
    pub gap: f64,
    pub met: bool,
    pub pruned_accuracy: f64,
    pub full_macs: u64,
    pub full_params: u64,
    pub extracted_macs: u64,
    pub extracted_params: u64,
    pub warnings: Vec<String>,
}

/// Prune stage, then extraction; the outcome records whether the terminal
/// sparsity met its target.
pub fn prune_and_extract(config: &PruneRunConfig, model: ModelState, out_dir: Option<&Path>) -> Result<(PruneOutcome, GatedModel, ExtractedModel)> {
    let result = run_stage(Stage::Prune, config, model, out_dir)?;
    let ModelState::Gated(gated) = result.model else { unreachable!("prune stage yields a gated model") };
    let extracted = extract_model(&gated, config)?;
    if let Some(dir) = out_dir {
        save_extracted(&extracted, config, dir)?;
    }
    let regime = config.regime()?;
    let full = exact_profile(&extracted.original, regime.virtual_seconds)?;
    let kept = exact_profile(extracted.descriptor(), regime.virtual_seconds)?;
    let target = config.final_target();
    let gap = result.terminal.gap(target);
    let outcome = PruneOutcome {
        regime: regime.kind.name(),
        target,
        terminal: result.terminal,
        gap,
        met: gap <= config.tolerance,
        pruned_accuracy: result.eval_accuracy,
        full_macs: full.macs,
        full_params: full.params,
        extracted_macs: kept.macs,
        extracted_params: kept.params,
        warnings: extracted.provenance.warnings.clone(),
    };
    Ok((outcome, gated, extracted))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOutcome {
    pub dense_accuracy: f64,
    pub prune: PruneOutcome,
    pub final_accuracy: f64,
}

/// Train, prune, extract and fine-tune.
pub fn run_pipeline(config: &PruneRunConfig, out_dir: Option<&Path>) -> Result<PipelineOutcome> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let metrics = dir.join("metrics.csv");
        if metrics.exists() {
            fs::remove_file(metrics)?;
        }
    }
    let trained = run_stage(Stage::Train, config, init_model(config)?, out_dir)?;
    let (prune, _, extracted) = prune_and_extract(config, trained.model, out_dir)?;
    let tuned = run_stage(Stage::Finetune, config, ModelState::Extracted(extracted), out_dir)?;
    let outcome = PipelineOutcome { dense_accuracy: trained.eval_accuracy, prune, final_accuracy: tuned.eval_accuracy };
    if let Some(dir) = out_dir {
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&outcome)?)?;
    }
    Ok(outcome)
}
