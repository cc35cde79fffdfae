//! Three-stage experiment driver on a synthetic waveform task: train the
//! dense model, prune it under the sparsity controller, extract, fine-tune.

mod checkpoint;
mod config;
mod run;
mod task;

pub use checkpoint::{same_weights, Checkpoint, MAGIC, VERSION};
pub use config::{apply_override, load_config, preset, ArchSource, PerStage, PruneRunConfig, Stage, GATE_LRS};
pub use run::{
    append_metrics, checkpoint_path, evaluate, evaluate_on, extract_model, finish_stage, init_model, prune_and_extract,
    run_pipeline, run_stage, save_extracted, MetricsRow, ModelState, PipelineOutcome, PruneOutcome, SparsitySnapshot,
    StageResult, StageRunner,
};
pub use task::{generate_batch, probe_predict, SyntheticTask};
