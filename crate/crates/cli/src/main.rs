use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gatecraft::extract::{architecture_report, write_report};
use gatecraft::model::ArchDescriptor;
use gatecraft::pipeline::{
    checkpoint_path, evaluate, extract_model, finish_stage, init_model, load_config, preset, prune_and_extract,
    save_extracted, Checkpoint, ModelState, PruneRunConfig, Stage, StageResult, StageRunner,
};
use gatecraft::sparsity::exact_profile;
use gatecraft::sweep::{run_sweep, write_sweep_csv, Grid, DEFAULT_MAX_CELLS};
use gatecraft::Error;

#[derive(Parser)]
#[command(name = "gatecraft", version, about = "Structured pruning of conv + Transformer encoders under sparsity and MAC budgets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run config (JSON).
    config: PathBuf,
    /// Dotted-path override, e.g. `schedule.final_target=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (GATECRAFT_OUT takes precedence).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// MAC and parameter counts of an architecture.
    Profile {
        /// Descriptor JSON file or preset name (toy, wav2vec2_base).
        arch: String,
        /// Input duration used for MAC accounting.
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        /// Directory for profile.csv (GATECRAFT_OUT takes precedence).
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train the dense model.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from an interrupted train.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Prune the trained model, then extract it.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        /// Train the dense model first instead of loading train.ckpt.
        #[arg(long)]
        from_scratch: bool,
        /// Continue from an interrupted prune.ckpt.
        #[arg(long, conflicts_with = "from_scratch")]
        resume: bool,
    },
    /// Extract the pruned architecture from prune.ckpt.
    Extract {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fine-tune the extracted model.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from an interrupted finetune.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Per-layer report of an extracted checkpoint.
    Report {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
    },
    /// Grid over separate CNN / Transformer targets with a Pareto flag.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// For example `t_cnn=0.2,0.4,t_trans=0.3,0.5`.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = DEFAULT_MAX_CELLS)]
        max_cells: usize,
    },
}

enum Failure {
    Usage(String),
    Unmet(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) | Error::TargetArity { .. } | Error::Mask { .. } | Error::Checkpoint { .. } => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn out_dir(flag: &Path) -> PathBuf {
    std::env::var_os("GATECRAFT_OUT").map(PathBuf::from).unwrap_or_else(|| flag.to_path_buf())
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load(run: &RunArgs) -> Result<(PruneRunConfig, PathBuf), Failure> {
    let text = read(&run.config)?;
    let config = load_config(&text, &run.overrides).map_err(|e| Failure::Usage(format!("{}: {e}", run.config.display())))?;
    let dir = out_dir(&run.out);
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    fs::write(dir.join("config.json"), config.to_json()).map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok((config, dir))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("{} not found; run the previous stage first", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

/// The finished model of `stage` from its checkpoint in `dir`.
fn stage_output(dir: &Path, stage: Stage, config: &PruneRunConfig) -> Result<ModelState, Failure> {
    let path = checkpoint_path(dir, stage);
    let ckpt = load_checkpoint(&path)?;
    if ckpt.stage != Some(stage) || ckpt.step < config.stage_steps(stage) {
        return Err(Failure::Usage(format!("{} is not a finished {} stage; rerun it with --resume", path.display(), stage.name())));
    }
    Ok(ckpt.model)
}

/// Where a stage starts: a given model, or that stage's own checkpoint.
enum Start {
    Fresh(ModelState),
    Resume,
}

fn run(stage: Stage, config: &PruneRunConfig, dir: &Path, start: Start) -> Result<StageResult, Failure> {
    let runner = if let Start::Fresh(model) = start {
        StageRunner::new(stage, model, config)?
    } else {
        let ckpt = load_checkpoint(&checkpoint_path(dir, stage))?;
        if ckpt.stage != Some(stage) {
            return Err(Failure::Usage(format!("checkpoint was not written by the {} stage", stage.name())));
        }
        StageRunner::resume(ckpt, config)?
    };
    let r = finish_stage(runner, config, Some(dir))?;
    println!("{}: {} steps, eval accuracy {:.4}", stage.name(), r.rows.len(), r.eval_accuracy);
    Ok(r)
}

fn profile(arch: &str, seconds: f64, out: &Path) -> Outcome {
    let desc = match preset(arch) {
        Ok(d) => d,
        Err(_) if Path::new(arch).exists() => {
            ArchDescriptor::from_json(&read(Path::new(arch))?).map_err(|e| Failure::Usage(format!("{arch}: {e}")))?
        }
        Err(_) => return Err(Failure::Usage(format!("{arch}: no such file or preset"))),
    };
    let p = exact_profile(&desc, seconds)?;
    let dir = out_dir(out);
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    let file = fs::File::create(dir.join("profile.csv")).map_err(|e| Failure::Runtime(e.to_string()))?;
    p.write_csv(file)?;
    println!("{}", p.summary());
    Ok(())
}

fn train(run_args: &RunArgs, resume: bool) -> Outcome {
    let (config, dir) = load(run_args)?;
    if !resume {
        let metrics = dir.join("metrics.csv");
        if metrics.exists() {
            fs::remove_file(metrics).map_err(|e| Failure::Runtime(e.to_string()))?;
        }
    }
    let start = if resume { Start::Resume } else { Start::Fresh(init_model(&config)?) };
    run(Stage::Train, &config, &dir, start)?;
    Ok(())
}

fn prune(run_args: &RunArgs, from_scratch: bool, resume: bool) -> Outcome {
    let (config, dir) = load(run_args)?;
    let outcome = if resume {
        let r = run(Stage::Prune, &config, &dir, Start::Resume)?;
        let ModelState::Gated(gated) = r.model else { unreachable!("prune stage yields a gated model") };
        let extracted = extract_model(&gated, &config)?;
        save_extracted(&extracted, &config, &dir)?;
        (r.terminal, r.terminal.gap(config.final_target()), extracted.provenance.warnings)
    } else {
        let dense = if from_scratch {
            let metrics = dir.join("metrics.csv");
            if metrics.exists() {
                fs::remove_file(metrics).map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            run(Stage::Train, &config, &dir, Start::Fresh(init_model(&config)?))?.model
        } else {
            stage_output(&dir, Stage::Train, &config)?
        };
        let (o, _, _) = prune_and_extract(&config, dense, Some(&dir))?;
        println!("prune: eval accuracy {:.4}, {} of {} MACs kept", o.pruned_accuracy, o.extracted_macs, o.full_macs);
        fs::write(dir.join("prune_summary.json"), serde_json::to_string_pretty(&o).expect("outcome serializes"))
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        (o.terminal, o.gap, o.warnings)
    };
    let (s, gap, warnings) = outcome;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let achieved = format!("overall {:.4}, cnn {:.4}, transformer {:.4}", s.overall, s.cnn, s.trans);
    if gap > config.tolerance {
        return Err(Failure::Unmet(format!(
            "target {:?} not met: achieved sparsity {achieved} (gap {gap:.4} > {})",
            config.final_target(),
            config.tolerance
        )));
    }
    println!("sparsity {achieved} (gap {gap:.4})");
    Ok(())
}

fn extract_cmd(run_args: &RunArgs) -> Outcome {
    let (config, dir) = load(run_args)?;
    let ModelState::Gated(gated) = stage_output(&dir, Stage::Prune, &config)? else {
        return Err(Failure::Usage("prune.ckpt does not hold a gated model".into()));
    };
    let extracted = extract_model(&gated, &config)?;
    save_extracted(&extracted, &config, &dir)?;
    for w in &extracted.provenance.warnings {
        eprintln!("warning: {w}");
    }
    let acc = evaluate(&ModelState::Extracted(extracted.clone()), &config)?;
    println!("extracted {} units, eval accuracy {acc:.4}", extracted.provenance.kept_units());
    Ok(())
}

fn finetune(run_args: &RunArgs, resume: bool) -> Outcome {
    let (config, dir) = load(run_args)?;
    let start = if resume { Start::Resume } else { Start::Fresh(load_checkpoint(&dir.join("extracted.ckpt"))?.model) };
    run(Stage::Finetune, &config, &dir, start)?;
    Ok(())
}

fn report(path: &Path, seconds: f64) -> Outcome {
    let ModelState::Extracted(e) = load_checkpoint(path)?.model else {
        return Err(Failure::Usage(format!("{} is not an extracted checkpoint", path.display())));
    };
    let rows = architecture_report(&e, seconds)?;
    write_report(&rows, std::io::stdout().lock())?;
    Ok(())
}

fn sweep(run_args: &RunArgs, grid: &str, max_cells: usize) -> Outcome {
    let (config, dir) = load(run_args)?;
    let grid = Grid::parse(grid)?;
    let cells = run_sweep(&config, &grid, max_cells, Some(&dir))?;
    let path = dir.join("sweep.csv");
    write_sweep_csv(&cells, fs::File::create(&path).map_err(|e| Failure::Runtime(e.to_string()))?)?;
    let on_front = cells.iter().filter(|c| c.frontier).count();
    println!("{} cells, {on_front} on the frontier; wrote {}", cells.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Profile { arch, seconds, out } => profile(arch, *seconds, out),
        Command::Train { run, resume } => train(run, *resume),
        Command::Prune { run, from_scratch, resume } => prune(run, *from_scratch, *resume),
        Command::Extract { run } => extract_cmd(run),
        Command::Finetune { run, resume } => finetune(run, *resume),
        Command::Report { checkpoint, seconds } => report(checkpoint, *seconds),
        Command::Sweep { run, grid, max_cells } => sweep(run, grid, *max_cells),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Unmet(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
