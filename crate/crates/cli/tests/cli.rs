use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gatecraft::controller::Target;
use gatecraft::model::toy_descriptor;
use gatecraft::pipeline::{PerStage, PruneRunConfig};
use gatecraft::sparsity::{exact_profile, RegimeKind};

fn gatecraft(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatecraft")).args(args).current_dir(cwd).env_remove("GATECRAFT_OUT").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// A run short enough for CLI tests.
fn write_config(dir: &Path, regime: RegimeKind, target: Target) -> String {
    let mut c = PruneRunConfig::toy(regime, target);
    c.epochs = PerStage { train: 2, prune: 2, finetune: 1 };
    c.steps_per_epoch = 6;
    c.lr_warmup_steps = PerStage { train: 2, prune: 2, finetune: 1 };
    c.schedule.warmup_steps = 6;
    c.eval_size = 64;
    let path = dir.join("run.json");
    fs::write(&path, c.to_json()).unwrap();
    path.to_string_lossy().into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn profile_wav2vec2_preset() {
    let dir = tempfile::tempdir().unwrap();
    let o = gatecraft(&["profile", "wav2vec2_base", "--seconds", "10", "--out", "p"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let out = text(&o.stdout);
    assert!(out.starts_with("total 74.1 GMAC"), "{out}");
    let rows = csv_rows(&dir.path().join("p/profile.csv"));
    assert!(rows.iter().any(|r| r[1] == "positional_conv"));
    assert_eq!(rows.iter().filter(|r| r[1] == "conv").count(), 7);
}

#[test]
fn profile_descriptor_file_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("toy.json"), toy_descriptor().to_json()).unwrap();
    let o = gatecraft(&["profile", "toy.json", "--seconds", "0.1"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let p = exact_profile(&toy_descriptor(), 0.1).unwrap();
    assert_eq!(text(&o.stdout).trim(), p.summary());
    let macs: u64 = csv_rows(&dir.path().join("out/profile.csv")).iter().map(|r| r[3].parse::<u64>().unwrap()).sum();
    assert_eq!(macs, p.macs);
}

#[test]
fn doubling_duration_quadruples_the_attention_score_term() {
    let dir = tempfile::tempdir().unwrap();
    let mha = |s: &str| -> (u64, u64) {
        let o = gatecraft(&["profile", "wav2vec2_base", "--seconds", s, "--out", s], dir.path());
        assert_eq!(code(&o), 0);
        let rows = csv_rows(&dir.path().join(s).join("profile.csv"));
        let sum = |kind: &str| rows.iter().filter(|r| r[1] == kind).map(|r| r[3].parse::<u64>().unwrap()).sum::<u64>();
        (sum("mha"), rows.iter().map(|r| r[3].parse::<u64>().unwrap()).sum())
    };
    let ((a10, t10), (a20, t20)) = (mha("10"), mha("20"));
    // Projections scale with T, scores with T², so the ratio sits strictly between 2 and 4.
    let r = a20 as f64 / a10 as f64;
    assert!(r > 2.0 && r < 4.0, "{r}");
    assert!(t20 > 2 * t10);
}

#[test]
fn malformed_descriptor_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{\n  \"sample_rate\": 16000,\n  \"conv_layers\": [\n").unwrap();
    let o = gatecraft(&["profile", "bad.json"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("line"), "{}", text(&o.stderr));

    fs::write(dir.path().join("typo.json"), toy_descriptor().to_json().replace("\"hidden\"", "\"hiden\"")).unwrap();
    let o = gatecraft(&["profile", "typo.json"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("hiden"), "{}", text(&o.stderr));

    assert_eq!(code(&gatecraft(&["profile", "no_such_thing"], dir.path())), 2);
    assert_eq!(code(&gatecraft(&["frobnicate"], dir.path())), 2);
}

#[test]
fn full_stage_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, RegimeKind::MacOverall, Target::Overall(0.3));

    let o = gatecraft(&["prune", &cfg], d);
    assert_eq!(code(&o), 2, "prune needs train.ckpt");
    assert!(text(&o.stderr).contains("train.ckpt"));

    assert_eq!(code(&gatecraft(&["train", &cfg], d)), 0);
    assert!(d.join("out/train.ckpt").exists());
    // Too short to reach the target: exit 3 with the achieved value.
    let o = gatecraft(&["prune", &cfg], d);
    assert_eq!(code(&o), 3, "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("achieved sparsity overall"), "{}", text(&o.stderr));
    for f in ["prune.ckpt", "controller.csv", "extracted.ckpt", "architecture.csv", "prune_summary.json"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    let before = fs::read(d.join("out/extracted.ckpt")).unwrap();
    assert_eq!(code(&gatecraft(&["extract", &cfg], d)), 0);
    assert_eq!(fs::read(d.join("out/extracted.ckpt")).unwrap(), before);
    assert_eq!(code(&gatecraft(&["finetune", &cfg], d)), 0);

    let o = gatecraft(&["report", "out/extracted.ckpt", "--seconds", "0.1"], d);
    assert_eq!(code(&o), 0);
    let report = text(&o.stdout);
    assert!(report.starts_with("layer_kind,index,kept_units,original_units,kept_mac_share"));
    assert_eq!(report.lines().count(), 1 + 4 + 2 * 2 + 1);
    assert_eq!(code(&gatecraft(&["report", "out/prune.ckpt"], d)), 2);

    let metrics = fs::read_to_string(d.join("out/metrics.csv")).unwrap();
    let stages: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(stages.len(), 12 + 12 + 6);
    assert!(stages[..12].iter().all(|s| *s == "train") && stages[24..].iter().all(|s| *s == "finetune"));
}

#[test]
fn zero_target_prunes_nothing_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), RegimeKind::MacOverall, Target::Overall(0.0));
    // Gates start saturated open, so the expected sparsity is already near zero.
    let o = gatecraft(&["prune", &cfg, "--from-scratch", "--set", "initial_log_alpha=4.5"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("sparsity overall 0.0"), "{}", text(&o.stdout));
}

#[test]
fn env_var_overrides_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), RegimeKind::MacOverall, Target::Overall(0.3));
    let o = Command::new(env!("CARGO_BIN_EXE_gatecraft"))
        .args(["train", &cfg, "--out", "flag_dir", "--set", "epochs.train=1"])
        .current_dir(dir.path())
        .env("GATECRAFT_OUT", "env_dir")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(dir.path().join("env_dir/train.ckpt").exists());
    assert!(!dir.path().join("flag_dir").exists());
    let saved = fs::read_to_string(dir.path().join("env_dir/config.json")).unwrap();
    assert_eq!(PruneRunConfig::from_json(&saved).unwrap().epochs.train, 1);
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, RegimeKind::MacOverall, Target::Overall(0.3));
    for set in ["regime=mac_everything", "gate_lr=0.3", "schedule.final_target=[0.1,0.2]", "unknown_key=1"] {
        let o = gatecraft(&["train", &cfg, "--set", set], d);
        assert_eq!(code(&o), 2, "{set}: {}", text(&o.stderr));
    }
    assert_eq!(code(&gatecraft(&["train", "missing.json"], d)), 2);
    assert_eq!(code(&gatecraft(&["finetune", &cfg], d)), 2);
}

#[test]
fn seeded_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, RegimeKind::SizeOverall, Target::Overall(0.3));
    for out in ["a", "b"] {
        let o = gatecraft(&["prune", &cfg, "--from-scratch", "--out", out], d);
        assert!(matches!(code(&o), 0 | 3), "{}", text(&o.stderr));
    }
    for f in ["metrics.csv", "controller.csv", "architecture.csv", "prune_summary.json", "prune.ckpt", "extracted.ckpt"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_finishes_an_interrupted_stage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, RegimeKind::MacOverall, Target::Overall(0.3));
    // A one-epoch run stands in for an interrupted two-epoch stage.
    assert_eq!(code(&gatecraft(&["train", &cfg, "--set", "epochs.train=1"], d)), 0);
    let o = gatecraft(&["prune", &cfg], d);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("--resume"), "{}", text(&o.stderr));
    let o = gatecraft(&["train", &cfg, "--resume"], d);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("train: 6 steps"), "{}", text(&o.stdout));
    assert_eq!(fs::read_to_string(d.join("out/metrics.csv")).unwrap().lines().count(), 1 + 12);
    assert!(matches!(code(&gatecraft(&["prune", &cfg], d)), 0 | 3));
}

#[test]
fn sweep_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, RegimeKind::SizeSeparate, Target::Separate { cnn: 0.1, trans: 0.1 });
    let o = gatecraft(&["sweep", &cfg, "--grid", "t_cnn=0.1,0.3,t_trans=0.2"], d);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let csv = fs::read_to_string(d.join("out/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "cell,seed,t_cnn,t_trans,sparsity_cnn,sparsity_trans,macs,params,metric,met,frontier"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][1], rows[1][1]), ("0", "1"));
    assert!(rows.iter().any(|r| r[10] == "true"));
    assert!(d.join("out/cell_0/metrics.csv").exists() && d.join("out/cell_1/metrics.csv").exists());

    let o = gatecraft(&["sweep", &cfg, "--grid", "t_cnn=0.1,0.3,t_trans=0.2,0.4", "--max-cells", "3"], d);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("cap"), "{}", text(&o.stderr));
    let mac = write_config(d, RegimeKind::MacOverall, Target::Overall(0.3));
    assert_eq!(code(&gatecraft(&["sweep", &mac, "--grid", "t_cnn=0.1,t_trans=0.2"], d)), 2);
    assert_eq!(code(&gatecraft(&["sweep", &cfg, "--grid", "t_cnn=0.1"], d)), 2);
}
