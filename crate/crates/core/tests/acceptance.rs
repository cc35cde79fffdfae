//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each, and exits non-zero if any failed.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use gatecraft::controller::{penalty, LagrangeState, Target};
use gatecraft::extract::{extract, PruneMask};
use gatecraft::gates::{GateGroup, HardConcreteParams, UnitKind};
use gatecraft::gradcheck::{self, FD_STEP};
use gatecraft::model::{toy_descriptor, wav2vec2_base_descriptor, GateMode, GatedModel, Network};
use gatecraft::pipeline::*;
use gatecraft::rng::{seeded, Rng};
use gatecraft::sparsity::{
    exact_profile, expected_sparsity, expected_sparsity_from, mac_budget_from_sparsity, RegimeKind, SparsityRegime,
};
use gatecraft::Tensor;

const REGIMES: [RegimeKind; 3] = [RegimeKind::MacOverall, RegimeKind::SizeOverall, RegimeKind::SizeSeparate];

struct Suite {
    failed: Vec<u32>,
}

impl Suite {
    fn record(&mut self, n: u32, name: &str, pass: bool, detail: String) {
        println!("criterion {n} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(n);
        }
    }
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()).unwrap()
}

fn profile_golden(suite: &mut Suite) {
    let clock = Instant::now();
    let p = exact_profile(&wav2vec2_base_descriptor(), 10.0).unwrap();
    let elapsed = clock.elapsed().as_secs_f64();
    let rel = p.macs as f64 / 74.4e9 - 1.0;
    let cnn_macs = p.cnn_mac_share();
    let cnn_params = p.cnn_param_share();
    let pass = rel.abs() <= 0.015 && (cnn_macs - 0.33).abs() <= 0.02 && cnn_params < 0.05 && elapsed < 1.0;
    suite.record(
        1,
        "profiler golden",
        pass,
        format!(
            "{} MACs ({:+.2}% vs 74.4e9), CNN {:.1}% of MACs, {:.2}% of params, {:.3} s",
            p.macs,
            100.0 * rel,
            100.0 * cnn_macs,
            100.0 * cnn_params,
            elapsed
        ),
    );
}

fn hard_concrete_oracle(suite: &mut Suite) {
    const N: usize = 1_000_000;
    let mut rng = seeded(11, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let log_alpha = rng.random_range(-3.0..3.0);
        let hc = HardConcreteParams::new(rng.random_range(0.3..1.0), rng.random_range(-0.3..-0.01), rng.random_range(1.01..1.3)).unwrap();
        let group = GateGroup::with_log_alpha(vec![log_alpha; N], UnitKind::FfnIntermediate, 1, hc);
        let p = group.keep_probability().to_vec()[0];
        let nonzero = group.sample(&mut rng).to_vec().iter().filter(|&&z| z != 0.0).count();
        let freq = nonzero as f64 / N as f64;
        let se = (p * (1.0 - p) / N as f64).sqrt();
        worst = worst.max((freq - p).abs() / se);
    }
    suite.record(2, "hard concrete keep probability", worst <= 3.0, format!("worst deviation {worst:.2} standard errors over 10 settings"));
}

/// Random gated toy model with log α spread over the sigmoid's sensitive range.
fn random_gated(rng: &mut Rng) -> GatedModel {
    let m = GatedModel::new(Network::init(&toy_descriptor(), 4, rng).unwrap(), HardConcreteParams::default()).unwrap();
    for g in m.gate_groups() {
        let v: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-2.0..3.0)).collect();
        g.log_alpha.set_data(&v);
    }
    m
}

fn gradient_suite(suite: &mut Suite) {
    let mut rng = seeded(12, 0);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut note = |name: &str, err: f64| match worst.iter_mut().find(|(n, _)| n == name) {
        Some(w) => w.1 = w.1.max(err),
        None => worst.push((name.to_string(), err)),
    };

    type Op = fn(&[Tensor]) -> Tensor;
    let ops: Vec<(&str, Vec<Vec<usize>>, Op)> = vec![
        ("add", vec![vec![3, 4], vec![4]], |t| t[0].add(&t[1]).unwrap()),
        ("sub", vec![vec![3, 4], vec![3, 1]], |t| t[0].sub(&t[1]).unwrap()),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t| t[0].mul(&t[1]).unwrap()),
        ("div", vec![vec![3, 4], vec![4]], |t| t[0].div(&t[1].square().shift(0.5)).unwrap()),
        ("minimum", vec![vec![3, 4], vec![3, 4]], |t| t[0].minimum(&t[1]).unwrap()),
        ("maximum", vec![vec![3, 4], vec![3, 4]], |t| t[0].maximum(&t[1]).unwrap()),
        ("scale", vec![vec![3, 4]], |t| t[0].scale(-1.7)),
        ("shift", vec![vec![3, 4]], |t| t[0].shift(0.3)),
        ("sigmoid", vec![vec![3, 4]], |t| t[0].sigmoid()),
        ("gelu", vec![vec![3, 4]], |t| t[0].gelu()),
        ("log", vec![vec![3, 4]], |t| t[0].square().shift(0.2).log()),
        ("exp", vec![vec![3, 4]], |t| t[0].exp()),
        ("square", vec![vec![3, 4]], |t| t[0].square()),
        ("clamp", vec![vec![3, 4]], |t| t[0].clamp(-0.8, 0.9)),
        ("softmax", vec![vec![3, 4]], |t| t[0].softmax().unwrap()),
        ("log_softmax", vec![vec![3, 4]], |t| t[0].log_softmax().unwrap()),
        ("sum", vec![vec![3, 4]], |t| t[0].sum()),
        ("mean", vec![vec![3, 4]], |t| t[0].mean()),
        ("sum_axis", vec![vec![3, 4]], |t| t[0].sum_axis(1).unwrap()),
        ("mean_axis", vec![vec![3, 4]], |t| t[0].mean_axis(0).unwrap()),
        ("matmul", vec![vec![2, 3, 4], vec![2, 4, 5]], |t| t[0].matmul(&t[1]).unwrap()),
        ("conv1d", vec![vec![2, 3, 13], vec![4, 3, 3]], |t| t[0].conv1d(&t[1], 2).unwrap()),
        ("slice", vec![vec![3, 4]], |t| t[0].slice(1, 1, 3).unwrap()),
        ("concat", vec![vec![2, 3], vec![2, 2]], |t| Tensor::concat(&[t[0].clone(), t[1].clone()], 1).unwrap()),
        ("layer_norm", vec![vec![3, 5]], |t| t[0].layer_norm(7).unwrap()),
        ("reshape", vec![vec![3, 4]], |t| t[0].reshape(&[4, 3]).unwrap()),
        ("transpose_last2", vec![vec![2, 3, 4]], |t| t[0].transpose_last2().unwrap()),
    ];
    for (name, shapes, op) in &ops {
        for _ in 0..20 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
            let out = op(&inputs).shape().to_vec();
            let proj = randn(&mut rng, &out).detach();
            // Random projection to a scalar so every output entry matters.
            let r = gradcheck::check(&inputs, FD_STEP, || Ok(op(&inputs).mul(&proj)?.sum()));
            note(name, r.unwrap().max_relative_error);
        }
    }

    let seconds = 0.1;
    for kind in REGIMES {
        let regime = SparsityRegime::with_seconds(kind, seconds);
        for i in 0..20 {
            let m = random_gated(&mut rng);
            let r = gradcheck::check(&m.gate_parameters(), FD_STEP, || {
                let rep = expected_sparsity(&m, regime)?;
                // Every output the controller reads.
                rep.overall.add(&rep.cnn.scale(0.7))?.add(&rep.transformer.scale(-0.4))
            })
            .unwrap();
            note(&format!("expected_sparsity/{}", kind.name()), r.max_relative_error);

            let state = LagrangeState::new(kind);
            let values: Vec<(f64, f64)> = state.values().iter().map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
            let state = LagrangeState::from_values(&values);
            let t = (i as f64 + 0.5) / 20.0;
            let target = if kind == RegimeKind::SizeSeparate { Target::Separate { cnn: t, trans: 1.0 - t } } else { Target::Overall(t) };
            let mut leaves = m.gate_parameters();
            leaves.extend(state.parameters());
            let r = gradcheck::check(&leaves, FD_STEP, || penalty(&state, &expected_sparsity(&m, regime)?, target, regime)).unwrap();
            note(&format!("penalty/{}", kind.name()), r.max_relative_error);
        }
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let over: Vec<String> = worst.iter().filter(|w| w.1 >= 1e-4).map(|w| format!("{} {:.1e}", w.0, w.1)).collect();
    suite.record(
        3,
        "gradient suite",
        over.is_empty(),
        format!("{} checks x 20 instances, max relative error {max:.2e}{}", worst.len(), if over.is_empty() { String::new() } else { format!("; over: {}", over.join(", ")) }),
    );
}

fn random_mask(rng: &mut Rng, m: &GatedModel) -> PruneMask {
    let mut draw = |n: usize| {
        let keep = rng.random_range(0.2..1.0);
        let mut v: Vec<bool> = (0..n).map(|_| rng.random_bool(keep)).collect();
        if !v.contains(&true) {
            let i = rng.random_range(0..n);
            v[i] = true;
        }
        v
    };
    PruneMask {
        conv: m.conv_gates.iter().map(|g| draw(g.len())).collect(),
        heads: m.head_gates.iter().map(|g| draw(g.len())).collect(),
        ffn: m.ffn_gates.iter().map(|g| draw(g.len())).collect(),
        hidden: draw(m.hidden_gate.len()),
        warnings: vec![],
    }
}

fn extraction_equivalence(suite: &mut Suite) {
    let mut rng = seeded(13, 0);
    let m = random_gated(&mut rng);
    let desc = toy_descriptor();
    let (mut worst, mut profile_mismatch) = (0.0f64, 0);
    for _ in 0..100 {
        let mask = random_mask(&mut rng, &m);
        let ex = extract(&m, &mask).unwrap();
        let x = randn(&mut rng, &[2, 100]).detach();
        let pinned = m.logits(&x, GateMode::Fixed(&mask.gate_values())).unwrap().to_vec();
        let got = ex.forward(&x).unwrap().to_vec();
        let scale = pinned.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
        worst = worst.max(pinned.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
        for kind in REGIMES {
            let seconds = 0.1;
            let expected = expected_sparsity_from(&desc, &mask.gate_values(), SparsityRegime::with_seconds(kind, seconds)).unwrap();
            let p = exact_profile(ex.descriptor(), seconds).unwrap();
            if expected.kept_macs.item() != p.macs as f64 || expected.kept_params.item() != p.params as f64 {
                profile_mismatch += 1;
            }
        }
    }
    suite.record(
        4,
        "extraction equivalence",
        worst < 1e-10 && profile_mismatch == 0,
        format!("100 masks: max relative forward error {worst:.2e}, {profile_mismatch} profile mismatches"),
    );
}

struct PruneRun {
    regime: RegimeKind,
    t: f64,
    config: PruneRunConfig,
    result: StageResult,
    extracted: gatecraft::extract::ExtractedModel,
    seconds: f64,
}

fn target_for(kind: RegimeKind, t: f64) -> Target {
    if kind == RegimeKind::SizeSeparate { Target::Separate { cnn: t, trans: t } } else { Target::Overall(t) }
}

fn prune_run(kind: RegimeKind, t: f64, dense: &ModelState) -> PruneRun {
    let config = PruneRunConfig::toy(kind, target_for(kind, t));
    let clock = Instant::now();
    let result = run_stage(Stage::Prune, &config, dense.deep_clone(), None).unwrap();
    let ModelState::Gated(gated) = &result.model else { unreachable!() };
    let extracted = extract_model(gated, &config).unwrap();
    let seconds = clock.elapsed().as_secs_f64();
    PruneRun { regime: kind, t, config, result, extracted, seconds }
}

/// Largest `s − t(step)` once the warmup plus 500 steps have passed.
fn worst_overshoot(run: &PruneRun) -> f64 {
    let sched = run.config.target_schedule();
    run.result
        .rows
        .iter()
        .filter(|r| r.step >= sched.warmup_steps + 500)
        .map(|r| {
            let t = sched.current_target(r.step).values();
            let s = if run.regime == RegimeKind::SizeSeparate { vec![r.sparsity_cnn, r.sparsity_trans] } else { vec![r.sparsity_overall] };
            s.iter().zip(&t).map(|(s, t)| s - t).fold(f64::MIN, f64::max)
        })
        .fold(f64::MIN, f64::max)
}

fn main() {
    let mut suite = Suite { failed: vec![] };
    profile_golden(&mut suite);
    hard_concrete_oracle(&mut suite);
    gradient_suite(&mut suite);
    extraction_equivalence(&mut suite);

    // Criteria 5 to 7 share one dense model and one pruning run per cell.
    let base = PruneRunConfig::toy(RegimeKind::MacOverall, Target::Overall(0.5));
    let clock = Instant::now();
    let trained = run_stage(Stage::Train, &base, init_model(&base).unwrap(), None).unwrap();
    let dense_acc = trained.eval_accuracy;
    println!("dense model: eval accuracy {dense_acc:.4} ({:.0} s)", clock.elapsed().as_secs_f64());
    let mut runs = Vec::new();
    for kind in REGIMES {
        for t in [0.2, 0.5] {
            let run = prune_run(kind, t, &trained.model);
            let gap = run.result.terminal.gap(run.config.final_target());
            println!(
                "  {} t={}: s = {:.4} (cnn {:.4}, trans {:.4}), gap {gap:.4}, overshoot after warmup+500 {:+.4}, {:.0} s",
                kind.name(),
                t,
                run.result.terminal.overall,
                run.result.terminal.cnn,
                run.result.terminal.trans,
                worst_overshoot(&run),
                run.seconds
            );
            runs.push(run);
        }
    }
    let gaps: Vec<f64> = runs.iter().map(|r| r.result.terminal.gap(r.config.final_target())).collect();
    let worst_gap = gaps.iter().cloned().fold(0.0, f64::max);
    suite.record(
        5,
        "constraint satisfaction",
        gaps.iter().all(|&g| g <= 0.02),
        format!("6 runs, worst terminal |s - t| = {worst_gap:.4} (tolerance 0.02)"),
    );

    let find = |kind, t| runs.iter().find(|r| r.regime == kind && r.t == t).unwrap();
    let mac_half = find(RegimeKind::MacOverall, 0.5);
    let tuned = run_stage(Stage::Finetune, &mac_half.config, ModelState::Extracted(mac_half.extracted.clone()), None).unwrap();
    let seconds = mac_half.config.regime().unwrap().virtual_seconds;
    let budget = mac_budget_from_sparsity(&mac_half.extracted.original, 0.5, seconds).unwrap();
    let macs = exact_profile(mac_half.extracted.descriptor(), seconds).unwrap().macs;
    let zero = prune_run(RegimeKind::MacOverall, 0.0, &trained.model);
    let zero_tuned = run_stage(Stage::Finetune, &zero.config, ModelState::Extracted(zero.extracted.clone()), None).unwrap();
    let pass = dense_acc >= 0.95
        && (dense_acc - tuned.eval_accuracy) <= 0.03
        && macs as f64 <= 1.02 * budget as f64
        && (dense_acc - zero_tuned.eval_accuracy).abs() <= 0.01;
    suite.record(
        6,
        "end-to-end quality",
        pass,
        format!(
            "dense {:.4}; t=0.5 mac_overall final {:.4}, {} MACs = {:.4} x budget; t=0 final {:.4}",
            dense_acc,
            tuned.eval_accuracy,
            macs,
            macs as f64 / budget as f64,
            zero_tuned.eval_accuracy
        ),
    );

    let toy = exact_profile(&toy_descriptor(), seconds).unwrap();
    let contrast: Vec<String> = [RegimeKind::MacOverall, RegimeKind::SizeOverall]
        .iter()
        .map(|&k| {
            let r = find(k, 0.5);
            let p = exact_profile(r.extracted.descriptor(), seconds).unwrap();
            format!(
                "{}: expected MACs {:.0}, extracted MACs {} ({:.1}% of dense), params {:.1}% of dense",
                k.name(),
                r.result.terminal.macs,
                p.macs,
                100.0 * p.macs as f64 / toy.macs as f64,
                100.0 * p.params as f64 / toy.params as f64
            )
        })
        .collect();
    let mac = find(RegimeKind::MacOverall, 0.5);
    let size = find(RegimeKind::SizeOverall, 0.5);
    let mac_macs = exact_profile(mac.extracted.descriptor(), seconds).unwrap().macs;
    let size_macs = exact_profile(size.extracted.descriptor(), seconds).unwrap().macs;
    suite.record(
        7,
        "regime contrast",
        mac_macs <= size_macs && mac.result.terminal.macs <= size.result.terminal.macs,
        format!("toy frontend has {:.1}% of MACs and {:.1}% of params; {}", 100.0 * toy.cnn_mac_share(), 100.0 * toy.cnn_param_share(), contrast.join("; ")),
    );

    let mut small = PruneRunConfig::toy(RegimeKind::SizeSeparate, Target::Separate { cnn: 0.3, trans: 0.4 });
    small.steps_per_epoch = 8;
    small.schedule.warmup_steps = 60;
    small.lr_warmup_steps = PerStage { train: 10, prune: 10, finetune: 5 };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&small, Some(a.path())).unwrap();
    run_pipeline(&small, Some(b.path())).unwrap();
    let files = ["metrics.csv", "controller.csv", "architecture.csv", "summary.json"];
    let same: Vec<bool> = files.iter().map(|f| std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap()).collect();
    let rows = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap().lines().count() - 1;
    suite.record(
        8,
        "reproducibility",
        same.iter().all(|&s| s),
        format!("two seeded pipelines, {rows} metric rows; identical: {}", files.iter().zip(&same).map(|(f, s)| format!("{f}={s}")).collect::<Vec<_>>().join(" ")),
    );

    if suite.failed.is_empty() {
        println!("acceptance: all 8 criteria passed");
    } else {
        println!("acceptance: failed criteria {:?}", suite.failed);
        std::process::exit(1);
    }
}
