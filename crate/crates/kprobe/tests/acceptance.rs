//! End-to-end acceptance gate. One test runs all nine criteria and prints a
//! pass/fail line per criterion; the test fails if any criterion fails.
//!
//! The criteria are intentionally heavyweight (full pipelines over several
//! seeds), so this file contains a single serial test.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use kprobe::ablation::{apply_mask, select_by_score, select_random, MaskMethod};
use kprobe::attribution::{
    activation_scores, ig_joint_for_example, ig_scores, ig_weight, IGConfig,
};
use kprobe::corpus::{generate_corpus, split, CorpusConfig, Dataset, LabeledSequence};
use kprobe::grad::finite_diff_check;
use kprobe::model::{
    correct_class_prob, forward, init_params, neuron_ids, ModelConfig, Parameters, WeightRef,
};
use kprobe::report::{accuracy, build_grid, heatmap, AccuracyGrid};
use kprobe::train::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

struct PipelineRun {
    trained: Parameters,
    test_set: Dataset,
    grid: AccuracyGrid,
    train_secs: f64,
}

fn default_model_config() -> ModelConfig {
    ModelConfig {
        alphabet_size: 20,
        num_classes: 6,
        embed_dim: 32,
        num_layers: 2,
        num_heads: 2,
        seq_len: 64,
        include_layernorm: true,
    }
}

/// Default-configuration pipeline: generate, split, train, attribute both
/// ways, evaluate the method x fraction grid.
fn run_pipeline(init_seed: u64) -> PipelineRun {
    let ccfg = CorpusConfig::default();
    let corpus = generate_corpus(&ccfg).expect("corpus");
    let (train_set, test_set) = split(&corpus.dataset(), 0.8, 1234).expect("split");
    let mcfg = default_model_config();
    let initial = init_params(&mcfg, init_seed).expect("init");
    let t0 = Instant::now();
    let (trained, _) = train(&initial, &train_set, &TrainConfig::default()).expect("train");
    let train_secs = t0.elapsed().as_secs_f64();

    let act = activation_scores(&trained, &test_set).expect("activation scores");
    let ig = ig_scores(&trained, &test_set, &IGConfig::default()).expect("ig scores");
    let grid = build_grid(
        &trained,
        &test_set,
        &act,
        &ig,
        &[1.0, 0.5, 0.25, 0.1, 0.01],
        &[101, 102, 103, 104, 105],
    )
    .expect("grid");
    PipelineRun {
        trained,
        test_set,
        grid,
        train_secs,
    }
}

fn criterion_full_model_accuracy(run: &PipelineRun) -> Outcome {
    let acc = accuracy(&run.trained, &run.test_set).expect("accuracy");
    let pass = acc >= 0.90 && run.train_secs < 300.0;
    outcome(
        "full-model-accuracy",
        pass,
        format!("test accuracy {acc:.4} (need >= 0.90), train time {:.0}s (need < 300s)", run.train_secs),
    )
}

fn criterion_method_margins(runs: &[PipelineRun]) -> Outcome {
    // Grid columns: [1.0, 0.5, 0.25, 0.1, 0.01]; margins checked on the last four.
    let mut detail = String::new();
    let mut pass = true;
    for (col, frac) in [(1usize, 0.5f64), (2, 0.25), (3, 0.1), (4, 0.01)] {
        let mean = |m: MaskMethod| -> f64 {
            runs.iter().map(|r| r.grid.cell(m, col)).sum::<f64>() / runs.len() as f64
        };
        let rand_mean = mean(MaskMethod::Random);
        let act_mean = mean(MaskMethod::Activation);
        let ig_mean = mean(MaskMethod::IntegratedGradients);
        let need = if frac == 0.01 { 0.0 } else { 0.05 };
        let ok = act_mean - rand_mean >= need && ig_mean - rand_mean >= need;
        pass &= ok;
        detail.push_str(&format!(
            "[{frac}: rand {rand_mean:.3} act {act_mean:.3} ig {ig_mean:.3} need +{need}] "
        ));
    }
    outcome("method-margins-over-random", pass, detail)
}

fn criterion_gradient_check(run: &PipelineRun) -> Outcome {
    let example = &run.test_set.examples()[0];
    let t0 = Instant::now();
    let max_rel = finite_diff_check(&run.trained, example, 100, 1e-6, 7).expect("fd check");
    let secs = t0.elapsed().as_secs_f64();
    let pass = max_rel <= 1e-4 && secs < 30.0;
    outcome(
        "gradient-check",
        pass,
        format!("max rel err {max_rel:.3e} over 100 weights (need <= 1e-4) in {secs:.1}s (need < 30s)"),
    )
}

fn criterion_ig_joint_completeness(run: &PipelineRun) -> Outcome {
    let cfg = IGConfig {
        riemann_steps: 256,
        ..Default::default()
    };
    let zeroed = run.trained.scale_qkv(0.0);
    let mut worst = 0.0f64;
    let mut pass = true;
    for ex in run.test_set.examples().iter().take(20) {
        let ig = ig_joint_for_example(&run.trained, ex, &cfg).expect("ig joint");
        let total: f64 = ig.iter().sum();
        let p1 = correct_class_prob(&run.trained, ex, None).expect("p trained");
        let p0 = correct_class_prob(&zeroed, ex, None).expect("p zeroed");
        let delta = p1 - p0;
        let err = (total - delta).abs();
        let allowed = (0.01 * delta.abs()).max(1e-4);
        if err > allowed {
            pass = false;
        }
        worst = worst.max(err / allowed);
    }
    outcome(
        "ig-joint-completeness",
        pass,
        format!("20 examples, m=256; worst error/allowance {worst:.3} (need <= 1)"),
    )
}

fn criterion_ig_per_weight(run: &PipelineRun) -> Outcome {
    let cfg = IGConfig {
        riemann_steps: 1024,
        ..Default::default()
    };
    let example = &run.test_set.examples()[1];
    let count = run.trained.qkv_param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut pass = true;
    for _ in 0..20 {
        let r: WeightRef = run.trained.weight_ref_from_flat(rng.gen_range(0..count));
        let ig = ig_weight(&run.trained, example, r, &cfg).expect("ig weight");
        // Two-forward oracle: P with the trained weight minus P with only
        // that weight zeroed.
        let p1 = correct_class_prob(&run.trained, example, None).expect("p");
        let mut zeroed = run.trained.clone();
        zeroed.set_qkv(r, 0.0);
        let p0 = correct_class_prob(&zeroed, example, None).expect("p0");
        let delta = p1 - p0;
        let rel = (ig - delta).abs() / delta.abs().max(1e-4);
        if rel > 0.01 {
            pass = false;
        }
        worst = worst.max(rel);
    }
    outcome(
        "ig-per-weight-completeness",
        pass,
        format!("20 weights, m=1024; worst rel err {worst:.4} (need <= 0.01)"),
    )
}

fn criterion_ablation_exactness(run: &PipelineRun) -> Outcome {
    let cfg = run.trained.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pass = true;
    let mut detail = String::from("50 inputs: dual-route bit-exact, ablated traces zero, all-keep identity");
    'outer: for trial in 0..50u64 {
        let seq = LabeledSequence {
            tokens: (0..cfg.seq_len)
                .map(|_| rng.gen_range(0..cfg.alphabet_size))
                .collect(),
            label: rng.gen_range(0..cfg.num_classes),
        };
        let mask = select_random(cfg.num_layers, cfg.embed_dim, 0.3, trial).expect("mask");
        let ablated = apply_mask(&run.trained, &mask).expect("apply");
        let via_mask = forward(&run.trained, &seq, Some(&mask)).expect("fwd mask");
        let via_params = forward(&ablated, &seq, None).expect("fwd params");
        for (a, b) in via_mask
            .probabilities()
            .iter()
            .zip(via_params.probabilities())
        {
            if a.to_bits() != b.to_bits() {
                pass = false;
                detail = format!("trial {trial}: dual routes disagree");
                break 'outer;
            }
        }
        for n in neuron_ids(&cfg) {
            if !mask.keeps(n) {
                for t in 0..cfg.seq_len {
                    if via_mask.activation(n, t) != 0.0 {
                        pass = false;
                        detail = format!("trial {trial}: ablated neuron trace nonzero");
                        break 'outer;
                    }
                }
            }
        }
        let all = kprobe::ablation::NeuronMask::all_keep(
            cfg.num_neurons(),
            cfg.num_layers,
            cfg.embed_dim,
        );
        let base = forward(&run.trained, &seq, None).expect("fwd");
        let kept = forward(&run.trained, &seq, Some(&all)).expect("fwd all-keep");
        for (a, b) in base.probabilities().iter().zip(kept.probabilities()) {
            if a.to_bits() != b.to_bits() {
                pass = false;
                detail = format!("trial {trial}: all-keep mask changed the output");
                break 'outer;
            }
        }
    }
    outcome("ablation-exactness", pass, detail.to_string())
}

fn criterion_selection_exactness(run: &PipelineRun) -> Outcome {
    let act = activation_scores(&run.trained, &run.test_set).expect("scores");
    let n = act.expected_len();
    let fractions = [0.5, 0.25, 0.1, 0.01];
    let mut pass = true;
    let mut detail = String::from("top-k matches sort oracle at all fractions; masks nest");
    let mut prev_keep: Option<Vec<bool>> = None;
    for &f in &fractions {
        let mask = select_by_score(&act, f).expect("select");
        let k = (f * n as f64).ceil() as usize;
        if mask.kept_count() != k {
            pass = false;
            detail = format!("fraction {f}: kept {} != ceil(f*N) {k}", mask.kept_count());
            break;
        }
        // Sort oracle: descending score, ties by ascending canonical index.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            act.scores()[b]
                .partial_cmp(&act.scores()[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut expect = vec![false; n];
        for &i in order.iter().take(k) {
            expect[i] = true;
        }
        if mask.keep_slice() != expect.as_slice() {
            pass = false;
            detail = format!("fraction {f}: kept set differs from sort oracle");
            break;
        }
        if let Some(prev) = &prev_keep {
            // Smaller fraction's kept set must be a subset of the larger's.
            if mask
                .keep_slice()
                .iter()
                .zip(prev.iter())
                .any(|(small, large)| *small && !large)
            {
                pass = false;
                detail = format!("fraction {f}: kept set not nested in the previous fraction");
                break;
            }
        }
        prev_keep = Some(mask.keep_slice().to_vec());
    }
    outcome("selection-exactness", pass, detail)
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .expect("read out dir")
        .map(|e| {
            let e = e.expect("dir entry");
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).expect("read artifact"),
            )
        })
        .collect();
    entries.sort();
    entries
}

fn criterion_byte_determinism() -> Outcome {
    // Two full `all` runs with different thread counts on a reduced config
    // must produce byte-identical artifact directories.
    let bin = env!("CARGO_BIN_EXE_kprobe");
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut dirs = Vec::new();
    for (i, threads) in ["1", "2"].iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        let status = Command::new(bin)
            .args([
                "all",
                "--threads",
                threads,
                "--set",
                "corpus.sequences_per_class=12",
                "--set",
                "corpus.seq_len=24",
                "--set",
                "train.epochs=3",
                "--set",
                "ig.riemann_steps=8",
                "--set",
            ])
            .arg(format!("out_dir={}", out.display()))
            .status()
            .expect("run pipeline binary");
        if !status.success() {
            return outcome(
                "byte-determinism",
                false,
                format!("pipeline run {i} exited with {status}"),
            );
        }
        dirs.push(out);
    }
    let a = read_dir_sorted(&dirs[0]);
    let b = read_dir_sorted(&dirs[1]);
    let pass = a == b;
    let detail = if pass {
        format!(
            "two `all` runs with --threads 1 and 2: {} artifacts byte-identical",
            a.len()
        )
    } else {
        let diff: Vec<&str> = a
            .iter()
            .zip(&b)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.0.as_str())
            .collect();
        format!("artifact bytes differ: {diff:?}")
    };
    outcome("byte-determinism", pass, detail)
}

fn criterion_heatmap_consistency(run: &PipelineRun) -> Outcome {
    let act = activation_scores(&run.trained, &run.test_set).expect("scores");
    let n = act.expected_len();
    let mut pass = true;
    let mut detail =
        String::from("size-weighted bin means reconstruct the preserved fraction exactly");
    for &f in &[0.5, 0.25, 0.1, 0.01] {
        let mask = select_by_score(&act, f).expect("select");
        let hm = heatmap(&mask, 8).expect("heatmap");
        let mut weighted = 0.0f64;
        for row in &hm.rows {
            for (b, &v) in row.bins.iter().enumerate() {
                weighted += v * hm.bin_len(b) as f64;
            }
        }
        let reconstructed = weighted / n as f64;
        let expected = mask.kept_count() as f64 / n as f64;
        if reconstructed != expected {
            pass = false;
            detail = format!("fraction {f}: reconstructed {reconstructed} != {expected}");
            break;
        }
    }
    outcome("heatmap-consistency", pass, detail)
}

#[test]
fn acceptance_criteria() {
    // Seed 1 doubles as the default pipeline for the single-run criteria.
    let seeds = [1u64, 2, 3, 4, 5];
    let runs: Vec<PipelineRun> = seeds.iter().map(|&s| run_pipeline(s)).collect();
    let first = &runs[0];

    let outcomes = vec![
        criterion_full_model_accuracy(first),
        criterion_method_margins(&runs),
        criterion_gradient_check(first),
        criterion_ig_joint_completeness(first),
        criterion_ig_per_weight(first),
        criterion_ablation_exactness(first),
        criterion_selection_exactness(first),
        criterion_byte_determinism(),
        criterion_heatmap_consistency(first),
    ];

    let mut all_pass = true;
    for o in &outcomes {
        println!(
            "{} {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
        all_pass &= o.pass;
    }
    assert!(all_pass, "one or more acceptance criteria failed");
}
