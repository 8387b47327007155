//! Train a small model, score its projection neurons three ways, and show
//! how held-out accuracy degrades as ever fewer neurons are preserved.

use kprobe::ablation::{apply_mask, select_by_score, select_random};
use kprobe::attribution::{activation_scores, ig_scores, IGConfig};
use kprobe::corpus::{generate_corpus, split, CorpusConfig};
use kprobe::model::{init_params, ModelConfig};
use kprobe::report::accuracy;
use kprobe::train::{train, TrainConfig};

fn main() {
    let corpus_cfg = CorpusConfig {
        sequences_per_class: 60,
        seq_len: 32,
        ..Default::default()
    };
    let corpus = generate_corpus(&corpus_cfg).expect("corpus");
    let (train_set, test_set) = split(&corpus.dataset(), 0.8, 7).expect("split");
    let model_cfg = ModelConfig {
        alphabet_size: corpus_cfg.alphabet_size,
        num_classes: corpus_cfg.num_classes,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        seq_len: corpus_cfg.seq_len,
        include_layernorm: true,
    };
    let train_cfg = TrainConfig {
        epochs: 40,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let (trained, _) = train(&init_params(&model_cfg, 1).unwrap(), &train_set, &train_cfg)
        .expect("training");
    println!(
        "full model accuracy: {:.3}",
        accuracy(&trained, &test_set).unwrap()
    );

    let act = activation_scores(&trained, &test_set).expect("activation scores");
    let ig = ig_scores(&trained, &test_set, &IGConfig::default()).expect("ig scores");

    println!("fraction   random  activation  ig");
    for fraction in [0.5, 0.25, 0.1, 0.01] {
        let r = select_random(model_cfg.num_layers, model_cfg.embed_dim, fraction, 101).unwrap();
        let a = select_by_score(&act, fraction).unwrap();
        let g = select_by_score(&ig, fraction).unwrap();
        let evals: Vec<f64> = [r, a, g]
            .iter()
            .map(|m| accuracy(&apply_mask(&trained, m).unwrap(), &test_set).unwrap())
            .collect();
        println!(
            "{fraction:>8}   {:.3}   {:.3}       {:.3}",
            evals[0], evals[1], evals[2]
        );
    }
}
