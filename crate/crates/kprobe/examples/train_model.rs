//! Train the classifier on a reduced corpus and print the loss curve plus
//! the held-out accuracy. Runs in a few seconds.

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
    let corpus = generate_corpus(&corpus_cfg).expect("corpus generation");
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
    let initial = init_params(&model_cfg, 1).expect("init");
    let train_cfg = TrainConfig {
        epochs: 40,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let (trained, history) = train(&initial, &train_set, &train_cfg).expect("training");

    for h in history.iter().step_by(5) {
        println!(
            "epoch {:>3}  loss {:.4}  train acc {:.3}",
            h.epoch, h.loss, h.accuracy
        );
    }
    let test_acc = accuracy(&trained, &test_set).expect("eval");
    println!("held-out accuracy: {test_acc:.3}");
}
