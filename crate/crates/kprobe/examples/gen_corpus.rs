//! Generate a small motif corpus and print its shape, the planted motifs,
//! and one example per class.

use kprobe::corpus::{generate_corpus, CorpusConfig};

fn main() {
    let config = CorpusConfig {
        sequences_per_class: 20,
        seq_len: 32,
        ..Default::default()
    };
    let corpus = generate_corpus(&config).expect("corpus generation");

    println!(
        "{} sequences, {} classes, alphabet {}, length {}",
        corpus.dataset().len(),
        config.num_classes,
        config.alphabet_size,
        config.seq_len
    );
    for (class, motif) in corpus.motifs.iter().enumerate() {
        println!("class {class} motif: {motif:?}");
    }
    for class in 0..config.num_classes {
        let ex = corpus
            .examples
            .iter()
            .find(|e| e.label == class)
            .expect("balanced corpus");
        println!("class {class} sample: {:?}", ex.tokens);
    }
}
