//! Verify the hand-derived backward pass against central finite differences
//! on randomly sampled projection weights.

use kprobe::corpus::LabeledSequence;
use kprobe::grad::finite_diff_check;
use kprobe::model::{init_params, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig {
        alphabet_size: 20,
        num_classes: 6,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        seq_len: 24,
        include_layernorm: true,
    };
    let params = init_params(&cfg, 5).expect("init");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let example = LabeledSequence {
        tokens: (0..cfg.seq_len)
            .map(|_| rng.gen_range(0..cfg.alphabet_size))
            .collect(),
        label: rng.gen_range(0..cfg.num_classes),
    };

    for epsilon in [1e-5, 1e-6, 1e-7] {
        let err = finite_diff_check(&params, &example, 100, epsilon, 0).expect("check");
        println!("epsilon {epsilon:>7.0e}: max relative error {err:.3e}");
    }
}
