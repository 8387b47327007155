//! Joint-path integrated gradients on one example, demonstrating the
//! completeness identity: the attributions sum to the change in correct-class
//! probability between the zeroed and full projection weights.

use kprobe::attribution::{ig_joint_for_example, IGConfig, PathMode, RiemannRule};
use kprobe::corpus::LabeledSequence;
use kprobe::model::{correct_class_prob, init_params, ModelConfig};
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
    let params = init_params(&cfg, 9).expect("init");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let example = LabeledSequence {
        tokens: (0..cfg.seq_len)
            .map(|_| rng.gen_range(0..cfg.alphabet_size))
            .collect(),
        label: rng.gen_range(0..cfg.num_classes),
    };

    let full = correct_class_prob(&params, &example, None).expect("forward");
    let zeroed = correct_class_prob(&params.scale_qkv(0.0), &example, None).expect("forward");
    let delta = full - zeroed;
    println!("P(full) = {full:.6}, P(zeroed projections) = {zeroed:.6}, delta = {delta:.6}");

    for steps in [8, 32, 128, 512] {
        let ig_cfg = IGConfig {
            riemann_steps: steps,
            rule: RiemannRule::Midpoint,
            path_mode: PathMode::Joint,
        };
        let sum: f64 = ig_joint_for_example(&params, &example, &ig_cfg)
            .expect("ig")
            .iter()
            .sum();
        println!(
            "m = {steps:>4}: sum of attributions = {sum:.6}, residual = {:.2e}",
            (sum - delta).abs()
        );
    }
}
