//! Run the whole pipeline (corpus → train → attribute → select → evaluate →
//! report) at a reduced scale through the same driver the CLI uses, then
//! list the artifacts it produced.

use kprobe::pipeline::{cmd_all, load_config};

fn main() {
    let out_dir = std::env::temp_dir().join("kprobe_full_pipeline");
    let cfg = load_config(
        None,
        &[
            format!("out_dir={}", out_dir.display()),
            "corpus.sequences_per_class=40".into(),
            "corpus.seq_len=32".into(),
            "model.embed_dim=16".into(),
            "train.epochs=30".into(),
            "train.learning_rate=3e-3".into(),
            "fractions=[0.5,0.1]".into(),
            "random_seeds=[101,102]".into(),
        ],
    )
    .expect("config");

    cmd_all(&cfg).expect("pipeline");

    let mut names: Vec<String> = std::fs::read_dir(&cfg.out_dir)
        .expect("out dir")
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    println!("artifacts in {}:", cfg.out_dir.display());
    for n in names {
        println!("  {n}");
    }
    println!("\n{}", std::fs::read_to_string(cfg.out_dir.join("grid.csv")).unwrap());
}
