//! End-to-end pipeline driver: generate → train → attribute → select →
//! evaluate → report → check, with every artifact reproducible from one
//! JSON config.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ablation::{apply_mask, select_by_score, select_random, MaskMethod, NeuronMask};
use crate::attribution::{
    activation_scores, ig_joint_for_example, ig_scores, ig_weight, IGConfig, PathMode,
    RiemannRule, ScoreTable,
};
use crate::corpus::{generate_corpus, split, Corpus, CorpusConfig, Dataset, LabeledSequence};
use crate::error::{Error, Result};
use crate::grad::finite_diff_check;
use crate::model::{
    correct_class_prob, forward, init_params, neuron_ids, ModelConfig, Parameters,
};
use crate::report::{accuracy, build_grid, emit, heatmap, AccuracyGrid, GRID_METHODS};
use crate::train::{history_to_csv, train, TrainConfig};

fn default_embed_dim() -> usize {
    32
}
fn default_num_layers() -> usize {
    2
}
fn default_num_heads() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_init_seed() -> u64 {
    1
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_split_seed() -> u64 {
    1234
}
fn default_fractions() -> Vec<f64> {
    vec![0.5, 0.25, 0.1, 0.01]
}
fn default_random_seeds() -> Vec<u64> {
    vec![101, 102, 103, 104, 105]
}
fn default_bin_size() -> usize {
    8
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_num_layers")]
    pub num_layers: usize,
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    #[serde(default = "default_true")]
    pub include_layernorm: bool,
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSettings {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub seed: u64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub split: SplitSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ig: IGConfig,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_random_seeds")]
    pub random_seeds: Vec<u64>,
    #[serde(default = "default_bin_size")]
    pub bin_size: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).unwrap()
    }
}

impl PipelineConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            alphabet_size: self.corpus.alphabet_size,
            num_classes: self.corpus.num_classes,
            embed_dim: self.model.embed_dim,
            num_layers: self.model.num_layers,
            num_heads: self.model.num_heads,
            seq_len: self.corpus.seq_len,
            include_layernorm: self.model.include_layernorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        self.ig.validate()?;
        if self.fractions.is_empty() || self.random_seeds.is_empty() {
            return Err(Error::InvalidConfig(
                "fractions and random_seeds must be nonempty".into(),
            ));
        }
        for &f in &self.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::FractionOutOfRange(f));
            }
        }
        if self.bin_size == 0 {
            return Err(Error::InvalidConfig("bin_size must be >= 1".into()));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Error::FractionOutOfRange(self.split.train_fraction));
        }
        Ok(())
    }

    /// Grid columns: 1.0 (full model) followed by the configured fractions.
    pub fn grid_fractions(&self) -> Vec<f64> {
        let mut out = vec![1.0];
        for &f in &self.fractions {
            if f != 1.0 {
                out.push(f);
            }
        }
        out
    }
}

/// Loads a pipeline config from an optional JSON file plus `--set key=value`
/// overrides with dotted paths (e.g. `train.epochs=5`). Values parse as JSON
/// when possible, otherwise as strings.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut value: Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("bad JSON in {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for ov in overrides {
        let (key, raw) = ov.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("override `{ov}` is not of the form key=value"))
        })?;
        let parsed = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
        set_dotted(&mut value, key, parsed)?;
    }
    let cfg: PipelineConfig = serde_json::from_value(value)
        .map_err(|e| Error::InvalidConfig(format!("bad config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn set_dotted(root: &mut Value, path: &str, new: Value) -> Result<()> {
    let mut cur = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("cannot set `{path}`")))?;
        if i == segments.len() - 1 {
            obj.insert(seg.to_string(), new);
            return Ok(());
        }
        cur = obj
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Artifact layout
// ---------------------------------------------------------------------------

pub mod artifacts {
    use std::path::{Path, PathBuf};

    use crate::ablation::MaskMethod;

    pub fn corpus(out: &Path) -> PathBuf {
        out.join("corpus.json")
    }
    pub fn model(out: &Path) -> PathBuf {
        out.join("model.ckpt")
    }
    pub fn history(out: &Path) -> PathBuf {
        out.join("history.csv")
    }
    pub fn scores(out: &Path, method: &str) -> PathBuf {
        out.join(format!("scores_{method}.csv"))
    }
    pub fn scores_meta(out: &Path, method: &str) -> PathBuf {
        out.join(format!("scores_{method}.meta.json"))
    }
    pub fn mask(out: &Path, method: MaskMethod, fraction: f64) -> PathBuf {
        out.join(format!("mask_{}_{}.csv", method.as_str(), fraction))
    }
    pub fn mask_meta(out: &Path, method: MaskMethod, fraction: f64) -> PathBuf {
        out.join(format!("mask_{}_{}.meta.json", method.as_str(), fraction))
    }
    pub fn grid_csv(out: &Path) -> PathBuf {
        out.join("grid.csv")
    }
    pub fn grid_json(out: &Path) -> PathBuf {
        out.join("grid.json")
    }
    pub fn report(out: &Path) -> PathBuf {
        out.join("report.json")
    }
}

fn read_artifact(path: &Path, produced_by: &str) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            produced_by: produced_by.to_string(),
        });
    }
    Ok(fs::read_to_string(path)?)
}

fn load_corpus(cfg: &PipelineConfig) -> Result<Corpus> {
    let path = artifacts::corpus(&cfg.out_dir);
    let corpus = Corpus::from_json(&read_artifact(&path, "gen-corpus")?)
        .map_err(|e| Error::MalformedArtifact {
            path: path.clone(),
            detail: e.to_string(),
        })?;
    if corpus.config != cfg.corpus {
        return Err(Error::MalformedArtifact {
            path,
            detail: "corpus.json was generated with a different corpus config; rerun gen-corpus"
                .into(),
        });
    }
    Ok(corpus)
}

fn load_model(cfg: &PipelineConfig) -> Result<Parameters> {
    let path = artifacts::model(&cfg.out_dir);
    let params = Parameters::from_checkpoint_json(&read_artifact(&path, "train")?)
        .map_err(|e| Error::MalformedArtifact {
            path: path.clone(),
            detail: e.to_string(),
        })?;
    if *params.config() != cfg.model_config() {
        return Err(Error::MalformedArtifact {
            path,
            detail: "model.ckpt was trained with a different model config; rerun train".into(),
        });
    }
    Ok(params)
}

fn load_scores(cfg: &PipelineConfig, method: &str) -> Result<ScoreTable> {
    let csv_path = artifacts::scores(&cfg.out_dir, method);
    let meta_path = artifacts::scores_meta(&cfg.out_dir, method);
    let csv = read_artifact(&csv_path, "attribute")?;
    let meta = read_artifact(&meta_path, "attribute")?;
    ScoreTable::from_csv(&csv, &meta).map_err(|e| Error::MalformedArtifact {
        path: csv_path,
        detail: e.to_string(),
    })
}

fn load_mask(cfg: &PipelineConfig, method: MaskMethod, fraction: f64) -> Result<NeuronMask> {
    let csv_path = artifacts::mask(&cfg.out_dir, method, fraction);
    let meta_path = artifacts::mask_meta(&cfg.out_dir, method, fraction);
    let csv = read_artifact(&csv_path, "select")?;
    let meta = read_artifact(&meta_path, "select")?;
    NeuronMask::from_csv(&csv, &meta).map_err(|e| Error::MalformedArtifact {
        path: csv_path,
        detail: e.to_string(),
    })
}

fn test_split(cfg: &PipelineConfig, corpus: &Corpus) -> Result<(Dataset, Dataset)> {
    split(&corpus.dataset(), cfg.split.train_fraction, cfg.split.seed)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

pub fn cmd_gen_corpus(cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    fs::write(artifacts::corpus(&cfg.out_dir), corpus.to_json())?;
    Ok(())
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let (train_set, _) = test_split(cfg, &corpus)?;
    let initial = init_params(&cfg.model_config(), cfg.model.init_seed)?;
    let (trained, history) = train(&initial, &train_set, &cfg.train)?;
    fs::write(artifacts::model(&cfg.out_dir), trained.to_checkpoint_json())?;
    fs::write(artifacts::history(&cfg.out_dir), history_to_csv(&history))?;
    Ok(())
}

pub fn cmd_attribute(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let params = load_model(cfg)?;
    let (_, test_set) = test_split(cfg, &corpus)?;

    let act = activation_scores(&params, &test_set)?;
    fs::write(artifacts::scores(&cfg.out_dir, "activation"), act.to_csv())?;
    fs::write(
        artifacts::scores_meta(&cfg.out_dir, "activation"),
        act.meta_json(),
    )?;

    let ig = ig_scores(&params, &test_set, &cfg.ig)?;
    fs::write(artifacts::scores(&cfg.out_dir, "ig"), ig.to_csv())?;
    fs::write(artifacts::scores_meta(&cfg.out_dir, "ig"), ig.meta_json())?;
    Ok(())
}

pub fn cmd_select(cfg: &PipelineConfig) -> Result<()> {
    let act = load_scores(cfg, "activation")?;
    let ig = load_scores(cfg, "ig")?;
    let model_cfg = cfg.model_config();

    for &fraction in &cfg.fractions {
        let random = select_random(
            model_cfg.num_layers,
            model_cfg.embed_dim,
            fraction,
            cfg.random_seeds[0],
        )?;
        let activation = select_by_score(&act, fraction)?;
        let ig_mask = select_by_score(&ig, fraction)?;
        for mask in [&random, &activation, &ig_mask] {
            fs::write(
                artifacts::mask(&cfg.out_dir, mask.method(), fraction),
                mask.to_csv(),
            )?;
            fs::write(
                artifacts::mask_meta(&cfg.out_dir, mask.method(), fraction),
                mask.meta_json(),
            )?;
        }
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let params = load_model(cfg)?;
    let act = load_scores(cfg, "activation")?;
    let ig = load_scores(cfg, "ig")?;
    let (_, test_set) = test_split(cfg, &corpus)?;
    let grid = build_grid(
        &params,
        &test_set,
        &act,
        &ig,
        &cfg.grid_fractions(),
        &cfg.random_seeds,
    )?;
    fs::write(artifacts::grid_csv(&cfg.out_dir), grid.to_csv())?;
    fs::write(
        artifacts::grid_json(&cfg.out_dir),
        serde_json::to_string_pretty(&grid)?,
    )?;
    Ok(())
}

pub fn cmd_report(cfg: &PipelineConfig) -> Result<()> {
    let grid_path = artifacts::grid_json(&cfg.out_dir);
    let grid: AccuracyGrid = serde_json::from_str(&read_artifact(&grid_path, "evaluate")?)
        .map_err(|e| Error::MalformedArtifact {
            path: grid_path,
            detail: e.to_string(),
        })?;
    let mut heatmaps = Vec::new();
    for &fraction in &cfg.fractions {
        for method in GRID_METHODS {
            let mask = load_mask(cfg, method, fraction)?;
            heatmaps.push((method, fraction, heatmap(&mask, cfg.bin_size)?));
        }
    }
    emit(&grid, &heatmaps, cfg.bin_size, &cfg.out_dir)?;
    Ok(())
}

pub fn cmd_all(cfg: &PipelineConfig) -> Result<()> {
    cmd_gen_corpus(cfg)?;
    cmd_train(cfg)?;
    cmd_attribute(cfg)?;
    cmd_select(cfg)?;
    cmd_evaluate(cfg)?;
    cmd_report(cfg)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Invariant suite (`check`)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn outcome(name: &str, pass: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        pass,
        detail,
    }
}

fn random_sequence(model_cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> LabeledSequence {
    LabeledSequence {
        tokens: (0..model_cfg.seq_len)
            .map(|_| rng.gen_range(0..model_cfg.alphabet_size))
            .collect(),
        label: rng.gen_range(0..model_cfg.num_classes),
    }
}

/// Runs the full invariant suite against the artifacts in `out_dir`:
/// gradient check, IG completeness (joint and per-weight), ablation
/// exactness, selection exactness, heatmap consistency, and byte-level
/// determinism of the regenerable artifacts.
pub fn cmd_check(cfg: &PipelineConfig) -> Result<Vec<CheckOutcome>> {
    let corpus = load_corpus(cfg)?;
    let params = load_model(cfg)?;
    let act = load_scores(cfg, "activation")?;
    let ig = load_scores(cfg, "ig")?;
    let (_, test_set) = test_split(cfg, &corpus)?;
    let model_cfg = cfg.model_config();
    let mut out = Vec::new();

    // Determinism: corpus regeneration is byte-identical.
    {
        let regen = generate_corpus(&cfg.corpus)?.to_json();
        let on_disk = fs::read_to_string(artifacts::corpus(&cfg.out_dir))?;
        out.push(outcome(
            "corpus-determinism",
            regen == on_disk,
            format!("{} bytes", on_disk.len()),
        ));
    }

    // Determinism: checkpoint round-trip is byte-identical.
    {
        let on_disk = fs::read_to_string(artifacts::model(&cfg.out_dir))?;
        let roundtrip = Parameters::from_checkpoint_json(&on_disk)?.to_checkpoint_json();
        out.push(outcome(
            "checkpoint-roundtrip",
            roundtrip == on_disk,
            format!("{} bytes", on_disk.len()),
        ));
    }

    // Gradient check against the finite-difference oracle.
    {
        let ex = &test_set.examples()[0];
        let err = finite_diff_check(&params, ex, 100, 1e-6, 0)?;
        out.push(outcome(
            "gradient-check",
            err <= 1e-4,
            format!("max relative error {err:.3e} (limit 1e-4)"),
        ));
    }

    // Joint-path completeness on 20 test examples at m = 256.
    {
        let ig_cfg = IGConfig {
            riemann_steps: 256,
            rule: RiemannRule::Midpoint,
            path_mode: PathMode::Joint,
        };
        let mut worst: f64 = 0.0;
        let mut pass = true;
        for ex in test_set.examples().iter().take(20) {
            let full = correct_class_prob(&params, ex, None)?;
            let ablated = correct_class_prob(&params.scale_qkv(0.0), ex, None)?;
            let delta = full - ablated;
            let sum: f64 = ig_joint_for_example(&params, ex, &ig_cfg)?.iter().sum();
            let residual = (sum - delta).abs();
            let allowed = (0.01 * delta.abs()).max(1e-4);
            worst = worst.max(residual / allowed);
            pass &= residual <= allowed;
        }
        out.push(outcome(
            "ig-joint-completeness",
            pass,
            format!("worst residual/allowed ratio {worst:.3}"),
        ));
    }

    // Per-weight completeness on 20 sampled weights at m = 1024.
    {
        let ig_cfg = IGConfig {
            riemann_steps: 1024,
            rule: RiemannRule::Midpoint,
            path_mode: PathMode::PerWeight,
        };
        let ex = &test_set.examples()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let indices = rand::seq::index::sample(&mut rng, params.qkv_param_count(), 20);
        let mut worst: f64 = 0.0;
        let mut pass = true;
        for i in indices {
            let w = params.weight_ref_from_flat(i);
            let ig_val = ig_weight(&params, ex, w, &ig_cfg)?;
            let full = correct_class_prob(&params, ex, None)?;
            let mut zeroed = params.clone();
            zeroed.set_qkv(w, 0.0);
            let without = correct_class_prob(&zeroed, ex, None)?;
            let delta = full - without;
            let rel = (ig_val - delta).abs() / delta.abs().max(1e-4);
            worst = worst.max(rel);
            pass &= rel <= 0.01;
        }
        out.push(outcome(
            "ig-per-weight-completeness",
            pass,
            format!("worst relative error {worst:.3e} (limit 1e-2)"),
        ));
    }

    // Ablation exactness on 50 random inputs.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pass = true;
        for trial in 0..50u64 {
            let seq = random_sequence(&model_cfg, &mut rng);
            let mask = select_random(model_cfg.num_layers, model_cfg.embed_dim, 0.5, trial)?;
            let masked = forward(&params, &seq, Some(&mask))?;
            let applied = forward(&apply_mask(&params, &mask)?, &seq, None)?;
            for (a, b) in masked
                .probabilities()
                .iter()
                .zip(applied.probabilities())
            {
                pass &= a.to_bits() == b.to_bits();
            }
            for id in neuron_ids(&model_cfg) {
                if !mask.keeps(id) {
                    for t in 0..model_cfg.seq_len {
                        pass &= masked.activation(id, t) == 0.0;
                    }
                }
            }
        }
        // All-keep mask is a bit-exact identity.
        let all_keep = NeuronMask::all_keep(
            model_cfg.num_neurons(),
            model_cfg.num_layers,
            model_cfg.embed_dim,
        );
        let seq = random_sequence(&model_cfg, &mut rng);
        let a = forward(&params, &seq, Some(&all_keep))?;
        let b = forward(&params, &seq, None)?;
        for (x, y) in a.probabilities().iter().zip(b.probabilities()) {
            pass &= x.to_bits() == y.to_bits();
        }
        out.push(outcome(
            "ablation-exactness",
            pass,
            "masked forward ≡ applied-mask forward, ablated traces exactly 0".into(),
        ));
    }

    // Selection exactness: cardinality, sort oracle, nesting.
    {
        let n = model_cfg.num_neurons();
        let mut pass = true;
        let mut detail = String::new();
        for table in [&act, &ig] {
            let mut sorted_fracs = cfg.fractions.clone();
            sorted_fracs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut prev: Option<NeuronMask> = None;
            for &fraction in &sorted_fracs {
                let mask = select_by_score(table, fraction)?;
                let expected = ((fraction * n as f64).ceil() as usize).min(n);
                if mask.kept_count() != expected {
                    pass = false;
                    detail = format!("kept {} != ceil = {expected}", mask.kept_count());
                }
                // Independent oracle: sort (score desc, index asc), truncate.
                let scores = table.scores();
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
                });
                for (rank, &i) in order.iter().enumerate() {
                    pass &= mask.keep_slice()[i] == (rank < expected);
                }
                if let Some(p) = &prev {
                    for i in 0..n {
                        pass &= !p.keep_slice()[i] || mask.keep_slice()[i];
                    }
                }
                prev = Some(mask);
            }
        }
        for &fraction in &cfg.fractions {
            let mask = select_random(model_cfg.num_layers, model_cfg.embed_dim, fraction, 1)?;
            pass &= mask.kept_count() == ((fraction * n as f64).ceil() as usize).min(n);
        }
        if detail.is_empty() {
            detail = "cardinality, sort-oracle, and nesting all hold".into();
        }
        out.push(outcome("selection-exactness", pass, detail));
    }

    // Determinism: activation scores, masks, and grid rebuild byte-identically.
    {
        let recomputed = activation_scores(&params, &test_set)?;
        let on_disk = fs::read_to_string(artifacts::scores(&cfg.out_dir, "activation"))?;
        out.push(outcome(
            "activation-scores-determinism",
            recomputed.to_csv() == on_disk,
            format!("{} bytes", on_disk.len()),
        ));
    }
    {
        let mut pass = true;
        for &fraction in &cfg.fractions {
            let masks = [
                select_random(
                    model_cfg.num_layers,
                    model_cfg.embed_dim,
                    fraction,
                    cfg.random_seeds[0],
                )?,
                select_by_score(&act, fraction)?,
                select_by_score(&ig, fraction)?,
            ];
            for mask in masks {
                let on_disk =
                    fs::read_to_string(artifacts::mask(&cfg.out_dir, mask.method(), fraction))?;
                pass &= mask.to_csv() == on_disk;
            }
        }
        out.push(outcome(
            "mask-determinism",
            pass,
            "mask files match recomputation".into(),
        ));
    }
    {
        let grid = build_grid(
            &params,
            &test_set,
            &act,
            &ig,
            &cfg.grid_fractions(),
            &cfg.random_seeds,
        )?;
        let on_disk = fs::read_to_string(artifacts::grid_csv(&cfg.out_dir))?;
        out.push(outcome(
            "grid-determinism",
            grid.to_csv() == on_disk,
            format!("{} bytes", on_disk.len()),
        ));
    }

    // Heatmap consistency: size-weighted bin mean reconstructs the kept count.
    {
        let mut pass = true;
        for &fraction in &cfg.fractions {
            for method in GRID_METHODS {
                let mask = load_mask(cfg, method, fraction)?;
                let hm = heatmap(&mask, cfg.bin_size)?;
                let mut kept = 0usize;
                for row in &hm.rows {
                    for (b, &v) in row.bins.iter().enumerate() {
                        kept += (v * hm.bin_len(b) as f64).round() as usize;
                    }
                }
                pass &= kept == mask.kept_count();
            }
        }
        out.push(outcome(
            "heatmap-consistency",
            pass,
            "size-weighted bin densities reconstruct every mask's kept count".into(),
        ));
    }

    // Full-model accuracy is recorded in the grid and matches a fresh eval.
    {
        let full = accuracy(&params, &test_set)?;
        let grid_json = fs::read_to_string(artifacts::grid_json(&cfg.out_dir))?;
        let grid: AccuracyGrid = serde_json::from_str(&grid_json)?;
        let pass = grid.fractions.first() == Some(&1.0)
            && grid.cells.iter().all(|row| row[0] == full);
        out.push(outcome(
            "full-model-column",
            pass,
            format!("full-model accuracy {full:.4}"),
        ));
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = PipelineConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.fractions, vec![0.5, 0.25, 0.1, 0.01]);
        assert_eq!(cfg.grid_fractions(), vec![1.0, 0.5, 0.25, 0.1, 0.01]);
        assert_eq!(cfg.random_seeds.len(), 5);
    }

    #[test]
    fn overrides_apply_dotted_paths() {
        let cfg = load_config(
            None,
            &[
                "train.epochs=3".to_string(),
                "corpus.seq_len=32".to_string(),
                "out_dir=somewhere".to_string(),
                "fractions=[0.5,0.1]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.corpus.seq_len, 32);
        assert_eq!(cfg.out_dir, PathBuf::from("somewhere"));
        assert_eq!(cfg.fractions, vec![0.5, 0.1]);
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        assert!(load_config(None, &["no-equals-sign".to_string()]).is_err());
        assert!(load_config(None, &["fractions=[2.0]".to_string()]).is_err());
    }

    #[test]
    fn missing_artifact_names_file_and_producer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(
            None,
            &[format!("out_dir={}", dir.path().display())],
        )
        .unwrap();
        match cmd_evaluate(&cfg) {
            Err(Error::MissingArtifact { path, produced_by }) => {
                assert!(path.to_string_lossy().contains("corpus.json"));
                assert_eq!(produced_by, "gen-corpus");
            }
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
        // With a corpus present, evaluate must name model.ckpt / train next.
        cmd_gen_corpus(&cfg).unwrap();
        match cmd_evaluate(&cfg) {
            Err(Error::MissingArtifact { path, produced_by }) => {
                assert!(path.to_string_lossy().contains("model.ckpt"));
                assert_eq!(produced_by, "train");
            }
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
    }
}
