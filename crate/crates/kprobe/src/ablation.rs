//! Turning importance scores (or randomness) into neuron masks and submodels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::ScoreTable;
use crate::error::{Error, Result};
use crate::model::{NeuronId, Parameters, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMethod {
    Random,
    Activation,
    IntegratedGradients,
    Manual,
}

impl MaskMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMethod::Random => "random",
            MaskMethod::Activation => "activation",
            MaskMethod::IntegratedGradients => "ig",
            MaskMethod::Manual => "manual",
        }
    }
}

/// Boolean keep/ablate map over all `L × 3 × d` Q/K/V neurons, in canonical
/// `(layer, role, unit)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronMask {
    keep: Vec<bool>,
    num_layers: usize,
    embed_dim: usize,
    preserved_fraction: f64,
    method: MaskMethod,
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct MaskMeta {
    method: MaskMethod,
    preserved_fraction: f64,
    seed: Option<u64>,
    num_layers: usize,
    embed_dim: usize,
}

fn kept_count_for(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).min(n)
}

impl NeuronMask {
    pub fn from_keep(keep: Vec<bool>, num_layers: usize, embed_dim: usize) -> NeuronMask {
        assert_eq!(keep.len(), num_layers * 3 * embed_dim);
        let kept = keep.iter().filter(|&&k| k).count();
        let preserved_fraction = kept as f64 / keep.len() as f64;
        NeuronMask {
            keep,
            num_layers,
            embed_dim,
            preserved_fraction,
            method: MaskMethod::Manual,
            seed: None,
        }
    }

    pub fn all_keep(n: usize, num_layers: usize, embed_dim: usize) -> NeuronMask {
        Self::from_keep(vec![true; n], num_layers, embed_dim)
    }

    pub fn keeps(&self, n: NeuronId) -> bool {
        self.keep[n.canonical_index(self.embed_dim)]
    }

    pub fn keep_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn num_neurons(&self) -> usize {
        self.keep.len()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn preserved_fraction(&self) -> f64 {
        self.preserved_fraction
    }

    pub fn method(&self) -> MaskMethod {
        self.method
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// CSV body: `layer,role,unit,keep` in canonical order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,role,unit,keep\n");
        for (i, &k) in self.keep.iter().enumerate() {
            let id = NeuronId::from_canonical(i, self.embed_dim);
            out.push_str(&format!(
                "{},{},{},{}\n",
                id.layer,
                id.role.short(),
                id.unit,
                u8::from(k)
            ));
        }
        out
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string(&MaskMeta {
            method: self.method,
            preserved_fraction: self.preserved_fraction,
            seed: self.seed,
            num_layers: self.num_layers,
            embed_dim: self.embed_dim,
        })
        .expect("mask metadata serializes")
    }

    pub fn from_csv(csv: &str, meta_json: &str) -> Result<NeuronMask> {
        let meta: MaskMeta = serde_json::from_str(meta_json)?;
        let n = meta.num_layers * 3 * meta.embed_dim;
        let mut keep = vec![false; n];
        let mut seen = 0usize;
        for (lineno, line) in csv.lines().enumerate() {
            if lineno == 0 {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::ShapeMismatch(format!("bad mask row: {line}")));
            }
            let id = NeuronId {
                layer: parts[0]
                    .parse()
                    .map_err(|_| Error::ShapeMismatch(format!("bad layer in: {line}")))?,
                role: Role::parse(parts[1])
                    .ok_or_else(|| Error::ShapeMismatch(format!("bad role in: {line}")))?,
                unit: parts[2]
                    .parse()
                    .map_err(|_| Error::ShapeMismatch(format!("bad unit in: {line}")))?,
            };
            keep[id.canonical_index(meta.embed_dim)] = parts[3] == "1";
            seen += 1;
        }
        if seen != n {
            return Err(Error::ShapeMismatch(format!(
                "mask has {seen} rows, expected {n}"
            )));
        }
        Ok(NeuronMask {
            keep,
            num_layers: meta.num_layers,
            embed_dim: meta.embed_dim,
            preserved_fraction: meta.preserved_fraction,
            method: meta.method,
            seed: meta.seed,
        })
    }
}

/// Uniform sample without replacement of `ceil(fraction · N)` neurons.
pub fn select_random(
    num_layers: usize,
    embed_dim: usize,
    fraction: f64,
    seed: u64,
) -> Result<NeuronMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    let n = num_layers * 3 * embed_dim;
    let k = kept_count_for(fraction, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, k) {
        keep[i] = true;
    }
    Ok(NeuronMask {
        keep,
        num_layers,
        embed_dim,
        preserved_fraction: fraction,
        method: MaskMethod::Random,
        seed: Some(seed),
    })
}

/// Keeps the `ceil(fraction · N)` highest-scoring neurons; ties broken by
/// ascending canonical `(layer, role, unit)` order.
pub fn select_by_score(scores: &ScoreTable, fraction: f64) -> Result<NeuronMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    let values = scores.scores();
    let n = scores.expected_len();
    if values.len() != n {
        return Err(Error::IncompleteScores {
            expected: n,
            got: values.len(),
        });
    }
    let k = kept_count_for(fraction, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; n];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    Ok(NeuronMask {
        keep,
        num_layers: scores.num_layers(),
        embed_dim: scores.embed_dim(),
        preserved_fraction: fraction,
        method: scores.method().into(),
        seed: None,
    })
}

/// Physically applies the mask: each dropped neuron's incoming weight row and
/// bias entry become exactly `0.0`; every other value is bit-identical.
pub fn apply_mask(params: &Parameters, mask: &NeuronMask) -> Result<Parameters> {
    if mask.num_neurons() != params.num_neurons() {
        return Err(Error::ShapeMismatch(format!(
            "mask covers {} neurons, model has {}",
            mask.num_neurons(),
            params.num_neurons()
        )));
    }
    let mut out = params.clone();
    let d = params.config().embed_dim;
    for layer in 0..params.config().num_layers {
        for role in Role::ALL {
            let (w, b) = out.qkv_mut(layer, role);
            for unit in 0..d {
                if !mask.keeps(NeuronId { layer, role, unit }) {
                    for v in w.row_mut(unit) {
                        *v = 0.0;
                    }
                    b[unit] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{ScoreMethod, ScoreTable};
    use crate::corpus::LabeledSequence;
    use crate::model::{forward, init_params, ModelConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg_192() -> (usize, usize) {
        (2, 32) // N = 192
    }

    fn table(scores: Vec<f64>, num_layers: usize, embed_dim: usize) -> ScoreTable {
        ScoreTable::from_scores(
            ScoreMethod::Activation,
            num_layers,
            embed_dim,
            scores,
            "test".into(),
        )
        .unwrap()
    }

    #[test]
    fn random_selection_cardinalities() {
        let (l, d) = cfg_192();
        assert_eq!(select_random(l, d, 0.5, 1).unwrap().kept_count(), 96);
        assert_eq!(select_random(l, d, 0.01, 1).unwrap().kept_count(), 2);
        assert_eq!(select_random(l, d, 1.0, 1).unwrap().kept_count(), 192);
        assert!(select_random(l, d, 0.0, 1).is_err());
        assert!(select_random(l, d, 1.5, 1).is_err());
    }

    #[test]
    fn random_selection_is_deterministic() {
        let (l, d) = cfg_192();
        let a = select_random(l, d, 0.25, 7).unwrap();
        let b = select_random(l, d, 0.25, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equal_scores_keep_canonical_prefix() {
        let (l, d) = cfg_192();
        let n = l * 3 * d;
        let mask = select_by_score(&table(vec![1.0; n], l, d), 0.25).unwrap();
        let k = mask.kept_count();
        assert_eq!(k, 48);
        for (i, &keep) in mask.keep_slice().iter().enumerate() {
            assert_eq!(keep, i < k);
        }
    }

    #[test]
    fn unit_index_scores_keep_top_half_by_index() {
        // One layer, d = 6, score = unit index: top half per (layer, role)
        // row is units {3, 4, 5}.
        let (l, d) = (1, 6);
        let scores: Vec<f64> = (0..l * 3 * d).map(|i| (i % d) as f64).collect();
        let mask = select_by_score(&table(scores, l, d), 0.5).unwrap();
        for role in Role::ALL {
            for unit in 0..d {
                assert_eq!(
                    mask.keeps(NeuronId {
                        layer: 0,
                        role,
                        unit
                    }),
                    unit >= 3
                );
            }
        }
    }

    #[test]
    fn selection_matches_sort_and_truncate_oracle() {
        let (l, d) = cfg_192();
        let n = l * 3 * d;
        let mut rng = rand::thread_rng();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        for fraction in [0.5, 0.25, 0.1, 0.01] {
            let mask = select_by_score(&table(scores.clone(), l, d), fraction).unwrap();
            // Independent oracle: sort (score desc, index asc) pairs and truncate.
            let mut pairs: Vec<(usize, f64)> = scores.iter().cloned().enumerate().collect();
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let k = ((fraction * n as f64).ceil()) as usize;
            let mut expected = vec![false; n];
            for (i, _) in pairs.into_iter().take(k) {
                expected[i] = true;
            }
            assert_eq!(mask.keep_slice(), expected.as_slice());
        }
    }

    #[test]
    fn score_selection_is_nested_across_fractions() {
        let (l, d) = cfg_192();
        let n = l * 3 * d;
        let mut rng = rand::thread_rng();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t = table(scores, l, d);
        let fractions = [0.01, 0.1, 0.25, 0.5, 1.0];
        for w in fractions.windows(2) {
            let small = select_by_score(&t, w[0]).unwrap();
            let big = select_by_score(&t, w[1]).unwrap();
            for i in 0..n {
                assert!(!small.keep_slice()[i] || big.keep_slice()[i]);
            }
        }
    }

    fn model_fixture() -> (ModelConfig, Parameters) {
        let cfg = ModelConfig {
            alphabet_size: 20,
            num_classes: 6,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            seq_len: 12,
            include_layernorm: true,
        };
        let p = init_params(&cfg, 21).unwrap();
        (cfg, p)
    }

    #[test]
    fn apply_all_keep_is_identity() {
        let (cfg, p) = model_fixture();
        let mask = NeuronMask::all_keep(cfg.num_neurons(), cfg.num_layers, cfg.embed_dim);
        assert_eq!(apply_mask(&p, &mask).unwrap(), p);
    }

    #[test]
    fn apply_all_drop_zeroes_qkv_only() {
        let (cfg, p) = model_fixture();
        let mask = NeuronMask::from_keep(
            vec![false; cfg.num_neurons()],
            cfg.num_layers,
            cfg.embed_dim,
        );
        let out = apply_mask(&p, &mask).unwrap();
        assert!(out.qkv_flat().iter().all(|&v| v == 0.0));
        assert_eq!(out.embedding, p.embedding);
        assert_eq!(out.classifier_w, p.classifier_w);
        for (a, b) in out.layers.iter().zip(&p.layers) {
            assert_eq!(a.wo, b.wo);
            assert_eq!(a.ln_gain, b.ln_gain);
        }
    }

    #[test]
    fn masked_forward_equals_applied_mask_forward_bit_exact() {
        let (cfg, p) = model_fixture();
        let mut rng = rand::thread_rng();
        for trial in 0..10 {
            let mask = select_random(cfg.num_layers, cfg.embed_dim, 0.4, trial).unwrap();
            let applied = apply_mask(&p, &mask).unwrap();
            let seq = LabeledSequence {
                tokens: (0..cfg.seq_len)
                    .map(|_| rng.gen_range(0..cfg.alphabet_size))
                    .collect(),
                label: 0,
            };
            let a = forward(&p, &seq, Some(&mask)).unwrap();
            let b = forward(&applied, &seq, None).unwrap();
            for (x, y) in a.probabilities().iter().zip(b.probabilities()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn apply_mask_is_idempotent() {
        let (cfg, p) = model_fixture();
        let mask = select_random(cfg.num_layers, cfg.embed_dim, 0.3, 99).unwrap();
        let once = apply_mask(&p, &mask).unwrap();
        let twice = apply_mask(&once, &mask).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn mask_csv_roundtrip() {
        let mask = select_random(2, 8, 0.37, 5).unwrap();
        let back = NeuronMask::from_csv(&mask.to_csv(), &mask.meta_json()).unwrap();
        assert_eq!(mask, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn kept_count_is_ceiling(
            layers in 1usize..4,
            d in 1usize..40,
            fraction in 0.001f64..1.0,
            seed in 0u64..100,
        ) {
            let mask = select_random(layers, d, fraction, seed).unwrap();
            let n = layers * 3 * d;
            let expected = ((fraction * n as f64).ceil() as usize).min(n);
            prop_assert_eq!(mask.kept_count(), expected);
        }
    }
}
