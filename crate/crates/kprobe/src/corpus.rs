//! Synthetic motif classification corpus.
//!
//! Each class is defined by a short planted motif over a 20-symbol alphabet,
//! so "knowledge" (motif recognition) exists in the trained model to be
//! localized. Generation is fully deterministic for a fixed seed; the seeded
//! generator is ChaCha8 (`rand_chacha::ChaCha8Rng`), a published, portable
//! counter-based stream cipher PRNG.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_alphabet_size() -> usize {
    20
}
fn default_num_classes() -> usize {
    6
}
fn default_sequences_per_class() -> usize {
    200
}
fn default_seq_len() -> usize {
    64
}
fn default_motif_len() -> usize {
    5
}
fn default_mutation_prob() -> f64 {
    0.05
}
fn default_seed() -> u64 {
    42
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    #[serde(default = "default_alphabet_size")]
    pub alphabet_size: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_sequences_per_class")]
    pub sequences_per_class: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_motif_len")]
    pub motif_len: usize,
    #[serde(default = "default_mutation_prob")]
    pub motif_mutation_prob: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            alphabet_size: default_alphabet_size(),
            num_classes: default_num_classes(),
            sequences_per_class: default_sequences_per_class(),
            seq_len: default_seq_len(),
            motif_len: default_motif_len(),
            motif_mutation_prob: default_mutation_prob(),
            seed: default_seed(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size == 0
            || self.sequences_per_class == 0
            || self.seq_len == 0
            || self.motif_len == 0
        {
            return Err(Error::InvalidConfig("all counts must be > 0".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.motif_len >= self.seq_len {
            return Err(Error::InvalidConfig(
                "motif_len must be < seq_len".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.motif_mutation_prob) {
            return Err(Error::InvalidConfig(
                "motif_mutation_prob must be in [0,1]".into(),
            ));
        }
        // Distinct motifs must exist for every class.
        if (self.alphabet_size as f64).powi(self.motif_len as i32) < self.num_classes as f64 {
            return Err(Error::InvalidConfig(format!(
                "cannot draw {} distinct motifs of length {} over a {}-symbol alphabet",
                self.num_classes, self.motif_len, self.alphabet_size
            )));
        }
        Ok(())
    }
}

/// A token sequence with its class label.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// An ordered collection of labeled sequences with per-class counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<LabeledSequence>,
    class_counts: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset, checking label ranges and near-balance (each class
    /// count within 1 of the mean).
    pub fn new(examples: Vec<LabeledSequence>, num_classes: usize) -> Result<Self> {
        let mut class_counts = vec![0usize; num_classes];
        for ex in &examples {
            if ex.label >= num_classes {
                return Err(Error::InvalidConfig(format!(
                    "label {} out of range for {} classes",
                    ex.label, num_classes
                )));
            }
            class_counts[ex.label] += 1;
        }
        let mean = examples.len() as f64 / num_classes as f64;
        for (c, &count) in class_counts.iter().enumerate() {
            if (count as f64 - mean).abs() > 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "class {c} has {count} sequences, more than 1 away from the mean {mean:.2}"
                )));
            }
        }
        Ok(Self {
            examples,
            class_counts,
        })
    }

    pub fn examples(&self) -> &[LabeledSequence] {
        &self.examples
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// A generated corpus: the config it came from, the per-class motifs, and the
/// sequences. This is the on-disk JSON schema for `corpus.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub motifs: Vec<Vec<usize>>,
    pub examples: Vec<LabeledSequence>,
}

impl Corpus {
    pub fn dataset(&self) -> Dataset {
        Dataset::new(self.examples.clone(), self.config.num_classes)
            .expect("generated corpus is balanced by construction")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("corpus serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Generates the synthetic corpus: one distinct motif per class, sequences of
/// uniform background tokens with the class motif planted at a random position
/// and each motif token independently mutated with `motif_mutation_prob`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut motifs: Vec<Vec<usize>> = Vec::with_capacity(config.num_classes);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    while motifs.len() < config.num_classes {
        let motif: Vec<usize> = (0..config.motif_len)
            .map(|_| rng.gen_range(0..config.alphabet_size))
            .collect();
        if seen.insert(motif.clone()) {
            motifs.push(motif);
        }
    }

    let mut examples = Vec::with_capacity(config.num_classes * config.sequences_per_class);
    for (class, motif) in motifs.iter().enumerate() {
        for _ in 0..config.sequences_per_class {
            let mut tokens: Vec<usize> = (0..config.seq_len)
                .map(|_| rng.gen_range(0..config.alphabet_size))
                .collect();
            let pos = rng.gen_range(0..=config.seq_len - config.motif_len);
            for (i, &m) in motif.iter().enumerate() {
                tokens[pos + i] = if rng.gen_bool(config.motif_mutation_prob) {
                    rng.gen_range(0..config.alphabet_size)
                } else {
                    m
                };
            }
            examples.push(LabeledSequence {
                tokens,
                label: class,
            });
        }
    }

    Ok(Corpus {
        config: config.clone(),
        motifs,
        examples,
    })
}

/// Stratified train/test split: per class, `round(train_fraction × count)`
/// examples go to the train set. The union of the two halves is a permutation
/// of the input; the shuffle is deterministic per seed.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::FractionOutOfRange(train_fraction));
    }
    let num_classes = dataset.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..num_classes {
        let mut idx: Vec<usize> = dataset
            .examples
            .iter()
            .enumerate()
            .filter(|(_, ex)| ex.label == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            if k < n_train {
                train.push(dataset.examples[i].clone());
            } else {
                test.push(dataset.examples[i].clone());
            }
        }
    }
    Ok((
        Dataset::new(train, num_classes)?,
        Dataset::new(test, num_classes)?,
    ))
}
