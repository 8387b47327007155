//! Mini-batch training of the classifier with an adaptive-moment optimizer
//! (Adam, β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
//!
//! Training is bit-reproducible: the shuffle order is driven by a seeded
//! ChaCha8 generator, per-example gradients within a batch may be computed in
//! parallel but are always combined in example-index order, and the optimizer
//! walks tensors in a fixed order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::grad::{backward, Objective};
use crate::model::Parameters;

// 100 epochs: at the fixed 1e-3 step size the default task needs ~90 epochs
// to clear 0.95 train accuracy; 30 stalls around 0.65.
fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_seed() -> u64 {
    0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            seed: default_seed(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be > 0".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig(
                "learning_rate and epsilon must be > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One history row. Epoch 0 is the pre-training state; for later epochs the
/// loss and accuracy are running means over the epoch's batches, measured
/// before each update step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,train_acc\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.epoch, h.loss, h.accuracy));
    }
    out
}

fn map_divergence(err: Error, epoch: usize) -> Error {
    match err {
        Error::NonFinite { tensor } => Error::Diverged {
            epoch,
            detail: format!("non-finite values in {tensor}"),
        },
        other => other,
    }
}

/// Minimizes mean cross-entropy over `train_set`, returning the trained
/// parameters and per-epoch history.
pub fn train(
    params: &Parameters,
    train_set: &Dataset,
    config: &TrainConfig,
) -> Result<(Parameters, Vec<EpochStats>)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model_cfg = params.config().clone();
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut moment1 = Parameters::zeros(&model_cfg);
    let mut moment2 = Parameters::zeros(&model_cfg);
    let mut step = 0u64;

    let mut history = Vec::with_capacity(config.epochs + 1);
    // Epoch 0: state before any update step.
    {
        let (loss, acc) = evaluate(&params, train_set).map_err(|e| map_divergence(e, 0))?;
        history.push(EpochStats {
            epoch: 0,
            loss,
            accuracy: acc,
        });
    }

    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;

        for batch in order.chunks(config.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &train_set.examples()[i];
                    backward(&params, &ex.tokens, ex.label, Objective::CrossEntropy)
                })
                .collect();

            // Combine in index order for bit-reproducibility.
            let mut grad_sum = Parameters::zeros(&model_cfg);
            for (&i, res) in batch.iter().zip(results) {
                let res = res.map_err(|e| map_divergence(e, epoch))?;
                let ex = &train_set.examples()[i];
                let py = res.probs[ex.label];
                loss_sum += -py.ln();
                if argmax(&res.probs) == ex.label {
                    correct += 1;
                }
                for (acc, g) in grad_sum.tensors_mut().into_iter().zip(res.grads.tensors()) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            if !loss_sum.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite batch loss".into(),
                });
            }

            // Adam step on the batch-mean gradient.
            step += 1;
            let scale = 1.0 / batch.len() as f64;
            let bc1 = 1.0 - config.beta1.powi(step as i32);
            let bc2 = 1.0 - config.beta2.powi(step as i32);
            let mut p_tensors = params.tensors_mut();
            let mut m_tensors = moment1.tensors_mut();
            let mut v_tensors = moment2.tensors_mut();
            let g_tensors = grad_sum.tensors();
            for t in 0..p_tensors.len() {
                let pt = &mut p_tensors[t];
                let mt = &mut m_tensors[t];
                let vt = &mut v_tensors[t];
                let gt = g_tensors[t];
                for j in 0..pt.len() {
                    let g = gt[j] * scale;
                    mt[j] = config.beta1 * mt[j] + (1.0 - config.beta1) * g;
                    vt[j] = config.beta2 * vt[j] + (1.0 - config.beta2) * g * g;
                    let mhat = mt[j] / bc1;
                    let vhat = vt[j] / bc2;
                    pt[j] -= config.learning_rate * mhat / (vhat.sqrt() + config.epsilon);
                }
            }
        }

        let loss = loss_sum / n as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "non-finite epoch loss".into(),
            });
        }
        history.push(EpochStats {
            epoch,
            loss,
            accuracy: correct as f64 / n as f64,
        });
    }

    Ok((params, history))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn evaluate(params: &Parameters, ds: &Dataset) -> Result<(f64, f64)> {
    let results: Vec<_> = ds
        .examples()
        .par_iter()
        .map(|ex| crate::model::forward(params, ex, None).map(|t| (t, ex.label)))
        .collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for res in results {
        let (trace, label) = res?;
        loss += -trace.probabilities()[label].ln();
        if argmax(trace.probabilities()) == label {
            correct += 1;
        }
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}
