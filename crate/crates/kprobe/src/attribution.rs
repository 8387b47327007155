//! Per-neuron importance scores, two ways: mean activation magnitude over the
//! test set, and integrated gradients along the path from zeroed Q/K/V
//! weights to the trained ones, discretized as a Riemann sum.
//!
//! The joint path scales every Q/K/V weight and bias together by α, so one
//! gradient evaluation per step yields the integrand for all weights at once.
//! The per-weight path (each weight integrated on its own path, others held
//! at trained values) is exact to the written formula but costs one gradient
//! evaluation per (weight, step) pair, so it is only supported for explicit
//! samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::MaskMethod;
use crate::corpus::{Dataset, LabeledSequence};
use crate::error::{Error, Result};
use crate::grad::{backward, Objective, ScaleContext};
use crate::model::{NeuronId, Parameters, WeightRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Activation,
    IntegratedGradients,
}

impl From<ScoreMethod> for MaskMethod {
    fn from(m: ScoreMethod) -> MaskMethod {
        match m {
            ScoreMethod::Activation => MaskMethod::Activation,
            ScoreMethod::IntegratedGradients => MaskMethod::IntegratedGradients,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiemannRule {
    Left,
    Midpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    Joint,
    PerWeight,
}

fn default_steps() -> usize {
    32
}
fn default_rule() -> RiemannRule {
    RiemannRule::Midpoint
}
fn default_path_mode() -> PathMode {
    PathMode::Joint
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IGConfig {
    #[serde(default = "default_steps")]
    pub riemann_steps: usize,
    #[serde(default = "default_rule")]
    pub rule: RiemannRule,
    #[serde(default = "default_path_mode")]
    pub path_mode: PathMode,
}

impl Default for IGConfig {
    fn default() -> Self {
        Self {
            riemann_steps: default_steps(),
            rule: default_rule(),
            path_mode: default_path_mode(),
        }
    }
}

impl IGConfig {
    pub fn validate(&self) -> Result<()> {
        if self.riemann_steps == 0 {
            return Err(Error::InvalidConfig("riemann_steps must be >= 1".into()));
        }
        Ok(())
    }

    fn alpha(&self, k: usize) -> f64 {
        match self.rule {
            RiemannRule::Left => k as f64 / self.riemann_steps as f64,
            RiemannRule::Midpoint => (k as f64 + 0.5) / self.riemann_steps as f64,
        }
    }
}

/// One nonnegative importance score per neuron, in canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    method: ScoreMethod,
    num_layers: usize,
    embed_dim: usize,
    scores: Vec<f64>,
    dataset_id: String,
    riemann_steps: Option<usize>,
    rule: Option<RiemannRule>,
    path_mode: Option<PathMode>,
}

impl ScoreTable {
    pub fn from_scores(
        method: ScoreMethod,
        num_layers: usize,
        embed_dim: usize,
        scores: Vec<f64>,
        dataset_id: String,
    ) -> Result<ScoreTable> {
        let expected = num_layers * 3 * embed_dim;
        if scores.len() != expected {
            return Err(Error::IncompleteScores {
                expected,
                got: scores.len(),
            });
        }
        if !scores.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(Error::NonFinite {
                tensor: "score table".into(),
            });
        }
        Ok(ScoreTable {
            method,
            num_layers,
            embed_dim,
            scores,
            dataset_id,
            riemann_steps: None,
            rule: None,
            path_mode: None,
        })
    }

    pub fn method(&self) -> ScoreMethod {
        self.method
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn expected_len(&self) -> usize {
        self.num_layers * 3 * self.embed_dim
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn get(&self, n: NeuronId) -> f64 {
        self.scores[n.canonical_index(self.embed_dim)]
    }

    /// CSV body `layer,role,unit,score`; scores carry 17 significant digits
    /// so parsing them back is bit-exact.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,role,unit,score\n");
        for (i, s) in self.scores.iter().enumerate() {
            let id = NeuronId::from_canonical(i, self.embed_dim);
            out.push_str(&format!(
                "{},{},{},{:.16e}\n",
                id.layer,
                id.role.short(),
                id.unit,
                s
            ));
        }
        out
    }

    pub fn meta_json(&self) -> String {
        #[derive(Serialize)]
        struct Meta<'a> {
            method: ScoreMethod,
            num_layers: usize,
            embed_dim: usize,
            dataset_id: &'a str,
            riemann_steps: Option<usize>,
            rule: Option<RiemannRule>,
            path_mode: Option<PathMode>,
        }
        serde_json::to_string(&Meta {
            method: self.method,
            num_layers: self.num_layers,
            embed_dim: self.embed_dim,
            dataset_id: &self.dataset_id,
            riemann_steps: self.riemann_steps,
            rule: self.rule,
            path_mode: self.path_mode,
        })
        .expect("score metadata serializes")
    }

    pub fn from_csv(csv: &str, meta_json: &str) -> Result<ScoreTable> {
        #[derive(Deserialize)]
        struct Meta {
            method: ScoreMethod,
            num_layers: usize,
            embed_dim: usize,
            dataset_id: String,
            riemann_steps: Option<usize>,
            rule: Option<RiemannRule>,
            path_mode: Option<PathMode>,
        }
        let meta: Meta = serde_json::from_str(meta_json)?;
        let n = meta.num_layers * 3 * meta.embed_dim;
        let mut scores = vec![f64::NAN; n];
        let mut seen = 0usize;
        for (lineno, line) in csv.lines().enumerate() {
            if lineno == 0 {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::ShapeMismatch(format!("bad score row: {line}")));
            }
            let id = NeuronId {
                layer: parts[0]
                    .parse()
                    .map_err(|_| Error::ShapeMismatch(format!("bad layer in: {line}")))?,
                role: crate::model::Role::parse(parts[1])
                    .ok_or_else(|| Error::ShapeMismatch(format!("bad role in: {line}")))?,
                unit: parts[2]
                    .parse()
                    .map_err(|_| Error::ShapeMismatch(format!("bad unit in: {line}")))?,
            };
            scores[id.canonical_index(meta.embed_dim)] = parts[3]
                .parse()
                .map_err(|_| Error::ShapeMismatch(format!("bad score in: {line}")))?;
            seen += 1;
        }
        if seen != n {
            return Err(Error::IncompleteScores {
                expected: n,
                got: seen,
            });
        }
        let mut table = ScoreTable::from_scores(
            meta.method,
            meta.num_layers,
            meta.embed_dim,
            scores,
            meta.dataset_id,
        )?;
        table.riemann_steps = meta.riemann_steps;
        table.rule = meta.rule;
        table.path_mode = meta.path_mode;
        Ok(table)
    }
}

/// Stable content id for a dataset (FNV-1a over tokens and labels).
pub fn dataset_id(ds: &Dataset) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for ex in ds.examples() {
        eat(ex.label as u64);
        for &t in &ex.tokens {
            eat(t as u64);
        }
    }
    format!("n{}-fnv{:016x}", ds.len(), h)
}

/// Mean activation magnitude per neuron over all test examples and token
/// positions. Accumulation order is fixed (example, then position).
pub fn activation_scores(params: &Parameters, test_set: &Dataset) -> Result<ScoreTable> {
    if test_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = params.config();
    let n = cfg.num_neurons();
    let seq_len = cfg.seq_len;

    let partials: Vec<Result<Vec<f64>>> = test_set
        .examples()
        .par_iter()
        .map(|ex| {
            let trace = crate::model::forward(params, ex, None)?;
            let mut partial = vec![0.0; n];
            for (i, p) in partial.iter_mut().enumerate() {
                let id = NeuronId::from_canonical(i, cfg.embed_dim);
                for t in 0..seq_len {
                    *p += trace.activation(id, t).abs();
                }
            }
            Ok(partial)
        })
        .collect();

    let mut totals = vec![0.0; n];
    for partial in partials {
        for (t, p) in totals.iter_mut().zip(partial?) {
            *t += p;
        }
    }
    let denom = (test_set.len() * seq_len) as f64;
    for t in &mut totals {
        *t /= denom;
    }

    ScoreTable::from_scores(
        ScoreMethod::Activation,
        cfg.num_layers,
        cfg.embed_dim,
        totals,
        dataset_id(test_set),
    )
}

/// Joint-path integrated gradients for a single example: one IG value per
/// Q/K/V parameter, in the canonical flat order of [`Parameters::qkv_flat`].
///
/// `scaled` must hold the parameter points `α_k · ŵ` for `k = 0..m` in step
/// order; [`ig_joint_for_example`] builds them if you only have the trained
/// parameters.
fn ig_joint_with_points(
    trained_flat: &[f64],
    scaled: &[Parameters],
    example: &LabeledSequence,
    m: usize,
) -> Result<Vec<f64>> {
    let mut grad_sum = vec![0.0; trained_flat.len()];
    for point in scaled {
        let res = backward(point, &example.tokens, example.label, Objective::CorrectProb)?;
        for (acc, g) in grad_sum.iter_mut().zip(res.grads.qkv_flat()) {
            *acc += g;
        }
    }
    let inv_m = 1.0 / m as f64;
    Ok(trained_flat
        .iter()
        .zip(grad_sum)
        .map(|(w, g)| w * g * inv_m)
        .collect())
}

/// Joint-path IG for one example at the trained parameters.
pub fn ig_joint_for_example(
    params: &Parameters,
    example: &LabeledSequence,
    cfg: &IGConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let scaled: Vec<Parameters> = (0..cfg.riemann_steps)
        .map(|k| params.scale_qkv(cfg.alpha(k)))
        .collect();
    ig_joint_with_points(&params.qkv_flat(), &scaled, example, cfg.riemann_steps)
}

/// Per-weight-path IG for a single referenced weight or bias: only that
/// parameter is scaled along the path, all others stay at trained values.
pub fn ig_weight(
    params: &Parameters,
    example: &LabeledSequence,
    weight_ref: WeightRef,
    cfg: &IGConfig,
) -> Result<f64> {
    cfg.validate()?;
    let trained = params.get_qkv(weight_ref);
    let flat = params.flat_index(weight_ref);
    let mut grad_sum = 0.0;
    for k in 0..cfg.riemann_steps {
        let point = ScaleContext::SingleWeight {
            weight: weight_ref,
            alpha: cfg.alpha(k),
        }
        .apply(params);
        let res = backward(&point, &example.tokens, example.label, Objective::CorrectProb)?;
        grad_sum += res.grads.qkv_flat()[flat];
    }
    Ok(trained * grad_sum / cfg.riemann_steps as f64)
}

/// Joint-path IG scores over the whole test set: per neuron, the mean over
/// examples of the mean over the neuron's `d + 1` parameters of `|IG|`.
/// The per-weight path over the full weight set is rejected (use
/// [`ig_weight`] on explicit samples instead).
pub fn ig_scores(params: &Parameters, test_set: &Dataset, cfg: &IGConfig) -> Result<ScoreTable> {
    cfg.validate()?;
    if test_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.path_mode == PathMode::PerWeight {
        return Err(Error::PerWeightFullSet);
    }
    let mcfg = params.config();
    let d = mcfg.embed_dim;
    let n = mcfg.num_neurons();
    let trained_flat = params.qkv_flat();
    let scaled: Vec<Parameters> = (0..cfg.riemann_steps)
        .map(|k| params.scale_qkv(cfg.alpha(k)))
        .collect();

    let per_example: Vec<Result<Vec<f64>>> = test_set
        .examples()
        .par_iter()
        .map(|ex| {
            let ig = ig_joint_with_points(&trained_flat, &scaled, ex, cfg.riemann_steps)?;
            // Aggregate |IG| over each neuron's d weights + 1 bias.
            let mut neuron = vec![0.0; n];
            for (i, acc) in neuron.iter_mut().enumerate() {
                let id = NeuronId::from_canonical(i, d);
                let block = (id.layer * 3 + id.role.index()) * (d * d + d);
                let row = block + id.unit * d;
                for c in 0..d {
                    *acc += ig[row + c].abs();
                }
                *acc += ig[block + d * d + id.unit].abs();
                *acc /= (d + 1) as f64;
            }
            Ok(neuron)
        })
        .collect();

    let mut totals = vec![0.0; n];
    for partial in per_example {
        for (t, p) in totals.iter_mut().zip(partial?) {
            *t += p;
        }
    }
    for t in &mut totals {
        *t /= test_set.len() as f64;
    }

    let mut table = ScoreTable::from_scores(
        ScoreMethod::IntegratedGradients,
        mcfg.num_layers,
        mcfg.embed_dim,
        totals,
        dataset_id(test_set),
    )?;
    table.riemann_steps = Some(cfg.riemann_steps);
    table.rule = Some(cfg.rule);
    table.path_mode = Some(cfg.path_mode);
    Ok(table)
}
