//! Reverse-mode differentiation of the classifier, hand-derived against the
//! fixed architecture, plus a central finite-difference oracle.
//!
//! The backward pass produces gradients for every parameter tensor; the
//! public surface exposes the Q/K/V portion (the integrand of the attribution
//! path integral). Ablation is a parameter transformation, never a gradient
//! filter: gradients are always the true local derivatives at the given
//! parameter point.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::LabeledSequence;
use crate::error::{Error, Result};
use crate::model::{forward_cache, Parameters, WeightRef};
use crate::tensor::Matrix;

/// Which scalar output the backward pass differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Objective {
    /// `-ln p[label]` (training loss).
    CrossEntropy,
    /// `p[label]` itself (the attribution integrand `P_x`).
    CorrectProb,
}

pub(crate) struct BackwardResult {
    pub grads: Parameters,
    pub probs: Vec<f64>,
}

/// Gradients of `P_x` with respect to all Q/K/V weights and biases, stored in
/// the canonical flat order of [`Parameters::qkv_flat`].
#[derive(Clone, Debug)]
pub struct QKVGradient {
    num_layers: usize,
    embed_dim: usize,
    values: Vec<f64>,
}

impl QKVGradient {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: WeightRef) -> f64 {
        let d = self.embed_dim;
        let block = (r.layer * 3 + r.role.index()) * (d * d + d);
        let idx = match r.col {
            Some(c) => block + r.unit * d + c,
            None => block + d * d + r.unit,
        };
        self.values[idx]
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }
}

/// Describes the parameter point at which the gradient is evaluated: trained
/// weights, all Q/K/V scaled jointly by `alpha`, or a single weight scaled
/// with every other weight held at its trained value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScaleContext {
    Trained,
    Joint { alpha: f64 },
    SingleWeight { weight: WeightRef, alpha: f64 },
}

impl ScaleContext {
    pub(crate) fn apply(&self, params: &Parameters) -> Parameters {
        match *self {
            ScaleContext::Trained => params.clone(),
            ScaleContext::Joint { alpha } => params.scale_qkv(alpha),
            ScaleContext::SingleWeight { weight, alpha } => {
                let mut p = params.clone();
                p.set_qkv(weight, alpha * params.get_qkv(weight));
                p
            }
        }
    }
}

/// Exact reverse-mode gradient of `P_x` at the scaled parameter point.
/// Evaluating with [`ScaleContext::Trained`] gives the gradient at the
/// trained weights.
pub fn grad_correct_prob(
    params: &Parameters,
    example: &LabeledSequence,
    scale: ScaleContext,
) -> Result<QKVGradient> {
    let point = scale.apply(params);
    let result = backward(&point, &example.tokens, example.label, Objective::CorrectProb)?;
    Ok(extract_qkv(&result.grads))
}

pub(crate) fn extract_qkv(grads: &Parameters) -> QKVGradient {
    QKVGradient {
        num_layers: grads.config().num_layers,
        embed_dim: grads.config().embed_dim,
        values: grads.qkv_flat(),
    }
}

/// Central-difference check over `sample_size` uniformly sampled Q/K/V
/// weights. Returns the max relative error, with relative error defined as
/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn finite_diff_check(
    params: &Parameters,
    example: &LabeledSequence,
    sample_size: usize,
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    if sample_size == 0 {
        return Err(Error::InvalidConfig("sample_size must be > 0".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidConfig("epsilon must be > 0".into()));
    }
    let analytic = grad_correct_prob(params, example, ScaleContext::Trained)?;
    let count = params.qkv_param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, count, sample_size.min(count));

    let mut max_rel = 0.0f64;
    let mut probe = params.clone();
    for i in indices {
        let r = params.weight_ref_from_flat(i);
        let orig = params.get_qkv(r);
        probe.set_qkv(r, orig + epsilon);
        let plus = crate::model::correct_class_prob(&probe, example, None)?;
        probe.set_qkv(r, orig - epsilon);
        let minus = crate::model::correct_class_prob(&probe, example, None)?;
        probe.set_qkv(r, orig);
        let fd = (plus - minus) / (2.0 * epsilon);
        let a = analytic.values()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Full backward pass: gradients of the objective with respect to every
/// parameter tensor, plus the forward class probabilities.
pub(crate) fn backward(
    params: &Parameters,
    tokens: &[usize],
    label: usize,
    objective: Objective,
) -> Result<BackwardResult> {
    let cfg = params.config().clone();
    if label >= cfg.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "label {label} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let cache = forward_cache(params, tokens, None)?;
    let d = cfg.embed_dim;
    let tt = cfg.seq_len;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    let mut grads = Parameters::zeros(&cfg);
    let p = &cache.probs;

    // d objective / d logits.
    let mut dz = vec![0.0; cfg.num_classes];
    match objective {
        Objective::CrossEntropy => {
            for j in 0..cfg.num_classes {
                dz[j] = p[j] - if j == label { 1.0 } else { 0.0 };
            }
        }
        Objective::CorrectProb => {
            let py = p[label];
            for j in 0..cfg.num_classes {
                dz[j] = py * (if j == label { 1.0 } else { 0.0 } - p[j]);
            }
        }
    }

    // Classifier.
    let mut dpooled = vec![0.0; d];
    for c in 0..cfg.num_classes {
        let g = dz[c];
        let wr = params.classifier_w.row(c);
        let gw = grads.classifier_w.row_mut(c);
        for j in 0..d {
            gw[j] += g * cache.pooled[j];
            dpooled[j] += g * wr[j];
        }
        grads.classifier_b[c] += g;
    }

    // Mean pool: every position receives dpooled / T.
    let mut dy = Matrix::zeros(tt, d);
    for t in 0..tt {
        let row = dy.row_mut(t);
        for j in 0..d {
            row[j] = dpooled[j] / tt as f64;
        }
    }

    for l in (0..cfg.num_layers).rev() {
        let lc = &cache.layers[l];
        let lp = &params.layers[l];

        // Layernorm backward (or pass-through).
        let mut dr = Matrix::zeros(tt, d);
        if cfg.include_layernorm {
            let xhat = lc.ln_xhat.as_ref().expect("layernorm cache");
            let inv_sigma = lc.ln_inv_sigma.as_ref().expect("layernorm cache");
            let gl = &mut grads.layers[l];
            for t in 0..tt {
                let dyr = dy.row(t);
                let xh = xhat.row(t);
                let mut dxhat = vec![0.0; d];
                for j in 0..d {
                    gl.ln_gain[j] += dyr[j] * xh[j];
                    gl.ln_bias[j] += dyr[j];
                    dxhat[j] = dyr[j] * lp.ln_gain[j];
                }
                let m1 = dxhat.iter().sum::<f64>() / d as f64;
                let m2 = dxhat
                    .iter()
                    .zip(xh)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / d as f64;
                let drr = dr.row_mut(t);
                for j in 0..d {
                    drr[j] = inv_sigma[t] * (dxhat[j] - m1 - xh[j] * m2);
                }
            }
        } else {
            dr = dy.clone();
        }

        // Residual: dr feeds both the attention branch (via the output
        // projection) and the skip connection to the layer input.
        let mut dx = dr.clone();

        // Output projection backward.
        let mut dout = Matrix::zeros(tt, d);
        {
            let gl = &mut grads.layers[l];
            for t in 0..tt {
                let drr = dr.row(t);
                let or = lc.o.row(t);
                let dor = dout.row_mut(t);
                for u in 0..d {
                    let g = drr[u];
                    if g != 0.0 {
                        let wor = lp.wo.row(u);
                        let gwo = gl.wo.row_mut(u);
                        for j in 0..d {
                            gwo[j] += g * or[j];
                            dor[j] += g * wor[j];
                        }
                        gl.bo[u] += g;
                    }
                }
            }
        }

        // Attention backward per head.
        let mut dq = Matrix::zeros(tt, d);
        let mut dk = Matrix::zeros(tt, d);
        let mut dv = Matrix::zeros(tt, d);
        for h in 0..heads {
            let off = h * dh;
            let a = &lc.attn[h];

            // dA and dV from O = A · V.
            let mut da = Matrix::zeros(tt, tt);
            for t in 0..tt {
                let dor = &dout.row(t)[off..off + dh];
                let ar = a.row(t);
                let dar = da.row_mut(t);
                for s in 0..tt {
                    let vr = &lc.v.row(s)[off..off + dh];
                    let mut dot = 0.0;
                    for j in 0..dh {
                        dot += dor[j] * vr[j];
                    }
                    dar[s] = dot;
                    let w = ar[s];
                    let dvr = &mut dv.row_mut(s)[off..off + dh];
                    for j in 0..dh {
                        dvr[j] += w * dor[j];
                    }
                }
            }

            // Softmax backward, then the scaled dot product.
            for t in 0..tt {
                let ar = a.row(t);
                let dar = da.row_mut(t);
                let mut rowdot = 0.0;
                for s in 0..tt {
                    rowdot += dar[s] * ar[s];
                }
                for s in 0..tt {
                    dar[s] = ar[s] * (dar[s] - rowdot);
                }
                let ds_row = &*dar;
                let dqr = &mut dq.row_mut(t)[off..off + dh];
                for s in 0..tt {
                    let g = ds_row[s] * inv_sqrt_dh;
                    if g != 0.0 {
                        let kr = &lc.k.row(s)[off..off + dh];
                        for j in 0..dh {
                            dqr[j] += g * kr[j];
                        }
                    }
                }
                for s in 0..tt {
                    let g = ds_row[s] * inv_sqrt_dh;
                    if g != 0.0 {
                        let qr = &lc.q.row(t)[off..off + dh];
                        let dkr = &mut dk.row_mut(s)[off..off + dh];
                        for j in 0..dh {
                            dkr[j] += g * qr[j];
                        }
                    }
                }
            }
        }

        // Projection backward: dW = dYᵀ·X, db = colsum(dY), dX += dY·W.
        {
            let gl = &mut grads.layers[l];
            for (dmat, w, gw, gb) in [
                (&dq, &lp.wq, &mut gl.wq, &mut gl.bq),
                (&dk, &lp.wk, &mut gl.wk, &mut gl.bk),
                (&dv, &lp.wv, &mut gl.wv, &mut gl.bv),
            ] {
                for t in 0..tt {
                    let dmr = dmat.row(t);
                    let xr = lc.x.row(t);
                    let dxr = dx.row_mut(t);
                    for u in 0..d {
                        let g = dmr[u];
                        if g != 0.0 {
                            let wr = w.row(u);
                            let gwr = gw.row_mut(u);
                            for j in 0..d {
                                gwr[j] += g * xr[j];
                                dxr[j] += g * wr[j];
                            }
                            gb[u] += g;
                        }
                    }
                }
            }
        }

        dy = dx;
    }

    // Embedding backward (position encoding is constant).
    for (t, &tok) in tokens.iter().enumerate() {
        let dyr = dy.row(t);
        let ge = grads.embedding.row_mut(tok);
        for j in 0..d {
            ge[j] += dyr[j];
        }
    }

    // Name the first non-finite tensor, if any.
    let names = Parameters::tensor_names(&cfg);
    for (name, tensor) in names.iter().zip(grads.tensors()) {
        if !tensor.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: format!("gradient of {name}"),
            });
        }
    }

    Ok(BackwardResult {
        grads,
        probs: cache.probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, Role};
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            alphabet_size: 20,
            num_classes: 6,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            seq_len: 12,
            include_layernorm: true,
        }
    }

    fn random_seq(cfg: &ModelConfig, seed: u64) -> LabeledSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabeledSequence {
            tokens: (0..cfg.seq_len)
                .map(|_| rng.gen_range(0..cfg.alphabet_size))
                .collect(),
            label: rng.gen_range(0..cfg.num_classes),
        }
    }

    /// Compares the analytic gradient against central differences weight by
    /// weight. Central differences of an O(1) probability at ε=1e-6 carry
    /// rounding noise of about one ulp of the probability over 2ε (~5e-11),
    /// so the comparison allows that absolute slack on top of the 1e-4
    /// relative tolerance; tiny gradients are otherwise pure noise quotients.
    fn assert_fd_agreement(p: &Parameters, ex: &LabeledSequence, samples: usize, seed: u64) {
        let eps = 1e-6;
        let fd_noise = 2.0 * f64::EPSILON / (2.0 * eps);
        let analytic = grad_correct_prob(p, ex, ScaleContext::Trained).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices = rand::seq::index::sample(&mut rng, p.qkv_param_count(), samples);
        let mut probe = p.clone();
        for i in indices {
            let r = p.weight_ref_from_flat(i);
            let orig = p.get_qkv(r);
            probe.set_qkv(r, orig + eps);
            let plus = crate::model::correct_class_prob(&probe, ex, None).unwrap();
            probe.set_qkv(r, orig - eps);
            let minus = crate::model::correct_class_prob(&probe, ex, None).unwrap();
            probe.set_qkv(r, orig);
            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic.values()[i];
            let allowed = (1e-4 * a.abs().max(fd.abs())).max(fd_noise);
            assert!(
                (a - fd).abs() <= allowed,
                "weight {i}: analytic {a:e} vs fd {fd:e}"
            );
        }
    }

    #[test]
    fn finite_difference_agrees_at_untrained_point() {
        let cfg = cfg();
        let p = init_params(&cfg, 17).unwrap();
        assert_fd_agreement(&p, &random_seq(&cfg, 40), 100, 0);
    }

    #[test]
    fn finite_difference_agrees_at_scaled_point() {
        // The gradient-check property must hold at α-scaled points too.
        let cfg = cfg();
        let p = init_params(&cfg, 18).unwrap().scale_qkv(0.37);
        assert_fd_agreement(&p, &random_seq(&cfg, 41), 60, 1);
    }

    #[test]
    fn finite_diff_check_rejects_empty_sample() {
        let cfg = cfg();
        let p = init_params(&cfg, 1).unwrap();
        let ex = random_seq(&cfg, 42);
        assert!(finite_diff_check(&p, &ex, 0, 1e-6, 0).is_err());
        assert!(finite_diff_check(&p, &ex, 10, 0.0, 0).is_err());
    }

    #[test]
    fn finite_diff_check_is_deterministic_per_seed() {
        let cfg = cfg();
        let p = init_params(&cfg, 4).unwrap();
        let ex = LabeledSequence {
            tokens: (0..cfg.seq_len).map(|t| t % cfg.alphabet_size).collect(),
            label: 2,
        };
        let a = finite_diff_check(&p, &ex, 20, 1e-6, 9).unwrap();
        let b = finite_diff_check(&p, &ex, 20, 1e-6, 9).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn dead_path_weight_has_exactly_zero_gradient() {
        // One layer, no layernorm; zeroing column u of W_O cuts every path
        // from value unit u to the output, so its row gradient is exactly 0.
        let cfg = ModelConfig {
            num_layers: 1,
            include_layernorm: false,
            ..cfg()
        };
        let mut p = init_params(&cfg, 3).unwrap();
        let u = 5;
        for r in 0..cfg.embed_dim {
            p.layers[0].wo.set(r, u, 0.0);
        }
        let ex = random_seq(&cfg, 42);
        let g = grad_correct_prob(&p, &ex, ScaleContext::Trained).unwrap();
        for col in 0..cfg.embed_dim {
            assert_eq!(
                g.get(WeightRef {
                    layer: 0,
                    role: Role::Value,
                    unit: u,
                    col: Some(col)
                }),
                0.0
            );
        }
        assert_eq!(
            g.get(WeightRef {
                layer: 0,
                role: Role::Value,
                unit: u,
                col: None
            }),
            0.0
        );
    }

    #[test]
    fn class_gradients_sum_to_zero() {
        // Probabilities sum to the constant 1, so the per-class gradients of
        // P_x summed over all label choices vanish.
        let cfg = cfg();
        let p = init_params(&cfg, 8).unwrap();
        let mut ex = random_seq(&cfg, 42);
        let n = p.qkv_param_count();
        let mut total = vec![0.0; n];
        for c in 0..cfg.num_classes {
            ex.label = c;
            let g = grad_correct_prob(&p, &ex, ScaleContext::Trained).unwrap();
            for (t, v) in total.iter_mut().zip(g.values()) {
                *t += v;
            }
        }
        for v in total {
            assert!(v.abs() < 1e-10, "residual {v}");
        }
    }

    #[test]
    fn single_weight_scaling_touches_only_that_weight() {
        let cfg = cfg();
        let p = init_params(&cfg, 5).unwrap();
        let w = WeightRef {
            layer: 1,
            role: Role::Query,
            unit: 2,
            col: Some(3),
        };
        let scaled = ScaleContext::SingleWeight { weight: w, alpha: 0.5 }.apply(&p);
        assert_eq!(scaled.get_qkv(w), 0.5 * p.get_qkv(w));
        let i = p.flat_index(w);
        for (j, (a, b)) in scaled.qkv_flat().iter().zip(p.qkv_flat()).enumerate() {
            if j != i {
                assert_eq!(*a, b);
            }
        }
    }
}
