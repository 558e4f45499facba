//! Shared oracles for integration tests. These deliberately take independent
//! routes from the library code they check.
#![allow(dead_code)]

use fjord_core::arch::{Architecture, LayerSpec};
use fjord_core::model::{Gradients, LayerGrads, LayerParams, Model, WidthKey};
use fjord_core::tensor::{kept_units, Tensor};
use fjord_core::Rng;

/// Random small architecture: a dense stack or a conv stack, sometimes with
/// normalization layers, always ending in a full-width head.
pub fn random_architecture(rng: &mut Rng) -> Architecture {
    if rng.gen_index(2) == 0 {
        // Dense stack on a vector input.
        let input = 2 + rng.gen_index(6);
        let depth = 1 + rng.gen_index(3);
        let mut layers = Vec::new();
        for _ in 0..depth {
            layers.push(LayerSpec::dense(3 + rng.gen_index(10), true));
            if rng.gen_index(3) == 0 {
                layers.push(LayerSpec::batchnorm());
            }
            layers.push(LayerSpec::relu());
        }
        layers.push(LayerSpec::dense(2 + rng.gen_index(4), false));
        layers.push(LayerSpec::softmax_output());
        Architecture::new(vec![input], layers).unwrap()
    } else {
        // Conv stack on a small image.
        let input_side = 7 + rng.gen_index(4);
        let mut side = input_side;
        let mut layers = Vec::new();
        layers.push(LayerSpec::conv2d(3 + rng.gen_index(6), 3, true));
        side -= 2;
        if rng.gen_index(3) == 0 {
            layers.push(LayerSpec::batchnorm());
        }
        layers.push(LayerSpec::relu());
        if rng.gen_index(2) == 0 && side >= 6 {
            layers.push(LayerSpec::maxpool2d(2));
            side /= 2;
        }
        if rng.gen_index(2) == 0 && side >= 3 {
            layers.push(LayerSpec::conv2d(3 + rng.gen_index(5), 3, true));
            layers.push(LayerSpec::relu());
        }
        layers.push(LayerSpec::flatten());
        layers.push(LayerSpec::dense(2 + rng.gen_index(4), false));
        layers.push(LayerSpec::softmax_output());
        Architecture::new(vec![1, input_side, input_side], layers).unwrap()
    }
}

/// Flatten all learnable parameters in deterministic layer order.
pub fn flatten_params(model: &Model) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in model.layers() {
        match layer {
            LayerParams::Dense { w, b } | LayerParams::Conv2d { w, b } => {
                out.extend_from_slice(w.data());
                if let Some(b) = b {
                    out.extend_from_slice(b);
                }
            }
            LayerParams::Batchnorm { gamma, beta, .. } => {
                out.extend_from_slice(gamma);
                out.extend_from_slice(beta);
            }
            LayerParams::Stateless => {}
        }
    }
    out
}

/// Flatten gradients in the same order as `flatten_params`.
pub fn flatten_grads(grads: &Gradients) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &grads.layers {
        match layer {
            LayerGrads::Dense { w, b } | LayerGrads::Conv2d { w, b } => {
                out.extend_from_slice(w.data());
                if let Some(b) = b {
                    out.extend_from_slice(b);
                }
            }
            LayerGrads::Batchnorm { gamma, beta } => {
                out.extend_from_slice(gamma);
                out.extend_from_slice(beta);
            }
            LayerGrads::None => {}
        }
    }
    out
}

/// Add `delta` to the k-th parameter in `flatten_params` order.
pub fn perturb_param(model: &mut Model, k: usize, delta: f64) {
    let mut idx = 0usize;
    for layer in model.layers_mut() {
        match layer {
            LayerParams::Dense { w, b } | LayerParams::Conv2d { w, b } => {
                if k < idx + w.len() {
                    w.data_mut()[k - idx] += delta;
                    return;
                }
                idx += w.len();
                if let Some(b) = b {
                    if k < idx + b.len() {
                        b[k - idx] += delta;
                        return;
                    }
                    idx += b.len();
                }
            }
            LayerParams::Batchnorm { gamma, beta, .. } => {
                if k < idx + gamma.len() {
                    gamma[k - idx] += delta;
                    return;
                }
                idx += gamma.len();
                if k < idx + beta.len() {
                    beta[k - idx] += delta;
                    return;
                }
                idx += beta.len();
            }
            LayerParams::Stateless => {}
        }
    }
    panic!("parameter index {k} out of range");
}

/// Central finite differences of a scalar loss over every parameter.
pub fn finite_difference_grads<F>(model: &Model, step: f64, mut loss_fn: F) -> Vec<f64>
where
    F: FnMut(&Model) -> f64,
{
    let n = flatten_params(model).len();
    let mut grads = Vec::with_capacity(n);
    for k in 0..n {
        let mut plus = model.clone();
        perturb_param(&mut plus, k, step);
        let mut minus = model.clone();
        perturb_param(&mut minus, k, -step);
        grads.push((loss_fn(&plus) - loss_fn(&minus)) / (2.0 * step));
    }
    grads
}

/// Largest relative error between two gradient vectors; entries where both
/// sides vanish are perfect matches.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &f) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(f.abs());
        if denom < 1e-7 {
            continue;
        }
        worst = worst.max((a - f).abs() / denom);
    }
    worst
}

/// Independent masking oracle: a full-width clone of `model` in which every
/// unit outside the width-`p` prefix has its incoming weights, outgoing
/// weights, bias and normalization scale/shift zeroed. The masked clone's
/// full-width normalization statistics are overwritten with the `p`-width
/// statistics on the kept channels so that evaluation-mode forwards line up.
pub fn masked_clone(model: &Model, p: f64) -> Model {
    let mut masked = model.clone();
    let widths: Vec<(usize, bool)> = model
        .arch()
        .layers
        .iter()
        .filter(|s| s.has_weights())
        .map(|s| (s.width().unwrap(), s.od_eligible))
        .collect();
    let kept: Vec<usize> = widths
        .iter()
        .map(|&(k, elig)| if elig { kept_units(p, k) } else { k })
        .collect();

    let mut ordinal = 0usize;
    // Kept channel count feeding each layer, following the walk at full width.
    let input_channels = model.arch().input_shape[0];
    let mut in_kept = input_channels;
    let mut in_full = input_channels;
    for layer in masked.layers_mut() {
        match layer {
            LayerParams::Dense { w, b } => {
                let (out_full, in_dim) = (w.shape()[0], w.shape()[1]);
                let out_kept = kept[ordinal];
                // Dense input may be a flattened image: scale the kept channel
                // count by the spatial block size.
                let block = in_dim / in_full;
                let in_kept_features = in_kept * block;
                for o in 0..out_full {
                    for i in 0..in_dim {
                        if o >= out_kept || i >= in_kept_features {
                            w.data_mut()[o * in_dim + i] = 0.0;
                        }
                    }
                }
                if let Some(b) = b {
                    for o in out_kept..out_full {
                        b[o] = 0.0;
                    }
                }
                in_kept = out_kept;
                in_full = out_full;
                ordinal += 1;
            }
            LayerParams::Conv2d { w, b } => {
                let (out_full, in_dim) = (w.shape()[0], w.shape()[1]);
                let k2 = w.shape()[2] * w.shape()[3];
                let out_kept = kept[ordinal];
                for o in 0..out_full {
                    for i in 0..in_dim {
                        if o >= out_kept || i >= in_kept {
                            let base = (o * in_dim + i) * k2;
                            for v in &mut w.data_mut()[base..base + k2] {
                                *v = 0.0;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    for o in out_kept..out_full {
                        b[o] = 0.0;
                    }
                }
                in_kept = out_kept;
                in_full = out_full;
                ordinal += 1;
            }
            LayerParams::Batchnorm { gamma, beta, stats } => {
                // Channel count here may be a flattened feature count.
                let ch_full = gamma.len();
                let block = ch_full / in_full;
                let ch_kept = in_kept * block;
                for c in ch_kept..ch_full {
                    gamma[c] = 0.0;
                    beta[c] = 0.0;
                }
                let p_stats = stats
                    .get(&WidthKey(p))
                    .expect("width has statistics")
                    .clone();
                let full_key = WidthKey(1.0);
                let entry = stats.get_mut(&full_key).expect("full width has statistics");
                entry.mean[..ch_kept].copy_from_slice(&p_stats.mean[..ch_kept]);
                entry.var[..ch_kept].copy_from_slice(&p_stats.var[..ch_kept]);
            }
            LayerParams::Stateless => {}
        }
    }
    masked
}

/// Coverage of a prefix view at `cap`, flattened in `flatten_params` order:
/// true where the coordinate belongs to the view.
pub fn coverage_flat(model: &Model, cap: f64) -> Vec<bool> {
    let arch = model.arch();
    let kept = model.kept_counts(cap).expect("cap is a candidate width");
    let plan_p = arch.plan_with_kept(kept).expect("plan");
    let full = arch.full_kept_counts();
    let plan_full = arch.plan_with_kept(&full).expect("plan");
    let mut cover = Vec::new();
    let mut ordinal = 0usize;
    for (idx, spec) in arch.layers.iter().enumerate() {
        use fjord_core::arch::LayerKind;
        match spec.kind {
            LayerKind::Dense { width, bias } => {
                let in_kept = plan_p.shapes[idx].count();
                let in_full = plan_full.shapes[idx].count();
                let out_kept = kept[ordinal];
                ordinal += 1;
                for o in 0..width {
                    for i in 0..in_full {
                        cover.push(o < out_kept && i < in_kept);
                    }
                }
                if bias {
                    for o in 0..width {
                        cover.push(o < out_kept);
                    }
                }
            }
            LayerKind::Conv2d {
                filters, kernel, bias,
            } => {
                let ch_of = |s: fjord_core::FeatureShape| match s {
                    fjord_core::FeatureShape::Vector { n } => n,
                    fjord_core::FeatureShape::Image { c, .. } => c,
                };
                let in_kept = ch_of(plan_p.shapes[idx]);
                let in_full = ch_of(plan_full.shapes[idx]);
                let out_kept = kept[ordinal];
                ordinal += 1;
                for o in 0..filters {
                    for ci in 0..in_full {
                        for _ in 0..kernel * kernel {
                            cover.push(o < out_kept && ci < in_kept);
                        }
                    }
                }
                if bias {
                    for o in 0..filters {
                        cover.push(o < out_kept);
                    }
                }
            }
            LayerKind::Batchnorm => {
                let ch_of = |s: fjord_core::FeatureShape| match s {
                    fjord_core::FeatureShape::Vector { n } => n,
                    fjord_core::FeatureShape::Image { c, .. } => c,
                };
                let ch_kept = ch_of(plan_p.shapes[idx]);
                let ch_full = ch_of(plan_full.shapes[idx]);
                for _gamma_beta in 0..2 {
                    for c in 0..ch_full {
                        cover.push(c < ch_kept);
                    }
                }
            }
            _ => {}
        }
    }
    cover
}

/// Independent aggregation oracle: expand every packet to a full-size weight
/// picture plus a coverage mask, then take the per-coordinate sample-weighted
/// mean over covering packets, keeping the old value where nobody covers.
pub fn brute_force_aggregate(
    global: &Model,
    packets: &[(f64, usize, Model)],
) -> Vec<f64> {
    let old = flatten_params(global);
    let mut expanded = Vec::new();
    for (cap, n, sliced) in packets {
        let mut full = global.clone();
        fjord_core::submodel::write_back(&mut full, sliced).expect("write back");
        expanded.push((coverage_flat(global, *cap), *n as f64, flatten_params(&full)));
    }
    let mut out = Vec::with_capacity(old.len());
    for (k, &old_v) in old.iter().enumerate() {
        let mut acc = 0.0;
        let mut tot = 0.0;
        for (cover, w, vals) in &expanded {
            if cover[k] {
                acc += w * vals[k];
                tot += w;
            }
        }
        out.push(if tot > 0.0 { acc / tot } else { old_v });
    }
    out
}

/// Exactly orthogonal matrix built from a product of Givens rotations;
/// independent of any SVD routine.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> fjord_core::svd::Matrix {
    let mut m = fjord_core::svd::Matrix::identity(n);
    for _round in 0..3 {
        for i in 0..n.saturating_sub(1) {
            for j in (i + 1)..n {
                let theta = rng.gen_range_f64(0.0, std::f64::consts::TAU);
                let (s, c) = theta.sin_cos();
                for r in 0..n {
                    let mi = m.get(r, i);
                    let mj = m.get(r, j);
                    m.set(r, i, c * mi - s * mj);
                    m.set(r, j, s * mi + c * mj);
                }
            }
        }
    }
    m
}

/// Uniform random batch in [-1, 1].
pub fn random_batch(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range_f64(-1.0, 1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random class labels.
pub fn random_labels(rng: &mut Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_index(classes)).collect()
}
