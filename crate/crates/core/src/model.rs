//! Model parameters and the manual forward/backward engine.
//!
//! A model owns full-width parameter tensors plus one set of normalization
//! statistics per candidate width. Computation at a width touches only the
//! selected units: forward activations are stored compactly, gradients are
//! scattered back into full-size zero tensors, so everything outside the
//! selection stays exactly zero.
//!
//! Selections are index lists rather than plain prefix lengths because the
//! random-dropout baselines train arbitrary unit subsets. Ordered width
//! selections are always prefixes `0..ceil(p*K)`.

use std::collections::BTreeMap;

use crate::arch::{Architecture, FeatureShape, LayerKind, Plan};
use crate::error::{Error, Result};
use crate::od::DropoutDistribution;
use crate::rng::{Rng, StreamId};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Map key for per-width state. Widths are exact f64 atoms constructed once,
/// so bitwise total ordering is a sound key.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WidthKey(pub f64);

impl Eq for WidthKey {}

impl PartialOrd for WidthKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for WidthKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Running normalization statistics for one width, indexed by original
/// channel position.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

impl BnStats {
    fn fresh(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            count: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Dense {
        /// Row-major `(out, in)`.
        w: Tensor,
        b: Option<Vec<f64>>,
    },
    Conv2d {
        /// Row-major `(out_ch, in_ch, k, k)`.
        w: Tensor,
        b: Option<Vec<f64>>,
    },
    Batchnorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        /// One stats entry per candidate width, sized to that width's kept
        /// channel count.
        stats: BTreeMap<WidthKey, BnStats>,
    },
    Stateless,
}

impl LayerParams {
    pub fn parameter_count(&self) -> usize {
        match self {
            LayerParams::Dense { w, b } | LayerParams::Conv2d { w, b } => {
                w.len() + b.as_ref().map_or(0, |b| b.len())
            }
            LayerParams::Batchnorm { gamma, beta, .. } => gamma.len() + beta.len(),
            LayerParams::Stateless => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrads {
    Dense { w: Tensor, b: Option<Vec<f64>> },
    Conv2d { w: Tensor, b: Option<Vec<f64>> },
    Batchnorm { gamma: Vec<f64>, beta: Vec<f64> },
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|lp| match lp {
                LayerParams::Dense { w, b } => LayerGrads::Dense {
                    w: Tensor::zeros(w.shape()),
                    b: b.as_ref().map(|b| vec![0.0; b.len()]),
                },
                LayerParams::Conv2d { w, b } => LayerGrads::Conv2d {
                    w: Tensor::zeros(w.shape()),
                    b: b.as_ref().map(|b| vec![0.0; b.len()]),
                },
                LayerParams::Batchnorm { gamma, beta, .. } => LayerGrads::Batchnorm {
                    gamma: vec![0.0; gamma.len()],
                    beta: vec![0.0; beta.len()],
                },
                LayerParams::Stateless => LayerGrads::None,
            })
            .collect();
        Gradients { layers }
    }

    /// Elementwise accumulate; shapes must match.
    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (
                    LayerGrads::Dense { w: wa, b: ba } | LayerGrads::Conv2d { w: wa, b: ba },
                    LayerGrads::Dense { w: wb, b: bb } | LayerGrads::Conv2d { w: wb, b: bb },
                ) => {
                    for (x, y) in wa.data_mut().iter_mut().zip(wb.data()) {
                        *x += *y;
                    }
                    if let (Some(ba), Some(bb)) = (ba, bb) {
                        for (x, y) in ba.iter_mut().zip(bb) {
                            *x += *y;
                        }
                    }
                }
                (
                    LayerGrads::Batchnorm { gamma: ga, beta: ta },
                    LayerGrads::Batchnorm { gamma: gb, beta: tb },
                ) => {
                    for (x, y) in ga.iter_mut().zip(gb) {
                        *x += *y;
                    }
                    for (x, y) in ta.iter_mut().zip(tb) {
                        *x += *y;
                    }
                }
                (LayerGrads::None, LayerGrads::None) => {}
                _ => panic!("gradient layout mismatch"),
            }
        }
    }
}

/// Which units participate in a pass: one sorted original-index list per
/// weight layer, plus the width key under which normalization statistics are
/// read and written.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    width_key: f64,
    kept: Vec<Vec<usize>>,
}

impl Selection {
    pub fn width_key(&self) -> f64 {
        self.width_key
    }

    pub fn kept(&self) -> &[Vec<usize>] {
        &self.kept
    }

    pub fn is_prefix(&self) -> bool {
        self.kept
            .iter()
            .all(|idx| idx.iter().enumerate().all(|(pos, &i)| pos == i))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward cache for one backward pass.
pub struct Tape {
    selection: Selection,
    plan: Plan,
    /// `acts[0]` is the input batch; `acts[l + 1]` leaves layer `l`.
    acts: Vec<Tensor>,
    extras: Vec<TapeExtra>,
    /// Original channel indices entering each layer.
    in_channels: Vec<Vec<usize>>,
}

enum TapeExtra {
    None,
    Pool { argmax: Vec<usize> },
    Bn { xhat: Tensor, inv_std: Vec<f64> },
}

impl Tape {
    pub fn logits(&self) -> &Tensor {
        self.acts.last().unwrap()
    }

    pub fn selection(&self) -> &Selection {
        &self.selection
    }
}

/// Batch statistics produced by a train-mode forward, to be folded into the
/// running statistics once the step is accepted.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub layer: usize,
    /// (original channel index, batch mean, unbiased batch variance)
    pub per_channel: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    dist: DropoutDistribution,
    layers: Vec<LayerParams>,
    /// Kept output counts per weight layer, per candidate width. Carried
    /// explicitly so that submodels sliced out of a parent keep the parent's
    /// ceiling arithmetic.
    kept_table: BTreeMap<WidthKey, Vec<usize>>,
}

impl Model {
    /// Fresh model with fan-in-scaled uniform weights (bound `1/sqrt(fan_in)`)
    /// and zero biases.
    pub fn new(arch: Architecture, dist: DropoutDistribution, seed: u64) -> Result<Self> {
        let plan = arch.plan_with_kept(&arch.full_kept_counts())?;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (idx, spec) in arch.layers.iter().enumerate() {
            let mut rng = Rng::substream(seed, StreamId::Init, &[idx as u64]);
            let lp = match spec.kind {
                LayerKind::Dense { width, bias } => {
                    let fan_in = plan.shapes[idx].count();
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let data = (0..width * fan_in)
                        .map(|_| rng.gen_range_f64(-bound, bound))
                        .collect();
                    LayerParams::Dense {
                        w: Tensor::from_vec(&[width, fan_in], data)?,
                        b: bias
                            .then(|| (0..width).map(|_| rng.gen_range_f64(-bound, bound)).collect()),
                    }
                }
                LayerKind::Conv2d {
                    filters,
                    kernel,
                    bias,
                } => {
                    let in_ch = match plan.shapes[idx] {
                        FeatureShape::Image { c, .. } => c,
                        FeatureShape::Vector { .. } => {
                            return Err(Error::InvalidArchitecture(
                                "conv layer needs image input".into(),
                            ))
                        }
                    };
                    let fan_in = in_ch * kernel * kernel;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let data = (0..filters * fan_in)
                        .map(|_| rng.gen_range_f64(-bound, bound))
                        .collect();
                    LayerParams::Conv2d {
                        w: Tensor::from_vec(&[filters, in_ch, kernel, kernel], data)?,
                        b: bias
                            .then(|| (0..filters).map(|_| rng.gen_range_f64(-bound, bound)).collect()),
                    }
                }
                LayerKind::Batchnorm => {
                    let channels = channel_count(plan.shapes[idx]);
                    let mut stats = BTreeMap::new();
                    for &p in dist.values() {
                        let kept = bn_kept_channels(&arch, idx, p)?;
                        stats.insert(WidthKey(p), BnStats::fresh(kept));
                    }
                    LayerParams::Batchnorm {
                        gamma: vec![1.0; channels],
                        beta: vec![0.0; channels],
                        stats,
                    }
                }
                _ => LayerParams::Stateless,
            };
            layers.push(lp);
        }
        let mut kept_table = BTreeMap::new();
        for &p in dist.values() {
            kept_table.insert(WidthKey(p), arch.kept_counts(p)?);
        }
        Ok(Model {
            arch,
            dist,
            layers,
            kept_table,
        })
    }

    /// Reassemble a model from parts (checkpoint load, submodel slicing).
    pub fn from_parts(
        arch: Architecture,
        dist: DropoutDistribution,
        layers: Vec<LayerParams>,
        kept_table: BTreeMap<WidthKey, Vec<usize>>,
    ) -> Self {
        Model {
            arch,
            dist,
            layers,
            kept_table,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn dist(&self) -> &DropoutDistribution {
        &self.dist
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn kept_table(&self) -> &BTreeMap<WidthKey, Vec<usize>> {
        &self.kept_table
    }

    /// Kept output counts per weight layer at candidate width `p`.
    pub fn kept_counts(&self, p: f64) -> Result<&[usize]> {
        self.kept_table
            .get(&WidthKey(p))
            .map(|v| v.as_slice())
            .ok_or(Error::WidthNotInDistribution(p))
    }

    /// Ordered (prefix) selection for a candidate width.
    pub fn prefix_selection(&self, p: f64) -> Result<Selection> {
        let kept = self
            .kept_counts(p)?
            .iter()
            .map(|&n| (0..n).collect())
            .collect();
        Ok(Selection { width_key: p, kept })
    }

    /// Arbitrary unit subsets (random-dropout baselines). Statistics are read
    /// and written under `width_key`, which must be a candidate width.
    pub fn masked_selection(&self, width_key: f64, kept: Vec<Vec<usize>>) -> Result<Selection> {
        let bounds = self.kept_counts(width_key)?;
        if kept.len() != bounds.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} weight layers", bounds.len()),
                actual: format!("{} index lists", kept.len()),
            });
        }
        for (idx, (list, &bound)) in kept.iter().zip(bounds).enumerate() {
            if list.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "empty selection for weight layer {idx}"
                )));
            }
            for w in list.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::InvalidConfig(
                        "selection indices must be strictly increasing".into(),
                    ));
                }
            }
            if *list.last().unwrap() >= bound {
                return Err(Error::InvalidConfig(format!(
                    "selection index {} out of range for width-{width_key} layer of {bound} units",
                    list.last().unwrap()
                )));
            }
        }
        Ok(Selection { width_key, kept })
    }

    /// Learnable parameters (weights, biases, normalization scale/shift)
    /// inside a selection. Running statistics are not parameters.
    pub fn selection_parameter_count(&self, sel: &Selection) -> usize {
        let plan = self.plan_for(sel).expect("selection was validated");
        let mut count = 0usize;
        let mut ordinal = 0usize;
        for (idx, spec) in self.arch.layers.iter().enumerate() {
            match spec.kind {
                LayerKind::Dense { bias, .. } => {
                    let out = sel.kept[ordinal].len();
                    let n_in = plan.shapes[idx].count();
                    count += out * n_in + if bias { out } else { 0 };
                    ordinal += 1;
                }
                LayerKind::Conv2d { kernel, bias, .. } => {
                    let out = sel.kept[ordinal].len();
                    let in_ch = channel_count(plan.shapes[idx]);
                    count += out * in_ch * kernel * kernel + if bias { out } else { 0 };
                    ordinal += 1;
                }
                LayerKind::Batchnorm => {
                    count += 2 * channel_count(plan.shapes[idx]);
                }
                _ => {}
            }
        }
        count
    }

    pub fn full_parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.parameter_count()).sum()
    }

    fn input_channels(&self) -> usize {
        match self.arch.input_feature_shape().expect("validated") {
            FeatureShape::Vector { n } => n,
            FeatureShape::Image { c, .. } => c,
        }
    }

    pub fn forward(&mut self, batch: &Tensor, p: f64, mode: Mode) -> Result<Tensor> {
        let sel = self.prefix_selection(p)?;
        match mode {
            Mode::Eval => self.forward_eval(batch, &sel),
            Mode::Train => {
                let (tape, updates) = self.forward_train(batch, &sel)?;
                self.commit_bn(&sel, &updates);
                Ok(tape.acts.into_iter().last().unwrap())
            }
        }
    }

    /// Evaluation-mode forward using running statistics for the selection's
    /// width key. Read-only: safe to call from many threads.
    pub fn forward_eval(&self, batch: &Tensor, sel: &Selection) -> Result<Tensor> {
        let (acts, _, _) = self.run_forward(batch, sel, Mode::Eval)?;
        Ok(acts.into_iter().last().unwrap())
    }

    /// Train-mode forward: normalization uses batch statistics, which are
    /// returned for a later `commit_bn` rather than applied in place, so the
    /// model stays immutable during the pass.
    pub fn forward_train(&self, batch: &Tensor, sel: &Selection) -> Result<(Tape, Vec<BnUpdate>)> {
        let (acts, extras, in_channels) = self.run_forward(batch, sel, Mode::Train)?;
        let mut updates = Vec::new();
        for (idx, extra) in extras.iter().enumerate() {
            if let TapeExtra::Bn { .. } = extra {
                // Recompute per-channel batch stats from the cached input.
                let x = &acts[idx];
                let channels = &in_channels[idx];
                let (mean, var) = bn_batch_stats(x, channels.len());
                let n = (x.len() / channels.len()) as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let per_channel = channels
                    .iter()
                    .enumerate()
                    .map(|(pos, &orig)| (orig, mean[pos], var[pos] * unbias))
                    .collect();
                updates.push(BnUpdate {
                    layer: idx,
                    per_channel,
                });
            }
        }
        let plan = self.plan_for(sel)?;
        Ok((
            Tape {
                selection: sel.clone(),
                plan,
                acts,
                extras,
                in_channels,
            },
            updates,
        ))
    }

    /// Fold batch statistics into the running statistics keyed by the
    /// selection's width. Statistics for other widths are untouched.
    pub fn commit_bn(&mut self, sel: &Selection, updates: &[BnUpdate]) {
        for up in updates {
            if let LayerParams::Batchnorm { stats, .. } = &mut self.layers[up.layer] {
                let entry = stats
                    .get_mut(&WidthKey(sel.width_key))
                    .expect("selection width key has stats");
                for &(orig, mean, var) in &up.per_channel {
                    entry.mean[orig] = (1.0 - BN_MOMENTUM) * entry.mean[orig] + BN_MOMENTUM * mean;
                    entry.var[orig] = (1.0 - BN_MOMENTUM) * entry.var[orig] + BN_MOMENTUM * var;
                }
                entry.count += 1;
            }
        }
    }

    fn plan_for(&self, sel: &Selection) -> Result<Plan> {
        let kept: Vec<usize> = sel.kept.iter().map(|k| k.len()).collect();
        self.arch.plan_with_kept(&kept)
    }

    #[allow(clippy::type_complexity)]
    fn run_forward(
        &self,
        batch: &Tensor,
        sel: &Selection,
        mode: Mode,
    ) -> Result<(Vec<Tensor>, Vec<TapeExtra>, Vec<Vec<usize>>)> {
        let input_shape = self.arch.input_feature_shape()?;
        let expected: Vec<usize> = input_shape.dims();
        if batch.shape().len() != expected.len() + 1 || batch.shape()[1..] != expected[..] {
            return Err(Error::ShapeMismatch {
                expected: format!("[batch, {expected:?}]"),
                actual: format!("{:?}", batch.shape()),
            });
        }
        if !batch.check_finite() {
            return Err(Error::NonFiniteLoss { step: 0, layer: 0 });
        }
        let plan = self.plan_for(sel)?;
        let b = batch.batch();
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.arch.layers.len() + 1);
        acts.push(batch.clone());
        let mut extras = Vec::with_capacity(self.arch.layers.len());
        let mut in_channels_all = Vec::with_capacity(self.arch.layers.len());

        let mut channels: Vec<usize> = (0..self.input_channels()).collect();
        let mut ordinal = 0usize;
        for (idx, spec) in self.arch.layers.iter().enumerate() {
            in_channels_all.push(channels.clone());
            let x = acts.last().unwrap();
            let (y, extra, out_channels) = match (&spec.kind, &self.layers[idx]) {
                (LayerKind::Dense { .. }, LayerParams::Dense { w, b: bias }) => {
                    let out_idx = &sel.kept[ordinal];
                    ordinal += 1;
                    let y = dense_forward(w, bias.as_deref(), x, &channels, out_idx);
                    (y, TapeExtra::None, out_idx.clone())
                }
                (LayerKind::Conv2d { kernel, .. }, LayerParams::Conv2d { w, b: bias }) => {
                    let out_idx = &sel.kept[ordinal];
                    ordinal += 1;
                    let (h, w_in) = match plan.shapes[idx] {
                        FeatureShape::Image { h, w, .. } => (h, w),
                        _ => unreachable!("validated: conv input is an image"),
                    };
                    let y = conv_forward(
                        w,
                        bias.as_deref(),
                        x,
                        &channels,
                        out_idx,
                        *kernel,
                        h,
                        w_in,
                    );
                    (y, TapeExtra::None, out_idx.clone())
                }
                (LayerKind::MaxPool2d { kernel }, _) => {
                    let (h, w_in) = match plan.shapes[idx] {
                        FeatureShape::Image { h, w, .. } => (h, w),
                        _ => unreachable!("validated: pool input is an image"),
                    };
                    let (y, argmax) = maxpool_forward(x, channels.len(), *kernel, h, w_in);
                    (y, TapeExtra::Pool { argmax }, channels.clone())
                }
                (LayerKind::Relu, _) => {
                    let mut y = x.clone();
                    for v in y.data_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    (y, TapeExtra::None, channels.clone())
                }
                (LayerKind::Flatten, _) => {
                    let y = Tensor::from_vec(&[b, x.len() / b], x.data().to_vec())?;
                    // Channel indices expand to per-channel feature blocks so
                    // downstream dense layers address the right weight columns.
                    let features = match plan.shapes[idx] {
                        FeatureShape::Image { h, w, .. } => {
                            let block = h * w;
                            let mut out = Vec::with_capacity(channels.len() * block);
                            for &c in &channels {
                                for s in 0..block {
                                    out.push(c * block + s);
                                }
                            }
                            out
                        }
                        FeatureShape::Vector { .. } => channels.clone(),
                    };
                    (y, TapeExtra::None, features)
                }
                (LayerKind::Batchnorm, LayerParams::Batchnorm { gamma, beta, stats }) => {
                    let spatial = x.len() / (b * channels.len());
                    let (y, extra) = match mode {
                        Mode::Train => {
                            let (mean, var) = bn_batch_stats(x, channels.len());
                            bn_normalize(x, &channels, spatial, &mean, &var, gamma, beta, true)
                        }
                        Mode::Eval => {
                            let entry = stats
                                .get(&WidthKey(sel.width_key))
                                .ok_or(Error::WidthNotInDistribution(sel.width_key))?;
                            let mean: Vec<f64> =
                                channels.iter().map(|&c| entry.mean[c]).collect();
                            let var: Vec<f64> = channels.iter().map(|&c| entry.var[c]).collect();
                            bn_normalize(x, &channels, spatial, &mean, &var, gamma, beta, false)
                        }
                    };
                    (y, extra, channels.clone())
                }
                (LayerKind::SoftmaxOutput, _) => (x.clone(), TapeExtra::None, channels.clone()),
                _ => unreachable!("parameters always match their layer spec"),
            };
            if !y.check_finite() {
                return Err(Error::NonFiniteLoss {
                    step: 0,
                    layer: idx,
                });
            }
            channels = out_channels;
            acts.push(y);
            extras.push(extra);
        }
        Ok((acts, extras, in_channels_all))
    }

    /// Backpropagate `d_logits` through the tape, producing full-size
    /// gradients that are exactly zero outside the tape's selection.
    pub fn backward(&self, tape: &Tape, d_logits: &Tensor) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        let logits = tape.logits();
        if d_logits.shape() != logits.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", logits.shape()),
                actual: format!("{:?}", d_logits.shape()),
            });
        }
        let mut delta = d_logits.clone();
        let mut ordinal = tape.selection.kept.len();
        for idx in (0..self.arch.layers.len()).rev() {
            let spec = &self.arch.layers[idx];
            let x = &tape.acts[idx];
            let y = &tape.acts[idx + 1];
            let channels = &tape.in_channels[idx];
            delta = match (&spec.kind, &self.layers[idx]) {
                (LayerKind::Dense { .. }, LayerParams::Dense { w, b: bias }) => {
                    ordinal -= 1;
                    let out_idx = &tape.selection.kept[ordinal];
                    let (dw, db, dx) =
                        dense_backward(w, bias.is_some(), x, &delta, channels, out_idx);
                    if let LayerGrads::Dense { w: gw, b: gb } = &mut grads.layers[idx] {
                        *gw = dw;
                        if let Some(gb) = gb {
                            *gb = db;
                        }
                    }
                    dx
                }
                (LayerKind::Conv2d { kernel, .. }, LayerParams::Conv2d { w, b: bias }) => {
                    ordinal -= 1;
                    let out_idx = &tape.selection.kept[ordinal];
                    let (h, w_in) = match tape.plan.shapes[idx] {
                        FeatureShape::Image { h, w, .. } => (h, w),
                        _ => unreachable!(),
                    };
                    let (dw, db, dx) = conv_backward(
                        w,
                        bias.is_some(),
                        x,
                        &delta,
                        channels,
                        out_idx,
                        *kernel,
                        h,
                        w_in,
                    );
                    if let LayerGrads::Conv2d { w: gw, b: gb } = &mut grads.layers[idx] {
                        *gw = dw;
                        if let Some(gb) = gb {
                            *gb = db;
                        }
                    }
                    dx
                }
                (LayerKind::MaxPool2d { .. }, _) => {
                    let argmax = match &tape.extras[idx] {
                        TapeExtra::Pool { argmax } => argmax,
                        _ => unreachable!(),
                    };
                    let mut dx = Tensor::zeros(x.shape());
                    for (out_flat, &in_flat) in argmax.iter().enumerate() {
                        dx.data_mut()[in_flat] += delta.data()[out_flat];
                    }
                    dx
                }
                (LayerKind::Relu, _) => {
                    let mut dx = delta.clone();
                    for (d, &out) in dx.data_mut().iter_mut().zip(y.data()) {
                        if out <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    dx
                }
                (LayerKind::Flatten, _) => Tensor::from_vec(x.shape(), delta.into_data())?,
                (LayerKind::Batchnorm, LayerParams::Batchnorm { gamma, .. }) => {
                    let (xhat, inv_std) = match &tape.extras[idx] {
                        TapeExtra::Bn { xhat, inv_std } => (xhat, inv_std),
                        _ => unreachable!(),
                    };
                    let spatial = x.len() / (tape.acts[0].batch() * channels.len());
                    let (dgamma, dbeta, dx) =
                        bn_backward(&delta, xhat, inv_std, gamma, channels, spatial);
                    if let LayerGrads::Batchnorm { gamma: gg, beta: gb } = &mut grads.layers[idx] {
                        for (pos, &orig) in channels.iter().enumerate() {
                            gg[orig] = dgamma[pos];
                            gb[orig] = dbeta[pos];
                        }
                    }
                    dx
                }
                (LayerKind::SoftmaxOutput, _) => delta,
                _ => unreachable!(),
            };
        }
        Ok(grads)
    }
}

fn channel_count(shape: FeatureShape) -> usize {
    match shape {
        FeatureShape::Vector { n } => n,
        FeatureShape::Image { c, .. } => c,
    }
}

/// Kept channel count entering a normalization layer at width `p`.
fn bn_kept_channels(arch: &Architecture, idx: usize, p: f64) -> Result<usize> {
    let plan = arch.plan_with_kept(&arch.kept_counts(p)?)?;
    Ok(channel_count(plan.shapes[idx]))
}

fn dense_forward(
    w: &Tensor,
    bias: Option<&[f64]>,
    x: &Tensor,
    in_features: &[usize],
    out_idx: &[usize],
) -> Tensor {
    let b = x.batch();
    let n_in = in_features.len();
    let full_in = w.shape()[1];
    let mut y = Tensor::zeros(&[b, out_idx.len()]);
    for s in 0..b {
        let xs = x.sample(s);
        let ys = &mut y.data_mut()[s * out_idx.len()..(s + 1) * out_idx.len()];
        for (o_pos, &o) in out_idx.iter().enumerate() {
            let row = &w.data()[o * full_in..(o + 1) * full_in];
            let mut acc = bias.map_or(0.0, |bv| bv[o]);
            for i_pos in 0..n_in {
                acc += row[in_features[i_pos]] * xs[i_pos];
            }
            ys[o_pos] = acc;
        }
    }
    y
}

fn dense_backward(
    w: &Tensor,
    has_bias: bool,
    x: &Tensor,
    delta: &Tensor,
    in_features: &[usize],
    out_idx: &[usize],
) -> (Tensor, Vec<f64>, Tensor) {
    let b = x.batch();
    let full_in = w.shape()[1];
    let full_out = w.shape()[0];
    let mut dw = Tensor::zeros(&[full_out, full_in]);
    let mut db = vec![0.0; if has_bias { full_out } else { 0 }];
    let mut dx = Tensor::zeros(x.shape());
    let n_in = in_features.len();
    for s in 0..b {
        let xs = x.sample(s);
        let ds = delta.sample(s);
        let dxs = &mut dx.data_mut()[s * n_in..(s + 1) * n_in];
        for (o_pos, &o) in out_idx.iter().enumerate() {
            let g = ds[o_pos];
            if has_bias {
                db[o] += g;
            }
            let row_w = &w.data()[o * full_in..(o + 1) * full_in];
            let row_dw = &mut dw.data_mut()[o * full_in..(o + 1) * full_in];
            for (i_pos, &i) in in_features.iter().enumerate() {
                row_dw[i] += g * xs[i_pos];
                dxs[i_pos] += g * row_w[i];
            }
        }
    }
    (dw, db, dx)
}

/// Unfold one sample's selected channels into tap-major rows of the output
/// grid, so the convolution becomes contiguous row operations.
fn fill_patch_rows(
    x_data: &[f64],
    x_base: usize,
    n_in: usize,
    k: usize,
    h: usize,
    w_in: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let spatial = oh * ow;
    let mut row = 0usize;
    for ci_pos in 0..n_in {
        let x_ch = x_base + ci_pos * h * w_in;
        for u in 0..k {
            for v in 0..k {
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oi in 0..oh {
                    let src = x_ch + (oi + u) * w_in + v;
                    dst[oi * ow..(oi + 1) * ow].copy_from_slice(&x_data[src..src + ow]);
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    w: &Tensor,
    bias: Option<&[f64]>,
    x: &Tensor,
    in_idx: &[usize],
    out_idx: &[usize],
    k: usize,
    h: usize,
    w_in: usize,
) -> Tensor {
    let b = x.batch();
    let oh = h - k + 1;
    let ow = w_in - k + 1;
    let spatial = oh * ow;
    let full_in = w.shape()[1];
    let n_in = in_idx.len();
    let k2 = k * k;
    let mut y = Tensor::zeros(&[b, out_idx.len(), oh, ow]);
    let x_data = x.data();
    let w_data = w.data();
    let y_data = y.data_mut();
    let mut cols = vec![0.0; n_in * k2 * spatial];
    for s in 0..b {
        fill_patch_rows(
            x_data,
            s * n_in * h * w_in,
            n_in,
            k,
            h,
            w_in,
            oh,
            ow,
            &mut cols,
        );
        for (co_pos, &co) in out_idx.iter().enumerate() {
            let y_base = ((s * out_idx.len()) + co_pos) * spatial;
            let y_row = &mut y_data[y_base..y_base + spatial];
            y_row.fill(bias.map_or(0.0, |bv| bv[co]));
            for (ci_pos, &ci) in in_idx.iter().enumerate() {
                let w_row = &w_data[((co * full_in) + ci) * k2..((co * full_in) + ci) * k2 + k2];
                for (t, &weight) in w_row.iter().enumerate() {
                    let col = &cols[(ci_pos * k2 + t) * spatial..(ci_pos * k2 + t + 1) * spatial];
                    for (yv, &cv) in y_row.iter_mut().zip(col) {
                        *yv += weight * cv;
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    w: &Tensor,
    has_bias: bool,
    x: &Tensor,
    delta: &Tensor,
    in_idx: &[usize],
    out_idx: &[usize],
    k: usize,
    h: usize,
    w_in: usize,
) -> (Tensor, Vec<f64>, Tensor) {
    let b = x.batch();
    let oh = h - k + 1;
    let ow = w_in - k + 1;
    let full_out = w.shape()[0];
    let full_in = w.shape()[1];
    let n_in = in_idx.len();
    let spatial = oh * ow;
    let k2 = k * k;
    let mut dw = Tensor::zeros(&[full_out, full_in, k, k]);
    let mut db = vec![0.0; if has_bias { full_out } else { 0 }];
    let mut dx = Tensor::zeros(x.shape());
    let x_data = x.data();
    let w_data = w.data();
    let d_data = delta.data();
    let dw_data = dw.data_mut();
    let dx_data = dx.data_mut();
    let mut cols = vec![0.0; n_in * k2 * spatial];
    let mut dcols = vec![0.0; n_in * k2 * spatial];
    for s in 0..b {
        let x_base = s * n_in * h * w_in;
        fill_patch_rows(x_data, x_base, n_in, k, h, w_in, oh, ow, &mut cols);
        dcols.fill(0.0);
        for (co_pos, &co) in out_idx.iter().enumerate() {
            let d_base = ((s * out_idx.len()) + co_pos) * spatial;
            let d_row = &d_data[d_base..d_base + spatial];
            if has_bias {
                db[co] += d_row.iter().sum::<f64>();
            }
            for (ci_pos, &ci) in in_idx.iter().enumerate() {
                let w_off = ((co * full_in) + ci) * k2;
                for t in 0..k2 {
                    let col =
                        &cols[(ci_pos * k2 + t) * spatial..(ci_pos * k2 + t + 1) * spatial];
                    let dcol = &mut dcols
                        [(ci_pos * k2 + t) * spatial..(ci_pos * k2 + t + 1) * spatial];
                    let weight = w_data[w_off + t];
                    let mut wgrad = 0.0;
                    for ((&g, &cv), dc) in d_row.iter().zip(col).zip(dcol.iter_mut()) {
                        wgrad += g * cv;
                        *dc += g * weight;
                    }
                    dw_data[w_off + t] += wgrad;
                }
            }
        }
        // Fold the patch-row gradients back onto the input grid.
        let mut row = 0usize;
        for ci_pos in 0..n_in {
            let x_ch = x_base + ci_pos * h * w_in;
            for u in 0..k {
                for v in 0..k {
                    let src = &dcols[row * spatial..(row + 1) * spatial];
                    for oi in 0..oh {
                        let dst = x_ch + (oi + u) * w_in + v;
                        let dxs = &mut dx_data[dst..dst + ow];
                        for (dxv, &g) in dxs.iter_mut().zip(&src[oi * ow..(oi + 1) * ow]) {
                            *dxv += g;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    (dw, db, dx)
}

fn maxpool_forward(
    x: &Tensor,
    n_ch: usize,
    k: usize,
    h: usize,
    w: usize,
) -> (Tensor, Vec<usize>) {
    let b = x.batch();
    let oh = h / k;
    let ow = w / k;
    let mut y = Tensor::zeros(&[b, n_ch, oh, ow]);
    let mut argmax = vec![0usize; b * n_ch * oh * ow];
    let x_data = x.data();
    for s in 0..b {
        for c in 0..n_ch {
            let ch_base = (s * n_ch + c) * h * w;
            let out_base = (s * n_ch + c) * oh * ow;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for u in 0..k {
                        for v in 0..k {
                            let idx = ch_base + (oi * k + u) * w + (oj * k + v);
                            if x_data[idx] > best {
                                best = x_data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y.data_mut()[out_base + oi * ow + oj] = best;
                    argmax[out_base + oi * ow + oj] = best_idx;
                }
            }
        }
    }
    (y, argmax)
}

/// Per-channel mean and biased variance over batch and spatial axes.
fn bn_batch_stats(x: &Tensor, n_ch: usize) -> (Vec<f64>, Vec<f64>) {
    let b = x.batch();
    let spatial = x.len() / (b * n_ch);
    let n = (b * spatial) as f64;
    let mut mean = vec![0.0; n_ch];
    let mut var = vec![0.0; n_ch];
    for s in 0..b {
        for c in 0..n_ch {
            let base = (s * n_ch + c) * spatial;
            for i in 0..spatial {
                mean[c] += x.data()[base + i];
            }
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for s in 0..b {
        for c in 0..n_ch {
            let base = (s * n_ch + c) * spatial;
            for i in 0..spatial {
                let d = x.data()[base + i] - mean[c];
                var[c] += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
fn bn_normalize(
    x: &Tensor,
    channels: &[usize],
    spatial: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    keep_cache: bool,
) -> (Tensor, TapeExtra) {
    let b = x.batch();
    let n_ch = channels.len();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = if keep_cache {
        Tensor::zeros(x.shape())
    } else {
        Tensor::zeros(&[0])
    };
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    for s in 0..b {
        for (c_pos, &c) in channels.iter().enumerate() {
            let base = (s * n_ch + c_pos) * spatial;
            for i in 0..spatial {
                let xh = (x.data()[base + i] - mean[c_pos]) * inv_std[c_pos];
                if keep_cache {
                    xhat.data_mut()[base + i] = xh;
                }
                y.data_mut()[base + i] = gamma[c] * xh + beta[c];
            }
        }
    }
    let extra = if keep_cache {
        TapeExtra::Bn { xhat, inv_std }
    } else {
        TapeExtra::None
    };
    (y, extra)
}

fn bn_backward(
    delta: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
    channels: &[usize],
    spatial: usize,
) -> (Vec<f64>, Vec<f64>, Tensor) {
    let b = delta.batch();
    let n_ch = channels.len();
    let n = (b * spatial) as f64;
    let mut dgamma = vec![0.0; n_ch];
    let mut dbeta = vec![0.0; n_ch];
    let mut sum_dxhat = vec![0.0; n_ch];
    let mut sum_dxhat_xhat = vec![0.0; n_ch];
    for s in 0..b {
        for (c_pos, &c) in channels.iter().enumerate() {
            let base = (s * n_ch + c_pos) * spatial;
            for i in 0..spatial {
                let dy = delta.data()[base + i];
                let xh = xhat.data()[base + i];
                dgamma[c_pos] += dy * xh;
                dbeta[c_pos] += dy;
                let dxh = dy * gamma[c];
                sum_dxhat[c_pos] += dxh;
                sum_dxhat_xhat[c_pos] += dxh * xh;
            }
        }
    }
    let mut dx = Tensor::zeros(delta.shape());
    for s in 0..b {
        for (c_pos, &c) in channels.iter().enumerate() {
            let base = (s * n_ch + c_pos) * spatial;
            for i in 0..spatial {
                let dy = delta.data()[base + i];
                let xh = xhat.data()[base + i];
                let dxh = dy * gamma[c];
                dx.data_mut()[base + i] = inv_std[c_pos]
                    * (dxh - sum_dxhat[c_pos] / n - xh * sum_dxhat_xhat[c_pos] / n);
            }
        }
    }
    (dgamma, dbeta, dx)
}
