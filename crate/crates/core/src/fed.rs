//! In-process federated orchestration: capability clusters, participant
//! sampling, local width-sampled training, segment-wise aggregation and the
//! random-dropout baselines.
//!
//! Every stochastic draw is keyed by (seed, round, client, step, purpose), so
//! clients may train in parallel and the run still reproduces the sequential
//! execution bit for bit: packets are collected in participant order and
//! aggregation is a single-owner sequential step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::LayerKind;
use crate::data::{partition_iid, partition_label_skew, Dataset};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::loss::cross_entropy;
use crate::metrics::{simulated_ms, MetricRow, MetricTrace, Split};
use crate::model::{LayerParams, Model, WidthKey};
use crate::od::DropoutDistribution;
use crate::optim::{LrSchedule, OptimizerState};
use crate::rng::{Rng, StreamId};
use crate::submodel::slice_for_training;
use crate::tensor::Tensor;
use crate::train::od_step;

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceCluster {
    pub id: usize,
    /// Capability cap: the widest candidate this cluster can run.
    pub p_max: f64,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub cluster: usize,
    pub shard: Vec<usize>,
}

impl ClientState {
    pub fn sample_count(&self) -> usize {
        self.shard.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionStrategy {
    Iid,
    LabelSkew { concentration: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederatedRunConfig {
    pub rounds: u64,
    /// Local mini-batch iterations per round; `None` runs one local epoch
    /// (`ceil(shard / batch)` iterations).
    pub local_iters: Option<usize>,
    pub participation: f64,
    pub num_clients: usize,
    pub drop_scale: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Step the learning rate down by 10x at 50% and 75% of the rounds.
    pub schedule_decay: bool,
    pub kd: DistillConfig,
    /// Random extension of each client's ordered view into the next tier,
    /// capped at this fraction of the tier's units.
    pub efd_extension: Option<f64>,
    /// Capability caps for cluster building when they differ from the
    /// model's own candidate set (independent-model baselines).
    pub cluster_dist: Option<DropoutDistribution>,
    pub partition: PartitionStrategy,
    pub seed: u64,
    pub eval_every: u64,
    pub quiet: bool,
}

impl FederatedRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be at least 1".into()));
        }
        if let Some(e) = self.local_iters {
            if e == 0 {
                return Err(Error::InvalidConfig(
                    "local iterations must be at least 1".into(),
                ));
            }
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "participation {} must lie in (0, 1]",
                self.participation
            )));
        }
        if self.num_clients == 0 {
            return Err(Error::InvalidConfig("need at least one client".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        self.kd.validate()?;
        if let Some(d) = self.efd_extension {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::InvalidConfig(format!(
                    "extension cap {d} must lie in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Client update: the trained view plus its sample weight and byte cost.
#[derive(Clone, Debug)]
pub struct UpdatePacket {
    pub client_id: usize,
    pub p_cap: f64,
    pub n: usize,
    pub bytes_up: u64,
    pub payload: Payload,
}

#[derive(Clone, Debug)]
pub enum Payload {
    /// Ordered prefix view, sliced to the cap.
    Prefix(Model),
    /// Arbitrary unit subsets per weight layer over a full-shaped model.
    Masked { kept: Vec<Vec<usize>>, model: Model },
}

/// First `n - 1` clusters take `ds/n` of the clients each; the high-end
/// cluster takes the rest. Arranged so that `ds = 1` yields exactly equal
/// shares.
pub fn cluster_shares(n: usize, drop_scale: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one cluster".into()));
    }
    let share = drop_scale / n as f64;
    let last = (1.0 - drop_scale) + share;
    if share <= 0.0 && n > 1 {
        return Err(Error::InvalidConfig(format!(
            "drop scale {drop_scale} gives empty low-end clusters"
        )));
    }
    if last <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "drop scale {drop_scale} gives an empty high-end cluster"
        )));
    }
    let mut shares = vec![share; n.saturating_sub(1)];
    shares.push(if n == 1 { 1.0 } else { last });
    Ok(shares)
}

/// One cluster per candidate width, in ascending capability order.
pub fn build_clusters(dist: &DropoutDistribution, drop_scale: f64) -> Result<Vec<DeviceCluster>> {
    let shares = cluster_shares(dist.len(), drop_scale)?;
    Ok(dist
        .values()
        .iter()
        .zip(shares)
        .enumerate()
        .map(|(id, (&p_max, share))| DeviceCluster { id, p_max, share })
        .collect())
}

/// Deterministic cluster assignment: exact largest-remainder quotas, then a
/// seeded shuffle.
pub fn assign_clients(num_clients: usize, clusters: &[DeviceCluster], rng: &mut Rng) -> Vec<usize> {
    let shares: Vec<f64> = clusters.iter().map(|c| c.share).collect();
    let quotas = crate::data::largest_remainder(&shares, num_clients);
    let mut assignment = Vec::with_capacity(num_clients);
    for (cluster, &q) in quotas.iter().enumerate() {
        assignment.extend(std::iter::repeat(cluster).take(q));
    }
    rng.shuffle(&mut assignment);
    assignment
}

/// Uniform sample without replacement of `round(fraction * n)` clients,
/// never fewer than one.
pub fn select_participants(num_clients: usize, fraction: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(Error::InvalidConfig("empty client pool".into()));
    }
    let count = ((fraction * num_clients as f64).round() as usize)
        .max(1)
        .min(num_clients);
    Ok(rng.sample_indices(num_clients, count))
}

fn gather_batch(
    dataset: &Dataset,
    shard: &[usize],
    step: usize,
    batch: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let n = shard.len();
    let indices: Vec<usize> = (0..batch.min(n))
        .map(|j| shard[(step * batch + j) % n])
        .collect();
    let inputs = dataset.inputs.gather(&indices);
    let labels = indices
        .iter()
        .map(|&i| dataset.labels().map(|l| l[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok((inputs, labels))
}

fn epoch_iters(shard_len: usize, batch: usize) -> usize {
    shard_len.div_ceil(batch).max(1)
}

/// Local training for one capability-capped client: `E` iterations, each
/// sampling a width conditionally below the cap and updating only that
/// submodel. Returns the full cap-width view.
#[allow(clippy::too_many_arguments)]
pub fn local_train_fjord(
    global: &Model,
    client: &ClientState,
    p_cap: f64,
    dataset: &Dataset,
    cfg: &FederatedRunConfig,
    round: u64,
    lr_eff: f64,
) -> Result<(UpdatePacket, f64)> {
    if client.shard.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "client {} has an empty shard",
            client.id
        )));
    }
    let e = cfg
        .local_iters
        .unwrap_or_else(|| epoch_iters(client.shard.len(), cfg.batch_size));
    if e == 0 {
        return Err(Error::InvalidConfig(
            "local iterations must be at least 1".into(),
        ));
    }
    let mut local = slice_for_training(global, p_cap)?;
    let mut shard = client.shard.clone();
    let mut shuffle_rng = Rng::substream(
        cfg.seed,
        StreamId::Shuffle,
        &[round, client.id as u64],
    );
    shuffle_rng.shuffle(&mut shard);
    let mut opt = OptimizerState::new(lr_eff, cfg.momentum)?;
    let mut loss_sum = 0.0;
    for k in 0..e {
        let (inputs, labels) = gather_batch(dataset, &shard, k, cfg.batch_size)?;
        let mut width_rng = Rng::substream(
            cfg.seed,
            StreamId::WidthSample,
            &[round, client.id as u64, k as u64],
        );
        let dist = local.dist().clone();
        let cap = dist.max_width();
        let (loss, _) = od_step(
            &mut local,
            &inputs,
            &labels,
            &dist,
            cap,
            &cfg.kd,
            &mut width_rng,
            &mut opt,
        )?;
        loss_sum += loss;
    }
    let view_params = {
        let sel = local.prefix_selection(p_cap)?;
        local.selection_parameter_count(&sel) as u64
    };
    let packet = UpdatePacket {
        client_id: client.id,
        p_cap,
        n: client.shard.len(),
        bytes_up: 8 * view_params,
        payload: Payload::Prefix(local),
    };
    Ok((packet, loss_sum / e as f64))
}

/// Kept-index lists for a random subnetwork: each eligible layer keeps a
/// uniformly random subset of `ceil(ratio * kept)` units; ineligible layers
/// stay full.
pub fn random_kept_lists(
    model: &Model,
    width_key: f64,
    keep_ratio: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let bounds = model.kept_counts(width_key)?.to_vec();
    let eligible: Vec<bool> = model
        .arch()
        .layers
        .iter()
        .filter(|s| s.has_weights())
        .map(|s| s.od_eligible)
        .collect();
    let mut kept = Vec::with_capacity(bounds.len());
    for (&bound, &elig) in bounds.iter().zip(&eligible) {
        if !elig {
            kept.push((0..bound).collect());
            continue;
        }
        let count = ((keep_ratio * bound as f64).ceil() as usize).clamp(1, bound);
        let mut picked = rng.sample_indices(bound, count);
        picked.sort_unstable();
        kept.push(picked);
    }
    Ok(kept)
}

/// Ordered prefix at the cap plus a random extension into the next tier:
/// per eligible layer, at most `floor(d * tier_units)` extra units drawn from
/// the segment between the cap and the next candidate width.
pub fn extended_kept_lists(
    model: &Model,
    p_cap: f64,
    next_p: Option<f64>,
    d: f64,
    rng: &mut Rng,
) -> Result<(f64, Vec<Vec<usize>>)> {
    let base = model.kept_counts(p_cap)?.to_vec();
    let (width_key, upper) = match next_p {
        Some(np) => (np, model.kept_counts(np)?.to_vec()),
        None => (p_cap, base.clone()),
    };
    let eligible: Vec<bool> = model
        .arch()
        .layers
        .iter()
        .filter(|s| s.has_weights())
        .map(|s| s.od_eligible)
        .collect();
    let mut kept = Vec::with_capacity(base.len());
    for ((&lo, &hi), &elig) in base.iter().zip(&upper).zip(&eligible) {
        let mut list: Vec<usize> = (0..lo).collect();
        if elig && hi > lo {
            let tier = hi - lo;
            let ext = ((d * tier as f64).floor() as usize).min(tier);
            if ext > 0 {
                let mut extra = rng.sample_indices(tier, ext);
                extra.sort_unstable();
                list.extend(extra.into_iter().map(|i| lo + i));
            }
        }
        kept.push(list);
    }
    Ok((width_key, kept))
}

/// Local training over an arbitrary unit subset (random-dropout baselines
/// and the tier-extension variant). The round's mask is fixed; when
/// `ordered_cap` is set, each step additionally samples a conditional width
/// so only `prefix(p) ∪ extension` trains, mirroring ordered training below
/// the cap.
#[allow(clippy::too_many_arguments)]
pub fn local_train_masked(
    global: &Model,
    client: &ClientState,
    width_key: f64,
    kept: Vec<Vec<usize>>,
    dataset: &Dataset,
    cfg: &FederatedRunConfig,
    round: u64,
    lr_eff: f64,
    ordered_cap: Option<f64>,
) -> Result<(UpdatePacket, f64)> {
    if client.shard.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "client {} has an empty shard",
            client.id
        )));
    }
    let e = cfg
        .local_iters
        .unwrap_or_else(|| epoch_iters(client.shard.len(), cfg.batch_size));
    let mut local = global.clone();
    let mut shard = client.shard.clone();
    let mut shuffle_rng = Rng::substream(
        cfg.seed,
        StreamId::Shuffle,
        &[round, client.id as u64],
    );
    shuffle_rng.shuffle(&mut shard);
    let mut opt = OptimizerState::new(lr_eff, cfg.momentum)?;
    let mut loss_sum = 0.0;
    let cap_bounds = ordered_cap
        .map(|cap| local.kept_counts(cap).map(|c| c.to_vec()))
        .transpose()?;
    for k in 0..e {
        let (inputs, labels) = gather_batch(dataset, &shard, k, cfg.batch_size)?;
        let step_kept = match (ordered_cap, &cap_bounds) {
            (Some(cap), Some(bounds)) => {
                let mut width_rng = Rng::substream(
                    cfg.seed,
                    StreamId::WidthSample,
                    &[round, client.id as u64, k as u64],
                );
                let p = local.dist().sample_conditional(cap, &mut width_rng)?;
                let p_counts = local.kept_counts(p)?.to_vec();
                kept.iter()
                    .zip(&p_counts)
                    .zip(bounds)
                    .map(|((list, &p_kept), &cap_kept)| {
                        list.iter()
                            .copied()
                            .filter(|&u| u < p_kept || u >= cap_kept)
                            .collect::<Vec<usize>>()
                    })
                    .collect::<Vec<_>>()
            }
            _ => kept.clone(),
        };
        let sel = local.masked_selection(width_key, step_kept)?;
        let (tape, bn) = local.forward_train(&inputs, &sel)?;
        let (loss, dlogits) = crate::loss::cross_entropy_batch(tape.logits(), &labels)?;
        let grads = local.backward(&tape, &dlogits)?;
        crate::optim::sgd_step(&mut local, &grads, &mut opt);
        local.commit_bn(&sel, &bn);
        loss_sum += loss;
    }
    let sel = local.masked_selection(width_key, kept.clone())?;
    let bytes = 8 * local.selection_parameter_count(&sel) as u64;
    Ok((
        UpdatePacket {
            client_id: client.id,
            p_cap: width_key,
            n: client.shard.len(),
            bytes_up: bytes,
            payload: Payload::Masked {
                kept,
                model: local,
            },
        },
        loss_sum / e as f64,
    ))
}

// -- aggregation -----------------------------------------------------------

struct SegmentIndex {
    atoms: Vec<f64>,
    /// Per arch layer: input feature count at each atom (flattened for dense).
    in_kept: Vec<Vec<usize>>,
    /// Per arch layer: output unit count at each atom (weight layers only).
    out_kept: Vec<Vec<usize>>,
    /// Per arch layer: channel count entering the layer at each atom.
    ch_kept: Vec<Vec<usize>>,
}

impl SegmentIndex {
    fn build(model: &Model) -> Result<SegmentIndex> {
        let arch = model.arch();
        let atoms = model.dist().values().to_vec();
        let n_layers = arch.layers.len();
        let mut in_kept = vec![Vec::with_capacity(atoms.len()); n_layers];
        let mut out_kept = vec![Vec::with_capacity(atoms.len()); n_layers];
        let mut ch_kept = vec![Vec::with_capacity(atoms.len()); n_layers];
        for &p in &atoms {
            let kept = model.kept_counts(p)?;
            let plan = arch.plan_with_kept(kept)?;
            let mut ordinal = 0usize;
            for (idx, spec) in arch.layers.iter().enumerate() {
                in_kept[idx].push(plan.shapes[idx].count());
                ch_kept[idx].push(match plan.shapes[idx] {
                    crate::arch::FeatureShape::Vector { n } => n,
                    crate::arch::FeatureShape::Image { c, .. } => c,
                });
                if spec.has_weights() {
                    out_kept[idx].push(kept[ordinal]);
                    ordinal += 1;
                } else {
                    out_kept[idx].push(0);
                }
            }
        }
        Ok(SegmentIndex {
            atoms,
            in_kept,
            out_kept,
            ch_kept,
        })
    }

    /// Smallest atom index whose kept count covers `index`.
    fn segment_of(kept_per_atom: &[usize], index: usize) -> usize {
        for (j, &k) in kept_per_atom.iter().enumerate() {
            if index < k {
                return j;
            }
        }
        kept_per_atom.len()
    }
}

fn prefix_value(model: &Model, layer_idx: usize, kind: CoordKind) -> Option<f64> {
    let lp = &model.layers()[layer_idx];
    match (lp, kind) {
        (LayerParams::Dense { w, .. }, CoordKind::Weight { o, i }) => {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            (o < rows && i < cols).then(|| w.data()[o * cols + i])
        }
        (LayerParams::Conv2d { w, .. }, CoordKind::ConvWeight { o, ci, rest }) => {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let k2 = w.shape()[2] * w.shape()[3];
            (o < rows && ci < cols).then(|| w.data()[(o * cols + ci) * k2 + rest])
        }
        (LayerParams::Dense { b, .. }, CoordKind::Bias { o })
        | (LayerParams::Conv2d { b, .. }, CoordKind::Bias { o }) => {
            b.as_ref().and_then(|b| b.get(o).copied())
        }
        (LayerParams::Batchnorm { gamma, .. }, CoordKind::Gamma { c }) => gamma.get(c).copied(),
        (LayerParams::Batchnorm { beta, .. }, CoordKind::Beta { c }) => beta.get(c).copied(),
        _ => None,
    }
}

#[derive(Clone, Copy)]
enum CoordKind {
    Weight { o: usize, i: usize },
    ConvWeight { o: usize, ci: usize, rest: usize },
    Bias { o: usize },
    Gamma { c: usize },
    Beta { c: usize },
}

/// Segment-wise weighted aggregation of prefix packets. For each nested
/// segment the new value is the sample-weighted mean over the clients whose
/// cap covers it; segments no packet covers keep the previous global values.
/// Per-width normalization statistics aggregate the same way among the
/// clients whose cap admits the width. Returns false (and leaves the model
/// untouched) when no packets arrived.
pub fn aggregate(global: &mut Model, packets: &[UpdatePacket]) -> Result<bool> {
    if packets.is_empty() {
        return Ok(false);
    }
    let seg = SegmentIndex::build(global)?;
    let caps: Vec<f64> = packets.iter().map(|p| p.p_cap).collect();
    let weights: Vec<f64> = packets.iter().map(|p| p.n as f64).collect();
    let models: Vec<&Model> = packets
        .iter()
        .map(|p| match &p.payload {
            Payload::Prefix(m) => Ok(m),
            Payload::Masked { .. } => Err(Error::InvalidConfig(
                "segment aggregation expects prefix packets".into(),
            )),
        })
        .collect::<Result<_>>()?;
    // Total sample weight per segment: clients whose cap reaches the atom.
    let total_n: Vec<f64> = seg
        .atoms
        .iter()
        .map(|&s| {
            caps.iter()
                .zip(&weights)
                .filter(|(&c, _)| c >= s)
                .map(|(_, &w)| w)
                .sum()
        })
        .collect();

    let average =
        |layer_idx: usize, kind: CoordKind, segment: usize, old: f64| -> f64 {
            if segment >= seg.atoms.len() || total_n[segment] == 0.0 {
                return old;
            }
            let s = seg.atoms[segment];
            let mut acc = 0.0;
            let mut contributors = 0usize;
            let mut last = 0.0;
            for ((&cap, &w), model) in caps.iter().zip(&weights).zip(&models) {
                if cap >= s {
                    let v = prefix_value(model, layer_idx, kind)
                        .expect("covering packet holds the coordinate");
                    acc += w * v;
                    contributors += 1;
                    last = v;
                }
            }
            // A lone contributor's weights copy over exactly.
            if contributors == 1 {
                last
            } else {
                acc / total_n[segment]
            }
        };

    let n_layers = global.layers().len();
    for idx in 0..n_layers {
        let spec_kind = global.arch().layers[idx].kind.clone();
        match (&spec_kind, &global.layers()[idx]) {
            (LayerKind::Dense { .. }, LayerParams::Dense { w, b }) => {
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                let mut new_w = w.clone();
                for o in 0..rows {
                    let so = SegmentIndex::segment_of(&seg.out_kept[idx], o);
                    for i in 0..cols {
                        let si = SegmentIndex::segment_of(&seg.in_kept[idx], i);
                        let j = so.max(si);
                        let old = new_w.data()[o * cols + i];
                        new_w.data_mut()[o * cols + i] =
                            average(idx, CoordKind::Weight { o, i }, j, old);
                    }
                }
                let new_b = b.as_ref().map(|b| {
                    b.iter()
                        .enumerate()
                        .map(|(o, &old)| {
                            let j = SegmentIndex::segment_of(&seg.out_kept[idx], o);
                            average(idx, CoordKind::Bias { o }, j, old)
                        })
                        .collect::<Vec<f64>>()
                });
                if let LayerParams::Dense { w, b } = &mut global.layers_mut()[idx] {
                    *w = new_w;
                    *b = new_b;
                }
            }
            (LayerKind::Conv2d { .. }, LayerParams::Conv2d { w, b }) => {
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                let k2 = w.shape()[2] * w.shape()[3];
                let mut new_w = w.clone();
                for o in 0..rows {
                    let so = SegmentIndex::segment_of(&seg.out_kept[idx], o);
                    for ci in 0..cols {
                        let si = SegmentIndex::segment_of(&seg.ch_kept[idx], ci);
                        let j = so.max(si);
                        for rest in 0..k2 {
                            let flat = (o * cols + ci) * k2 + rest;
                            let old = new_w.data()[flat];
                            new_w.data_mut()[flat] =
                                average(idx, CoordKind::ConvWeight { o, ci, rest }, j, old);
                        }
                    }
                }
                let new_b = b.as_ref().map(|b| {
                    b.iter()
                        .enumerate()
                        .map(|(o, &old)| {
                            let j = SegmentIndex::segment_of(&seg.out_kept[idx], o);
                            average(idx, CoordKind::Bias { o }, j, old)
                        })
                        .collect::<Vec<f64>>()
                });
                if let LayerParams::Conv2d { w, b } = &mut global.layers_mut()[idx] {
                    *w = new_w;
                    *b = new_b;
                }
            }
            (LayerKind::Batchnorm, LayerParams::Batchnorm { gamma, beta, stats }) => {
                let mut new_gamma = gamma.clone();
                let mut new_beta = beta.clone();
                for c in 0..gamma.len() {
                    let j = SegmentIndex::segment_of(&seg.ch_kept[idx], c);
                    new_gamma[c] = average(idx, CoordKind::Gamma { c }, j, gamma[c]);
                    new_beta[c] = average(idx, CoordKind::Beta { c }, j, beta[c]);
                }
                // Statistics: weighted mean among clients admitting the width.
                let mut new_stats = stats.clone();
                for (j, &s) in seg.atoms.iter().enumerate() {
                    if total_n[j] == 0.0 {
                        continue;
                    }
                    let entry = new_stats.get_mut(&WidthKey(s)).expect("atom has stats");
                    let ch = entry.mean.len();
                    let mut mean = vec![0.0; ch];
                    let mut var = vec![0.0; ch];
                    let mut count_acc = 0.0;
                    for ((&cap, &w), model) in caps.iter().zip(&weights).zip(&models) {
                        if cap < s {
                            continue;
                        }
                        if let LayerParams::Batchnorm { stats: ps, .. } = &model.layers()[idx] {
                            let pe = ps.get(&WidthKey(s)).expect("packet admits width");
                            for c in 0..ch {
                                mean[c] += w * pe.mean[c];
                                var[c] += w * pe.var[c];
                            }
                            count_acc += w * pe.count as f64;
                        }
                    }
                    for c in 0..ch {
                        entry.mean[c] = mean[c] / total_n[j];
                        entry.var[c] = var[c] / total_n[j];
                    }
                    entry.count = (count_acc / total_n[j]).round() as u64;
                }
                if let LayerParams::Batchnorm { gamma, beta, stats } =
                    &mut global.layers_mut()[idx]
                {
                    *gamma = new_gamma;
                    *beta = new_beta;
                    *stats = new_stats;
                }
            }
            _ => {}
        }
    }
    Ok(true)
}

/// Per-coordinate weighted mean over the clients whose mask covers the
/// coordinate; uncovered coordinates keep the previous global values.
pub fn masked_aggregate(global: &mut Model, packets: &[UpdatePacket]) -> Result<bool> {
    if packets.is_empty() {
        return Ok(false);
    }
    struct Cover {
        weight: f64,
        model: Model,
        /// Per arch layer: covered input features and covered outputs.
        in_cov: Vec<Vec<bool>>,
        out_cov: Vec<Vec<bool>>,
    }
    let arch = global.arch().clone();
    let full_plan = arch.plan_with_kept(&arch.full_kept_counts())?;
    let mut covers = Vec::with_capacity(packets.len());
    for pkt in packets {
        let (kept, model) = match &pkt.payload {
            Payload::Masked { kept, model } => (kept.clone(), model.clone()),
            Payload::Prefix(_) => {
                return Err(Error::InvalidConfig(
                    "masked aggregation expects masked packets".into(),
                ))
            }
        };
        // Walk the layers propagating covered channels, mirroring the
        // forward pass.
        let input_ch = match full_plan.shapes[0] {
            crate::arch::FeatureShape::Vector { n } => n,
            crate::arch::FeatureShape::Image { c, .. } => c,
        };
        let mut channels: Vec<bool> = vec![true; input_ch];
        let mut in_cov = Vec::with_capacity(arch.layers.len());
        let mut out_cov = Vec::with_capacity(arch.layers.len());
        let mut ordinal = 0usize;
        for (idx, spec) in arch.layers.iter().enumerate() {
            in_cov.push(channels.clone());
            match spec.kind {
                LayerKind::Dense { width, .. } => {
                    let mut cov = vec![false; width];
                    for &u in &kept[ordinal] {
                        cov[u] = true;
                    }
                    ordinal += 1;
                    out_cov.push(cov.clone());
                    channels = cov;
                }
                LayerKind::Conv2d { filters, .. } => {
                    let mut cov = vec![false; filters];
                    for &u in &kept[ordinal] {
                        cov[u] = true;
                    }
                    ordinal += 1;
                    out_cov.push(cov.clone());
                    channels = cov;
                }
                LayerKind::Flatten => {
                    let block = match full_plan.shapes[idx] {
                        crate::arch::FeatureShape::Image { h, w, .. } => h * w,
                        crate::arch::FeatureShape::Vector { .. } => 1,
                    };
                    let mut feats = Vec::with_capacity(channels.len() * block);
                    for &c in &channels {
                        feats.extend(std::iter::repeat(c).take(block));
                    }
                    out_cov.push(feats.clone());
                    channels = feats;
                }
                _ => {
                    out_cov.push(channels.clone());
                }
            }
        }
        covers.push(Cover {
            weight: pkt.n as f64,
            model,
            in_cov,
            out_cov,
        });
    }

    for idx in 0..arch.layers.len() {
        match &global.layers()[idx] {
            LayerParams::Dense { w, b } => {
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                let mut new_w = w.clone();
                let mut new_b = b.clone();
                for o in 0..rows {
                    for i in 0..cols {
                        let mut acc = 0.0;
                        let mut tot = 0.0;
                        for cv in &covers {
                            if cv.out_cov[idx][o] && cv.in_cov[idx][i] {
                                if let LayerParams::Dense { w: pw, .. } = &cv.model.layers()[idx] {
                                    acc += cv.weight * pw.data()[o * cols + i];
                                    tot += cv.weight;
                                }
                            }
                        }
                        if tot > 0.0 {
                            new_w.data_mut()[o * cols + i] = acc / tot;
                        }
                    }
                }
                if let Some(nb) = &mut new_b {
                    for o in 0..rows {
                        let mut acc = 0.0;
                        let mut tot = 0.0;
                        for cv in &covers {
                            if cv.out_cov[idx][o] {
                                if let LayerParams::Dense { b: Some(pb), .. } =
                                    &cv.model.layers()[idx]
                                {
                                    acc += cv.weight * pb[o];
                                    tot += cv.weight;
                                }
                            }
                        }
                        if tot > 0.0 {
                            nb[o] = acc / tot;
                        }
                    }
                }
                if let LayerParams::Dense { w, b } = &mut global.layers_mut()[idx] {
                    *w = new_w;
                    *b = new_b;
                }
            }
            LayerParams::Conv2d { w, b } => {
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                let k2 = w.shape()[2] * w.shape()[3];
                let mut new_w = w.clone();
                let mut new_b = b.clone();
                for o in 0..rows {
                    for ci in 0..cols {
                        for rest in 0..k2 {
                            let flat = (o * cols + ci) * k2 + rest;
                            let mut acc = 0.0;
                            let mut tot = 0.0;
                            for cv in &covers {
                                if cv.out_cov[idx][o] && cv.in_cov[idx][ci] {
                                    if let LayerParams::Conv2d { w: pw, .. } =
                                        &cv.model.layers()[idx]
                                    {
                                        acc += cv.weight * pw.data()[flat];
                                        tot += cv.weight;
                                    }
                                }
                            }
                            if tot > 0.0 {
                                new_w.data_mut()[flat] = acc / tot;
                            }
                        }
                    }
                }
                if let Some(nb) = &mut new_b {
                    for o in 0..rows {
                        let mut acc = 0.0;
                        let mut tot = 0.0;
                        for cv in &covers {
                            if cv.out_cov[idx][o] {
                                if let LayerParams::Conv2d { b: Some(pb), .. } =
                                    &cv.model.layers()[idx]
                                {
                                    acc += cv.weight * pb[o];
                                    tot += cv.weight;
                                }
                            }
                        }
                        if tot > 0.0 {
                            nb[o] = acc / tot;
                        }
                    }
                }
                if let LayerParams::Conv2d { w, b } = &mut global.layers_mut()[idx] {
                    *w = new_w;
                    *b = new_b;
                }
            }
            LayerParams::Batchnorm { gamma, beta, stats } => {
                let ch = gamma.len();
                let mut new_gamma = gamma.clone();
                let mut new_beta = beta.clone();
                for c in 0..ch {
                    let mut acc_g = 0.0;
                    let mut acc_b = 0.0;
                    let mut tot = 0.0;
                    for cv in &covers {
                        if cv.in_cov[idx][c] {
                            if let LayerParams::Batchnorm {
                                gamma: pg,
                                beta: pb,
                                ..
                            } = &cv.model.layers()[idx]
                            {
                                acc_g += cv.weight * pg[c];
                                acc_b += cv.weight * pb[c];
                                tot += cv.weight;
                            }
                        }
                    }
                    if tot > 0.0 {
                        new_gamma[c] = acc_g / tot;
                        new_beta[c] = acc_b / tot;
                    }
                }
                let mut new_stats = stats.clone();
                for (key, entry) in new_stats.iter_mut() {
                    for c in 0..entry.mean.len() {
                        let mut acc_m = 0.0;
                        let mut acc_v = 0.0;
                        let mut tot = 0.0;
                        for cv in &covers {
                            if cv.in_cov[idx][c] {
                                if let LayerParams::Batchnorm { stats: ps, .. } =
                                    &cv.model.layers()[idx]
                                {
                                    if let Some(pe) = ps.get(key) {
                                        acc_m += cv.weight * pe.mean[c];
                                        acc_v += cv.weight * pe.var[c];
                                        tot += cv.weight;
                                    }
                                }
                            }
                        }
                        if tot > 0.0 {
                            entry.mean[c] = acc_m / tot;
                            entry.var[c] = acc_v / tot;
                        }
                    }
                }
                if let LayerParams::Batchnorm { gamma, beta, stats } =
                    &mut global.layers_mut()[idx]
                {
                    *gamma = new_gamma;
                    *beta = new_beta;
                    *stats = new_stats;
                }
            }
            LayerParams::Stateless => {}
        }
    }
    Ok(true)
}

// -- evaluation and the round loop ------------------------------------------

/// Top-1 accuracy and mean loss of every candidate submodel, eval-mode
/// statistics.
pub fn evaluate_global(model: &Model, dataset: &Dataset, batch: usize) -> Result<Vec<(f64, f64, f64)>> {
    let labels = dataset.labels()?;
    let mut out = Vec::new();
    for &p in model.dist().values() {
        let sel = model.prefix_selection(p)?;
        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        let n = dataset.len();
        let mut start = 0usize;
        while start < n {
            let end = (start + batch).min(n);
            let indices: Vec<usize> = (start..end).collect();
            let inputs = dataset.inputs.gather(&indices);
            let logits = model.forward_eval(&inputs, &sel)?;
            let classes = logits.len() / logits.batch();
            for (row, &idx) in indices.iter().enumerate() {
                let scores = &logits.data()[row * classes..(row + 1) * classes];
                let pred = argmax(scores);
                if pred == labels[idx] {
                    correct += 1;
                }
                loss_sum += cross_entropy(scores, labels[idx])?;
            }
            start = end;
        }
        out.push((p, correct as f64 / n as f64, loss_sum / n as f64));
    }
    Ok(out)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub struct FederatedOutcome {
    pub model: Model,
    pub trace: MetricTrace,
    pub total_bytes_up: u64,
    pub total_bytes_down: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LocalRule {
    /// Conditional-width ordered training (with or without distillation).
    Fjord,
    /// Ordered view randomly extended into the next tier.
    FjordEfd { d: f64 },
    /// Random subnetwork of an independent target-width model, scaled to the
    /// client's cap.
    Efd { target_width: f64 },
    /// One fixed keep ratio for every client.
    Fd { keep_ratio: f64 },
}

/// The federated round loop: select, broadcast views, train locally in
/// parallel, aggregate, evaluate.
pub fn run_training(
    cfg: &FederatedRunConfig,
    rule: LocalRule,
    mut model: Model,
    train: &Dataset,
    test: &Dataset,
) -> Result<FederatedOutcome> {
    cfg.validate()?;
    let mut assign_rng = Rng::substream(cfg.seed, StreamId::ClientAssign, &[]);
    let partition = match cfg.partition {
        PartitionStrategy::Iid => partition_iid(train.len(), cfg.num_clients, &mut assign_rng)?,
        PartitionStrategy::LabelSkew { concentration } => partition_label_skew(
            train.labels()?,
            train.classes,
            cfg.num_clients,
            concentration,
            &mut assign_rng,
        )?,
    };
    let cluster_dist = cfg.cluster_dist.as_ref().unwrap_or_else(|| model.dist());
    let clusters = build_clusters(cluster_dist, cfg.drop_scale)?;
    let assignment = assign_clients(cfg.num_clients, &clusters, &mut assign_rng);
    let clients: Vec<ClientState> = partition
        .shards
        .iter()
        .cloned()
        .zip(&assignment)
        .enumerate()
        .map(|(id, (shard, &cluster))| ClientState { id, cluster, shard })
        .collect();

    let schedule = if cfg.schedule_decay {
        LrSchedule::half_and_three_quarters()
    } else {
        LrSchedule::none()
    };
    let mut trace = MetricTrace::default();
    let mut bytes_up_total = 0u64;
    let mut bytes_down_total = 0u64;
    let mut sim_clock_ms = 0u64;
    let probe = train_probe(train);

    for t in 0..cfg.rounds {
        let mut part_rng = Rng::substream(cfg.seed, StreamId::Participation, &[t]);
        let selected = select_participants(cfg.num_clients, cfg.participation, &mut part_rng)?;
        let lr_eff = cfg.lr * schedule.multiplier_at(t as f64 / cfg.rounds as f64);

        let jobs: Vec<&ClientState> = selected.iter().map(|&i| &clients[i]).collect();
        let global_ref = &model;
        let results: Vec<Result<(UpdatePacket, f64, u64)>> = jobs
            .par_iter()
            .map(|client| {
                let p_cap = clusters[client.cluster].p_max;
                match rule {
                    LocalRule::Fjord => {
                        let view_sel = global_ref.prefix_selection(p_cap)?;
                        let bytes_down =
                            8 * global_ref.selection_parameter_count(&view_sel) as u64;
                        let (pkt, loss) = local_train_fjord(
                            global_ref, client, p_cap, train, cfg, t, lr_eff,
                        )?;
                        let _ = loss;
                        Ok((pkt, loss, bytes_down))
                    }
                    LocalRule::FjordEfd { d } => {
                        let mut mask_rng = Rng::substream(
                            cfg.seed,
                            StreamId::Mask,
                            &[t, client.id as u64],
                        );
                        let next = global_ref
                            .dist()
                            .values()
                            .iter()
                            .copied()
                            .find(|&v| v > p_cap);
                        let (width_key, kept) =
                            extended_kept_lists(global_ref, p_cap, next, d, &mut mask_rng)?;
                        let sel = global_ref.masked_selection(width_key, kept.clone())?;
                        let bytes_down = 8 * global_ref.selection_parameter_count(&sel) as u64;
                        let (pkt, loss) = local_train_masked(
                            global_ref,
                            client,
                            width_key,
                            kept,
                            train,
                            cfg,
                            t,
                            lr_eff,
                            Some(p_cap),
                        )?;
                        Ok((pkt, loss, bytes_down))
                    }
                    LocalRule::Efd { target_width } => {
                        // Clients below the target capability drop random
                        // units to fit.
                        let keep_ratio = (p_cap / target_width).min(1.0);
                        let mut mask_rng = Rng::substream(
                            cfg.seed,
                            StreamId::Mask,
                            &[t, client.id as u64],
                        );
                        let kept =
                            random_kept_lists(global_ref, 1.0, keep_ratio, &mut mask_rng)?;
                        let sel = global_ref.masked_selection(1.0, kept.clone())?;
                        let bytes_down = 8 * global_ref.selection_parameter_count(&sel) as u64;
                        let (pkt, loss) = local_train_masked(
                            global_ref, client, 1.0, kept, train, cfg, t, lr_eff, None,
                        )?;
                        Ok((pkt, loss, bytes_down))
                    }
                    LocalRule::Fd { keep_ratio } => {
                        let mut mask_rng = Rng::substream(
                            cfg.seed,
                            StreamId::Mask,
                            &[t, client.id as u64],
                        );
                        let kept =
                            random_kept_lists(global_ref, 1.0, keep_ratio, &mut mask_rng)?;
                        let sel = global_ref.masked_selection(1.0, kept.clone())?;
                        let bytes_down = 8 * global_ref.selection_parameter_count(&sel) as u64;
                        let (pkt, loss) = local_train_masked(
                            global_ref, client, 1.0, kept, train, cfg, t, lr_eff, None,
                        )?;
                        Ok((pkt, loss, bytes_down))
                    }
                }
            })
            .collect();

        let mut packets = Vec::with_capacity(results.len());
        let mut round_loss = 0.0;
        let mut round_work = 0u64;
        let mut round_bytes = 0u64;
        for r in results {
            let (pkt, loss, bytes_down) = r?;
            bytes_down_total += bytes_down;
            bytes_up_total += pkt.bytes_up;
            round_bytes += bytes_down + pkt.bytes_up;
            let e = cfg
                .local_iters
                .unwrap_or_else(|| epoch_iters(pkt.n, cfg.batch_size));
            round_work +=
                (e * cfg.batch_size) as u64 * (pkt.bytes_up / 8).max(1);
            round_loss += loss;
            packets.push(pkt);
        }
        round_loss /= packets.len().max(1) as f64;
        sim_clock_ms += simulated_ms(round_work, round_bytes);

        let applied = match rule {
            LocalRule::Fjord => aggregate(&mut model, &packets)?,
            _ => masked_aggregate(&mut model, &packets)?,
        };
        if !applied && !cfg.quiet {
            eprintln!("warning: round {t} produced no packets; keeping previous weights");
        }

        let last = t + 1 == cfg.rounds;
        if last || (t + 1) % cfg.eval_every == 0 {
            for &(p, acc, loss) in evaluate_global(&model, test, 256)?.iter() {
                trace.push(MetricRow {
                    round: t,
                    p,
                    split: Split::Test,
                    accuracy: acc,
                    loss,
                    bytes_up_total,
                    bytes_down_total,
                    wallclock_ms: sim_clock_ms,
                });
            }
            for &(p, acc, loss) in evaluate_global(&model, &probe, 256)?.iter() {
                let _ = loss;
                trace.push(MetricRow {
                    round: t,
                    p,
                    split: Split::Train,
                    accuracy: acc,
                    loss: round_loss,
                    bytes_up_total,
                    bytes_down_total,
                    wallclock_ms: sim_clock_ms,
                });
            }
        }
    }

    Ok(FederatedOutcome {
        model,
        trace,
        total_bytes_up: bytes_up_total,
        total_bytes_down: bytes_down_total,
    })
}

/// Fixed training-set probe used for the train-split trace rows.
fn train_probe(train: &Dataset) -> Dataset {
    let n = train.len().min(1000);
    let indices: Vec<usize> = (0..n).collect();
    train.subset(&indices).expect("probe subset")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use crate::data::{make_classification_task, TaskMode};

    #[test]
    fn cluster_shares_uniform_and_skewed() {
        assert_eq!(cluster_shares(5, 1.0).unwrap(), vec![0.2, 0.2, 0.2, 0.2, 0.2]);
        assert_eq!(
            cluster_shares(5, 0.5).unwrap(),
            vec![0.1, 0.1, 0.1, 0.1, 0.6]
        );
        assert_eq!(cluster_shares(1, 0.7).unwrap(), vec![1.0]);
        assert!(cluster_shares(0, 1.0).is_err());
        // A drop scale this large would starve the high-end cluster.
        assert!(cluster_shares(2, 2.5).is_err());
    }

    #[test]
    fn assignment_quotas_are_exact() {
        let dist = DropoutDistribution::uniform_k(5).unwrap();
        let clusters = build_clusters(&dist, 1.0).unwrap();
        let mut rng = Rng::substream(1, StreamId::ClientAssign, &[]);
        let assignment = assign_clients(100, &clusters, &mut rng);
        for c in 0..5 {
            assert_eq!(assignment.iter().filter(|&&a| a == c).count(), 20);
        }
        let skewed = build_clusters(&dist, 0.5).unwrap();
        let assignment = assign_clients(10, &skewed, &mut rng);
        let counts: Vec<usize> = (0..5)
            .map(|c| assignment.iter().filter(|&&a| a == c).count())
            .collect();
        assert_eq!(counts, vec![1, 1, 1, 1, 6]);
    }

    #[test]
    fn single_cluster_takes_everyone() {
        let dist = DropoutDistribution::uniform_k(1).unwrap();
        let clusters = build_clusters(&dist, 1.0).unwrap();
        let mut rng = Rng::new(2);
        let assignment = assign_clients(7, &clusters, &mut rng);
        assert!(assignment.iter().all(|&a| a == 0));
    }

    #[test]
    fn participant_selection_is_deterministic_and_distinct() {
        let mut a = Rng::substream(9, StreamId::Participation, &[4]);
        let mut b = Rng::substream(9, StreamId::Participation, &[4]);
        let sa = select_participants(100, 0.1, &mut a).unwrap();
        let sb = select_participants(100, 0.1, &mut b).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(sa.len(), 10);
        let mut sorted = sa.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        let all = select_participants(8, 1.0, &mut a).unwrap();
        assert_eq!(all.len(), 8);
    }

    #[test]
    fn conditional_width_frequencies_under_cap() {
        let dist = DropoutDistribution::uniform_k(5).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for step in 0..1000u64 {
            let mut rng = Rng::substream(3, StreamId::WidthSample, &[0, 7, step]);
            let p = dist.sample_conditional(0.4, &mut rng).unwrap();
            *counts.entry(WidthKey(p)).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 2);
        let low = counts[&WidthKey(0.2)];
        let high = counts[&WidthKey(0.4)];
        assert_eq!(low + high, 1000);
        assert!((low as f64 - 500.0).abs() < 60.0, "low {low}");
    }

    fn tiny_setup() -> (Model, Dataset, Dataset) {
        let a = arch::mlp(4, &[8, 8], 3);
        let dist = DropoutDistribution::uniform_k(5).unwrap();
        let model = Model::new(a, dist, 11).unwrap();
        let mut rng = Rng::new(5);
        let train = make_classification_task(TaskMode::Blobs, 3, 4, 160, 0.4, &mut rng).unwrap();
        let test = make_classification_task(TaskMode::Blobs, 3, 4, 60, 0.4, &mut rng).unwrap();
        (model, train, test)
    }

    fn tiny_cfg(seed: u64) -> FederatedRunConfig {
        FederatedRunConfig {
            rounds: 3,
            local_iters: Some(2),
            participation: 0.5,
            num_clients: 8,
            drop_scale: 1.0,
            batch_size: 8,
            lr: 0.1,
            momentum: 0.0,
            schedule_decay: false,
            kd: DistillConfig::disabled(),
            efd_extension: None,
            cluster_dist: None,
            partition: PartitionStrategy::Iid,
            seed,
            eval_every: 1,
            quiet: true,
        }
    }

    #[test]
    fn round_loop_runs_and_reproduces_bit_for_bit() {
        let (model, train, test) = tiny_setup();
        let cfg = tiny_cfg(21);
        let a = run_training(&cfg, LocalRule::Fjord, model.clone(), &train, &test).unwrap();
        let b = run_training(&cfg, LocalRule::Fjord, model, &train, &test).unwrap();
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        assert_eq!(a.model, b.model);
        assert!(a.total_bytes_up > 0);
        assert!(a.total_bytes_down > 0);
        // One test row per width per round.
        let test_rows = a
            .trace
            .rows
            .iter()
            .filter(|r| r.split == Split::Test)
            .count();
        assert_eq!(test_rows, 3 * 5);
    }

    #[test]
    fn kd_and_extension_rules_run() {
        let (model, train, test) = tiny_setup();
        let mut cfg = tiny_cfg(22);
        cfg.kd = DistillConfig::default();
        run_training(&cfg, LocalRule::Fjord, model.clone(), &train, &test).unwrap();
        run_training(
            &cfg,
            LocalRule::FjordEfd { d: 0.25 },
            model.clone(),
            &train,
            &test,
        )
        .unwrap();
        let mut plain = tiny_cfg(23);
        plain.kd = DistillConfig::disabled();
        run_training(
            &plain,
            LocalRule::Efd { target_width: 1.0 },
            model.clone(),
            &train,
            &test,
        )
        .unwrap();
        run_training(
            &plain,
            LocalRule::Fd { keep_ratio: 0.2 },
            model,
            &train,
            &test,
        )
        .unwrap();
    }

    #[test]
    fn masked_aggregation_respects_coverage() {
        let a = arch::mlp(3, &[4], 2);
        let dist = DropoutDistribution::uniform_k(1).unwrap();
        let global = Model::new(a, dist, 9).unwrap();
        let mut trained = global.clone();
        if let LayerParams::Dense { w, .. } = &mut trained.layers_mut()[0] {
            for v in w.data_mut() {
                *v = 5.0;
            }
        }
        // Only units 1 and 3 of the hidden layer are covered.
        let kept = vec![vec![1, 3], vec![0, 1]];
        let packets = vec![UpdatePacket {
            client_id: 0,
            p_cap: 1.0,
            n: 4,
            bytes_up: 0,
            payload: Payload::Masked {
                kept,
                model: trained,
            },
        }];
        let mut updated = global.clone();
        masked_aggregate(&mut updated, &packets).unwrap();
        if let (LayerParams::Dense { w: new, .. }, LayerParams::Dense { w: old, .. }) =
            (&updated.layers()[0], &global.layers()[0])
        {
            for o in 0..4 {
                for i in 0..3 {
                    let v = new.data()[o * 3 + i];
                    if o == 1 || o == 3 {
                        assert_eq!(v, 5.0);
                    } else {
                        assert_eq!(v.to_bits(), old.data()[o * 3 + i].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn random_model_evaluates_at_chance_level() {
        let a = arch::mlp(6, &[16], 10);
        let dist = DropoutDistribution::uniform_k(5).unwrap();
        let model = Model::new(a, dist, 123).unwrap();
        // Labels independent of the inputs: accuracy must sit at 1/classes.
        let mut rng = Rng::new(124);
        let n = 1500;
        let data: Vec<f64> = (0..n * 6).map(|_| rng.gen_range_f64(-2.0, 2.0)).collect();
        let test = Dataset {
            name: "noise".into(),
            inputs: Tensor::from_vec(&[n, 6], data).unwrap(),
            targets: crate::data::DatasetTargets::Labels((0..n).map(|s| s % 10).collect()),
            classes: 10,
        };
        for (p, acc, _) in evaluate_global(&model, &test, 256).unwrap() {
            assert!(
                (acc - 0.1).abs() <= 0.03,
                "untrained model at p={p} should sit near chance: {acc}"
            );
        }
    }

    #[test]
    fn efd_keep_ratio_examples() {
        // Cap at or above the target trains the whole target model.
        let a = arch::mlp(4, &[10], 2);
        let model = Model::new(a, DropoutDistribution::uniform_k(1).unwrap(), 3).unwrap();
        let mut rng = Rng::substream(4, StreamId::Mask, &[0, 0]);
        let full = random_kept_lists(&model, 1.0, 1.0, &mut rng).unwrap();
        assert_eq!(full[0], (0..10).collect::<Vec<_>>());
        // A 0.2-capable client keeps a random 2-subset of 10 units.
        let masked = random_kept_lists(&model, 1.0, 0.2, &mut rng).unwrap();
        assert_eq!(masked[0].len(), 2);
        assert!(masked[0].iter().all(|&u| u < 10));
        // The head keeps its full width.
        assert_eq!(masked[1], vec![0, 1]);
        // Masks are deterministic per (seed, round, client).
        let mut a1 = Rng::substream(4, StreamId::Mask, &[7, 9]);
        let mut a2 = Rng::substream(4, StreamId::Mask, &[7, 9]);
        assert_eq!(
            random_kept_lists(&model, 1.0, 0.4, &mut a1).unwrap(),
            random_kept_lists(&model, 1.0, 0.4, &mut a2).unwrap()
        );
    }

    #[test]
    fn local_epoch_default_matches_shard_size() {
        assert_eq!(epoch_iters(80, 16), 5);
        assert_eq!(epoch_iters(81, 16), 6);
        assert_eq!(epoch_iters(3, 16), 1);
    }
}
