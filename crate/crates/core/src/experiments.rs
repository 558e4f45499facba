//! Runnable experiments: low-rank recovery, centralized width-family
//! comparisons, federated protocol-vs-baseline comparisons and the static
//! cost tables.
//!
//! Report directory layout: `config.json` (canonical echo), one
//! `metrics_<arm>_seed<k>.csv` per run, `summary.json` with per-width
//! mean/stdev across seeds, and `checkpoints/` with the final models.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{self, Architecture};
use crate::checkpoint;
use crate::config::{ArchKind, ExperimentConfig, TaskKind};
use crate::cost::{comm_savings, cost_model, femnist_cnn_descriptor, resnet18_cifar_descriptor, ArchCostDescriptor};
use crate::data::{
    load_idx, make_classification_task, synthesize_digits, write_idx, Dataset,
    TaskMode,
};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::fed::{self, evaluate_global, FederatedRunConfig, LocalRule};
use crate::metrics::{MetricRow, MetricTrace, Split};
use crate::model::{LayerParams, Model};
use crate::od::DropoutDistribution;
use crate::optim::OptimizerState;
use crate::rng::{Rng, StreamId};
use crate::svd::{best_rank_approx, svd, Matrix};
use crate::tensor::Tensor;
use crate::train::{od_step, train_step, LossSpec, Targets};

const DIVERGENCE_LIMIT: f64 = 1e6;

// -- low-rank recovery -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvdExperimentConfig {
    pub matrix_size: usize,
    pub singular_values: Vec<f64>,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub record_every: usize,
    pub seed: u64,
}

impl Default for SvdExperimentConfig {
    fn default() -> Self {
        SvdExperimentConfig {
            matrix_size: 5,
            singular_values: vec![5.0, 4.0, 3.0, 2.0, 1.0],
            learning_rate: 0.1,
            iterations: 10_000,
            batch_size: 32,
            record_every: 100,
            seed: 1,
        }
    }
}

impl SvdExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: SvdExperimentConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.singular_values.len() != self.matrix_size {
            return Err(Error::InvalidConfig(format!(
                "{} singular values for a {0}x{0} matrix of size {1}",
                self.singular_values.len(),
                self.matrix_size
            )));
        }
        let mut prev = f64::INFINITY;
        for &s in &self.singular_values {
            if s <= 0.0 || s >= prev {
                return Err(Error::InvalidConfig(
                    "singular values must be strictly decreasing and positive".into(),
                ));
            }
            prev = s;
        }
        if self.learning_rate <= 0.0 || self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "learning rate, iterations and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SvdRecoveryOutcome {
    /// `(step, distances per rank)` recorded every `record_every` steps.
    pub trace: Vec<(usize, Vec<f64>)>,
    /// Frobenius distance per rank of the tail-averaged factors. A
    /// constant-rate stochastic iterate wanders around the optimum, so the
    /// reported solution is the iterate average over the last 70% of steps.
    pub final_distances: Vec<f64>,
    /// Frobenius distance per rank of the very last raw iterate.
    pub raw_final_distances: Vec<f64>,
    /// Mean training loss over the last recorded window.
    pub objective_estimate: f64,
    /// The attainable floor: sum over ranks of P_b * ||A_b - A||_F^2 scaled
    /// by the ball's per-coordinate second moment 1/(n + 2).
    pub objective_lower_bound: f64,
}

/// Train the bias-free two-layer linear net at sampled widths and track how
/// the rank-b product drifts toward the best rank-b approximation. The
/// returned solution is the Polyak tail average of the factors; the raw
/// per-step trace is kept alongside it.
pub fn run_svd_recovery(cfg: &SvdExperimentConfig) -> Result<SvdRecoveryOutcome> {
    cfg.validate()?;
    let k = cfg.matrix_size;
    // A = U diag(sigma) V^T from the SVD of a gaussian matrix.
    let mut gen_rng = Rng::substream(cfg.seed, StreamId::Experiment, &[0]);
    let gaussian = Matrix::gaussian(k, k, &mut gen_rng);
    let base = svd(&gaussian);
    let mut a = Matrix::zeros(k, k);
    for (i, &s) in cfg.singular_values.iter().enumerate() {
        for r in 0..k {
            for c in 0..k {
                let v = a.get(r, c) + s * base.u.get(r, i) * base.v.get(c, i);
                a.set(r, c, v);
            }
        }
    }
    let targets: Vec<Matrix> = (1..=k).map(|b| best_rank_approx(&a, b)).collect::<Result<_>>()?;

    let dist = DropoutDistribution::uniform_k(k)?;
    let mut model = Model::new(arch::linear_two_layer(k, k, k), dist.clone(), cfg.seed)?;
    // Normal-random init for both layers.
    let mut init_rng = Rng::substream(cfg.seed, StreamId::Init, &[1]);
    for lp in model.layers_mut() {
        if let LayerParams::Dense { w, .. } = lp {
            for v in w.data_mut() {
                *v = init_rng.next_gaussian();
            }
        }
    }

    let mut opt = OptimizerState::new(cfg.learning_rate, 0.0)?;
    let mut trace = Vec::new();
    let mut window_loss = 0.0;
    let mut window_count = 0usize;
    let mut objective_estimate = f64::NAN;
    let tail_start = (cfg.iterations * 3) / 10;
    let mut tail_sum: Option<Vec<Vec<f64>>> = None;
    let mut tail_n = 0.0f64;
    for step in 0..cfg.iterations {
        let mut data_rng = Rng::substream(cfg.seed, StreamId::Data, &[step as u64]);
        let inputs = crate::data::sample_unit_ball(k, cfg.batch_size, &mut data_rng);
        let mut targets_data = Vec::with_capacity(cfg.batch_size * k);
        for s in 0..cfg.batch_size {
            targets_data.extend(a.mul_vec(inputs.sample(s)));
        }
        let target = Tensor::from_vec(&[cfg.batch_size, k], targets_data)?;
        let mut width_rng = Rng::substream(cfg.seed, StreamId::WidthSample, &[step as u64]);
        let p = dist.sample(&mut width_rng);
        let loss = train_step(
            &mut model,
            &inputs,
            Targets::Values(&target),
            p,
            &LossSpec::SquaredError,
            &mut opt,
        )?;
        if loss > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                loss,
                limit: DIVERGENCE_LIMIT,
                step,
            });
        }
        window_loss += loss;
        window_count += 1;
        if step >= tail_start {
            let weights: Vec<Vec<f64>> = model
                .layers()
                .iter()
                .filter_map(|lp| match lp {
                    LayerParams::Dense { w, .. } => Some(w.data().to_vec()),
                    _ => None,
                })
                .collect();
            match &mut tail_sum {
                None => tail_sum = Some(weights),
                Some(sum) => {
                    for (acc, w) in sum.iter_mut().zip(&weights) {
                        for (a, &v) in acc.iter_mut().zip(w) {
                            *a += v;
                        }
                    }
                }
            }
            tail_n += 1.0;
        }
        if (step + 1) % cfg.record_every == 0 || step + 1 == cfg.iterations {
            let distances = rank_distances(&model, &targets);
            trace.push((step + 1, distances));
            objective_estimate = window_loss / window_count as f64;
            window_loss = 0.0;
            window_count = 0;
        }
    }
    let raw_final_distances = trace.last().expect("at least one record").1.clone();
    // Polyak tail average: fold the averaged factors back into a model copy.
    let mut averaged = model.clone();
    let tail = tail_sum.expect("tail window is nonempty");
    let mut ordinal = 0usize;
    for lp in averaged.layers_mut() {
        if let LayerParams::Dense { w, .. } = lp {
            for (v, &s) in w.data_mut().iter_mut().zip(&tail[ordinal]) {
                *v = s / tail_n;
            }
            ordinal += 1;
        }
    }
    let final_distances = rank_distances(&averaged, &targets);

    let probs = dist.probabilities();
    let bound: f64 = targets
        .iter()
        .zip(probs)
        .map(|(ab, &pb)| {
            let residual = a.sub(ab).frobenius_norm();
            pb * residual * residual
        })
        .sum::<f64>()
        / (k as f64 + 2.0);

    Ok(SvdRecoveryOutcome {
        trace,
        final_distances,
        raw_final_distances,
        objective_estimate,
        objective_lower_bound: bound,
    })
}

/// `|| U[:, :b] V[:b, :] - A_b ||_F` for every rank.
fn rank_distances(model: &Model, targets: &[Matrix]) -> Vec<f64> {
    let (w0, w1) = match (&model.layers()[0], &model.layers()[1]) {
        (LayerParams::Dense { w: w0, .. }, LayerParams::Dense { w: w1, .. }) => (w0, w1),
        _ => unreachable!("two-layer linear net"),
    };
    let hidden = w0.shape()[0];
    let n_in = w0.shape()[1];
    let n_out = w1.shape()[0];
    targets
        .iter()
        .enumerate()
        .map(|(idx, target)| {
            let b = idx + 1;
            let mut norm_sq = 0.0;
            for r in 0..n_out {
                for c in 0..n_in {
                    let mut acc = 0.0;
                    for h in 0..b.min(hidden) {
                        acc += w1.data()[r * hidden + h] * w0.data()[h * n_in + c];
                    }
                    let d = acc - target.get(r, c);
                    norm_sq += d * d;
                }
            }
            norm_sq.sqrt()
        })
        .collect()
}

pub fn write_svd_report(
    cfg: &SvdExperimentConfig,
    outcome: &SvdRecoveryOutcome,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.canonical_json())?;
    let mut csv = String::from("step,b,frobenius_distance\n");
    for (step, distances) in &outcome.trace {
        for (i, d) in distances.iter().enumerate() {
            csv.push_str(&format!("{step},{},{d:.17e}\n", i + 1));
        }
    }
    fs::write(dir.join("metrics_svd.csv"), csv)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(outcome)?,
    )?;
    Ok(())
}

// -- shared task/model construction ------------------------------------------

pub fn build_architecture(cfg: &ExperimentConfig) -> Architecture {
    match cfg.architecture.kind {
        ArchKind::FemnistCnn => arch::femnist_cnn(cfg.task.classes),
        ArchKind::Mlp => arch::mlp(cfg.task.dim, &cfg.architecture.hidden, cfg.task.classes),
    }
}

/// Train/test datasets for one seed. Digit tasks are materialized as IDX
/// files and read back through the loader, so the ingestion path is part of
/// every run.
pub fn build_task(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<(Dataset, Dataset)> {
    match cfg.task.kind {
        TaskKind::Digits => {
            let data_dir = out.join("data");
            fs::create_dir_all(&data_dir)?;
            let mut train_rng = Rng::substream(seed, StreamId::Data, &[0]);
            let train = synthesize_digits(cfg.task.train_samples, cfg.task.noise, &mut train_rng);
            let mut test_rng = Rng::substream(seed, StreamId::Data, &[1]);
            let test = synthesize_digits(cfg.task.test_samples, cfg.task.noise, &mut test_rng);
            let paths = [
                data_dir.join(format!("seed{seed}-train-images-idx3-ubyte")),
                data_dir.join(format!("seed{seed}-train-labels-idx1-ubyte")),
                data_dir.join(format!("seed{seed}-t10k-images-idx3-ubyte")),
                data_dir.join(format!("seed{seed}-t10k-labels-idx1-ubyte")),
            ];
            write_idx(&train, &paths[0], &paths[1])?;
            write_idx(&test, &paths[2], &paths[3])?;
            let train = load_idx(&paths[0], &paths[1], 10)?;
            let test = load_idx(&paths[2], &paths[3], 10)?;
            Ok((train, test))
        }
        TaskKind::Blobs | TaskKind::Rings => {
            let mode = if cfg.task.kind == TaskKind::Blobs {
                TaskMode::Blobs
            } else {
                TaskMode::Rings
            };
            // One generator call so train and test share the same class
            // geometry; the round-robin labels keep both splits balanced.
            let total = cfg.task.train_samples + cfg.task.test_samples;
            let mut rng = Rng::substream(seed, StreamId::Data, &[0]);
            let all = make_classification_task(
                mode,
                cfg.task.classes,
                cfg.task.dim,
                total,
                cfg.task.noise,
                &mut rng,
            )?;
            let train = all.subset(&(0..cfg.task.train_samples).collect::<Vec<_>>())?;
            let test = all.subset(&(cfg.task.train_samples..total).collect::<Vec<_>>())?;
            Ok((train, test))
        }
        TaskKind::Idx => {
            let img = cfg.task.idx_images.as_ref().ok_or_else(|| {
                Error::InvalidConfig("task.idx_images required for idx tasks".into())
            })?;
            let lab = cfg.task.idx_labels.as_ref().ok_or_else(|| {
                Error::InvalidConfig("task.idx_labels required for idx tasks".into())
            })?;
            let timg = cfg.task.idx_test_images.as_ref().ok_or_else(|| {
                Error::InvalidConfig("task.idx_test_images required for idx tasks".into())
            })?;
            let tlab = cfg.task.idx_test_labels.as_ref().ok_or_else(|| {
                Error::InvalidConfig("task.idx_test_labels required for idx tasks".into())
            })?;
            Ok((
                load_idx(Path::new(img), Path::new(lab), cfg.task.classes)?,
                load_idx(Path::new(timg), Path::new(tlab), cfg.task.classes)?,
            ))
        }
    }
}

/// Centralized width-sampled training: `epochs` passes, one conditional width
/// draw per step, optional distillation from the widest candidate.
#[allow(clippy::too_many_arguments)]
pub fn central_od_training(
    mut model: Model,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    kd: &DistillConfig,
    seed: u64,
) -> Result<(Model, MetricTrace)> {
    let dist = model.dist().clone();
    let cap = dist.max_width();
    let mut opt = OptimizerState::new(lr, momentum)?;
    let mut trace = MetricTrace::default();
    let probe_len = train.len().min(1000);
    let probe = train.subset(&(0..probe_len).collect::<Vec<_>>())?;
    let mut work: u64 = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = Rng::substream(seed, StreamId::Shuffle, &[epoch as u64]);
        shuffle_rng.shuffle(&mut order);
        let steps = train.len().div_ceil(batch_size);
        for step in 0..steps {
            let lo = step * batch_size;
            let hi = ((step + 1) * batch_size).min(train.len());
            let indices = &order[lo..hi];
            let inputs = train.inputs.gather(indices);
            let labels: Vec<usize> = {
                let all = train.labels()?;
                indices.iter().map(|&i| all[i]).collect()
            };
            let mut width_rng =
                Rng::substream(seed, StreamId::WidthSample, &[epoch as u64, step as u64]);
            let (loss, _p) = od_step(
                &mut model,
                &inputs,
                &labels,
                &dist,
                cap,
                kd,
                &mut width_rng,
                &mut opt,
            )?;
            if loss > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    loss,
                    limit: DIVERGENCE_LIMIT,
                    step: epoch * steps + step,
                });
            }
            work += (hi - lo) as u64;
        }
        record_eval(
            &mut trace,
            &model,
            test,
            &probe,
            epoch as u64,
            work,
        )?;
    }
    Ok((model, trace))
}

fn record_eval(
    trace: &mut MetricTrace,
    model: &Model,
    test: &Dataset,
    probe: &Dataset,
    round: u64,
    work: u64,
) -> Result<()> {
    for &(p, acc, loss) in evaluate_global(model, test, 256)?.iter() {
        trace.push(MetricRow {
            round,
            p,
            split: Split::Test,
            accuracy: acc,
            loss,
            bytes_up_total: 0,
            bytes_down_total: 0,
            wallclock_ms: work / 1000,
        });
    }
    for &(p, acc, loss) in evaluate_global(model, probe, 256)?.iter() {
        trace.push(MetricRow {
            round,
            p,
            split: Split::Train,
            accuracy: acc,
            loss,
            bytes_up_total: 0,
            bytes_down_total: 0,
            wallclock_ms: work / 1000,
        });
    }
    Ok(())
}

// -- report plumbing ---------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct WidthStat {
    pub p: f64,
    pub mean: f64,
    pub stdev: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub per_p: Vec<WidthStat>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
    /// Training processes each arm needed; width-family arms need one, the
    /// per-width baselines need one per width.
    pub run_counts: BTreeMap<String, usize>,
    pub notes: Vec<String>,
    /// Measured host time; informational only and deliberately outside the
    /// deterministic metric traces.
    pub measured_wall_ms: u128,
}

pub fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize_arm(arm: &str, widths: &[f64], per_seed: &[Vec<(f64, f64)>]) -> ArmSummary {
    let per_p = widths
        .iter()
        .map(|&p| {
            let vals: Vec<f64> = per_seed
                .iter()
                .map(|rows| {
                    rows.iter()
                        .find(|(rp, _)| *rp == p)
                        .map(|(_, acc)| *acc)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            let (mean, stdev) = mean_stdev(&vals);
            WidthStat {
                p,
                mean,
                stdev,
                per_seed: vals,
            }
        })
        .collect();
    ArmSummary {
        arm: arm.to_string(),
        per_p,
    }
}

// -- centralized experiment ---------------------------------------------------

pub struct CentralizedReport {
    pub summary: RunSummary,
    pub dir: PathBuf,
}

/// Four arms per seed: width-sampled training, width-sampled training with
/// distillation, one independently trained model per width, and the full
/// model evaluated under random (unordered) masks of matching sizes.
pub fn run_centralized(cfg: &ExperimentConfig, out: &Path) -> Result<CentralizedReport> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out)?;
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::write(out.join("config.json"), cfg.canonical_json())?;
    let dist = DropoutDistribution::uniform_k(cfg.dropout.k)?;
    let widths = dist.values().to_vec();
    let base_arch = build_architecture(cfg);

    // Flat (seed, arm) task list so a small core count packs well; the
    // random-mask arm reuses the full-width independent model and runs after
    // the join.
    let tasks_input: Vec<(usize, u64)> = cfg
        .seeds
        .iter()
        .copied()
        .enumerate()
        .collect();
    let datasets: Vec<(Dataset, Dataset)> = tasks_input
        .iter()
        .map(|&(_, seed)| build_task(cfg, seed, out))
        .collect::<Result<_>>()?;

    #[derive(Clone, Copy, Debug, PartialEq)]
    enum Arm {
        Od,
        OdKd,
        Sm(f64),
    }
    let mut tasks: Vec<(usize, u64, Arm)> = Vec::new();
    for &(si, seed) in &tasks_input {
        tasks.push((si, seed, Arm::Od));
        tasks.push((si, seed, Arm::OdKd));
        for &p in &widths {
            tasks.push((si, seed, Arm::Sm(p)));
        }
    }

    let results: Vec<Result<(usize, Arm, Vec<(f64, f64)>, Option<Model>)>> = tasks
        .par_iter()
        .map(|&(si, seed, arm)| {
            let (train, test) = &datasets[si];
            let opt = &cfg.optimizer;
            match arm {
                Arm::Od => {
                    let model = Model::new(base_arch.clone(), dist.clone(), seed)?;
                    let (trained, trace) = central_od_training(
                        model,
                        train,
                        test,
                        opt.epochs,
                        opt.batch_size,
                        opt.lr,
                        opt.momentum,
                        &DistillConfig::disabled(),
                        seed,
                    )?;
                    trace.write_csv(&out.join(format!("metrics_od_seed{seed}.csv")))?;
                    checkpoint::save_model(
                        &trained,
                        &out.join(format!("checkpoints/od_seed{seed}.ckpt")),
                    )?;
                    Ok((si, arm, final_accuracies(&trace, &widths), None))
                }
                Arm::OdKd => {
                    let model = Model::new(base_arch.clone(), dist.clone(), seed)?;
                    let kd = DistillConfig {
                        enabled: true,
                        ..cfg.kd
                    };
                    let (trained, trace) = central_od_training(
                        model,
                        train,
                        test,
                        opt.epochs,
                        opt.batch_size,
                        opt.lr,
                        opt.momentum,
                        &kd,
                        seed,
                    )?;
                    trace.write_csv(&out.join(format!("metrics_od_kd_seed{seed}.csv")))?;
                    checkpoint::save_model(
                        &trained,
                        &out.join(format!("checkpoints/od_kd_seed{seed}.ckpt")),
                    )?;
                    Ok((si, arm, final_accuracies(&trace, &widths), None))
                }
                Arm::Sm(p) => {
                    let scaled = base_arch.scaled(p)?;
                    let single = DropoutDistribution::uniform_k(1)?;
                    let model = Model::new(scaled, single, seed)?;
                    let (trained, trace) = central_od_training(
                        model,
                        train,
                        test,
                        opt.epochs,
                        opt.batch_size,
                        opt.lr,
                        opt.momentum,
                        &DistillConfig::disabled(),
                        seed,
                    )?;
                    let tag = format!("sm_p{:02}", (p * 100.0).round() as u32);
                    trace.write_csv(&out.join(format!("metrics_{tag}_seed{seed}.csv")))?;
                    checkpoint::save_model(
                        &trained,
                        &out.join(format!("checkpoints/{tag}_seed{seed}.ckpt")),
                    )?;
                    let acc = trace.final_test_accuracy(1.0).unwrap_or(f64::NAN);
                    let keep_model = (p == 1.0).then_some(trained);
                    Ok((si, arm, vec![(p, acc)], keep_model))
                }
            }
        })
        .collect();

    let n_seeds = cfg.seeds.len();
    let mut od_rows: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_seeds];
    let mut kd_rows: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_seeds];
    let mut sm_rows: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_seeds];
    let mut full_models: Vec<Option<Model>> = (0..n_seeds).map(|_| None).collect();
    for r in results {
        let (si, arm, accs, model) = r?;
        match arm {
            Arm::Od => od_rows[si] = accs,
            Arm::OdKd => kd_rows[si] = accs,
            Arm::Sm(_) => {
                sm_rows[si].extend(accs);
                if let Some(m) = model {
                    full_models[si] = Some(m);
                }
            }
        }
    }
    for row in &mut sm_rows {
        row.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    // Random masks of ordered sizes over each seed's plainly trained full
    // model.
    let mut rd_rows: Vec<Vec<(f64, f64)>> = Vec::with_capacity(n_seeds);
    for (si, &(_, seed)) in tasks_input.iter().enumerate() {
        let full = full_models[si]
            .as_ref()
            .expect("width 1.0 is always a candidate");
        let (_, test) = &datasets[si];
        let mut sm1_rd = Vec::new();
        for (pi, &p) in widths.iter().enumerate() {
            let mut mask_rng = Rng::substream(seed, StreamId::Mask, &[pi as u64]);
            let kept = fed::random_kept_lists(full, 1.0, p, &mut mask_rng)?;
            let sel = full.masked_selection(1.0, kept)?;
            let (acc, _loss) = evaluate_selection(full, test, &sel, 256)?;
            sm1_rd.push((p, acc));
        }
        rd_rows.push(sm1_rd);
    }

    let mut run_counts = BTreeMap::new();
    run_counts.insert("od".into(), 1usize);
    run_counts.insert("od_kd".into(), 1);
    run_counts.insert("sm".into(), widths.len());
    run_counts.insert("sm1_rd".into(), 0);

    let summary = RunSummary {
        experiment: "centralized".into(),
        seeds: cfg.seeds.clone(),
        arms: vec![
            summarize_arm("od", &widths, &od_rows),
            summarize_arm("od_kd", &widths, &kd_rows),
            summarize_arm("sm", &widths, &sm_rows),
            summarize_arm("sm1_rd", &widths, &rd_rows),
        ],
        run_counts,
        notes: vec![
            "sm arm trains one independent model per width; its per-width entries are those models' accuracies".into(),
            "sm1_rd evaluates the plainly trained full model under random masks of ordered sizes".into(),
        ],
        measured_wall_ms: start.elapsed().as_millis(),
    };
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(CentralizedReport {
        summary,
        dir: out.to_path_buf(),
    })
}

fn final_accuracies(trace: &MetricTrace, widths: &[f64]) -> Vec<(f64, f64)> {
    widths
        .iter()
        .map(|&p| (p, trace.final_test_accuracy(p).unwrap_or(f64::NAN)))
        .collect()
}

/// Accuracy and mean loss under an explicit selection (random-mask arms).
pub fn evaluate_selection(
    model: &Model,
    dataset: &Dataset,
    sel: &crate::model::Selection,
    batch: usize,
) -> Result<(f64, f64)> {
    let labels = dataset.labels()?;
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let n = dataset.len();
    let mut start = 0usize;
    while start < n {
        let end = (start + batch).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let inputs = dataset.inputs.gather(&indices);
        let logits = model.forward_eval(&inputs, sel)?;
        let classes = logits.len() / logits.batch();
        for (row, &idx) in indices.iter().enumerate() {
            let scores = &logits.data()[row * classes..(row + 1) * classes];
            if fed::argmax(scores) == labels[idx] {
                correct += 1;
            }
            loss_sum += crate::loss::cross_entropy(scores, labels[idx])?;
        }
        start = end;
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

// -- federated experiment ------------------------------------------------------

pub struct FederatedReport {
    pub summary: RunSummary,
    pub dir: PathBuf,
}

/// Protocol arms plus baselines on the same partitions and seeds: ordered
/// federated training with and without distillation, the tier-extension
/// variant, one independent random-dropout run per target width, the
/// single-rate random-dropout baseline, and a step-matched centralized
/// reference.
pub fn run_federated(cfg: &ExperimentConfig, out: &Path) -> Result<FederatedReport> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out)?;
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::write(out.join("config.json"), cfg.canonical_json())?;
    let dist = DropoutDistribution::uniform_k(cfg.dropout.k)?;
    let widths = dist.values().to_vec();
    let base_arch = build_architecture(cfg);

    let fed_cfg_for = |seed: u64| FederatedRunConfig {
        rounds: cfg.federation.rounds,
        local_iters: cfg.federation.local_iters,
        participation: cfg.federation.participation,
        num_clients: cfg.federation.clients,
        drop_scale: cfg.federation.drop_scale,
        batch_size: cfg.optimizer.batch_size,
        lr: cfg.optimizer.lr,
        momentum: cfg.federation.momentum,
        schedule_decay: cfg.federation.schedule_decay,
        kd: DistillConfig::disabled(),
        efd_extension: None,
        cluster_dist: None,
        partition: cfg.federation.partition,
        seed,
        eval_every: cfg.federation.eval_every,
        quiet: true,
    };

    struct SeedOutcome {
        fjord: Vec<(f64, f64)>,
        fjord_kd: Vec<(f64, f64)>,
        fjord_efd: Vec<(f64, f64)>,
        efd: Vec<(f64, f64)>,
        fd: Vec<(f64, f64)>,
        central_ref: Vec<(f64, f64)>,
    }

    let seed_results: Vec<Result<SeedOutcome>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (train, test) = build_task(cfg, seed, out)?;

            // Ordered federated training.
            let run_cfg = fed_cfg_for(seed);
            let model = Model::new(base_arch.clone(), dist.clone(), seed)?;
            let outcome = fed::run_training(&run_cfg, LocalRule::Fjord, model, &train, &test)?;
            outcome
                .trace
                .write_csv(&out.join(format!("metrics_fjord_seed{seed}.csv")))?;
            checkpoint::save_model(
                &outcome.model,
                &out.join(format!("checkpoints/fjord_seed{seed}.ckpt")),
            )?;
            let fjord = trace_final(&outcome.trace, &widths);

            // With distillation.
            let mut kd_cfg = fed_cfg_for(seed);
            kd_cfg.kd = DistillConfig {
                enabled: true,
                ..cfg.kd
            };
            let model = Model::new(base_arch.clone(), dist.clone(), seed)?;
            let outcome = fed::run_training(&kd_cfg, LocalRule::Fjord, model, &train, &test)?;
            outcome
                .trace
                .write_csv(&out.join(format!("metrics_fjord_kd_seed{seed}.csv")))?;
            checkpoint::save_model(
                &outcome.model,
                &out.join(format!("checkpoints/fjord_kd_seed{seed}.ckpt")),
            )?;
            let fjord_kd = trace_final(&outcome.trace, &widths);

            // Tier extension capped at a quarter of the next tier.
            let mut ext_cfg = fed_cfg_for(seed);
            ext_cfg.kd = kd_cfg.kd;
            let model = Model::new(base_arch.clone(), dist.clone(), seed)?;
            let outcome = fed::run_training(
                &ext_cfg,
                LocalRule::FjordEfd { d: 0.25 },
                model,
                &train,
                &test,
            )?;
            outcome
                .trace
                .write_csv(&out.join(format!("metrics_fjord_efd_seed{seed}.csv")))?;
            checkpoint::save_model(
                &outcome.model,
                &out.join(format!("checkpoints/fjord_efd_seed{seed}.ckpt")),
            )?;
            let fjord_efd = trace_final(&outcome.trace, &widths);

            // One independent random-dropout run per target width; the value
            // at width q is that run's full-model accuracy.
            let mut efd = Vec::new();
            for &q in &widths {
                let scaled = base_arch.scaled(q)?;
                let single = DropoutDistribution::uniform_k(1)?;
                let model = Model::new(scaled, single, seed)?;
                let mut efd_cfg = fed_cfg_for(seed);
                efd_cfg.cluster_dist = Some(dist.clone());
                let outcome = fed::run_training(
                    &efd_cfg,
                    LocalRule::Efd { target_width: q },
                    model,
                    &train,
                    &test,
                )?;
                let tag = format!("efd_q{:02}", (q * 100.0).round() as u32);
                outcome
                    .trace
                    .write_csv(&out.join(format!("metrics_{tag}_seed{seed}.csv")))?;
                checkpoint::save_model(
                    &outcome.model,
                    &out.join(format!("checkpoints/{tag}_seed{seed}.ckpt")),
                )?;
                efd.push((q, outcome.trace.final_test_accuracy(1.0).unwrap_or(f64::NAN)));
            }

            // Single-rate random dropout sized for the lowest tier.
            let mut fd_cfg = fed_cfg_for(seed);
            fd_cfg.cluster_dist = Some(dist.clone());
            let single = DropoutDistribution::uniform_k(1)?;
            let model = Model::new(base_arch.clone(), single, seed)?;
            let outcome = fed::run_training(
                &fd_cfg,
                LocalRule::Fd {
                    keep_ratio: dist.min_width(),
                },
                model,
                &train,
                &test,
            )?;
            outcome
                .trace
                .write_csv(&out.join(format!("metrics_fd_seed{seed}.csv")))?;
            checkpoint::save_model(
                &outcome.model,
                &out.join(format!("checkpoints/fd_seed{seed}.ckpt")),
            )?;
            let fd = vec![(1.0, outcome.trace.final_test_accuracy(1.0).unwrap_or(f64::NAN))];

            // Step-matched centralized reference: as many sequential steps as
            // one federated stream performs.
            let e = cfg.federation.local_iters.unwrap_or_else(|| {
                (train.len() / cfg.federation.clients).div_ceil(cfg.optimizer.batch_size).max(1)
            });
            let total_steps = cfg.federation.rounds as usize * e;
            let steps_per_epoch = train.len().div_ceil(cfg.optimizer.batch_size);
            let epochs = total_steps.div_ceil(steps_per_epoch).max(1);
            let model = Model::new(base_arch.clone(), dist.clone(), seed)?;
            let (central_model, central_trace) = central_od_training(
                model,
                &train,
                &test,
                epochs,
                cfg.optimizer.batch_size,
                cfg.optimizer.lr,
                cfg.federation.momentum,
                &DistillConfig::disabled(),
                seed,
            )?;
            central_trace
                .write_csv(&out.join(format!("metrics_central_ref_seed{seed}.csv")))?;
            checkpoint::save_model(
                &central_model,
                &out.join(format!("checkpoints/central_ref_seed{seed}.ckpt")),
            )?;
            let central_ref = trace_final(&central_trace, &widths);

            Ok(SeedOutcome {
                fjord,
                fjord_kd,
                fjord_efd,
                efd,
                fd,
                central_ref,
            })
        })
        .collect();

    let mut fjord_rows = Vec::new();
    let mut kd_rows = Vec::new();
    let mut ext_rows = Vec::new();
    let mut efd_rows = Vec::new();
    let mut fd_rows = Vec::new();
    let mut central_rows = Vec::new();
    for r in seed_results {
        let r = r?;
        fjord_rows.push(r.fjord);
        kd_rows.push(r.fjord_kd);
        ext_rows.push(r.fjord_efd);
        efd_rows.push(r.efd);
        fd_rows.push(r.fd);
        central_rows.push(r.central_ref);
    }

    let mut run_counts = BTreeMap::new();
    run_counts.insert("fjord".into(), 1usize);
    run_counts.insert("fjord_kd".into(), 1);
    run_counts.insert("fjord_efd".into(), 1);
    run_counts.insert("efd".into(), widths.len());
    run_counts.insert("fd".into(), 1);
    run_counts.insert("central_ref".into(), 1);

    let summary = RunSummary {
        experiment: "federated".into(),
        seeds: cfg.seeds.clone(),
        arms: vec![
            summarize_arm("fjord", &widths, &fjord_rows),
            summarize_arm("fjord_kd", &widths, &kd_rows),
            summarize_arm("fjord_efd", &widths, &ext_rows),
            summarize_arm("efd", &widths, &efd_rows),
            summarize_arm("fd", &[1.0], &fd_rows),
            summarize_arm("central_ref", &widths, &central_rows),
        ],
        run_counts,
        notes: vec![
            "efd entries at width q are independent runs targeting that width; every width needs its own training process".into(),
            "fjord arms produce every width from a single training process".into(),
        ],
        measured_wall_ms: start.elapsed().as_millis(),
    };
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(FederatedReport {
        summary,
        dir: out.to_path_buf(),
    })
}

fn trace_final(trace: &MetricTrace, widths: &[f64]) -> Vec<(f64, f64)> {
    widths
        .iter()
        .map(|&p| (p, trace.final_test_accuracy(p).unwrap_or(f64::NAN)))
        .collect()
}

// -- cost tables ---------------------------------------------------------------

/// Bundled descriptors for the cost table command.
pub fn bundled_descriptors() -> Vec<ArchCostDescriptor> {
    vec![
        resnet18_cifar_descriptor(10),
        femnist_cnn_descriptor(62),
    ]
}

/// One CSV row per (architecture, width): counts plus transfer sizes.
pub fn run_cost_table(
    descriptors: &[ArchCostDescriptor],
    dist: &DropoutDistribution,
) -> Result<String> {
    let mut out = String::from("arch,p,macs,params,downstream_bytes,upstream_bytes\n");
    for desc in descriptors {
        for &p in dist.values() {
            let c = cost_model(desc, p)?;
            let (down, up, _) = comm_savings(desc, p)?;
            out.push_str(&format!(
                "{},{p},{},{},{down},{up}\n",
                desc.name, c.macs, c.params
            ));
        }
    }
    Ok(out)
}
