//! Nested submodel extraction: views, materialization and write-back.
//!
//! A view names the prefix of every layer kept at width `p`. Materializing a
//! view copies only those coordinates into a standalone smaller model, with
//! no retraining and no data involved; write-back is the inverse and touches
//! only the view's coordinates in the source.

use std::collections::BTreeMap;

use crate::arch::{Architecture, LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::model::{BnStats, LayerParams, Model, WidthKey};
use crate::od::DropoutDistribution;
use crate::tensor::{kept_units, Tensor};

/// Prefix ranges `[0, kept_l)` for every weight layer of a source model at
/// one width.
#[derive(Clone, Debug, PartialEq)]
pub struct SubmodelView<'a> {
    model: &'a Model,
    p: f64,
    kept: Vec<usize>,
}

impl<'a> SubmodelView<'a> {
    pub fn p(&self) -> f64 {
        self.p
    }

    /// Kept output-unit count per weight layer.
    pub fn kept_counts(&self) -> &[usize] {
        &self.kept
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Learnable parameter count of the view.
    pub fn parameter_count(&self) -> usize {
        let sel = selection_for(self.model, &self.kept);
        self.model.selection_parameter_count(&sel)
    }
}

fn selection_for(model: &Model, kept: &[usize]) -> crate::model::Selection {
    // Prefix lists bounded by the model's own widths are always valid under
    // its widest candidate.
    let lists: Vec<Vec<usize>> = kept.iter().map(|&n| (0..n).collect()).collect();
    model
        .masked_selection(model.dist().max_width(), lists)
        .expect("prefix selection within bounds")
}

/// Kept counts at any `p` in (0, 1]: candidate widths use the model's carried
/// table (preserving the parent's ceiling arithmetic on sliced models);
/// other widths use the ceiling rule on the model's own layer widths.
pub fn extract_submodel(model: &Model, p: f64) -> Result<SubmodelView<'_>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidWidth(p));
    }
    let kept = match model.kept_counts(p) {
        Ok(counts) => counts.to_vec(),
        Err(_) => model
            .arch()
            .layers
            .iter()
            .filter(|s| s.has_weights())
            .map(|s| {
                let k = s.width().unwrap();
                if s.od_eligible {
                    kept_units(p, k)
                } else {
                    k
                }
            })
            .collect(),
    };
    Ok(SubmodelView {
        model,
        p,
        kept,
    })
}

/// Standalone deployable model for one width: parameters restricted to the
/// view, candidate set collapsed to `{1.0}`, and only the view's own
/// normalization statistics embedded.
pub fn materialize_submodel(view: &SubmodelView) -> Result<Model> {
    let single = DropoutDistribution::new(vec![1.0], vec![1.0])?;
    slice_model(view.model, view.p, &view.kept, &single, &[view.p])
}

/// Sliced model for a capability-capped client: keeps every candidate width
/// up to the cap (renormalized), their kept-count table and their statistics,
/// so conditional-width training on the slice reproduces the parent's
/// arithmetic exactly.
pub fn slice_for_training(model: &Model, p_cap: f64) -> Result<Model> {
    let dist = model.dist();
    if !dist.contains(p_cap) {
        return Err(Error::WidthNotInDistribution(p_cap));
    }
    let atoms: Vec<f64> = dist
        .values()
        .iter()
        .copied()
        .filter(|&v| v <= p_cap)
        .collect();
    let probs_raw: Vec<f64> = dist
        .probabilities()
        .iter()
        .zip(dist.values())
        .filter(|(_, &v)| v <= p_cap)
        .map(|(&q, _)| q)
        .collect();
    let total: f64 = probs_raw.iter().sum();
    let probs: Vec<f64> = probs_raw.iter().map(|&q| q / total).collect();
    let sliced_dist = DropoutDistribution::new(atoms.clone(), probs)?;
    let kept = model.kept_counts(p_cap)?.to_vec();
    slice_model(model, p_cap, &kept, &sliced_dist, &atoms)
}

fn slice_model(
    model: &Model,
    p: f64,
    kept: &[usize],
    new_dist: &DropoutDistribution,
    stat_widths: &[f64],
) -> Result<Model> {
    let src_arch = model.arch();
    let mut layers_spec = Vec::with_capacity(src_arch.layers.len());
    let mut ordinal = 0usize;
    for spec in &src_arch.layers {
        let new_spec = match spec.kind {
            LayerKind::Dense { bias, .. } => {
                let s = LayerSpec {
                    kind: LayerKind::Dense {
                        width: kept[ordinal],
                        bias,
                    },
                    od_eligible: spec.od_eligible,
                };
                ordinal += 1;
                s
            }
            LayerKind::Conv2d { kernel, bias, .. } => {
                let s = LayerSpec {
                    kind: LayerKind::Conv2d {
                        filters: kept[ordinal],
                        kernel,
                        bias,
                    },
                    od_eligible: spec.od_eligible,
                };
                ordinal += 1;
                s
            }
            _ => spec.clone(),
        };
        layers_spec.push(new_spec);
    }
    let arch = Architecture::new(src_arch.input_shape.clone(), layers_spec)?;
    let src_plan = src_arch.plan_with_kept(&src_arch.full_kept_counts())?;
    let dst_plan = arch.plan_with_kept(&arch.full_kept_counts())?;

    let mut layers = Vec::with_capacity(model.layers().len());
    for (idx, lp) in model.layers().iter().enumerate() {
        let sliced = match lp {
            LayerParams::Dense { w, b } => {
                let out = dst_plan.shapes[idx + 1].count();
                let n_in = dst_plan.shapes[idx].count();
                let full_in = src_plan.shapes[idx].count();
                let mut data = Vec::with_capacity(out * n_in);
                for o in 0..out {
                    let row = &w.data()[o * full_in..o * full_in + n_in];
                    data.extend_from_slice(row);
                }
                LayerParams::Dense {
                    w: Tensor::from_vec(&[out, n_in], data)?,
                    b: b.as_ref().map(|b| b[..out].to_vec()),
                }
            }
            LayerParams::Conv2d { w, b } => {
                let out = channel_of(dst_plan.shapes[idx + 1]);
                let cin = channel_of(dst_plan.shapes[idx]);
                let full_in = w.shape()[1];
                let k2 = w.shape()[2] * w.shape()[3];
                let mut data = Vec::with_capacity(out * cin * k2);
                for o in 0..out {
                    for i in 0..cin {
                        let base = (o * full_in + i) * k2;
                        data.extend_from_slice(&w.data()[base..base + k2]);
                    }
                }
                LayerParams::Conv2d {
                    w: Tensor::from_vec(&[out, cin, w.shape()[2], w.shape()[3]], data)?,
                    b: b.as_ref().map(|b| b[..out].to_vec()),
                }
            }
            LayerParams::Batchnorm { gamma, beta, stats } => {
                let ch = channel_of(dst_plan.shapes[idx]);
                let mut new_stats = BTreeMap::new();
                for (&new_key, &src_key) in new_dist.values().iter().zip(stat_widths) {
                    let src = stats
                        .get(&WidthKey(src_key))
                        .ok_or(Error::WidthNotInDistribution(src_key))?;
                    new_stats.insert(
                        WidthKey(new_key),
                        BnStats {
                            mean: src.mean.clone(),
                            var: src.var.clone(),
                            count: src.count,
                        },
                    );
                }
                LayerParams::Batchnorm {
                    gamma: gamma[..ch].to_vec(),
                    beta: beta[..ch].to_vec(),
                    stats: new_stats,
                }
            }
            LayerParams::Stateless => LayerParams::Stateless,
        };
        layers.push(sliced);
    }

    // The kept-count table carries the parent's ceiling arithmetic: entries
    // for each retained width, expressed in the sliced model's layers.
    let mut kept_table = BTreeMap::new();
    for (&new_key, &src_key) in new_dist.values().iter().zip(stat_widths) {
        let counts = match model.kept_counts(src_key) {
            Ok(c) => c.to_vec(),
            Err(_) if src_key == p => kept.to_vec(),
            Err(e) => return Err(e),
        };
        kept_table.insert(WidthKey(new_key), counts);
    }
    Ok(Model::from_parts(arch, new_dist.clone(), layers, kept_table))
}

fn channel_of(shape: crate::arch::FeatureShape) -> usize {
    match shape {
        crate::arch::FeatureShape::Vector { n } => n,
        crate::arch::FeatureShape::Image { c, .. } => c,
    }
}

/// Copy a sliced model's weights back into the source: only coordinates
/// inside the slice's prefix ranges change.
pub fn write_back(target: &mut Model, sliced: &Model) -> Result<()> {
    if target.layers().len() != sliced.layers().len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} layers", target.layers().len()),
            actual: format!("{}", sliced.layers().len()),
        });
    }
    let src_arch = sliced.arch().clone();
    let src_plan = src_arch.plan_with_kept(&src_arch.full_kept_counts())?;
    for (idx, (dst, src)) in target
        .layers_mut()
        .iter_mut()
        .zip(sliced.layers())
        .enumerate()
    {
        match (dst, src) {
            (LayerParams::Dense { w: dw, b: db }, LayerParams::Dense { w: sw, b: sb }) => {
                let (out, n_in) = (sw.shape()[0], sw.shape()[1]);
                let full_in = dw.shape()[1];
                if out > dw.shape()[0] || n_in > full_in {
                    return Err(Error::ShapeMismatch {
                        expected: format!("at most {:?}", dw.shape()),
                        actual: format!("{:?}", sw.shape()),
                    });
                }
                for o in 0..out {
                    dw.data_mut()[o * full_in..o * full_in + n_in]
                        .copy_from_slice(&sw.data()[o * n_in..(o + 1) * n_in]);
                }
                if let (Some(db), Some(sb)) = (db, sb) {
                    db[..out].copy_from_slice(sb);
                }
            }
            (LayerParams::Conv2d { w: dw, b: db }, LayerParams::Conv2d { w: sw, b: sb }) => {
                let (out, cin) = (sw.shape()[0], sw.shape()[1]);
                let full_in = dw.shape()[1];
                let k2 = sw.shape()[2] * sw.shape()[3];
                if out > dw.shape()[0] || cin > full_in {
                    return Err(Error::ShapeMismatch {
                        expected: format!("at most {:?}", dw.shape()),
                        actual: format!("{:?}", sw.shape()),
                    });
                }
                for o in 0..out {
                    for i in 0..cin {
                        let dst_base = (o * full_in + i) * k2;
                        let src_base = (o * cin + i) * k2;
                        dw.data_mut()[dst_base..dst_base + k2]
                            .copy_from_slice(&sw.data()[src_base..src_base + k2]);
                    }
                }
                if let (Some(db), Some(sb)) = (db, sb) {
                    db[..out].copy_from_slice(sb);
                }
            }
            (
                LayerParams::Batchnorm {
                    gamma: dg,
                    beta: dbt,
                    stats: dst_stats,
                },
                LayerParams::Batchnorm {
                    gamma: sg,
                    beta: sbt,
                    stats: src_stats,
                },
            ) => {
                let ch = channel_of(src_plan.shapes[idx]);
                dg[..ch].copy_from_slice(&sg[..ch]);
                dbt[..ch].copy_from_slice(&sbt[..ch]);
                for (key, src_entry) in src_stats {
                    if let Some(dst_entry) = dst_stats.get_mut(key) {
                        let n = src_entry.mean.len().min(dst_entry.mean.len());
                        dst_entry.mean[..n].copy_from_slice(&src_entry.mean[..n]);
                        dst_entry.var[..n].copy_from_slice(&src_entry.var[..n]);
                        dst_entry.count = src_entry.count;
                    }
                }
            }
            (LayerParams::Stateless, LayerParams::Stateless) => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: "matching layer kinds".into(),
                    actual: format!("layer {idx} differs"),
                })
            }
        }
    }
    Ok(())
}
