//! Width-restricted forwards must equal masked full-width forwards exactly,
//! and narrower views must nest inside wider ones.

mod common;

use common::{masked_clone, random_architecture, random_batch};
use fjord_core::model::Model;
use fjord_core::od::DropoutDistribution;
use fjord_core::submodel::{extract_submodel, materialize_submodel};
use fjord_core::Rng;

fn batch_for(model: &Model, rng: &mut Rng, n: usize) -> fjord_core::Tensor {
    let mut shape = vec![n];
    shape.extend_from_slice(&model.arch().input_shape);
    random_batch(rng, &shape)
}

#[test]
fn forward_at_width_equals_masked_full_forward() {
    let mut rng = Rng::new(4242);
    for trial in 0..30 {
        let arch = random_architecture(&mut rng);
        let k = 2 + rng.gen_index(5);
        let dist = DropoutDistribution::uniform_k(k).unwrap();
        let model = Model::new(arch, dist.clone(), 1000 + trial).unwrap();
        let p = dist.values()[rng.gen_index(dist.len())];
        let kept_out = model.kept_counts(p).unwrap().last().copied().unwrap();

        let masked = masked_clone(&model, p);
        let batch = batch_for(&model, &mut rng, 3);
        let sel_p = model.prefix_selection(p).unwrap();
        let narrow = model.forward_eval(&batch, &sel_p).unwrap();
        let sel_full = masked.prefix_selection(1.0).unwrap();
        let wide = masked.forward_eval(&batch, &sel_full).unwrap();

        let full_classes = wide.len() / wide.batch();
        assert_eq!(narrow.len() / narrow.batch(), kept_out);
        for s in 0..batch.batch() {
            for j in 0..kept_out {
                let a = narrow.data()[s * kept_out + j];
                let b = wide.data()[s * full_classes + j];
                assert!(
                    (a - b).abs() < 1e-12,
                    "trial {trial} p={p}: coord ({s},{j}) {a} vs {b}"
                );
            }
        }
    }
}

#[test]
fn materialized_submodels_match_masked_forwards() {
    let mut rng = Rng::new(777);
    for trial in 0..20 {
        let arch = random_architecture(&mut rng);
        let dist = DropoutDistribution::uniform_k(5).unwrap();
        let model = Model::new(arch, dist.clone(), 2000 + trial).unwrap();
        let p = dist.values()[rng.gen_index(dist.len())];
        let view = extract_submodel(&model, p).unwrap();
        let small = materialize_submodel(&view).unwrap();
        let batch = batch_for(&model, &mut rng, 2);
        let narrow = model
            .forward_eval(&batch, &model.prefix_selection(p).unwrap())
            .unwrap();
        let got = small
            .forward_eval(&batch, &small.prefix_selection(1.0).unwrap())
            .unwrap();
        assert_eq!(narrow.shape(), got.shape());
        for (a, b) in narrow.data().iter().zip(got.data()) {
            assert!((a - b).abs() < 1e-12, "trial {trial} p={p}");
        }
    }
}

#[test]
fn narrower_views_nest_inside_wider_ones() {
    let mut rng = Rng::new(99);
    for trial in 0..30 {
        let arch = random_architecture(&mut rng);
        let k = 2 + rng.gen_index(8);
        let dist = DropoutDistribution::uniform_k(k).unwrap();
        let model = Model::new(arch, dist.clone(), 3000 + trial).unwrap();
        let atoms = dist.values();
        for i in 0..atoms.len() {
            for j in (i + 1)..atoms.len() {
                let narrow = extract_submodel(&model, atoms[i]).unwrap();
                let wide = extract_submodel(&model, atoms[j]).unwrap();
                for (a, b) in narrow.kept_counts().iter().zip(wide.kept_counts()) {
                    assert!(a <= b, "kept counts must be monotone in width");
                }
            }
        }
    }
}

#[test]
fn full_width_forward_has_no_dropout_machinery_effect() {
    // A model under a dropout distribution evaluated at p = 1.0 must agree
    // exactly with the same weights evaluated under the trivial candidate set.
    let mut rng = Rng::new(31);
    let arch = random_architecture(&mut rng);
    let model = Model::new(arch.clone(), DropoutDistribution::uniform_k(5).unwrap(), 8).unwrap();
    let mut plain = Model::new(arch, DropoutDistribution::uniform_k(1).unwrap(), 8).unwrap();
    // Same seed gives identical weights; copy regardless to be explicit.
    for (d, s) in plain.layers_mut().iter_mut().zip(model.layers()) {
        match (d, s) {
            (
                fjord_core::LayerParams::Dense { w: dw, b: db },
                fjord_core::LayerParams::Dense { w: sw, b: sb },
            )
            | (
                fjord_core::LayerParams::Conv2d { w: dw, b: db },
                fjord_core::LayerParams::Conv2d { w: sw, b: sb },
            ) => {
                *dw = sw.clone();
                *db = sb.clone();
            }
            _ => {}
        }
    }
    let batch = batch_for(&model, &mut rng, 4);
    let a = model
        .forward_eval(&batch, &model.prefix_selection(1.0).unwrap())
        .unwrap();
    let b = plain
        .forward_eval(&batch, &plain.prefix_selection(1.0).unwrap())
        .unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn two_layer_linear_map_composes_exactly() {
    use fjord_core::arch::linear_two_layer;
    let arch = linear_two_layer(3, 3, 2);
    let mut model = Model::new(arch, DropoutDistribution::uniform_k(1).unwrap(), 0).unwrap();
    let v = [[1.0, 2.0, 0.0], [0.5, -1.0, 1.0], [0.0, 0.0, 2.0]];
    let u = [[1.0, 0.0, 3.0], [-2.0, 1.0, 0.5]];
    if let fjord_core::LayerParams::Dense { w, .. } = &mut model.layers_mut()[0] {
        for (r, row) in v.iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                w.data_mut()[r * 3 + c] = x;
            }
        }
    }
    if let fjord_core::LayerParams::Dense { w, .. } = &mut model.layers_mut()[1] {
        for (r, row) in u.iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                w.data_mut()[r * 3 + c] = x;
            }
        }
    }
    let x = [0.3, -0.7, 1.1];
    let batch = fjord_core::Tensor::from_vec(&[1, 3], x.to_vec()).unwrap();
    let out = model
        .forward_eval(&batch, &model.prefix_selection(1.0).unwrap())
        .unwrap();
    // U (V x) computed by hand.
    let mut vx = [0.0; 3];
    for r in 0..3 {
        for c in 0..3 {
            vx[r] += v[r][c] * x[c];
        }
    }
    let mut uvx = [0.0; 2];
    for r in 0..2 {
        for c in 0..3 {
            uvx[r] += u[r][c] * vx[c];
        }
    }
    for (got, want) in out.data().iter().zip(uvx.iter()) {
        assert!((got - want).abs() < 1e-15);
    }
}
