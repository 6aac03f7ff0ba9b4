//! Backbone, FPN, RPN, heads, loss and inference contracts.

mod common;

use common::{ids_with_prefix, jitter_biases, param_fd_check, probe, synth_input, tiny_model};
use nucleo::autodiff::{grad_check, ParamStore, Tape, Tensor, Var};
use nucleo::detection::{
    multitask_loss, spot_check_gradients, DetectConfig, DetectionTargets, HeadOutputs, MaskRcnn, ModelConfig,
    RpnOutputs, RpnTargets, SampledRoi, TrainTargetConfig,
};
use nucleo::geometry::{iou_box, BoxDelta, BoxXYXY};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut p = probe(&[1, 3, h, w], seed as usize);
    p.scale_assign(0.5);
    p
}

#[test]
fn backbone_and_pyramid_shapes() {
    let (model, store) = MaskRcnn::new::<f64>(ModelConfig::default(), 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.input(random_image(64, 64, 1));
    let stages = model.backbone.forward(&mut tape, &store, x).unwrap();
    let spatial: Vec<(usize, usize)> = stages
        .iter()
        .map(|&v| {
            let (_, _, h, w) = tape.value(v).dims4().unwrap();
            (h, w)
        })
        .collect();
    assert_eq!(spatial, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);

    let p = model.fpn.forward(&mut tape, &store, stages).unwrap();
    for (l, &v) in p.levels.iter().enumerate() {
        assert_eq!(tape.value(v).shape(), &[1, 32, 16 >> l, 16 >> l]);
    }

    let mut t2 = Tape::new();
    let v = t2.input(Tensor::<f64>::zeros(&[1, 3, 65, 64]));
    assert!(model.backbone.forward(&mut t2, &store, v).is_err());
}

#[test]
fn parameter_count_is_fixed_and_initialisation_deterministic() {
    let (_, a) = MaskRcnn::new::<f32>(ModelConfig::default(), 7).unwrap();
    let (_, b) = MaskRcnn::new::<f32>(ModelConfig::default(), 7).unwrap();
    let (_, c) = MaskRcnn::new::<f32>(ModelConfig::default(), 8).unwrap();
    assert_eq!(a.num_scalars(), 413_574);
    assert_eq!(c.num_scalars(), 413_574);
    for (p, q) in a.iter().zip(b.iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.value, q.value);
    }
    assert!(a.iter().zip(c.iter()).any(|(p, q)| p.value != q.value));
}

#[test]
fn zero_image_forward_is_finite() {
    let (model, store) = MaskRcnn::new::<f32>(ModelConfig::default(), 0).unwrap();
    let mut tape = Tape::new();
    let f = model.features(&mut tape, &store, &Tensor::zeros(&[1, 3, 64, 96])).unwrap();
    assert!(tape.value(f.rpn.logits).all_finite());
    assert!(tape.value(f.rpn.deltas).all_finite());
    for v in f.pyramid.levels {
        assert!(tape.value(v).all_finite());
    }
}

#[test]
fn fpn_p2_depends_only_on_c2_when_other_laterals_are_zero() {
    let (model, mut store) = MaskRcnn::new::<f64>(ModelConfig::default(), 3).unwrap();
    for lat in &model.fpn.laterals[1..] {
        let w = store.get(lat.w).value.shape().to_vec();
        store.set_value(lat.w, Tensor::zeros(&w)).unwrap();
    }
    // identity on the first 16 of 32 output channels
    let mut eye = vec![0.0; 32 * 16];
    for i in 0..16 {
        eye[i * 16 + i] = 1.0;
    }
    store.set_value(model.fpn.laterals[0].w, Tensor::new(&[32, 16, 1, 1], eye).unwrap()).unwrap();

    let image = random_image(64, 64, 4);
    let p2 = |store: &ParamStore<f64>| {
        let mut t = Tape::new();
        let x = t.input(image.clone());
        let stages = model.backbone.forward(&mut t, store, x).unwrap();
        let c2 = t.value(stages[0]).clone();
        let p = model.fpn.forward(&mut t, store, stages).unwrap();
        (c2, t.value(p.levels[0]).clone())
    };
    let (c2, got) = p2(&store);

    // direct: zero-extend C2 to 32 channels, then the smoothing conv
    let mut ext = vec![0.0; 32 * 16 * 16];
    ext[..16 * 16 * 16].copy_from_slice(c2.data());
    let mut t = Tape::new();
    let x = t.input(Tensor::new(&[1, 32, 16, 16], ext).unwrap());
    let sm = &model.fpn.smooth[0];
    let w = t.param(&store, sm.w);
    let b = t.param(&store, sm.b);
    let want = t.conv2d(x, w, b, 1, 1).unwrap();
    for (g, e) in got.data().iter().zip(t.value(want).data()) {
        assert!((g - e).abs() < 1e-12);
    }

    // upper-stage weights no longer reach P2
    let c5 = store.by_name("backbone.c5.weight").unwrap();
    let shape = store.get(c5).value.shape().to_vec();
    store.set_value(c5, probe(&shape, 9)).unwrap();
    assert_eq!(p2(&store).1, got);
}

#[test]
fn every_lateral_weight_receives_gradient() {
    let (model, mut store) = MaskRcnn::new::<f64>(ModelConfig::default(), 5).unwrap();
    let mut tape = Tape::new();
    let f = model.features(&mut tape, &store, &random_image(64, 64, 6)).unwrap();
    let mut total = None;
    for (l, &v) in f.pyramid.levels.iter().enumerate() {
        let s = tape.weighted_sum(v, probe(tape.value(v).shape(), l)).unwrap();
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s).unwrap(),
        });
    }
    store.zero_grad();
    tape.backward(total.unwrap(), 1.0).unwrap().accumulate_into(&mut store);
    for lat in &model.fpn.laterals {
        let g = &store.get(lat.w).grad;
        assert!(g.data().iter().any(|&v| v != 0.0), "{}", store.get(lat.w).name);
    }
}

fn level_maps(tape: &mut Tape<f64>, sides: &[usize], c: usize) -> Vec<Var> {
    sides
        .iter()
        .enumerate()
        .map(|(l, &s)| tape.input(probe(&[1, c, s, s], 20 + l)))
        .collect()
}

#[test]
fn rpn_outputs_follow_anchor_order_and_levels_do_not_mix() {
    let (model, store) = tiny_model(1);
    let mut tape = Tape::new();
    let f = model.features(&mut tape, &store, &random_image(64, 96, 2)).unwrap();
    let n = model.anchors(64, 96).len();
    assert_eq!(n, model.cfg.anchors.anchor_count(64, 96));
    assert_eq!(tape.value(f.rpn.logits).shape(), &[n]);
    assert_eq!(tape.value(f.rpn.deltas).shape(), &[n, 4]);

    let a = model.rpn.anchors_per_cell;
    let sides = [16, 8, 4, 2];
    let levels = level_maps(&mut tape, &sides, 4);
    let base = model.rpn.forward_levels(&mut tape, &store, &levels).unwrap();
    let perm = [2, 0, 3, 1];
    let permuted: Vec<Var> = perm.iter().map(|&i| levels[i]).collect();
    let out = model.rpn.forward_levels(&mut tape, &store, &permuted).unwrap();

    let counts: Vec<usize> = sides.iter().map(|s| s * s * a).collect();
    let offset = |order: &[usize], l: usize| -> usize {
        order.iter().take_while(|&&x| x != l).map(|&x| counts[x]).sum()
    };
    let (bl, ol) = (tape.value(base.logits).data(), tape.value(out.logits).data());
    let (bd, od) = (tape.value(base.deltas).data(), tape.value(out.deltas).data());
    for l in 0..4 {
        let (b0, o0) = (offset(&[0, 1, 2, 3], l), offset(&perm, l));
        assert_eq!(&bl[b0..b0 + counts[l]], &ol[o0..o0 + counts[l]]);
        assert_eq!(&bd[4 * b0..4 * (b0 + counts[l])], &od[4 * o0..4 * (o0 + counts[l])]);
    }
}

fn rpn_probe_loss(tape: &mut Tape<f64>, o: &RpnOutputs) -> Var {
    let n = tape.value(o.logits).len();
    let a = tape.weighted_sum(o.logits, probe(&[n], 1)).unwrap();
    let b = tape.weighted_sum(o.deltas, probe(&[n, 4], 2)).unwrap();
    tape.add(a, b).unwrap()
}

#[test]
fn rpn_head_gradcheck() {
    let (model, mut store) = tiny_model(2);
    jitter_biases(&mut store, 0);
    let rpn = model.rpn.clone();
    let st = store.clone();
    let inputs: Vec<Tensor<f64>> = [8usize, 4, 2, 1].iter().enumerate().map(|(l, &s)| probe(&[1, 4, s, s], 30 + l)).collect();
    let f = move |t: &mut Tape<f64>, v: &[Var]| {
        let o = rpn.forward_levels(t, &st, v)?;
        Ok(rpn_probe_loss(t, &o))
    };
    let r = grad_check(&f, &inputs, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-4, "inputs: {r:?}");

    let ids = ids_with_prefix(&store, "rpn.");
    let rpn = model.rpn.clone();
    let (err, at) = param_fd_check(&mut store, &ids, 1000, &|t, s| {
        let levels: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
        let o = rpn.forward_levels(t, s, &levels).unwrap();
        rpn_probe_loss(t, &o)
    });
    assert!(err < 1e-4, "params: {err} at {at}");
}

fn head_probe_loss(tape: &mut Tape<f64>, cls: Var, boxes: Var, mask: Var) -> Var {
    let a = tape.weighted_sum(cls, probe(&tape.value(cls).shape().to_vec(), 3)).unwrap();
    let b = tape.weighted_sum(boxes, probe(&tape.value(boxes).shape().to_vec(), 4)).unwrap();
    let c = tape.weighted_sum(mask, probe(&tape.value(mask).shape().to_vec(), 5)).unwrap();
    let ab = tape.add(a, b).unwrap();
    tape.add(ab, c).unwrap()
}

#[test]
fn heads_gradcheck_through_both_branches() {
    let (model, mut store) = tiny_model(3);
    jitter_biases(&mut store, 0);
    let (bh, mh) = (model.box_head.clone(), model.mask_head.clone());
    let st = store.clone();
    let inputs = vec![probe(&[2, 4, 7, 7], 40), probe(&[2, 4, 14, 14], 41)];
    let f = move |t: &mut Tape<f64>, v: &[Var]| {
        let (cls, boxes) = bh.forward(t, &st, v[0])?;
        let mask = mh.forward(t, &st, v[1])?;
        Ok(head_probe_loss(t, cls, boxes, mask))
    };
    let r = grad_check(&f, &inputs, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-4, "inputs: {r:?}");

    let mut ids = ids_with_prefix(&store, "box_head.");
    ids.extend(ids_with_prefix(&store, "mask_head."));
    let (bh, mh) = (model.box_head.clone(), model.mask_head.clone());
    let (err, at) = param_fd_check(&mut store, &ids, 40, &|t, s| {
        let a = t.input(inputs[0].clone());
        let b = t.input(inputs[1].clone());
        let (cls, boxes) = bh.forward(t, s, a).unwrap();
        let mask = mh.forward(t, s, b).unwrap();
        head_probe_loss(t, cls, boxes, mask)
    });
    assert!(err < 1e-4, "params: {err} at {at}");
}

#[test]
fn zero_rois_give_empty_outputs_with_trailing_shape() {
    let (model, store) = tiny_model(4);
    let mut tape = Tape::new();
    let f = model.features(&mut tape, &store, &random_image(64, 64, 3)).unwrap();
    let (cls, boxes) = model.box_branch(&mut tape, &store, &f, &[]).unwrap();
    let mask = model.mask_branch(&mut tape, &store, &f, &[]).unwrap();
    assert_eq!(tape.value(cls).shape(), &[0, 2]);
    assert_eq!(tape.value(boxes).shape(), &[0, 4]);
    assert_eq!(tape.value(mask).shape(), &[0, 1, 28, 28]);
}

#[test]
fn mask_branch_ignores_class_branch_weights() {
    let (model, mut store) = tiny_model(5);
    let rois = [
        BoxXYXY { x1: 3.0, y1: 5.0, x2: 30.0, y2: 22.0 },
        BoxXYXY { x1: 10.5, y1: 0.0, x2: 60.0, y2: 63.0 },
    ];
    let image = random_image(64, 64, 8);
    let run = |store: &ParamStore<f64>| {
        let mut t = Tape::new();
        let f = model.features(&mut t, store, &image).unwrap();
        let (cls, _) = model.box_branch(&mut t, store, &f, &rois).unwrap();
        let m = model.mask_branch(&mut t, store, &f, &rois).unwrap();
        (t.value(cls).clone(), t.value(m).clone())
    };
    let (cls0, mask0) = run(&store);
    for (k, id) in ids_with_prefix(&store, "box_head.").into_iter().enumerate() {
        let shape = store.get(id).value.shape().to_vec();
        store.set_value(id, probe(&shape, 50 + k)).unwrap();
    }
    let (cls1, mask1) = run(&store);
    assert_ne!(cls0, cls1);
    assert_eq!(mask0, mask1);
}

/// Independent recomputation of the three loss terms from raw values.
fn oracle_terms(
    tape: &Tape<f64>,
    rpn: &RpnOutputs,
    rt: &RpnTargets,
    heads: &HeadOutputs,
    det: &DetectionTargets,
) -> (f64, f64, f64) {
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let sl1 = |d: f64| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };

    let z = tape.value(rpn.logits).data();
    let rpn_ce: Vec<f64> = rt
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l >= 0)
        .map(|(i, &l)| if l == 1 { softplus(-z[i]) } else { softplus(z[i]) })
        .collect();
    let cls = tape.value(heads.cls).data();
    let head_ce: Vec<f64> = det
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l >= 0)
        .map(|(i, &l)| {
            let (a, b) = (cls[2 * i], cls[2 * i + 1]);
            let lse = a.max(b) + ((a - a.max(b)).exp() + (b - a.max(b)).exp()).ln();
            lse - if l == 1 { b } else { a }
        })
        .collect();

    let d = tape.value(rpn.deltas).data();
    let mut rpn_box = Vec::new();
    for i in rt.positives() {
        let t = rt.deltas[i].unwrap().to_array();
        rpn_box.extend((0..4).map(|k| sl1(d[4 * i + k] - t[k])));
    }
    let hb = tape.value(heads.boxes).data();
    let mut head_box = Vec::new();
    let mut bce = Vec::new();
    let m2 = det.mask_size * det.mask_size;
    for (f, i) in det.foreground().into_iter().enumerate() {
        let t = det.rois[i].delta.unwrap().to_array();
        head_box.extend((0..4).map(|k| sl1(hb[4 * i + k] - t[k])));
        let logits = &tape.value(heads.masks.unwrap()).data()[f * m2..(f + 1) * m2];
        for (&x, &y) in logits.iter().zip(det.rois[i].mask.as_ref().unwrap()) {
            bce.push(softplus(x) - x * y);
        }
    }
    (mean(&rpn_ce) + mean(&head_ce), mean(&rpn_box) + mean(&head_box), mean(&bce))
}

#[test]
fn loss_total_is_the_exact_sum_and_matches_independent_terms() {
    let (model, store) = tiny_model(6);
    let (image, gts) = synth_input(11);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let feats = model.features(&mut tape, &store, &image).unwrap();
    let targets = model
        .prepare_targets(&tape, &feats, &gts, &TrainTargetConfig::default(), &mut rng)
        .unwrap();
    assert!(!targets.det.foreground().is_empty());
    assert!(!targets.rpn.positives().is_empty());
    let heads = model.head_outputs(&mut tape, &store, &feats, &targets.det).unwrap();
    let lv = multitask_loss(&mut tape, &feats.rpn, &targets.rpn, &heads, &targets.det).unwrap();
    let b = lv.breakdown(&tape);
    assert_eq!(b.total.to_bits(), ((b.l_cls + b.l_bbox) + b.l_mask).to_bits());

    let (cls, bbox, mask) = oracle_terms(&tape, &feats.rpn, &targets.rpn, &heads, &targets.det);
    for (got, want) in [(b.l_cls, cls), (b.l_bbox, bbox), (b.l_mask, mask)] {
        assert!(want > 0.0);
        assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
    }
}

#[test]
fn saturated_logits_matching_targets_give_near_zero_loss() {
    let mut tape = Tape::<f64>::new();
    let labels = vec![1, 0, -1, 0, 1];
    let z: Vec<f64> = labels.iter().map(|&l| if l == 1 { 20.0 } else { -20.0 }).collect();
    let t1 = BoxDelta { dx: 0.1, dy: -0.2, dw: 0.3, dh: 0.0 };
    let mut rdeltas = vec![0.0; 20];
    rdeltas[..4].copy_from_slice(&t1.to_array());
    rdeltas[16..].copy_from_slice(&t1.to_array());
    let rpn = RpnOutputs {
        logits: tape.input(Tensor::new(&[5], z).unwrap()),
        deltas: tape.input(Tensor::new(&[5, 4], rdeltas).unwrap()),
    };
    let rt = RpnTargets {
        labels,
        deltas: vec![Some(t1), None, None, None, Some(t1)],
    };
    let m = 4;
    let grid: Vec<f64> = (0..m * m).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let fg = |d: BoxDelta| SampledRoi {
        bbox: BoxXYXY { x1: 0.0, y1: 0.0, x2: 4.0, y2: 4.0 },
        label: 1,
        delta: Some(d),
        mask: Some(grid.clone()),
    };
    let t2 = BoxDelta { dx: -0.4, dy: 0.0, dw: 0.05, dh: -0.1 };
    let det = DetectionTargets {
        rois: vec![
            fg(t1),
            SampledRoi { bbox: BoxXYXY { x1: 1.0, y1: 1.0, x2: 2.0, y2: 2.0 }, label: 0, delta: None, mask: None },
            fg(t2),
        ],
        mask_size: m,
    };
    let cls = tape.input(Tensor::new(&[3, 2], vec![-10.0, 10.0, 10.0, -10.0, -10.0, 10.0]).unwrap());
    let mut hb = t1.to_array().to_vec();
    hb.extend([0.5, 0.5, 0.5, 0.5]);
    hb.extend(t2.to_array());
    let boxes = tape.input(Tensor::new(&[3, 4], hb).unwrap());
    let ml: Vec<f64> = grid.iter().chain(&grid).map(|&t| if t == 1.0 { 20.0 } else { -20.0 }).collect();
    let masks = Some(tape.input(Tensor::new(&[2, 1, m, m], ml).unwrap()));
    let lv = multitask_loss(&mut tape, &rpn, &rt, &HeadOutputs { cls, boxes, masks }, &det).unwrap();
    let b = lv.breakdown(&tape);
    assert!(b.total < 1e-6 && b.total >= 0.0, "{b:?}");
}

#[test]
fn without_foreground_the_total_is_the_classification_loss() {
    let (model, store) = tiny_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let feats = model.features(&mut tape, &store, &random_image(64, 64, 12)).unwrap();
    let targets = model
        .prepare_targets(&tape, &feats, &[], &TrainTargetConfig::default(), &mut rng)
        .unwrap();
    assert!(targets.det.foreground().is_empty() && targets.rpn.positives().is_empty());
    let heads = model.head_outputs(&mut tape, &store, &feats, &targets.det).unwrap();
    assert!(heads.masks.is_none());
    let b = multitask_loss(&mut tape, &feats.rpn, &targets.rpn, &heads, &targets.det)
        .unwrap()
        .breakdown(&tape);
    assert_eq!((b.l_bbox, b.l_mask), (0.0, 0.0));
    assert_eq!(b.total, b.l_cls);
    assert!(b.l_cls > 0.0);
}

#[test]
fn end_to_end_gradient_spot_check() {
    let (model, mut store) = tiny_model(8);
    jitter_biases(&mut store, 0);
    let (image, gts) = synth_input(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let feats = model.features(&mut tape, &store, &image).unwrap();
    let targets = model
        .prepare_targets(&tape, &feats, &gts, &TrainTargetConfig::default(), &mut rng)
        .unwrap();
    let r = spot_check_gradients(&model, &mut store, &image, &targets, 5, 1e-6, 9).unwrap();
    assert_eq!(r.checked, store.iter().map(|p| p.value.len().min(5)).sum::<usize>());
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn strongly_negative_objectness_bias_detects_nothing() {
    let (model, mut store) = tiny_model(9);
    let b = model.rpn.objectness.b;
    let n = store.get(b).value.len();
    store.set_value(b, Tensor::full(&[n], -20.0)).unwrap();
    let dets = model.detect(&store, &random_image(64, 64, 13), &DetectConfig::default()).unwrap();
    assert!(dets.is_empty());
}

#[test]
fn detections_respect_the_cap_nms_and_ordering() {
    let (model, store) = tiny_model(10);
    let (image, _) = synth_input(5);
    let mut cfg = DetectConfig { score_threshold: 0.0, ..DetectConfig::default() };
    cfg.proposals.min_objectness = 0.0;
    let all = model.detect(&store, &image, &cfg).unwrap();
    assert!(all.len() > 5, "need enough detections to exercise the cap");
    for pair in all.windows(2) {
        assert!(pair[0].score >= pair[1].score);
    }
    for (i, a) in all.iter().enumerate() {
        assert_eq!((a.mask.height(), a.mask.width()), (128, 128));
        for b in &all[i + 1..] {
            assert!(iou_box(&a.bbox, &b.bbox) <= cfg.nms_iou);
        }
    }
    let capped = model.detect(&store, &image, &DetectConfig { max_detections: 5, ..cfg }).unwrap();
    assert_eq!(capped, all[..5].to_vec());
}
