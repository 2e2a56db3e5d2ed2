//! Acceptance suite. Each test checks one exit criterion at its stated
//! tolerance and prints a PASS line with the measured numbers; the
//! desk-scale training benchmark behind the last three criteria runs
//! once and is shared.

mod common;

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;

use stuffnet_core::boxgeom::{
    assign_rpn_labels, nms, sample_head_minibatch, BBox, Detection, GtBox, HeadSampleConfig,
    RpnSampleConfig,
};
use stuffnet_core::data::{self, Dataset, SceneGenSpec};
use stuffnet_core::evalkit::{
    average_precision, evaluate_map, ImageEval, SizeBin, SizeBins, Verdict,
};
use stuffnet_core::graph::{finite_difference_check, Graph};
use stuffnet_core::layers::{self, ConvParams, PoolParams};
use stuffnet_core::model::{
    decode_checkpoint, encode_checkpoint, Model, ModelSpec, PostprocessConfig, ProposalConfig,
    Variant,
};
use stuffnet_core::rng::Rng;
use stuffnet_core::tensor::Tensor;
use stuffnet_core::train::{
    self, hallucinate_dataset, plan_step, smoothed_total, step_loss, train, train_constrained,
    TrainConfig,
};

// ---------------------------------------------------------------------------
// criterion 1: gradient fidelity

/// Random input kept at least `margin` away from relu kinks.
fn off_kink_tensor(dims: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::rand_uniform(dims, -1.0, 1.0, rng).unwrap();
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v = 0.05 * v.signum().max(0.5);
        }
    }
    t
}

/// Loss shape that exercises non-uniform cotangents: sum(out * mask).
fn masked_sum(g: &mut Graph, out: stuffnet_core::graph::NodeId, mask: &Tensor) -> stuffnet_core::graph::NodeId {
    let m = g.leaf(mask.clone());
    let prod = g.mul(out, m).unwrap();
    g.sum(prod).unwrap()
}

#[test]
fn a01_gradient_fidelity() {
    let started = Instant::now();
    let tol = 1e-3;
    let h = 1e-5;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut bump = |name: &'static str, err: f64| {
        let slot = worst.entry(name).or_insert(0.0);
        *slot = slot.max(err);
        assert!(err < tol, "{name} finite-difference error {err}");
    };

    // conv2d: gradients w.r.t. input, kernel, and bias
    let mut rng = Rng::new(9001);
    for _ in 0..20 {
        let (ci, co) = (1 + rng.below(3), 1 + rng.below(3));
        let k = 1 + rng.below(3);
        let p = ConvParams::new(1 + rng.below(2), rng.below(3), 1 + rng.below(2)).unwrap();
        let eff = p.effective_extent(k);
        let side = eff.max(3) + 2 + rng.below(3);
        let x = Tensor::rand_uniform(&[1, ci, side, side], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::rand_uniform(&[co, ci, k, k], -0.7, 0.7, &mut rng).unwrap();
        let b = Tensor::rand_uniform(&[co], -0.3, 0.3, &mut rng).unwrap();
        let (oh, ow) = (p.out_extent(side, k).unwrap(), p.out_extent(side, k).unwrap());
        let mask = Tensor::rand_uniform(&[1, co, oh, ow], -1.0, 1.0, &mut rng).unwrap();

        let (wc, bc, mc) = (w.clone(), b.clone(), mask.clone());
        let err = finite_difference_check(
            move |g, xn| {
                let wn = g.leaf(wc.clone());
                let bn = g.leaf(bc.clone());
                let c = layers::conv2d(g, xn, wn, bn, p)?;
                Ok(masked_sum(g, c, &mc))
            },
            &x,
            h,
        )
        .unwrap();
        bump("conv2d/input", err);

        let (xc, bc, mc) = (x.clone(), b.clone(), mask.clone());
        let err = finite_difference_check(
            move |g, wn| {
                let xn = g.leaf(xc.clone());
                let bn = g.leaf(bc.clone());
                let c = layers::conv2d(g, xn, wn, bn, p)?;
                Ok(masked_sum(g, c, &mc))
            },
            &w,
            h,
        )
        .unwrap();
        bump("conv2d/kernel", err);

        let (xc, wc, mc) = (x.clone(), w.clone(), mask.clone());
        let err = finite_difference_check(
            move |g, bn| {
                let xn = g.leaf(xc.clone());
                let wn = g.leaf(wc.clone());
                let c = layers::conv2d(g, xn, wn, bn, p)?;
                Ok(masked_sum(g, c, &mc))
            },
            &b,
            h,
        )
        .unwrap();
        bump("conv2d/bias", err);
    }

    // relu
    for _ in 0..20 {
        let x = off_kink_tensor(&[1 + rng.below(3), 3 + rng.below(8)], &mut rng);
        let mask = Tensor::rand_uniform(x.dims(), -1.0, 1.0, &mut rng).unwrap();
        let mc = mask.clone();
        let err = finite_difference_check(
            move |g, xn| {
                let r = layers::relu(g, xn)?;
                Ok(masked_sum(g, r, &mc))
            },
            &x,
            h,
        )
        .unwrap();
        bump("relu", err);
    }

    // maxpool2d on tie-free inputs
    for _ in 0..20 {
        let side = 4 + rng.below(7);
        let x = distinct_tensor(&[1, 1 + rng.below(3), side, side], &mut rng);
        let window = 1 + rng.below(3);
        let p = match PoolParams::new(window, 1 + rng.below(2), rng.below(window)) {
            Ok(p) => p,
            Err(_) => continue,
        };
        if p.out_extent(side).is_err() {
            continue;
        }
        let err = finite_difference_check(
            move |g, xn| {
                let o = layers::maxpool2d(g, xn, p)?;
                g.sum(o)
            },
            &x,
            h,
        )
        .unwrap();
        bump("maxpool2d", err);
    }

    // roi max pooling on tie-free inputs
    for _ in 0..20 {
        let (hh, ww) = (5 + rng.below(8), 5 + rng.below(8));
        let x = distinct_tensor(&[1, 1 + rng.below(3), hh, ww], &mut rng);
        let grid = 1 + rng.below(5);
        let x0 = rng.uniform(0.0, ww as f64 / 2.0);
        let y0 = rng.uniform(0.0, hh as f64 / 2.0);
        let roi = [
            x0,
            y0,
            x0 + rng.uniform(1.0, ww as f64 / 2.0),
            y0 + rng.uniform(1.0, hh as f64 / 2.0),
        ];
        let err = finite_difference_check(
            move |g, xn| {
                let o = layers::roi_maxpool(g, xn, &[roi], grid)?;
                g.sum(o)
            },
            &x,
            h,
        )
        .unwrap();
        bump("roi_maxpool", err);
    }

    // bilinear upsampling
    for _ in 0..20 {
        let x = Tensor::rand_uniform(
            &[1, 1 + rng.below(2), 2 + rng.below(5), 2 + rng.below(5)],
            -1.0,
            1.0,
            &mut rng,
        )
        .unwrap();
        let factor = 1 + rng.below(3);
        let d = x.dims().to_vec();
        let mask = Tensor::rand_uniform(
            &[d[0], d[1], d[2] * factor, d[3] * factor],
            -1.0,
            1.0,
            &mut rng,
        )
        .unwrap();
        let mc = mask.clone();
        let err = finite_difference_check(
            move |g, xn| {
                let o = layers::bilinear_upsample(g, xn, factor)?;
                Ok(masked_sum(g, o, &mc))
            },
            &x,
            h,
        )
        .unwrap();
        bump("bilinear_upsample", err);
    }

    // fully connected: input, weight, bias
    for _ in 0..20 {
        let (m, d, k) = (1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(4));
        let x = Tensor::rand_uniform(&[m, d], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::rand_uniform(&[d, k], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::rand_uniform(&[k], -0.5, 0.5, &mut rng).unwrap();
        let mask = Tensor::rand_uniform(&[m, k], -1.0, 1.0, &mut rng).unwrap();
        for wrt in 0..3 {
            let (xc, wc, bc, mc) = (x.clone(), w.clone(), b.clone(), mask.clone());
            let probe = [&x, &w, &b][wrt].clone();
            let err = finite_difference_check(
                move |g, n| {
                    let xn = if wrt == 0 { n } else { g.leaf(xc.clone()) };
                    let wn = if wrt == 1 { n } else { g.leaf(wc.clone()) };
                    let bn = if wrt == 2 { n } else { g.leaf(bc.clone()) };
                    let o = layers::fully_connected(g, xn, wn, bn)?;
                    Ok(masked_sum(g, o, &mc))
                },
                &probe,
                h,
            )
            .unwrap();
            bump("fully_connected", err);
        }
    }

    // softmax cross-entropy w.r.t. logits, with ignored rows
    for _ in 0..20 {
        let (m, k) = (2 + rng.below(5), 2 + rng.below(4));
        let x = Tensor::rand_uniform(&[m, k], -2.0, 2.0, &mut rng).unwrap();
        let labels: Vec<Option<usize>> = (0..m)
            .map(|_| {
                if rng.unit() < 0.25 {
                    None
                } else {
                    Some(rng.below(k))
                }
            })
            .collect();
        let lc = labels.clone();
        let err = finite_difference_check(
            move |g, xn| layers::softmax_cross_entropy(g, xn, &lc),
            &x,
            h,
        )
        .unwrap();
        bump("softmax_cross_entropy", err);
    }

    // smooth L1 away from the |x| = 1 joints
    for _ in 0..20 {
        let mut x = Tensor::rand_uniform(&[2, 4 + rng.below(6)], -2.0, 2.0, &mut rng).unwrap();
        for v in x.data_mut() {
            if (v.abs() - 1.0).abs() < 1e-2 {
                *v *= 1.05;
            }
        }
        let mask = Tensor::rand_uniform(x.dims(), -1.0, 1.0, &mut rng).unwrap();
        let mc = mask.clone();
        let err = finite_difference_check(
            move |g, xn| {
                let o = layers::smooth_l1(g, xn)?;
                Ok(masked_sum(g, o, &mc))
            },
            &x,
            h,
        )
        .unwrap();
        bump("smooth_l1", err);
    }

    // end-to-end: full fused training loss, 50 sampled parameters
    let mut gen = SceneGenSpec::desk(1, 0.7, 555);
    gen.image_size = 32;
    gen.small_side = (6, 10);
    gen.medium_side = (12, 16);
    gen.object_classes.truncate(2);
    gen.bands_max = 2;
    let sample = data::generate_scene(&gen, 0).unwrap();
    let model = Model::build(ModelSpec::mini(Variant::Fused), 77).unwrap();
    let cfg = TrainConfig {
        seed: 5,
        ..TrainConfig::desk()
    };
    let plan = plan_step(&model, &sample, sample.seg.as_ref(), &cfg, 0).unwrap();
    let (mut g, loss, _) = step_loss(&model, &sample, &plan, &cfg.loss_weights).unwrap();
    g.backward(loss).unwrap();
    let analytic: BTreeMap<String, Vec<f64>> = g
        .param_grads()
        .map(|(n, gr)| (n.to_string(), gr.to_vec()))
        .collect();

    let names: Vec<&String> = model.params().keys().collect();
    let mut e2e_worst = 0.0f64;
    let mut rng = Rng::new(31337);
    for _ in 0..50 {
        let name = names[rng.below(names.len())];
        let idx = rng.below(model.params()[name].numel());
        let mut probe = model.clone();
        let orig = probe.params()[name].data()[idx];

        let mut eval = |v: f64| -> f64 {
            probe.params_mut().get_mut(name).unwrap().data_mut()[idx] = v;
            let (gp, lp, _) = step_loss(&probe, &sample, &plan, &cfg.loss_weights).unwrap();
            gp.scalar(lp)
        };
        let up = eval(orig + h);
        let down = eval(orig - h);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get(name).map(|gr| gr[idx]).unwrap_or(0.0);
        let denom = (a.abs() + numeric.abs()).max(1e-8);
        let err = (a - numeric).abs() / denom;
        e2e_worst = e2e_worst.max(err);
        assert!(err < tol, "e2e gradient {name}[{idx}]: {err}");
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(120),
        "gradient suite took {elapsed:?}, budget is 2 minutes"
    );
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.2e}")).collect();
    println!(
        "PASS a01 gradient fidelity: max rel err per layer [{}], e2e {e2e_worst:.2e}, all < 1e-3, {elapsed:.1?}",
        summary.join(", ")
    );
}

// ---------------------------------------------------------------------------
// criterion 2: dilated convolution equivalence

#[test]
fn a02_dilated_convolution_equivalence() {
    let mut rng = Rng::new(4242);
    for case in 0..50 {
        let ci = 1 + rng.below(3);
        let co = 1 + rng.below(2);
        let k = 2 + rng.below(2);
        let dilation = 2 + rng.below(2);
        let eff = k + (k - 1) * (dilation - 1);
        let pad = rng.below(eff);
        let side = eff + 2 + rng.below(6);
        let x = rand_tensor(&[1, ci, side, side], &mut rng);
        let w = rand_tensor(&[co, ci, k, k], &mut rng);
        let b = rand_tensor(&[co], &mut rng);
        let dilated = run_conv(&x, &w, &b, ConvParams::new(1, pad, dilation).unwrap());
        let stuffed = run_conv(
            &x,
            &zero_stuffed_kernel(&w, dilation),
            &b,
            ConvParams::new(1, pad, 1).unwrap(),
        );
        assert_eq!(dilated.dims(), stuffed.dims());
        for (a, o) in dilated.data().iter().zip(stuffed.data()) {
            assert_eq!(a, o, "case {case} differs");
        }
    }
    println!("PASS a02 dilated convolution == zero-stuffed kernel, elementwise exact, 50 cases");
}

// ---------------------------------------------------------------------------
// criterion 3: brute-force oracle exactness

#[test]
fn a03_brute_force_oracles() {
    // roi pooling
    let mut rng = Rng::new(70_001);
    let mut cases = 0;
    while cases < 120 {
        let c = 1 + rng.below(4);
        let hh = 5 + rng.below(12);
        let ww = 5 + rng.below(12);
        let grid = 1 + rng.below(7);
        let feat = distinct_tensor(&[1, c, hh, ww], &mut rng);
        let x0 = rng.uniform(-2.0, ww as f64 - 1.0);
        let y0 = rng.uniform(-2.0, hh as f64 - 1.0);
        let roi = [x0, y0, x0 + rng.uniform(0.5, ww as f64), y0 + rng.uniform(0.5, hh as f64)];
        if roi[2].min(ww as f64) - roi[0].max(0.0) <= 0.0
            || roi[3].min(hh as f64) - roi[1].max(0.0) <= 0.0
        {
            continue;
        }
        cases += 1;
        let fast = layers::roi_maxpool_region(&feat, roi, grid).unwrap();
        let slow = roi_pool_oracle(&feat, roi, grid);
        assert_eq!(fast.data(), slow.data(), "roi case {cases}");
    }

    // nms
    let mut rng = Rng::new(70_002);
    for case in 0..120 {
        let n = 5 + rng.below(50);
        let (boxes, scores) = random_boxes(n, 40.0, &mut rng);
        let thresh = rng.uniform(0.1, 0.9);
        let keep = 1 + rng.below(n);
        assert_eq!(
            nms(&boxes, &scores, thresh, keep),
            nms_oracle(&boxes, &scores, thresh, keep),
            "nms case {case}"
        );
    }

    // rpn assignment
    let grid = stuffnet_core::boxgeom::AnchorGrid::new(
        8,
        vec![8.0, 16.0, 32.0],
        vec![0.5, 1.0, 2.0],
    )
    .unwrap();
    let anchors = stuffnet_core::boxgeom::generate_anchors(&grid, 8, 8);
    let mut rng = Rng::new(70_003);
    for case in 0..120 {
        let mut gts = Vec::new();
        for _ in 0..rng.below(4) {
            let x0 = rng.uniform(0.0, 40.0);
            let y0 = rng.uniform(0.0, 40.0);
            gts.push(BBox::new(
                x0,
                y0,
                x0 + rng.uniform(6.0, 24.0),
                y0 + rng.uniform(6.0, 24.0),
            ));
        }
        let seed = rng.next_u64();
        let mut fast_rng = Rng::stream_indexed(seed, "oracle", 0);
        let fast = assign_rpn_labels(
            &anchors,
            &gts,
            64.0,
            64.0,
            &RpnSampleConfig::default(),
            &mut fast_rng,
        )
        .unwrap();
        let slow = rpn_oracle(&anchors, &gts, 64.0, 64.0, &RpnSampleConfig::default(), seed);
        assert_eq!(fast, slow, "rpn case {case}");
    }

    // head sampling
    let mut rng = Rng::new(70_004);
    for case in 0..120 {
        let mut gts = Vec::new();
        for _ in 0..1 + rng.below(4) {
            let x0 = rng.uniform(0.0, 40.0);
            let y0 = rng.uniform(0.0, 40.0);
            gts.push(GtBox::new(
                BBox::new(x0, y0, x0 + rng.uniform(8.0, 24.0), y0 + rng.uniform(8.0, 24.0)),
                1 + rng.below(5),
            ));
        }
        let mut proposals = Vec::new();
        for _ in 0..150 {
            if rng.unit() < 0.5 {
                let g = gts[rng.below(gts.len())].rect;
                let jx = rng.uniform(-6.0, 6.0);
                let jy = rng.uniform(-6.0, 6.0);
                proposals.push(BBox::new(g.x0 + jx, g.y0 + jy, g.x1 + jx, g.y1 + jy));
            } else {
                let x0 = rng.uniform(0.0, 50.0);
                let y0 = rng.uniform(0.0, 50.0);
                proposals.push(BBox::new(
                    x0,
                    y0,
                    x0 + rng.uniform(4.0, 20.0),
                    y0 + rng.uniform(4.0, 20.0),
                ));
            }
        }
        let seed = rng.next_u64();
        let cfg = HeadSampleConfig::default();
        let mut fast_rng = Rng::stream_indexed(seed, "oracle-head", 0);
        let fast = match sample_head_minibatch(&proposals, &gts, &cfg, &mut fast_rng) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let slow = head_oracle(&proposals, &gts, &cfg, seed);
        assert_eq!(fast.len(), slow.len(), "head case {case}");
        for (f, s) in fast.iter().zip(&slow) {
            assert_eq!((f.roi, f.class, f.target), (s.0, s.1, s.2), "head case {case}");
        }
    }

    // mAP evaluator
    let mut rng = Rng::new(70_005);
    for case in 0..100 {
        let n_images = 3 + rng.below(18);
        let classes = 3;
        let mut images = Vec::new();
        for _ in 0..n_images {
            let mut gts = Vec::new();
            for _ in 0..rng.below(5) {
                let x0 = rng.uniform(0.0, 40.0);
                let y0 = rng.uniform(0.0, 40.0);
                let mut g = GtBox::new(
                    BBox::new(x0, y0, x0 + rng.uniform(4.0, 20.0), y0 + rng.uniform(4.0, 20.0)),
                    1 + rng.below(classes),
                );
                g.ignore = rng.unit() < 0.2;
                gts.push(g);
            }
            let mut dets = Vec::new();
            for _ in 0..rng.below(8) {
                let rect = if !gts.is_empty() && rng.unit() < 0.5 {
                    let g = gts[rng.below(gts.len())].rect;
                    let jx = rng.uniform(-3.0, 3.0);
                    let jy = rng.uniform(-3.0, 3.0);
                    BBox::new(g.x0 + jx, g.y0 + jy, g.x1 + jx, g.y1 + jy)
                } else {
                    let x0 = rng.uniform(0.0, 40.0);
                    let y0 = rng.uniform(0.0, 40.0);
                    BBox::new(x0, y0, x0 + rng.uniform(4.0, 20.0), y0 + rng.uniform(4.0, 20.0))
                };
                dets.push(Detection {
                    rect,
                    class: 1 + rng.below(classes),
                    score: rng.unit(),
                });
            }
            images.push(ImageEval { dets, gts });
        }
        let fast = evaluate_map(&images, classes, 0.5, None);
        let slow = map_oracle(&images, classes, 0.5);
        assert!((fast.map - slow).abs() < 1e-12, "map case {case}");
    }

    println!("PASS a03 roi pooling, NMS, RPN assignment, head sampling, mAP evaluator all match brute-force oracles (100+ instances each)");
}

// ---------------------------------------------------------------------------
// criterion 4: fusion collapse

#[test]
fn a04_fusion_collapse_bit_identical() {
    let spec = ModelSpec::desk(Variant::Fused);
    let mut fused = Model::build(spec.clone(), 2024).unwrap();
    for name in ["seg.conv2.weight", "seg.conv2.bias"] {
        fused.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let plain = Model::assemble(
        ModelSpec {
            variant: Variant::Multitask,
            ..spec
        },
        fused.params().clone(),
    )
    .unwrap();

    let mut rng = Rng::new(88);
    for case in 0..5 {
        let img = Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng).unwrap();
        let rois = vec![
            BBox::new(4.0, 4.0, 30.0, 28.0),
            BBox::new(10.0, 30.0, 60.0, 62.0),
            BBox::new(40.0, 8.0, 55.0, 20.0),
        ];
        let a = fused.forward_heads(&img, &rois).unwrap();
        let b = plain.forward_heads(&img, &rois).unwrap();
        for (x, y) in a.class_probs.data().iter().zip(b.class_probs.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "case {case}");
        }
        for (x, y) in a.box_deltas.data().iter().zip(b.box_deltas.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "case {case}");
        }
    }
    println!("PASS a04 fusion collapse: zeroed seg feature map gives bit-identical detection outputs");
}

// ---------------------------------------------------------------------------
// criterion 5: resolution invariant

#[test]
fn a05_resolution_invariant() {
    let model = Model::build(ModelSpec::desk(Variant::Fused), 7).unwrap();
    let mut rng = Rng::new(5150);
    let sizes = [(8, 8), (16, 40), (32, 32), (40, 64), (64, 48), (64, 64), (96, 72)];
    for (hh, ww) in sizes {
        let img = Tensor::rand_uniform(&[1, 3, hh, ww], 0.0, 1.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let feats = model.features(&mut g, &img).unwrap();
        let dd = g.value(feats.det).dims().to_vec();
        let sd = g.value(feats.seg.unwrap()).dims().to_vec();
        assert_eq!(sd[2], 2 * dd[2], "{hh}x{ww}");
        assert_eq!(sd[3], 2 * dd[3], "{hh}x{ww}");
    }
    println!("PASS a05 segmentation feature map is exactly 2x the detection map for every valid input size");
}

// ---------------------------------------------------------------------------
// criterion 6: bit-exact roundtrips and seeded determinism

#[test]
fn a06_roundtrips_and_determinism() {
    // checkpoint: save/load is idempotent at f32 payload precision
    let model = Model::build(ModelSpec::desk(Variant::Fused), 99).unwrap();
    let bytes = encode_checkpoint(&model);
    let back = decode_checkpoint(&bytes, "mem").unwrap();
    assert_eq!(bytes, encode_checkpoint(&back), "checkpoint roundtrip");

    // dataset: write, read, write again -> byte-identical trees
    let gen = SceneGenSpec::desk(6, 0.8, 31);
    let ds = Dataset::generate(&gen).unwrap();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    data::write_dataset(&ds, d1.path()).unwrap();
    let re = data::read_dataset(d1.path()).unwrap();
    data::write_dataset(&re, d2.path()).unwrap();
    for entry in ["manifest.txt", "vocab.txt", "images/000003.ppm", "seg/000003.pgm", "boxes/000003.txt"] {
        let a = std::fs::read(d1.path().join(entry)).unwrap();
        let b = std::fs::read(d2.path().join(entry)).unwrap();
        assert_eq!(a, b, "{entry}");
    }

    // repeated seeded generation and training are byte-identical
    let ds2 = Dataset::generate(&gen).unwrap();
    for (a, b) in ds.samples.iter().zip(&ds2.samples) {
        assert!(a
            .image
            .data()
            .iter()
            .zip(b.image.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let mut tiny = SceneGenSpec::desk(3, 0.6, 47);
    tiny.image_size = 32;
    tiny.small_side = (6, 10);
    tiny.medium_side = (12, 16);
    tiny.object_classes.truncate(2);
    tiny.bands_max = 2;
    let tiny_data = Dataset::generate(&tiny).unwrap();
    let run = || {
        let mut m = Model::build(ModelSpec::mini(Variant::Fused), 13).unwrap();
        let cfg = TrainConfig {
            iterations: 30,
            seed: 3,
            ..TrainConfig::desk()
        };
        train(&mut m, &tiny_data, &cfg).unwrap();
        encode_checkpoint(&m)
    };
    assert_eq!(run(), run(), "seeded training reruns differ");
    println!("PASS a06 checkpoint and dataset roundtrips bit-exact; seeded reruns byte-identical");
}

// ---------------------------------------------------------------------------
// criteria 7-9: the desk-scale benchmark

const BENCH_SEEDS: [u64; 3] = [11, 12, 13];

fn bench_train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 5000,
        lr_step: 3750,
        base_lr: 3e-3,
        seed,
        ..TrainConfig::desk()
    }
}

struct SeedOutcome {
    map_a: BTreeMap<&'static str, f64>,
    small_a: BTreeMap<&'static str, f64>,
    agreement_b: f64,
    map_b_constrained: f64,
    map_b_baseline: f64,
}

struct Bench {
    outcomes: Vec<SeedOutcome>,
    elapsed: Duration,
    smoothed_100: f64,
    smoothed_end: f64,
}

static BENCH: OnceLock<Bench> = OnceLock::new();

fn eval_model(model: &Model, test: &Dataset, bin: Option<SizeBin>) -> f64 {
    let mut images = Vec::new();
    for s in &test.samples {
        let (dets, _) = model
            .detect(
                &s.batch_image(),
                &ProposalConfig::default(),
                &PostprocessConfig::default(),
            )
            .unwrap();
        images.push(ImageEval {
            dets,
            gts: s.boxes.clone(),
        });
    }
    let filter = bin.map(|b| (b, SizeBins::default()));
    evaluate_map(&images, 5, 0.5, filter).map
}

fn run_benchmark() -> Bench {
    let started = Instant::now();
    // dataset A has stuff labels; dataset B does not
    let data_a = Dataset::generate(&SceneGenSpec::desk(500, 0.9, 42)).unwrap();
    let test_a = Dataset::generate(&SceneGenSpec::desk(200, 0.9, 4242)).unwrap();
    let data_b = Dataset::generate(&SceneGenSpec::desk(500, 0.9, 777))
        .unwrap()
        .without_seg();
    let test_b = Dataset::generate(&SceneGenSpec::desk(200, 0.9, 778)).unwrap();

    let mut outcomes = Vec::new();
    let mut smoothed = (0.0, 0.0);
    for &seed in &BENCH_SEEDS {
        let cfg = bench_train_cfg(seed);
        let mut map_a = BTreeMap::new();
        let mut small_a = BTreeMap::new();
        let mut fused_a: Option<Model> = None;
        for (name, variant) in [
            ("baseline", Variant::Baseline),
            ("multitask", Variant::Multitask),
            ("fused", Variant::Fused),
        ] {
            let mut model = Model::build(ModelSpec::desk(variant), seed * 311).unwrap();
            let log = train(&mut model, &data_a, &cfg).unwrap();
            if seed == BENCH_SEEDS[0] && variant == Variant::Fused {
                smoothed = (
                    smoothed_total(&log, 100, 100),
                    smoothed_total(&log, 100, log.len()),
                );
            }
            map_a.insert(name, eval_model(&model, &test_a, None));
            small_a.insert(name, eval_model(&model, &test_a, Some(SizeBin::Small)));
            if variant == Variant::Fused {
                fused_a = Some(model);
            }
        }

        // feature constraining on B: hallucinate with the A-trained fused
        // model, then keep training it on B against those targets
        let teacher = fused_a.expect("fused model trained above");
        let labels = hallucinate_dataset(&teacher, &data_b).unwrap();
        let mut constrained = teacher.clone();
        train_constrained(&mut constrained, &data_b, &labels, &cfg).unwrap();
        // end-of-training agreement with the hallucinated targets
        let final_maps = hallucinate_dataset(&constrained, &data_b).unwrap();
        let mut agree = 0usize;
        let mut total = 0usize;
        for (a, b) in final_maps.maps.iter().zip(&labels.maps) {
            total += a.data.len();
            agree += a.data.iter().zip(&b.data).filter(|(x, y)| x == y).count();
        }
        let agreement_b = agree as f64 / total as f64;
        let map_b_constrained = eval_model(&constrained, &test_b, None);

        let mut base_b = Model::build(ModelSpec::desk(Variant::Baseline), seed * 311 + 7).unwrap();
        train(&mut base_b, &data_b, &cfg).unwrap();
        let map_b_baseline = eval_model(&base_b, &test_b, None);

        outcomes.push(SeedOutcome {
            map_a,
            small_a,
            agreement_b,
            map_b_constrained,
            map_b_baseline,
        });
    }
    Bench {
        outcomes,
        elapsed: started.elapsed(),
        smoothed_100: smoothed.0,
        smoothed_end: smoothed.1,
    }
}

fn bench() -> &'static Bench {
    BENCH.get_or_init(run_benchmark)
}

fn avg(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn a07_small_object_gain() {
    let b = bench();
    let base = avg(b.outcomes.iter().map(|o| o.small_a["baseline"]));
    let fused = avg(b.outcomes.iter().map(|o| o.small_a["fused"]));
    let margin_points = (fused - base) * 100.0;
    assert!(
        b.elapsed < Duration::from_secs(45 * 60),
        "benchmark took {:?}, budget is 45 minutes",
        b.elapsed
    );
    assert!(
        fused > base,
        "fused small-object mAP {fused:.3} does not exceed baseline {base:.3}"
    );
    let target = if margin_points >= 3.0 {
        "meets the 3-point target"
    } else {
        "below the 3-point target (direction is the hard criterion)"
    };
    println!(
        "PASS a07 small-object mAP over 3 seeds: baseline {base:.3}, fused {fused:.3}, margin {margin_points:+.1} points ({target}); benchmark wall time {:.0?}",
        b.elapsed
    );
}

#[test]
fn a08_variant_ordering() {
    let b = bench();
    let base = avg(b.outcomes.iter().map(|o| o.map_a["baseline"]));
    let multi = avg(b.outcomes.iter().map(|o| o.map_a["multitask"]));
    let fused = avg(b.outcomes.iter().map(|o| o.map_a["fused"]));
    // ties permitted; inversions above 1 mAP point fail
    assert!(
        multi >= base - 0.01,
        "multitask {multi:.3} inverts baseline {base:.3} by more than 1 point"
    );
    assert!(
        fused >= multi - 0.01,
        "fused {fused:.3} inverts multitask {multi:.3} by more than 1 point"
    );
    // training example: smoothed loss decreases over the run
    assert!(
        b.smoothed_end < b.smoothed_100,
        "smoothed loss did not decrease: {} -> {}",
        b.smoothed_100,
        b.smoothed_end
    );
    println!(
        "PASS a08 overall mAP ordering over 3 seeds: baseline {base:.3} <= multitask {multi:.3} <= fused {fused:.3} (1-point tolerance)"
    );
}

#[test]
fn a09_feature_constraining() {
    let b = bench();
    let agreement = avg(b.outcomes.iter().map(|o| o.agreement_b));
    let constrained = avg(b.outcomes.iter().map(|o| o.map_b_constrained));
    let baseline = avg(b.outcomes.iter().map(|o| o.map_b_baseline));
    assert!(
        agreement >= 0.85,
        "pixel agreement with hallucinated targets {agreement:.3} < 0.85"
    );
    assert!(
        constrained >= baseline,
        "constrained fused mAP {constrained:.3} below no-stuff baseline {baseline:.3}"
    );
    println!(
        "PASS a09 feature constraining over 3 seeds: label agreement {agreement:.3} (>= 0.85), mAP on unlabeled-stuff dataset {constrained:.3} >= baseline {baseline:.3}"
    );
}

// ---------------------------------------------------------------------------
// criterion 10: evaluator spot checks

#[test]
fn a10_evaluator_spot_checks() {
    // the hand-walked AP example: [TP, FP, TP] with 2 gts -> 5/6
    let ap = average_precision(
        &[
            Verdict::TruePositive,
            Verdict::FalsePositive,
            Verdict::TruePositive,
        ],
        2,
    );
    assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap = {ap}");

    // representative closed-form examples (the full set lives in the
    // per-module unit tests)
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    let c = BBox::new(5.0, 5.0, 15.0, 15.0);
    assert!((stuffnet_core::boxgeom::iou(&a, &c).unwrap() - 1.0 / 7.0).abs() < 1e-12);
    let d = stuffnet_core::boxgeom::encode(&a, &BBox::new(2.0, 2.0, 14.0, 14.0)).unwrap();
    assert!((d.tx - 0.3).abs() < 1e-12 && (d.tw - 1.2f64.ln()).abs() < 1e-12);
    assert_eq!(train::lr_at(&TrainConfig::paper_scale(), 0), 1e-3);
    assert_eq!(train::lr_at(&TrainConfig::paper_scale(), 50_000), 1e-4);
    println!("PASS a10 evaluator spot checks: hand-walked AP 5/6 and closed-form examples");
}
