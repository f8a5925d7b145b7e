//! Behaviour of explanations, baselines and scores against a trained model.

mod common;

use evidex::classifier::ClassifierModel;
use evidex::evaluate::{evaluate, EvalConfig, EvalItem};
use evidex::explainer::losses::{loss_ce, loss_rob};
use evidex::explainer::{explain, sample_background, BackgroundKind, ExplainerConfig, Mask};
use evidex::gradcam::{gradcam, gradcam_scaled, threshold_heatmap, DEFAULT_LAYER};
use evidex::metrics::{self, Method};
use evidex::tensor::{softmax_slice, Tensor};
use evidex::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn short(steps: usize) -> ExplainerConfig {
    ExplainerConfig { steps, ..ExplainerConfig::default() }
}

#[test]
fn total_is_weighted_sum_at_every_step() {
    let img = common::correct_images(4)[2].batch();
    let cfg = short(25);
    let ex = explain(&img, &common::trained().model, &cfg, None).unwrap();
    assert_eq!(ex.trajectory.len(), 25);
    for b in &ex.trajectory {
        assert!((b.total - b.weighted_sum(&cfg)).abs() <= 1e-9, "step {}", b.step);
        assert!(b.components().iter().all(|&c| c >= 0.0), "{b:?}");
    }
    assert!(ex.mask.values.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn same_seed_same_mask_bits() {
    let img = common::correct_images(3)[1].batch();
    let model = &common::trained().model;
    let a = explain(&img, model, &short(30), None).unwrap();
    let b = explain(&img, model, &short(30), None).unwrap();
    assert!(a.mask.values.iter().zip(&b.mask.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.binary_mask(), b.binary_mask());
    assert_eq!(a.masked, b.masked);
}

#[test]
fn fidelity_alone_keeps_the_label() {
    let model = &common::trained().model;
    let cfg = ExplainerConfig {
        lambda_area: 0.0,
        lambda_bin: 0.0,
        lambda_tv: 0.0,
        lambda_rob: 0.0,
        ..short(60)
    };
    for img in common::correct_images(8) {
        let ex = explain(&img.batch(), model, &cfg, None).unwrap();
        assert!(ex.report.decision_preserved, "label {}", img.label);
    }
}

#[test]
fn overflowing_objective_reports_divergence() {
    let img = common::correct_images(1)[0].batch();
    let cfg = ExplainerConfig {
        lambda_act: f64::MAX,
        lambda_ce: f64::MAX,
        lambda_kl: f64::MAX,
        lambda_area: f64::MAX,
        lambda_bin: f64::MAX,
        lambda_tv: f64::MAX,
        lambda_rob: f64::MAX,
        ..short(20)
    };
    match explain(&img, &common::trained().model, &cfg, None) {
        Err(Error::Divergence { step, detail }) => {
            assert!(step < 20);
            assert!(detail.contains("last finite breakdown"), "{detail}");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn unfrozen_model_is_rejected() {
    let model = ClassifierModel::new(Default::default(), 1).unwrap();
    let err = explain(&Tensor::zeros(vec![1, 3, 64, 64]), &model, &short(1), None).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn robustness_loss_limits() {
    let model = &common::trained().model;
    let img = common::correct_images(1)[0].batch();
    let y = model.logits(&img).unwrap().argmax();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = sample_background(img.shape(), BackgroundKind::UniformNoise, &mut rng, None).unwrap();
    let full = Mask::filled(64, 64, 1.0).unwrap();
    let empty = Mask::filled(64, 64, 0.0).unwrap();
    let ce_x = loss_ce(&model.logits(&img).unwrap(), y).unwrap();
    let ce_r = loss_ce(&model.logits(&r).unwrap(), y).unwrap();
    let rob_full = loss_rob(model, &img, &full, std::slice::from_ref(&r), y).unwrap();
    let rob_empty = loss_rob(model, &img, &empty, std::slice::from_ref(&r), y).unwrap();
    assert!((rob_full - ce_x).abs() < 1e-12);
    assert!((rob_empty - ce_r).abs() < 1e-12);
    assert!(rob_full >= 0.0 && rob_empty >= 0.0);
}

#[test]
fn gradcam_ignores_logit_scale_and_is_normalized() {
    let model = &common::trained().model;
    for img in common::correct_images(6) {
        let x = img.batch();
        let a = gradcam(model, &x, img.label, DEFAULT_LAYER).unwrap();
        let b = gradcam_scaled(model, &x, img.label, DEFAULT_LAYER, 2.0).unwrap();
        let again = gradcam(model, &x, img.label, DEFAULT_LAYER).unwrap();
        assert_eq!(a, again);
        assert!(a.values.iter().zip(&b.values).all(|(p, q)| (p - q).abs() <= 1e-9));
        if !a.degenerate {
            let lo = a.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = a.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((lo, hi), (0.0, 1.0));
        }
    }
}

#[test]
fn gradcam_rejects_bad_layer_and_class() {
    let model = &common::trained().model;
    let x = common::correct_images(1)[0].batch();
    assert!(gradcam(model, &x, 0, "block9").is_err());
    assert!(gradcam(model, &x, 4, DEFAULT_LAYER).is_err());
}

#[test]
fn head_without_weights_gives_degenerate_heatmap() {
    let f = common::trained();
    let mut bytes = f.model.to_bytes();
    // the linear head (64×4 weights, 4 biases) is stored last
    let head = (64 * 4 + 4) * 8;
    let n = bytes.len();
    bytes[n - head..n - 4 * 8].fill(0);
    let flat = ClassifierModel::from_bytes(&bytes).unwrap();
    let h = gradcam(&flat, &f.test[7].batch(), 1, DEFAULT_LAYER).unwrap();
    assert!(h.degenerate);
    assert!(h.values.iter().all(|&v| v == 0.0));
}

/// Drop in p(y) when each 8×8 patch is zeroed, spread over the patch.
fn occlusion_map(model: &ClassifierModel, x: &Tensor, y: usize) -> Vec<f64> {
    let p0 = softmax_slice(model.logits(x).unwrap().data())[y];
    let mut map = vec![0.0; 64 * 64];
    for py in (0..64).step_by(8) {
        for px in (0..64).step_by(8) {
            let mut occluded = x.clone();
            let d = occluded.data_mut();
            for c in 0..3 {
                for i in py..py + 8 {
                    for j in px..px + 8 {
                        d[c * 4096 + i * 64 + j] = 0.0;
                    }
                }
            }
            let p = softmax_slice(model.logits(&occluded).unwrap().data())[y];
            for i in py..py + 8 {
                for j in px..px + 8 {
                    map[i * 64 + j] = p0 - p;
                }
            }
        }
    }
    map
}

#[test]
fn gradcam_agrees_with_occlusion_better_than_chance() {
    let model = &common::trained().model;
    let images: Vec<_> = common::trained().test.iter().filter(|i| i.label != 0).take(20).collect();
    let (mut cam_iou, mut rand_iou) = (0.0, 0.0);
    for (k, img) in images.iter().enumerate() {
        let x = img.batch();
        let y = model.logits(&x).unwrap().argmax();
        let cam = gradcam(model, &x, y, DEFAULT_LAYER).unwrap();
        let occ = evidex::gradcam::Heatmap { values: occlusion_map(model, &x, y), ..cam.clone() };
        let top_occ = threshold_heatmap(&occ, 0.1).unwrap();
        let top_cam = threshold_heatmap(&cam, 0.1).unwrap();
        let random = metrics::random_mask(4096, 0.1, k as u64);
        cam_iou += metrics::truth_iou(&top_cam, &top_occ).unwrap().unwrap();
        rand_iou += metrics::truth_iou(&random, &top_occ).unwrap().unwrap();
    }
    let n = images.len() as f64;
    println!("occlusion IoU: gradcam {:.3}, random {:.3}", cam_iou / n, rand_iou / n);
    assert!(cam_iou > rand_iou);
}

#[test]
fn full_mask_scores() {
    let model = &common::trained().model;
    let x = common::correct_images(1)[0].batch();
    let logits = model.logits(&x).unwrap();
    let y = logits.argmax();
    let full = vec![true; 4096];
    let (kept, conf_e) = metrics::decision_preservation(model, &x, &full, y).unwrap();
    assert!(kept);
    assert_eq!(conf_e, softmax_slice(logits.data())[y]);
    let rate = metrics::robustness_rate(model, &x, &full, y, 20, BackgroundKind::UniformNoise, 1, None).unwrap();
    assert_eq!(rate, 1.0);
    let empty = vec![false; 4096];
    let (_, c) = metrics::decision_preservation(model, &x, &empty, y).unwrap();
    assert!((0.0..=1.0).contains(&c));
}

#[test]
fn robustness_rate_is_a_recount_of_trials() {
    let model = &common::trained().model;
    for (k, img) in common::correct_images(5).into_iter().enumerate() {
        let x = img.batch();
        let y = img.label;
        let mask = metrics::random_mask(4096, 0.3, k as u64);
        let kind = BackgroundKind::GaussianNoise;
        let trials = metrics::robustness_trials(model, &x, &mask, y, 20, kind, 9, None).unwrap();
        let rate = metrics::robustness_rate(model, &x, &mask, y, 20, kind, 9, None).unwrap();
        assert_eq!(rate, trials.iter().filter(|&&t| t).count() as f64 / 20.0);
        let one = metrics::robustness_rate(model, &x, &mask, y, 1, kind, 4, None).unwrap();
        assert!(one == 0.0 || one == 1.0);
        assert_eq!(one, metrics::robustness_rate(model, &x, &mask, y, 1, kind, 4, None).unwrap());
    }
}

#[test]
fn preservation_matches_independent_forward() {
    let model = &common::trained().model;
    for (k, img) in common::correct_images(10).into_iter().enumerate() {
        let x = img.batch();
        let mask = metrics::random_mask(4096, 0.5, 100 + k as u64);
        let (kept, conf) = metrics::decision_preservation(model, &x, &mask, img.label).unwrap();
        let again = metrics::decision_preservation(model, &x, &mask, img.label).unwrap();
        assert_eq!((kept, conf.to_bits()), (again.0, again.1.to_bits()));
        // mask applied by hand
        let mut e = x.clone();
        for (i, v) in e.data_mut().iter_mut().enumerate() {
            if !mask[i % 4096] {
                *v = 0.0;
            }
        }
        let logits = model.logits(&e).unwrap();
        assert_eq!(kept, logits.argmax() == img.label);
        assert_eq!(conf, softmax_slice(logits.data())[img.label]);
    }
}

#[test]
fn evaluation_rows_do_not_depend_on_worker_count() {
    let model = &common::trained().model;
    let items: Vec<EvalItem> = common::correct_images(8)
        .into_iter()
        .step_by(2)
        .enumerate()
        .map(|(k, img)| EvalItem {
            id: format!("img_{k:03}"),
            image: img.batch(),
            truth: Some(img.truth_mask.clone()),
        })
        .collect();
    let config = |workers| EvalConfig {
        explainer: short(20),
        workers,
        ..EvalConfig::default()
    };
    let strip = |rows: Vec<metrics::EvidenceReport>| {
        rows.into_iter().map(|r| metrics::EvidenceReport { wall_seconds: 0.0, ..r }).collect::<Vec<_>>()
    };
    let one = evaluate(model, &items, &config(1)).unwrap();
    let three = evaluate(model, &items, &config(3)).unwrap();
    assert_eq!(one.len(), items.len() * 3);
    assert_eq!(strip(one.clone()), strip(three));

    for chunk in one.chunks(3) {
        assert_eq!(chunk.iter().map(|r| r.method).collect::<Vec<_>>(), Method::ALL);
        // matched area budget
        assert!(chunk.iter().all(|r| r.area_fraction == chunk[0].area_fraction));
        assert!(chunk.iter().all(|r| r.image_id == chunk[0].image_id));
    }
    let summary = metrics::aggregate(&one).unwrap();
    let methods: std::collections::BTreeSet<_> = summary.iter().map(|r| r.method).collect();
    assert_eq!(methods.len(), 3);
}
