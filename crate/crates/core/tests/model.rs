mod common;

use lacnet_core::model::{
    attention_forward, bce_with_logits, loss, Batch, FusionStrategy, LacNet, Model, ModelConfig, Stream,
};
use lacnet_core::nn::{matmul, Tensor};
use lacnet_core::scene::{generate_scene, GeneratorConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(fusion: FusionStrategy) -> ModelConfig {
    ModelConfig {
        fusion,
        ..ModelConfig::tiny()
    }
}

#[test]
fn pyramid_sizes_follow_strides() {
    let net = LacNet::new(ModelConfig::tiny()).unwrap();
    let p: Vec<f32> = net.init_params();
    let x = Tensor::zeros(3, 1, 64, 64);
    let pyr = net.encode(&p, &x, Stream::Rgb).unwrap();
    let sizes: Vec<_> = pyr.stages.iter().map(|t| (t.c, t.h, t.w)).collect();
    assert_eq!(sizes, vec![(4, 16, 16), (8, 8, 8), (16, 4, 4), (32, 2, 2)]);
    assert!(pyr.stages.iter().all(|t| t.all_finite()));
    assert_eq!(pyr, net.encode(&p, &x, Stream::Rgb).unwrap());
}

#[test]
fn wrong_stream_channels_rejected() {
    let net = LacNet::new(ModelConfig::tiny()).unwrap();
    let p: Vec<f32> = net.init_params();
    assert!(net.encode(&p, &Tensor::zeros(1, 1, 64, 64), Stream::Rgb).is_err());
    assert!(net.encode(&p, &Tensor::zeros(3, 1, 64, 64), Stream::Stacked).is_err());
}

#[test]
fn averaging_fusion_is_elementwise_mean() {
    let net = LacNet::new(tiny(FusionStrategy::Linear)).unwrap();
    let p: Vec<f64> = net.init_params();
    let (batch, _, _) = common::random_batch(64, 2, 1);
    let r = net.encode(&p, &batch.rgb, Stream::Rgb).unwrap();
    let d = net.encode(&p, &batch.depth, Stream::Depth).unwrap();
    let f = net.fuse(&p, &r, &d).unwrap();
    for ((fs, rs), ds) in f.stages.iter().zip(&r.stages).zip(&d.stages) {
        assert_eq!(fs.shape(), rs.shape());
        for ((&a, &b), &c) in fs.data.iter().zip(&rs.data).zip(&ds.data) {
            assert!((a - 0.5 * (b + c)).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_fusion_with_zero_depth_is_affine_in_rgb() {
    let net = LacNet::new(tiny(FusionStrategy::Linear)).unwrap();
    let mut p: Vec<f64> = net.init_params();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for e in net.layout().entries() {
        if e.name.starts_with("fusion.") {
            for v in &mut p[e.offset..e.offset + e.len] {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
    let (batch, _, _) = common::random_batch(64, 1, 3);
    let r = net.encode(&p, &batch.rgb, Stream::Rgb).unwrap();
    let zero = lacnet_core::model::FeaturePyramid {
        stages: r.stages.iter().map(|t| Tensor::zeros(t.c, t.n, t.h, t.w)).collect(),
    };
    let f = net.fuse(&p, &r, &zero).unwrap();
    for (i, (fs, rs)) in f.stages.iter().zip(&r.stages).enumerate() {
        let e = |suffix: &str| {
            net.layout()
                .entries()
                .iter()
                .find(|e| e.name == format!("fusion.{}.{suffix}", i + 1))
                .unwrap()
                .clone()
        };
        let (we, be) = (e("weight"), e("bias"));
        let c = rs.c;
        let hw = rs.h * rs.w;
        // Only the first C input columns of each output row see the RGB stream.
        let w = &p[we.offset..we.offset + we.len];
        let w_rgb: Vec<f64> = (0..c).flat_map(|o| w[o * 2 * c..o * 2 * c + c].to_vec()).collect();
        let mut expect = vec![0.0; c * hw];
        matmul(c, c, hw, &w_rgb, false, &rs.data, false, &mut expect, 0.0);
        for o in 0..c {
            for j in 0..hw {
                let want = expect[o * hw + j] + p[be.offset + o];
                assert!((fs.data[o * hw + j] - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn attention_uniform_for_constant_features() {
    let f: Tensor<f64> = Tensor::from_vec(3, 1, 2, 2, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, -1.0, -1.0, -1.0, -1.0]);
    let m = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]);
    let (a, _) = attention_forward(&f, &m);
    assert!(a.data.iter().all(|&v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn attention_concentrates_on_aligned_region() {
    // Channel 0 is on inside region P, channel 1 elsewhere; the mask selects P.
    let (h, w) = (4, 4);
    let in_p = |i: usize| i % w < 2;
    let mut data = vec![0.0; 2 * h * w];
    for i in 0..h * w {
        data[if in_p(i) { i } else { h * w + i }] = 3.0;
    }
    let f = Tensor::from_vec(2, 1, h, w, data);
    let m = Tensor::from_vec(1, 1, h, w, (0..h * w).map(|i| if in_p(i) && i < 8 { 1.0 } else { 0.0 }).collect());
    let (a, _) = attention_forward(&f, &m);
    // q = (3, 0); logits 9 / sqrt(2) on P and 0 elsewhere.
    let lp = (9.0f64 / 2f64.sqrt()).exp();
    let z = 8.0 * lp + 8.0;
    let mass: f64 = (0..h * w).filter(|&i| in_p(i)).map(|i| a.data[i]).sum();
    assert!((mass - 8.0 * lp / z).abs() < 1e-12);
    assert!(mass > 0.5);
    assert!((a.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn attention_empty_mask_falls_back_to_uniform_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = Tensor::from_vec(4, 2, 2, 2, (0..32).map(|_| rng.random_range(-3.0..3.0)).collect());
    let (a, _) = attention_forward(&f, &Tensor::zeros(1, 2, 2, 2));
    assert!(a.all_finite());
    for b in 0..2 {
        assert!((a.plane(0, b).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn loss_examples() {
    let t = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 0.0, 1.0, 0.0]);
    let sat = Tensor::from_vec(1, 1, 2, 2, vec![100.0, -100.0, 100.0, -100.0]);
    assert!(bce_with_logits(&sat, &t).unwrap().0 < 1e-6);
    let zero = Tensor::zeros(1, 1, 2, 2);
    let logits = lacnet_core::model::Logits {
        visible: zero.clone(),
        amodal: zero.clone(),
    };
    let (l, _) = loss(&logits, &t, &t).unwrap();
    assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    let wrong = Tensor::from_vec(1, 1, 2, 2, vec![-100.0, 0.0, 0.0, 0.0]);
    let all_one = Tensor::from_vec(1, 1, 2, 2, vec![1.0; 4]);
    let (l, g) = bce_with_logits(&wrong, &all_one).unwrap();
    assert!((l - (100.0 + 3.0 * 2f64.ln()) / 4.0).abs() < 1e-9);
    assert!(g.all_finite());
    let soft = Tensor::from_vec(1, 1, 2, 2, vec![0.5; 4]);
    assert!(bce_with_logits(&zero, &soft).is_err());
}

#[test]
fn loss_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_vec(1, 2, 3, 3, (0..18).map(|_| rng.random_range(-5.0..5.0)).collect());
    let t = Tensor::from_vec(1, 2, 3, 3, (0..18).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect());
    let (_, g) = bce_with_logits(&x, &t).unwrap();
    for i in 0..18 {
        let mut xp = x.clone();
        xp.data[i] += 1e-6;
        let mut xm = x.clone();
        xm.data[i] -= 1e-6;
        let num = (bce_with_logits(&xp, &t).unwrap().0 - bce_with_logits(&xm, &t).unwrap().0) / 2e-6;
        assert!((num - g.data[i]).abs() < 1e-8);
    }
}

#[test]
fn outputs_match_input_size_and_are_finite() {
    for size in [64, 128] {
        let cfg = ModelConfig {
            input_size: size,
            ..ModelConfig::tiny()
        };
        let net = LacNet::new(cfg).unwrap();
        let p: Vec<f64> = net.init_params();
        let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
        let (mut batch, _, _) = common::random_batch(size, 1, 8);
        for v in batch.rgb.data.iter_mut().chain(batch.depth.data.iter_mut()) {
            *v = rng.random_range(-3.0..3.0);
        }
        let (logits, _) = net.forward(&p, &batch).unwrap();
        assert_eq!(logits.visible.shape(), (1, 1, size, size));
        assert_eq!(logits.amodal.shape(), (1, 1, size, size));
        assert!(logits.visible.all_finite() && logits.amodal.all_finite());
    }
    let a = LacNet::new(ModelConfig::tiny()).unwrap();
    let b = LacNet::new(ModelConfig {
        input_size: 128,
        ..ModelConfig::tiny()
    })
    .unwrap();
    assert_eq!(a.num_params(), b.num_params());
}

#[test]
fn stacked_has_fewer_parameters() {
    for base in [ModelConfig::tiny(), ModelConfig::desk(), ModelConfig::paper()] {
        let count = |fusion| LacNet::new(ModelConfig { fusion, ..base.clone() }).unwrap().num_params();
        assert!(count(FusionStrategy::Stacked) < count(FusionStrategy::Linear));
        assert!(count(FusionStrategy::Linear) < count(FusionStrategy::Conv1x1));
    }
}

#[test]
fn gradient_check_all_fusions() {
    for fusion in [FusionStrategy::Linear, FusionStrategy::Stacked, FusionStrategy::Conv1x1] {
        let r = common::gradient_check(tiny(fusion), 2, 150, 1e-4, 1e-3, 11);
        assert!(
            r.checked == 150 && r.passed as f64 >= 0.99 * r.checked as f64,
            "{fusion}: {}/{} passed, worst {}",
            r.passed,
            r.checked,
            r.worst
        );
    }
}

#[test]
fn batch_composition_does_not_change_outputs() {
    let net = LacNet::new(ModelConfig::tiny()).unwrap();
    let p: Vec<f64> = net.init_params();
    let (batch, _, _) = common::random_batch(64, 2, 9);
    let (both, _) = net.forward(&p, &batch).unwrap();
    let first = Batch {
        rgb: Tensor::from_vec(3, 1, 64, 64, (0..3).flat_map(|c| batch.rgb.plane(c, 0).to_vec()).collect()),
        depth: Tensor::from_vec(1, 1, 64, 64, batch.depth.plane(0, 0).to_vec()),
        mask: Tensor::from_vec(1, 1, 64, 64, batch.mask.plane(0, 0).to_vec()),
    };
    let (one, _) = net.forward(&p, &first).unwrap();
    for (a, b) in one.amodal.plane(0, 0).iter().zip(both.amodal.plane(0, 0)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn untrained_prediction_is_valid_and_deterministic() {
    let scene = generate_scene(&GeneratorConfig::default(), 3).unwrap();
    let model = Model::new(ModelConfig::tiny()).unwrap();
    let visible = &scene.instances[0].visible_mask;
    let a = model.predict_amodal(&scene, visible).unwrap();
    assert_eq!((a.width, a.height), (scene.width(), scene.height()));
    assert_eq!(a.amodal_mask.width(), scene.width());
    assert!(a.amodal_prob.iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(a, model.predict_amodal(&scene, visible).unwrap());
    let empty = lacnet_core::Mask::new(scene.width(), scene.height());
    assert!(model.predict_amodal(&scene, &empty).is_err());
}
