//! End-to-end acceptance criteria. Runs as a plain binary so every criterion
//! prints one result line; pass a substring to run a subset.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use lacnet_core::eval::{evaluate, visible_priors, Predictor, VisibleSource};
use lacnet_core::grasp::{back_project, classify_grasp_region, generate_grasp, principal_axis, project, GraspRegionLabel};
use lacnet_core::metrics::{
    boundary_prf, default_boundary_tolerance, evaluate_scene, f_at_75, hungarian_match, iou, overlap_prf,
    OcclusionMetrics, PredictedInstance,
};
use lacnet_core::model::{FusionStrategy, Model, ModelConfig};
use lacnet_core::preprocess::{bbox_of_mask, crop_and_resize, expand_bbox, paste_back, AugmentParams, Interpolation, Patch};
use lacnet_core::scene::{generate_dataset, CameraIntrinsics, GeneratorConfig, InstanceAnnotation, RgbdScene, ShapeKind};
use lacnet_core::train::{train, TrainConfig, TrainOptions};
use lacnet_core::{Execution, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN_SCENES: usize = 1000;
const EVAL_SCENES: usize = 100;
const ITERATIONS: u64 = 5000;
const ABLATION_ITERATIONS: u64 = 600;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

enum Verdict {
    Pass,
    Fail,
    /// Reported only.
    Soft(bool),
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn gate(ok: bool, detail: String) -> Outcome {
    Outcome {
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut match_ok = 0;
    let mut same_pairs = 0;
    for trial in 0..200 {
        let n_p = 1 + trial % 6;
        let n_g = 1 + rng.random_range(0..6);
        let preds: Vec<Mask> = (0..n_p).map(|_| common::random_mask(&mut rng, 32, 32)).collect();
        let gts: Vec<Mask> = (0..n_g).map(|_| common::random_mask(&mut rng, 32, 32)).collect();
        let w: Vec<Vec<f64>> = preds.iter().map(|p| gts.iter().map(|g| overlap_prf(p, g).f).collect()).collect();
        let m = hungarian_match(&preds, &gts);
        let (best, best_pairs) = common::brute_force_matching(&w);
        let total = common::pair_total(&w, &m.pairs);
        if total == best || (total - best).abs() <= 1e-12 * best.max(1.0) {
            match_ok += 1;
        }
        if m.pairs == best_pairs {
            same_pairs += 1;
        }
    }
    let mut boundary_ok = 0;
    let default_tol = default_boundary_tolerance(64, 64);
    for k in 0..100 {
        let a = common::random_mask(&mut rng, 64, 64);
        let b = common::random_mask(&mut rng, 64, 64);
        let tol = [default_tol, 1.0, 3.5, 0.0][k % 4];
        let got = boundary_prf(&a, &b, tol);
        if (got.precision, got.recall, got.f) == common::boundary_oracle(&a, &b, tol) {
            boundary_ok += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    gate(
        match_ok == 200 && boundary_ok == 100 && secs < 60.0,
        format!(
            "matching optimal {match_ok}/200 (identical pair sets {same_pairs}/200), boundary exact {boundary_ok}/100, {secs:.1}s < 60s"
        ),
    )
}

fn formula_fidelity() -> Outcome {
    let direct = OcclusionMetrics::from_counts(4, 2, 2, 1);
    let size = 64;
    let rect = |i: usize, rows: usize| Mask::rect(size, size, i * 16, 0, i * 16 + 10, rows);
    let gt_occluded = [true, true, false, false];
    let pred_occluded = [true, false, true, false];
    let gts: Vec<InstanceAnnotation> = (0..4)
        .map(|i| InstanceAnnotation::new(rect(i, 20), rect(i, if gt_occluded[i] { 10 } else { 20 }), i as u32, "r").unwrap())
        .collect();
    let preds: Vec<PredictedInstance> = (0..4)
        .map(|i| PredictedInstance {
            amodal: rect(i, 20),
            visible: rect(i, if pred_occluded[i] { 10 } else { 20 }),
        })
        .collect();
    let report = evaluate_scene(&preds, &gts, 2.0);
    let o = &report.occlusion;
    let counts = (o.alpha, o.beta, o.gamma, o.delta) == (4, 2, 2, 1);
    let occ_ok = direct.acc_o == Some(0.25)
        && direct.f_o == Some(0.5)
        && o.acc_o == Some(0.25)
        && o.f_o == Some(0.5)
        && o.p_o == Some(0.5)
        && o.r_o == Some(0.5);
    let f75 = f_at_75(&[0.8, 0.7, 0.9]);
    let f75_ok = f75 == Some(200.0 / 3.0) && format!("{:.2}", f75.unwrap_or(0.0)) == "66.67";
    gate(
        counts && occ_ok && f75_ok,
        format!(
            "(α,β,γ,δ)=({},{},{},{}) ACC_O={:?} F_O={:?}; F@.75={{0.8,0.7,0.9}} -> {:.2}%",
            o.alpha,
            o.beta,
            o.gamma,
            o.delta,
            o.acc_o,
            o.f_o,
            f75.unwrap_or(f64::NAN)
        ),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let r = common::gradient_check(ModelConfig::tiny(), 2, 500, 1e-4, 1e-3, 7);
    let secs = start.elapsed().as_secs_f64();
    let ok = r.checked == 500 && r.passed as f64 >= 0.99 * 500.0 && secs < 300.0;
    gate(
        ok,
        format!(
            "{}/{} coordinates within 1e-3 (worst {:.2e}; {} kink-crossing draws redrawn), {secs:.1}s < 300s",
            r.passed, r.checked, r.worst, r.kinks
        ),
    )
}

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let w = rng.random_range(64..2000);
        let h = rng.random_range(64..2000);
        let k = CameraIntrinsics::new(
            rng.random_range(50.0..2000.0),
            rng.random_range(50.0..2000.0),
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
            w,
            h,
        )
        .unwrap();
        let p = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.05..10.0)];
        let (u, v) = project(p, &k).unwrap();
        let q = back_project(u, v, p[2], &k).unwrap();
        for i in 0..3 {
            worst = worst.max((p[i] - q[i]).abs());
        }
    }

    let scenes = generate_dataset(&GeneratorConfig::default(), 0, 100, Execution::default()).unwrap();
    let mut min_iou = f64::INFINITY;
    let mut masks = 0;
    for s in &scenes {
        for inst in &s.instances {
            let m = &inst.amodal_mask;
            let b = bbox_of_mask(m).unwrap();
            if b.width().min(b.height()) < 16 {
                continue;
            }
            let bbox = expand_bbox(b, 2.0);
            let crop = crop_and_resize(&Patch::from_mask(m), bbox, 64, Interpolation::Bilinear).unwrap();
            let back = paste_back(&crop, bbox, s.width(), s.height(), 0.5);
            min_iou = min_iou.min(iou(m, &back));
            masks += 1;
        }
    }
    gate(
        worst <= 1e-9 && min_iou >= 0.95 && masks > 0,
        format!("pinhole max error {worst:.1e} over 10000 points; crop/paste min IoU {min_iou:.4} over {masks} masks"),
    )
}

struct Pinned {
    train: Vec<RgbdScene>,
    eval: Vec<RgbdScene>,
}

fn pinned_data() -> Pinned {
    let cfg = GeneratorConfig::default();
    Pinned {
        train: generate_dataset(&cfg, 0, TRAIN_SCENES, Execution::default()).unwrap(),
        eval: generate_dataset(&cfg, TRAIN_SCENES as u64, EVAL_SCENES, Execution::default()).unwrap(),
    }
}

fn train_model(data: &Pinned, model_cfg: &ModelConfig, cfg: &TrainConfig, log: bool) -> Model {
    let mut progress = |r: &lacnet_core::train::HistoryRow| {
        if let (Some(full), Some(occ)) = (r.miou_full, r.miou_occ) {
            println!("      iteration {:>5}  loss {:.4}  mIoU full {:.4}  occ {:.4}", r.iteration, r.loss, full, occ);
        }
    };
    let mut opts = TrainOptions::new(&data.eval);
    if log {
        opts.progress = Some(&mut progress);
    }
    let outcome = train(&data.train, model_cfg, cfg, opts).unwrap();
    outcome.checkpoint.model().unwrap()
}

fn miou(data: &Pinned, source: &VisibleSource, predictor: Predictor<'_>) -> (f64, f64) {
    let priors = visible_priors(&data.eval, source);
    let r = evaluate(&data.eval, &priors, predictor, Execution::default()).unwrap().report;
    (r.miou_full.unwrap_or(0.0), r.miou_occ.unwrap_or(0.0))
}

fn learning(data: &Pinned, model: &Model, secs: f64) -> Outcome {
    let (full, occ) = miou(data, &VisibleSource::GroundTruth, Predictor::Model(model));
    let (base_full, base_occ) = miou(data, &VisibleSource::GroundTruth, Predictor::CopyVisible);
    gate(
        full >= 0.80 && occ >= 0.30 && occ > base_occ,
        format!(
            "mIoU full {full:.4} (>= 0.80), occ {occ:.4} (>= 0.30), copy-visible baseline full {base_full:.4} occ {base_occ:.4}; trained in {:.1} min (target < 45)",
            secs / 60.0
        ),
    )
}

fn visible_quality(data: &Pinned, model: &Model) -> Outcome {
    let (gt_full, gt_occ) = miou(data, &VisibleSource::GroundTruth, Predictor::Model(model));
    let corrupted = VisibleSource::Corrupted {
        params: AugmentParams::default().always(),
        seed: 17,
    };
    let (c_full, c_occ) = miou(data, &corrupted, Predictor::Model(model));
    gate(
        gt_full >= c_full,
        format!("GT visible full {gt_full:.4} occ {gt_occ:.4} vs corrupted visible full {c_full:.4} occ {c_occ:.4}"),
    )
}

fn ablation(data: &Pinned) -> Outcome {
    let mut scores = [Vec::new(), Vec::new()];
    for (slot, fusion) in [FusionStrategy::Linear, FusionStrategy::Stacked].into_iter().enumerate() {
        for seed in ABLATION_SEEDS {
            let model_cfg = ModelConfig {
                fusion,
                seed,
                ..ModelConfig::desk()
            };
            let cfg = TrainConfig {
                seed,
                total_iterations: ABLATION_ITERATIONS,
                eval_every: ABLATION_ITERATIONS,
                ..TrainConfig::default()
            };
            let model = train_model(data, &model_cfg, &cfg, false);
            let (_, occ) = miou(data, &VisibleSource::GroundTruth, Predictor::Model(&model));
            println!("      {fusion} seed {seed}: mIoU occ {occ:.4}");
            scores[slot].push(occ);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (lin, stk) = (mean(&scores[0]), mean(&scores[1]));
    Outcome {
        verdict: Verdict::Soft(lin >= stk - 0.02),
        detail: format!(
            "linear mean occ {lin:.4} vs stacked {stk:.4} (need >= stacked - 0.02), {} seeds x {ABLATION_ITERATIONS} iterations",
            ABLATION_SEEDS.len()
        ),
    }
}

fn grasp_protocol() -> Outcome {
    let scenes = generate_dataset(&GeneratorConfig::default(), 5000, 100, Execution::default()).unwrap();
    let (mut convex, mut region_a) = (0, 0);
    let (mut halves, mut displaced, mut min_ratio) = (0, 0, f64::INFINITY);
    for s in &scenes {
        for inst in &s.instances {
            let shape: ShapeKind = inst.label.parse().unwrap();
            if !shape.is_convex() {
                continue;
            }
            let perfect = PredictedInstance {
                amodal: inst.amodal_mask.clone(),
                visible: inst.visible_mask.clone(),
            };
            let g = generate_grasp(s, &perfect).unwrap();
            let (cx, cy) = pixel_mean(&inst.amodal_mask);
            assert!((g.pixel[0] - cx).abs() < 1e-9 && (g.pixel[1] - cy).abs() < 1e-9);
            convex += 1;
            if classify_grasp_region((cx, cy), &inst.amodal_mask).unwrap() == GraspRegionLabel::RegionA {
                region_a += 1;
            }

            // hide the half of the object with the lower principal-axis coordinate
            let axis = principal_axis(&inst.amodal_mask).unwrap();
            let t = |x: usize, y: usize| x as f64 * axis[0] + y as f64 * axis[1];
            let mut ts: Vec<f64> = inst.amodal_mask.iter_set().map(|(x, y)| t(x, y)).collect();
            ts.sort_by(f64::total_cmp);
            let cut = ts[ts.len() / 2];
            let visible = Mask::from_fn(s.width(), s.height(), |x, y| inst.amodal_mask.get(x, y) && t(x, y) >= cut);
            let copy = PredictedInstance {
                amodal: visible.clone(),
                visible,
            };
            let cg = generate_grasp(s, &copy).unwrap();
            let (vx, vy) = pixel_mean(&copy.amodal);
            assert!((cg.pixel[0] - vx).abs() < 1e-9 && (cg.pixel[1] - vy).abs() < 1e-9);
            let length = ts[ts.len() - 1] - ts[0];
            let ratio = ((vx - cx).powi(2) + (vy - cy).powi(2)).sqrt() / length;
            halves += 1;
            min_ratio = min_ratio.min(ratio);
            if ratio > 0.10 {
                displaced += 1;
            }
        }
    }
    let frac = region_a as f64 / convex as f64;
    gate(
        frac >= 0.95 && displaced == halves,
        format!(
            "perfect-prediction centroid in Region A {region_a}/{convex} ({:.1}%); copy-visible displacement > 10% of axis length on {displaced}/{halves} half-occluded instances (min {:.1}%)",
            100.0 * frac,
            100.0 * min_ratio
        ),
    )
}

fn pixel_mean(m: &Mask) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (x, y) in m.iter_set() {
        sx += x as f64;
        sy += y as f64;
        n += 1.0;
    }
    (sx / n, sy / n)
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut results: Vec<(&str, Outcome, f64)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(name) {
            return;
        }
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        print_line(name, &o, secs);
        results.push((name, o, secs));
    };

    run("metric-oracles", &mut metric_oracles);
    run("formula-fidelity", &mut formula_fidelity);
    run("gradient-check", &mut gradient_check);
    run("geometry", &mut geometry);
    run("grasp-protocol", &mut grasp_protocol);

    let needs_data = ["learning", "visible-mask-quality", "ablation-fusion"].iter().any(|n| wanted(n));
    if needs_data {
        let data = pinned_data();
        let mut trained: Option<(Model, f64)> = None;
        let get_model = |trained: &mut Option<(Model, f64)>| {
            if trained.is_none() {
                println!("      training desk model: {TRAIN_SCENES} scenes, {ITERATIONS} iterations");
                let start = Instant::now();
                let cfg = TrainConfig {
                    total_iterations: ITERATIONS,
                    ..TrainConfig::default()
                };
                let model = train_model(&data, &ModelConfig::desk(), &cfg, true);
                *trained = Some((model, start.elapsed().as_secs_f64()));
            }
        };
        if wanted("learning") || wanted("visible-mask-quality") {
            get_model(&mut trained);
        }
        let (model, secs) = trained.as_ref().map(|(m, s)| (Some(m), *s)).unwrap_or((None, 0.0));
        if let Some(model) = model {
            run("learning", &mut || learning(&data, model, secs));
            run("visible-mask-quality", &mut || visible_quality(&data, model));
        }
        run("ablation-fusion", &mut || ablation(&data));
    }

    println!();
    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, o, _)| matches!(o.verdict, Verdict::Fail))
        .map(|(n, _, _)| *n)
        .collect();
    println!(
        "acceptance: {} criteria run, {} failed{}",
        results.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn print_line(name: &str, o: &Outcome, secs: f64) {
    let tag = match o.verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::Soft(true) => "PASS (soft)",
        Verdict::Soft(false) => "FAIL (soft)",
    };
    println!("{tag:<11} {name:<22} {}  [{secs:.1}s]", o.detail);
}
