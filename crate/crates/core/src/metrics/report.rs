use serde::{Deserialize, Serialize};

use super::{boundary_prf, hungarian_match, iou, overlap_prf, Prf};
use crate::mask::Mask;
use crate::scene::{occlusion_flag, InstanceAnnotation};

/// Threshold on amodal Overlap-F for the F@.75 score.
const F75_THRESHOLD: f64 = 0.75;

/// One predicted instance in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedInstance {
    pub amodal: Mask,
    pub visible: Mask,
}

impl PredictedInstance {
    /// Predicted occluded region: amodal minus visible.
    pub fn occluded(&self) -> Mask {
        self.amodal.and_not(&self.visible)
    }

    /// Occlusion rule applied to the prediction, with the visible area taken
    /// inside the predicted amodal mask. An empty amodal mask is not occluded.
    pub fn occluded_flag(&self) -> bool {
        let a = self.amodal.count();
        a > 0 && occlusion_flag(self.visible.intersection_count(&self.amodal), a).unwrap_or(false)
    }
}

/// Percentage of values strictly above 0.75; `None` for an empty list.
pub fn f_at_75(overlap_f: &[f64]) -> Option<f64> {
    if overlap_f.is_empty() {
        return None;
    }
    let hits = overlap_f.iter().filter(|&&f| f > F75_THRESHOLD).count();
    Some(100.0 * hits as f64 / overlap_f.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
struct PrfSums {
    precision: f64,
    recall: f64,
    f: f64,
}

impl PrfSums {
    fn add(&mut self, p: Prf) {
        self.precision += p.precision;
        self.recall += p.recall;
        self.f += p.f;
    }

    fn merge(&mut self, o: &PrfSums) {
        self.precision += o.precision;
        self.recall += o.recall;
        self.f += o.f;
    }

    fn mean(&self, n: usize) -> Option<Prf> {
        (n > 0).then(|| Prf {
            precision: self.precision / n as f64,
            recall: self.recall / n as f64,
            f: self.f / n as f64,
        })
    }
}

/// Additive evaluation state; merging sums across scenes weights every scene
/// by its number of contributing pairs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSums {
    pub scenes: usize,
    pub predictions: usize,
    pub ground_truths: usize,
    pub matched: usize,
    iou_full: f64,
    occ_pairs: usize,
    iou_occ: f64,
    amodal_overlap: PrfSums,
    amodal_boundary: PrfSums,
    amodal_f75_hits: usize,
    invisible_pairs: usize,
    invisible_overlap: PrfSums,
    invisible_boundary: PrfSums,
    invisible_f75_hits: usize,
    alpha: usize,
    beta: usize,
    gamma: usize,
    delta: usize,
}

impl MetricsSums {
    pub fn merge(&mut self, o: &MetricsSums) {
        self.scenes += o.scenes;
        self.predictions += o.predictions;
        self.ground_truths += o.ground_truths;
        self.matched += o.matched;
        self.iou_full += o.iou_full;
        self.occ_pairs += o.occ_pairs;
        self.iou_occ += o.iou_occ;
        self.amodal_overlap.merge(&o.amodal_overlap);
        self.amodal_boundary.merge(&o.amodal_boundary);
        self.amodal_f75_hits += o.amodal_f75_hits;
        self.invisible_pairs += o.invisible_pairs;
        self.invisible_overlap.merge(&o.invisible_overlap);
        self.invisible_boundary.merge(&o.invisible_boundary);
        self.invisible_f75_hits += o.invisible_f75_hits;
        self.alpha += o.alpha;
        self.beta += o.beta;
        self.gamma += o.gamma;
        self.delta += o.delta;
    }

    pub fn report(&self) -> MetricsReport {
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        let pct = |hits: usize, n: usize| (n > 0).then(|| 100.0 * hits as f64 / n as f64);
        MetricsReport {
            scenes: self.scenes,
            predictions: self.predictions,
            ground_truths: self.ground_truths,
            matched: self.matched,
            miou_full: mean(self.iou_full, self.matched),
            miou_occ: mean(self.iou_occ, self.occ_pairs),
            occ_pairs: self.occ_pairs,
            amodal: MaskScores {
                pairs: self.matched,
                overlap: self.amodal_overlap.mean(self.matched),
                boundary: self.amodal_boundary.mean(self.matched),
                f_at_75: pct(self.amodal_f75_hits, self.matched),
            },
            invisible: MaskScores {
                pairs: self.invisible_pairs,
                overlap: self.invisible_overlap.mean(self.invisible_pairs),
                boundary: self.invisible_boundary.mean(self.invisible_pairs),
                f_at_75: pct(self.invisible_f75_hits, self.invisible_pairs),
            },
            occlusion: OcclusionMetrics::from_counts(self.alpha, self.beta, self.gamma, self.delta),
        }
    }
}

/// Averaged scores for one mask type; `None` marks an undefined average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub pairs: usize,
    pub overlap: Option<Prf>,
    pub boundary: Option<Prf>,
    /// Percentage in `[0, 100]`.
    pub f_at_75: Option<f64>,
}

/// Occlusion classification over matched instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionMetrics {
    /// Matched instances.
    pub alpha: usize,
    /// Predicted occluded among matched.
    pub beta: usize,
    /// Ground-truth occluded among matched.
    pub gamma: usize,
    /// Correctly predicted occlusions.
    pub delta: usize,
    /// `None` when nothing was matched.
    pub acc_o: Option<f64>,
    pub p_o: Option<f64>,
    pub r_o: Option<f64>,
    pub f_o: Option<f64>,
}

impl OcclusionMetrics {
    pub fn from_counts(alpha: usize, beta: usize, gamma: usize, delta: usize) -> Self {
        if alpha == 0 {
            return OcclusionMetrics {
                alpha,
                beta,
                gamma,
                delta,
                acc_o: None,
                p_o: None,
                r_o: None,
                f_o: None,
            };
        }
        let prf = Prf::from_counts(delta, beta, delta, gamma);
        OcclusionMetrics {
            alpha,
            beta,
            gamma,
            delta,
            acc_o: Some(delta as f64 / alpha as f64),
            p_o: Some(prf.precision),
            r_o: Some(prf.recall),
            f_o: Some(prf.f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenes: usize,
    pub predictions: usize,
    pub ground_truths: usize,
    pub matched: usize,
    pub miou_full: Option<f64>,
    pub miou_occ: Option<f64>,
    /// Matched pairs with a nonempty ground-truth occluded region.
    pub occ_pairs: usize,
    pub amodal: MaskScores,
    pub invisible: MaskScores,
    pub occlusion: OcclusionMetrics,
}

impl MetricsReport {
    /// Aligned text table: amodal OV/BO/F@.75, invisible OV/BO/F@.75,
    /// occlusion F/ACC, all in percent.
    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| match v {
            Some(x) => format!("{:>7.2}", 100.0 * x),
            None => format!("{:>7}", "undef"),
        };
        let pct = |v: Option<f64>| match v {
            Some(x) => format!("{x:>7.2}"),
            None => format!("{:>7}", "undef"),
        };
        let mut s = String::new();
        s.push_str(&format!(
            "{:>7} {:>7} | {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} | {:>7} {:>7}\n",
            "IoU-F", "IoU-O", "A-OV", "A-BO", "A-F@.75", "IV-OV", "IV-BO", "IV-F@75", "FO", "ACCO"
        ));
        s.push_str(&format!(
            "{} {} | {} {} {} | {} {} {} | {} {}\n",
            cell(self.miou_full),
            cell(self.miou_occ),
            cell(self.amodal.overlap.map(|p| p.f)),
            cell(self.amodal.boundary.map(|p| p.f)),
            pct(self.amodal.f_at_75),
            cell(self.invisible.overlap.map(|p| p.f)),
            cell(self.invisible.boundary.map(|p| p.f)),
            pct(self.invisible.f_at_75),
            cell(self.occlusion.f_o),
            cell(self.occlusion.acc_o),
        ));
        s.push_str(&format!(
            "scenes {}  predictions {}  ground truth {}  matched {}  occluded pairs {}\n",
            self.scenes, self.predictions, self.ground_truths, self.matched, self.occ_pairs
        ));
        s
    }
}

/// Matches on amodal masks and accumulates every score for one scene.
pub fn evaluate_scene_sums(
    preds: &[PredictedInstance],
    gts: &[InstanceAnnotation],
    boundary_tolerance: f64,
) -> MetricsSums {
    let pred_amodal: Vec<Mask> = preds.iter().map(|p| p.amodal.clone()).collect();
    let gt_amodal: Vec<Mask> = gts.iter().map(|g| g.amodal_mask.clone()).collect();
    let matching = hungarian_match(&pred_amodal, &gt_amodal);

    let mut pairs = matching.pairs.clone();
    // summed in gt order
    pairs.sort_unstable_by_key(|&(_, g)| g);

    let mut sums = MetricsSums {
        scenes: 1,
        predictions: preds.len(),
        ground_truths: gts.len(),
        matched: pairs.len(),
        ..Default::default()
    };
    for &(pi, gi) in &pairs {
        let pred = &preds[pi];
        let gt = &gts[gi];
        sums.iou_full += iou(&pred.amodal, &gt.amodal_mask);
        let overlap = overlap_prf(&pred.amodal, &gt.amodal_mask);
        sums.amodal_overlap.add(overlap);
        sums.amodal_boundary
            .add(boundary_prf(&pred.amodal, &gt.amodal_mask, boundary_tolerance));
        if overlap.f > F75_THRESHOLD {
            sums.amodal_f75_hits += 1;
        }

        let pred_occ = pred.occluded();
        if !gt.occluded_mask.is_empty() {
            sums.occ_pairs += 1;
            sums.iou_occ += iou(&pred_occ, &gt.occluded_mask);
            sums.invisible_pairs += 1;
            let inv = overlap_prf(&pred_occ, &gt.occluded_mask);
            sums.invisible_overlap.add(inv);
            sums.invisible_boundary
                .add(boundary_prf(&pred_occ, &gt.occluded_mask, boundary_tolerance));
            if inv.f > F75_THRESHOLD {
                sums.invisible_f75_hits += 1;
            }
        }

        let predicted = pred.occluded_flag();
        sums.alpha += 1;
        sums.beta += predicted as usize;
        sums.gamma += gt.occluded_flag as usize;
        sums.delta += (predicted && gt.occluded_flag) as usize;
    }
    sums
}

pub fn evaluate_scene(
    preds: &[PredictedInstance],
    gts: &[InstanceAnnotation],
    boundary_tolerance: f64,
) -> MetricsReport {
    evaluate_scene_sums(preds, gts, boundary_tolerance).report()
}
