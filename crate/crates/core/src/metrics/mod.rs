//! Instance-level evaluation: matching, IoU, overlap and boundary
//! precision/recall/F, F@.75 and occlusion classification scores.

mod matching;
mod report;

pub use matching::{hungarian_match, match_by_weight, MatchResult};
pub use report::{
    evaluate_scene, evaluate_scene_sums, f_at_75, MaskScores, MetricsReport, MetricsSums,
    OcclusionMetrics, PredictedInstance,
};

use serde::{Deserialize, Serialize};

use crate::mask::Mask;

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Prf {
    /// Zero-denominator conventions: empty prediction gives P = 0, empty
    /// reference gives R = 0, P + R = 0 gives F = 0.
    pub fn from_counts(hits_pred: usize, n_pred: usize, hits_gt: usize, n_gt: usize) -> Prf {
        let precision = if n_pred == 0 { 0.0 } else { hits_pred as f64 / n_pred as f64 };
        let recall = if n_gt == 0 { 0.0 } else { hits_gt as f64 / n_gt as f64 };
        let f = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f,
        }
    }
}

/// `|a ∩ b| / |a ∪ b|`, 1 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> f64 {
    let union = a.union_count(b);
    if union == 0 {
        1.0
    } else {
        a.intersection_count(b) as f64 / union as f64
    }
}

pub fn overlap_prf(pred: &Mask, gt: &Mask) -> Prf {
    let inter = pred.intersection_count(gt);
    Prf::from_counts(inter, pred.count(), inter, gt.count())
}

/// Tolerance scaled with the image diagonal (0.5%), never below 2 px.
pub fn default_boundary_tolerance(width: usize, height: usize) -> f64 {
    let diag = ((width * width + height * height) as f64).sqrt();
    (0.005 * diag).max(2.0)
}

/// Boundary pixels of `from` that lie within `tolerance` (Euclidean) of a
/// boundary pixel of `to`.
fn boundary_hits(from: &Mask, to: &Mask, tolerance: f64) -> usize {
    let r = tolerance.floor() as isize;
    let t2 = tolerance * tolerance;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| ((dx * dx + dy * dy) as f64) <= t2)
        .collect();
    from.iter_set()
        .filter(|&(x, y)| {
            offsets
                .iter()
                .any(|&(dx, dy)| to.get_signed(x as isize + dx, y as isize + dy))
        })
        .count()
}

/// Boundary P/R/F with a distance tolerance in pixels.
pub fn boundary_prf(pred: &Mask, gt: &Mask, tolerance_px: f64) -> Prf {
    assert!(pred.same_dims(gt), "boundary_prf needs equal mask sizes");
    let bp = pred.boundary();
    let bg = gt.boundary();
    let tol = tolerance_px.max(0.0);
    Prf::from_counts(
        boundary_hits(&bp, &bg, tol),
        bp.count(),
        boundary_hits(&bg, &bp, tol),
        bg.count(),
    )
}
