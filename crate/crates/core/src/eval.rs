//! Whole-dataset evaluation: obtain a visible prior per instance, predict,
//! match and score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::exec::Execution;
use crate::mask::Mask;
use crate::metrics::{default_boundary_tolerance, evaluate_scene_sums, MetricsReport, MetricsSums, PredictedInstance};
use crate::model::Model;
use crate::preprocess::{augment_mask, AugmentParams};
use crate::scene::{derive_seed, RgbdScene};

/// Where the visible mask given to the network comes from.
#[derive(Debug, Clone)]
pub enum VisibleSource {
    GroundTruth,
    /// Ground truth passed through mask augmentation, seeded per scene.
    Corrupted { params: AugmentParams, seed: u64 },
    /// One list of masks per scene, e.g. from an external detector.
    Provided(Vec<Vec<Mask>>),
}

#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Model),
    /// Returns the visible prior as both the visible and the amodal mask.
    CopyVisible,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Predictions per scene, in prior order; empty priors produce none.
    pub predictions: Vec<Vec<PredictedInstance>>,
}

pub fn visible_priors(scenes: &[RgbdScene], source: &VisibleSource) -> Vec<Vec<Mask>> {
    match source {
        VisibleSource::GroundTruth => scenes
            .iter()
            .map(|s| s.instances.iter().map(|i| i.visible_mask.clone()).collect())
            .collect(),
        VisibleSource::Corrupted { params, seed } => scenes
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(*seed, k as u64));
                s.instances
                    .iter()
                    .map(|i| augment_mask(&i.visible_mask, params, &mut rng))
                    .collect()
            })
            .collect(),
        VisibleSource::Provided(masks) => masks.clone(),
    }
}

/// Predictions for the non-empty priors of one scene.
pub fn predict_scene(scene: &RgbdScene, priors: &[Mask], predictor: Predictor<'_>) -> Result<Vec<PredictedInstance>> {
    let priors: Vec<Mask> = priors.iter().filter(|m| !m.is_empty()).cloned().collect();
    match predictor {
        Predictor::CopyVisible => Ok(priors
            .into_iter()
            .map(|m| PredictedInstance {
                amodal: m.clone(),
                visible: m,
            })
            .collect()),
        Predictor::Model(model) => {
            let mut out = Vec::with_capacity(priors.len());
            for chunk in priors.chunks(16) {
                for p in model.predict_instances(scene, chunk)? {
                    out.push(PredictedInstance {
                        amodal: p.amodal_mask,
                        visible: p.visible_mask,
                    });
                }
            }
            Ok(out)
        }
    }
}

/// Scores every scene and merges the sums in scene order.
pub fn evaluate(scenes: &[RgbdScene], priors: &[Vec<Mask>], predictor: Predictor<'_>, exec: Execution) -> Result<Evaluation> {
    assert_eq!(scenes.len(), priors.len(), "one prior list per scene");
    let per_scene = exec.try_map_range(scenes.len(), |k| {
        let scene = &scenes[k];
        let preds = predict_scene(scene, &priors[k], predictor)?;
        let tol = default_boundary_tolerance(scene.width(), scene.height());
        let sums = evaluate_scene_sums(&preds, &scene.instances, tol);
        Ok::<_, crate::Error>((sums, preds))
    })?;
    let mut total = MetricsSums::default();
    let mut predictions = Vec::with_capacity(per_scene.len());
    for (sums, preds) in per_scene {
        total.merge(&sums);
        predictions.push(preds);
    }
    Ok(Evaluation {
        report: total.report(),
        predictions,
    })
}
