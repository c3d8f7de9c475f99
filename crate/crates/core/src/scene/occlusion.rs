use super::InstanceAnnotation;
use crate::error::{Error, Result};
use crate::mask::Mask;

/// An instance is occluded when less than this fraction of it is visible.
pub const OCCLUSION_RATIO: f64 = 0.95;

/// `visible / amodal < 0.95`, evaluated exactly in integers.
pub fn occlusion_flag(visible_area: usize, amodal_area: usize) -> Result<bool> {
    if amodal_area == 0 {
        return Err(Error::InvalidAnnotation("amodal area is zero".into()));
    }
    if visible_area > amodal_area {
        return Err(Error::InvalidAnnotation(format!(
            "visible area {visible_area} exceeds amodal area {amodal_area}"
        )));
    }
    // 100 * V < 95 * A
    Ok((visible_area as u128) * 100 < (amodal_area as u128) * 95)
}

/// Visible mask of each instance: its amodal mask minus every nearer amodal
/// mask and minus the foam layer.
pub fn derive_visible_masks(
    amodal_masks: &[Mask],
    depth_ranks: &[u32],
    foam_mask: &Mask,
) -> Result<Vec<InstanceAnnotation>> {
    if amodal_masks.len() != depth_ranks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} masks but {} depth ranks",
            amodal_masks.len(),
            depth_ranks.len()
        )));
    }
    let mut sorted = depth_ranks.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidAnnotation("depth ranks are not unique".into()));
    }
    amodal_masks
        .iter()
        .zip(depth_ranks)
        .map(|(amodal, &rank)| {
            let mut visible = amodal.and_not(foam_mask);
            for (other, &other_rank) in amodal_masks.iter().zip(depth_ranks) {
                if other_rank < rank {
                    visible = visible.and_not(other);
                }
            }
            InstanceAnnotation::new(amodal.clone(), visible, rank, "")
        })
        .collect()
}
