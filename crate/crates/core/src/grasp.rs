//! Top-grasp point generation from an amodal mask and the middle-third
//! grasp-region classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::PredictedInstance;
use crate::scene::{CameraIntrinsics, RgbdScene};

/// Relative tolerance used when comparing projections against the region
/// boundaries and eigenvalues against each other.
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GraspRegionLabel {
    RegionA,
    RegionB,
    Outside,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPoint {
    /// `(u, v)` image coordinates.
    pub pixel: [f64; 2],
    /// Camera-frame meters.
    pub point3d: [f64; 3],
    pub strategy: GraspStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraspStrategy {
    #[serde(rename = "top-grasp")]
    TopGrasp,
}

/// Centroid of the set pixels.
pub fn mask_center(mask: &Mask) -> Result<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in mask.iter_set() {
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask("grasp mask"));
    }
    Ok((sx / n as f64, sy / n as f64))
}

/// Median of the valid (non-zero) depth values under `visible_mask`.
pub fn center_depth(scene: &RgbdScene, visible_mask: &Mask) -> Result<f64> {
    let mut values: Vec<f64> = visible_mask
        .iter_set()
        .map(|(x, y)| scene.depth.get(x, y) as f64)
        .filter(|d| *d > 0.0 && d.is_finite())
        .collect();
    if values.is_empty() {
        return Err(Error::Geometry("no valid depth under the visible mask".into()));
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Ok(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

pub fn back_project(u: f64, v: f64, z: f64, k: &CameraIntrinsics) -> Result<[f64; 3]> {
    if !(z > 0.0) {
        return Err(Error::Geometry(format!("depth {z} is not positive")));
    }
    Ok([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z])
}

/// Pinhole projection, the inverse of [`back_project`].
pub fn project(point: [f64; 3], k: &CameraIntrinsics) -> Result<(f64, f64)> {
    let [x, y, z] = point;
    if !(z > 0.0) {
        return Err(Error::Geometry(format!("depth {z} is not positive")));
    }
    Ok((k.fx * x / z + k.cx, k.fy * y / z + k.cy))
}

/// Major axis of the second central moments. The sign makes the first
/// non-zero component positive; isotropic masks return `(1, 0)`.
pub fn principal_axis(mask: &Mask) -> Result<[f64; 2]> {
    let n = mask.count();
    if n < 2 {
        return Err(Error::Geometry("principal axis needs at least two pixels".into()));
    }
    let (cx, cy) = mask_center(mask)?;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in mask.iter_set() {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (a, b, c) = (sxx / n as f64, syy / n as f64, sxy / n as f64);
    let scale = a + b;
    let gap = ((a - b) * (a - b) + 4.0 * c * c).sqrt();
    if gap <= EPS * scale.max(f64::MIN_POSITIVE) {
        return Ok([1.0, 0.0]);
    }
    let axis = if c.abs() <= EPS * scale {
        if a > b {
            [1.0, 0.0]
        } else {
            [0.0, 1.0]
        }
    } else {
        let lambda = 0.5 * (a + b + gap);
        // (A - λI) v = 0 with v = (c, λ - a) or (λ - b, c); pick the better conditioned one
        let v1 = [c, lambda - a];
        let v2 = [lambda - b, c];
        let v = if v1[0].hypot(v1[1]) >= v2[0].hypot(v2[1]) { v1 } else { v2 };
        let norm = v[0].hypot(v[1]);
        [v[0] / norm, v[1] / norm]
    };
    let first = if axis[0].abs() > EPS { axis[0] } else { axis[1] };
    Ok(if first < 0.0 { [-axis[0], -axis[1]] } else { axis })
}

/// Region A is the middle third of the mask's extent along its principal axis
/// (boundaries included), Region B the outer thirds; points off the mask
/// (after rounding to the nearest pixel) are `Outside`.
pub fn classify_grasp_region(point: (f64, f64), amodal_mask: &Mask) -> Result<GraspRegionLabel> {
    if amodal_mask.is_empty() {
        return Err(Error::EmptyMask("amodal mask"));
    }
    let (px, py) = (point.0.round(), point.1.round());
    if !amodal_mask.get_signed(px as isize, py as isize) {
        return Ok(GraspRegionLabel::Outside);
    }
    let axis = if amodal_mask.count() >= 2 {
        principal_axis(amodal_mask)?
    } else {
        [1.0, 0.0]
    };
    let proj = |x: f64, y: f64| x * axis[0] + y * axis[1];
    let (mut t_min, mut t_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in amodal_mask.iter_set() {
        let t = proj(x as f64, y as f64);
        t_min = t_min.min(t);
        t_max = t_max.max(t);
    }
    let len = t_max - t_min;
    let t = proj(px, py);
    let tol = EPS * (1.0 + t_max.abs().max(t_min.abs()));
    let lo = t_min + len / 3.0;
    let hi = t_min + 2.0 * len / 3.0;
    Ok(if t >= lo - tol && t <= hi + tol {
        GraspRegionLabel::RegionA
    } else {
        GraspRegionLabel::RegionB
    })
}

/// Top grasp at the centre of the predicted amodal mask, with depth taken
/// from the predicted visible mask.
pub fn generate_grasp(scene: &RgbdScene, prediction: &PredictedInstance) -> Result<GraspPoint> {
    let (u, v) = mask_center(&prediction.amodal)?;
    if prediction.visible.is_empty() {
        return Err(Error::EmptyMask("predicted visible mask"));
    }
    let z = center_depth(scene, &prediction.visible)?;
    let point3d = back_project(u, v, z, &scene.intrinsics)?;
    Ok(GraspPoint {
        pixel: [u, v],
        point3d,
        strategy: GraspStrategy::TopGrasp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::DepthMap;
    use proptest::prelude::*;

    fn scene_with_depth(depth: DepthMap) -> RgbdScene {
        let (w, h) = (depth.width(), depth.height());
        RgbdScene {
            scene_id: "t".into(),
            rgb: image::RgbImage::new(w as u32, h as u32),
            depth,
            intrinsics: CameraIntrinsics::synthetic(w),
            instances: vec![],
        }
    }

    #[test]
    fn centers() {
        assert_eq!(mask_center(&Mask::rect(20, 20, 0, 0, 10, 10)).unwrap(), (4.5, 4.5));
        let mut p = Mask::new(10, 10);
        p.set(3, 7, true);
        assert_eq!(mask_center(&p).unwrap(), (3.0, 7.0));
        // L: (0,0),(0,1),(0,2),(1,2),(2,2)
        let mut l = Mask::new(5, 5);
        for &(x, y) in &[(0, 0), (0, 1), (0, 2), (1, 2), (2, 2)] {
            l.set(x, y, true);
        }
        assert_eq!(mask_center(&l).unwrap(), (3.0 / 5.0, 7.0 / 5.0));
        assert!(mask_center(&Mask::new(3, 3)).is_err());
    }

    #[test]
    fn depth_median() {
        let scene = scene_with_depth(DepthMap::new(8, 8, 0.6));
        assert_eq!(center_depth(&scene, &Mask::rect(8, 8, 0, 0, 3, 3)).unwrap(), 0.6f32 as f64);

        let mut d = DepthMap::new(4, 1, 0.0);
        d.set(0, 0, 0.5);
        d.set(1, 0, 0.6);
        d.set(2, 0, 0.9);
        let scene = scene_with_depth(d);
        let all = Mask::from_fn(4, 1, |_, _| true);
        // pixel 3 is invalid and excluded
        assert_eq!(center_depth(&scene, &all).unwrap(), 0.6f32 as f64);
        assert!(center_depth(&scene, &Mask::rect(4, 1, 3, 0, 4, 1)).is_err());
    }

    #[test]
    fn back_projection_examples() {
        let k = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap();
        assert_eq!(back_project(320.0, 240.0, 2.0, &k).unwrap(), [0.0, 0.0, 2.0]);
        assert_eq!(back_project(820.0, 240.0, 1.0, &k).unwrap(), [1.0, 0.0, 1.0]);
        assert!(back_project(1.0, 1.0, 0.0, &k).is_err());
    }

    #[test]
    fn axes() {
        assert_eq!(principal_axis(&Mask::rect(40, 40, 0, 0, 30, 10)).unwrap(), [1.0, 0.0]);
        assert_eq!(principal_axis(&Mask::rect(40, 40, 0, 0, 10, 30)).unwrap(), [0.0, 1.0]);
        assert_eq!(principal_axis(&Mask::rect(40, 40, 0, 0, 10, 10)).unwrap(), [1.0, 0.0]);
        let bar = Mask::from_fn(40, 40, |x, y| (x as i64 - y as i64).abs() <= 1);
        let a = principal_axis(&bar).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((a[0] - h).abs() < 1e-6 && (a[1] - h).abs() < 1e-6, "{a:?}");
        let mut one = Mask::new(4, 4);
        one.set(1, 1, true);
        assert!(principal_axis(&one).is_err());
    }

    #[test]
    fn regions_of_rectangle() {
        let rect = Mask::rect(40, 20, 0, 0, 30, 10);
        let c = mask_center(&rect).unwrap();
        assert_eq!(classify_grasp_region(c, &rect).unwrap(), GraspRegionLabel::RegionA);
        assert_eq!(classify_grasp_region((3.0, 5.0), &rect).unwrap(), GraspRegionLabel::RegionB);
        assert_eq!(classify_grasp_region((26.0, 5.0), &rect).unwrap(), GraspRegionLabel::RegionB);
        assert_eq!(classify_grasp_region((35.0, 5.0), &rect).unwrap(), GraspRegionLabel::Outside);
    }

    #[test]
    fn grasp_uses_visible_depth_only() {
        let mut d = DepthMap::new(40, 20, 1.2);
        for y in 0..10 {
            for x in 0..30 {
                d.set(x, y, if x < 15 { 0.5 } else { 0.45 });
            }
        }
        let scene = scene_with_depth(d);
        let amodal = Mask::rect(40, 20, 0, 0, 30, 10);
        let visible = Mask::rect(40, 20, 0, 0, 15, 10);
        let g = generate_grasp(&scene, &PredictedInstance { amodal: amodal.clone(), visible: visible.clone() }).unwrap();
        assert_eq!(g.pixel, [14.5, 4.5]);
        assert_eq!(g.point3d[2], 0.5f32 as f64);
        let copy = generate_grasp(&scene, &PredictedInstance { amodal: visible.clone(), visible }).unwrap();
        assert_eq!(copy.pixel, [7.0, 4.5]);
    }

    proptest! {
        #[test]
        fn pinhole_round_trip(x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.1f64..10.0) {
            let k = CameraIntrinsics::new(612.0, 611.0, 321.5, 238.2, 640, 480).unwrap();
            let (u, v) = project([x, y, z], &k).unwrap();
            let p = back_project(u, v, z, &k).unwrap();
            prop_assert!((p[0] - x).abs() < 1e-9 && (p[1] - y).abs() < 1e-9);
        }

        #[test]
        fn region_invariant_under_translation_and_rotation(
            w in 4usize..30, h in 4usize..30, tx in 0usize..8, ty in 0usize..8, fx in 0.0f64..1.0, fy in 0.0f64..1.0
        ) {
            prop_assume!(w != h);
            let size = 48;
            let m = Mask::rect(size, size, 2, 3, 2 + w, 3 + h);
            let p = (2 + (fx * w as f64) as usize, 3 + (fy * h as f64) as usize);
            let label = classify_grasp_region((p.0 as f64, p.1 as f64), &m).unwrap();
            let shifted = Mask::rect(size, size, 2 + tx, 3 + ty, 2 + w + tx, 3 + h + ty);
            let ls = classify_grasp_region(((p.0 + tx) as f64, (p.1 + ty) as f64), &shifted).unwrap();
            prop_assert_eq!(label, ls);
            let r = m.rotate90();
            let rp = ((size - 1 - p.1) as f64, p.0 as f64);
            prop_assert_eq!(label, classify_grasp_region(rp, &r).unwrap());
        }

        #[test]
        fn symmetric_convex_centroid_is_region_a(a in 3.0f64..20.0, b in 3.0f64..20.0, rect in any::<bool>()) {
            let m = Mask::from_fn(48, 48, |x, y| {
                let (dx, dy) = (x as f64 - 24.0, y as f64 - 24.0);
                if rect { dx.abs() <= a && dy.abs() <= b } else { (dx / a).powi(2) + (dy / b).powi(2) <= 1.0 }
            });
            let c = mask_center(&m).unwrap();
            prop_assert_eq!(classify_grasp_region(c, &m).unwrap(), GraspRegionLabel::RegionA);
        }
    }
}
