//! Static overlays of ground truth, predictions and grasp points.
//!
//! Palette: ground-truth amodal contours yellow, predicted visible masks a
//! half-transparent green fill, predicted amodal contours red, grasp points
//! blue crosses.

use image::{Rgb, RgbImage};

use crate::mask::Mask;
use crate::metrics::PredictedInstance;
use crate::scene::RgbdScene;

pub const GT_AMODAL: Rgb<u8> = Rgb([255, 220, 0]);
pub const PRED_VISIBLE: Rgb<u8> = Rgb([0, 200, 60]);
pub const PRED_AMODAL: Rgb<u8> = Rgb([230, 20, 20]);
pub const GRASP: Rgb<u8> = Rgb([30, 60, 255]);

const FILL_ALPHA: u16 = 128;
const CROSS_ARM: i64 = 3;

fn fill(img: &mut RgbImage, mask: &Mask, color: Rgb<u8>) {
    for (x, y) in mask.iter_set() {
        let p = img.get_pixel_mut(x as u32, y as u32);
        for c in 0..3 {
            let blended = (p[c] as u16 * (256 - FILL_ALPHA) + color[c] as u16 * FILL_ALPHA) >> 8;
            p[c] = blended as u8;
        }
    }
}

fn contour(img: &mut RgbImage, mask: &Mask, color: Rgb<u8>) {
    for (x, y) in mask.boundary().iter_set() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn cross(img: &mut RgbImage, (u, v): (f64, f64), color: Rgb<u8>) {
    let (cx, cy) = (u.round() as i64, v.round() as i64);
    let (w, h) = (img.width() as i64, img.height() as i64);
    for d in -CROSS_ARM..=CROSS_ARM {
        for (x, y) in [(cx + d, cy), (cx, cy + d)] {
            if (0..w).contains(&x) && (0..h).contains(&y) {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Draws the overlay; layers are painted in palette order so later ones
/// stay visible.
pub fn render_overlay(scene: &RgbdScene, predictions: &[PredictedInstance], grasps: &[(f64, f64)]) -> RgbImage {
    let mut img = scene.rgb.clone();
    for p in predictions {
        fill(&mut img, &p.visible, PRED_VISIBLE);
    }
    for inst in &scene.instances {
        contour(&mut img, &inst.amodal_mask, GT_AMODAL);
    }
    for p in predictions {
        contour(&mut img, &p.amodal, PRED_AMODAL);
    }
    for &g in grasps {
        cross(&mut img, g, GRASP);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorConfig};

    #[test]
    fn layers_use_palette() {
        let scene = generate_scene(&GeneratorConfig::default(), 0).unwrap();
        let plain = render_overlay(&scene, &[], &[]);
        let b = scene.instances[0].amodal_mask.boundary();
        let (x, y) = b.iter_set().next().unwrap();
        assert_eq!(*plain.get_pixel(x as u32, y as u32), GT_AMODAL);

        let m = Mask::rect(scene.width(), scene.height(), 2, 2, 20, 20);
        let pred = PredictedInstance {
            amodal: m.clone(),
            visible: m,
        };
        let img = render_overlay(&scene, std::slice::from_ref(&pred), &[(60.0, 60.0)]);
        assert_eq!(*img.get_pixel(2, 2), PRED_AMODAL);
        assert_eq!(*img.get_pixel(63, 60), GRASP);
        assert_eq!(img, render_overlay(&scene, &[pred], &[(60.0, 60.0)]));
    }
}
