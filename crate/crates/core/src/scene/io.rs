//! Dataset layout:
//!
//! ```text
//! <root>/<scene_id>/rgb.png            8-bit RGB
//! <root>/<scene_id>/depth.png          16-bit gray, millimeters, 0 = invalid
//! <root>/<scene_id>/camera.json        intrinsics
//! <root>/<scene_id>/instances.json     [{amodal, visible, occluded_flag, depth_rank, label}]
//! <root>/<scene_id>/masks/<k>_amodal.png, masks/<k>_visible.png   {0, 255}
//! ```

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{CameraIntrinsics, DepthMap, InstanceAnnotation, RgbdScene};
use crate::error::{Error, Result};
use crate::mask::Mask;

/// Millimeters per meter in the depth PNG.
pub const DEPTH_SCALE_MM: f64 = 1000.0;

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    amodal: String,
    visible: String,
    occluded_flag: bool,
    depth_rank: u32,
    label: String,
}

fn write_png<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path)
        .map_err(|e| Error::parse(path, format!("cannot write image: {e}")))
}

fn read_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::parse(path, format!("cannot read image: {e}")))
}

pub(crate) fn depth_to_mm(d: f32) -> u16 {
    if d.is_finite() && d > 0.0 {
        (d as f64 * DEPTH_SCALE_MM).round().clamp(0.0, u16::MAX as f64) as u16
    } else {
        0
    }
}

pub(crate) fn mm_to_depth(mm: u32) -> f32 {
    (mm as f64 / DEPTH_SCALE_MM) as f32
}

pub fn save_scene(scene: &RgbdScene, scene_dir: &Path) -> Result<()> {
    scene.validate()?;
    let masks_dir = scene_dir.join("masks");
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    write_png(&scene_dir.join("rgb.png"), &scene.rgb)?;
    let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(
        scene.width() as u32,
        scene.height() as u32,
        |x, y| Luma([depth_to_mm(scene.depth.get(x as usize, y as usize))]),
    );
    write_png(&scene_dir.join("depth.png"), &depth)?;

    let camera_path = scene_dir.join("camera.json");
    let camera = serde_json::to_string_pretty(&scene.intrinsics).expect("intrinsics serialize");
    fs::write(&camera_path, camera).map_err(|e| Error::io(&camera_path, e))?;

    let mut records = Vec::with_capacity(scene.instances.len());
    for (k, inst) in scene.instances.iter().enumerate() {
        let amodal = format!("masks/{k}_amodal.png");
        let visible = format!("masks/{k}_visible.png");
        write_png(&scene_dir.join(&amodal), &inst.amodal_mask.to_luma())?;
        write_png(&scene_dir.join(&visible), &inst.visible_mask.to_luma())?;
        records.push(InstanceRecord {
            amodal,
            visible,
            occluded_flag: inst.occluded_flag,
            depth_rank: inst.depth_rank,
            label: inst.label.clone(),
        });
    }
    let instances_path = scene_dir.join("instances.json");
    let json = serde_json::to_string_pretty(&records).expect("records serialize");
    fs::write(&instances_path, json).map_err(|e| Error::io(&instances_path, e))?;
    Ok(())
}

pub fn load_scene(scene_dir: &Path) -> Result<RgbdScene> {
    let scene_id = scene_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let camera_path = scene_dir.join("camera.json");
    let camera_text = fs::read_to_string(&camera_path)
        .map_err(|e| Error::parse(&camera_path, format!("cannot read camera file: {e}")))?;
    let intrinsics: CameraIntrinsics = serde_json::from_str(&camera_text)
        .map_err(|e| Error::parse(&camera_path, e.to_string()))?;
    intrinsics
        .validate()
        .map_err(|e| Error::parse(&camera_path, e.to_string()))?;

    let rgb = read_image(&scene_dir.join("rgb.png"))?.to_rgb8();
    let depth_path = scene_dir.join("depth.png");
    let depth_img = read_image(&depth_path)?.to_luma16();
    let depth = DepthMap::from_vec(
        depth_img.width() as usize,
        depth_img.height() as usize,
        depth_img
            .pixels()
            .map(|p| mm_to_depth(p.0[0] as u32))
            .collect(),
    )?;

    let instances_path = scene_dir.join("instances.json");
    let text = fs::read_to_string(&instances_path)
        .map_err(|e| Error::parse(&instances_path, format!("cannot read annotations: {e}")))?;
    let records: Vec<InstanceRecord> =
        serde_json::from_str(&text).map_err(|e| Error::parse(&instances_path, e.to_string()))?;
    let mut instances = Vec::with_capacity(records.len());
    for rec in records {
        let amodal = Mask::from_luma(&read_image(&scene_dir.join(&rec.amodal))?.to_luma8());
        let visible = Mask::from_luma(&read_image(&scene_dir.join(&rec.visible))?.to_luma8());
        let inst = InstanceAnnotation::with_flag(
            amodal,
            visible,
            rec.occluded_flag,
            rec.depth_rank,
            rec.label,
        )
        .map_err(|e| Error::parse(&instances_path, e.to_string()))?;
        instances.push(inst);
    }

    let scene = RgbdScene {
        scene_id,
        rgb,
        depth,
        intrinsics,
        instances,
    };
    scene
        .validate()
        .map_err(|e| Error::parse(scene_dir, e.to_string()))?;
    Ok(scene)
}

pub fn save_dataset(scenes: &[RgbdScene], root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for scene in scenes {
        save_scene(scene, &root.join(&scene.scene_id))?;
    }
    Ok(())
}

/// Loads every scene subdirectory of `root` in lexicographic order. Plain
/// files at the top level (e.g. a run manifest) are ignored.
pub fn load_dataset(root: &Path) -> Result<Vec<RgbdScene>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    dirs.iter().map(|d| load_scene(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn millimeter_quantization() {
        assert_eq!(depth_to_mm(0.4321), 432);
        assert_eq!(depth_to_mm(0.0), 0);
        assert_eq!(depth_to_mm(-1.0), 0);
        assert_eq!(depth_to_mm(f32::NAN), 0);
        assert_eq!((432f64 / DEPTH_SCALE_MM) as f32, 0.432f32);
    }
}
