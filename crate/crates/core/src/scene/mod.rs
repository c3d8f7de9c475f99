//! Scene domain types, occlusion bookkeeping, the procedural generator and the
//! dataset directory format.

mod generate;
mod io;
mod occlusion;

pub use generate::{derive_seed, generate_dataset, generate_scene, GeneratorConfig, ShapeKind};
pub use io::{load_dataset, load_scene, save_dataset, save_scene, DEPTH_SCALE_MM};
pub use occlusion::{derive_visible_masks, occlusion_flag, OCCLUSION_RATIO};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// `fx = fy = size`, principal point at the canvas centre.
    pub fn synthetic(size: usize) -> Self {
        let s = size as f64;
        CameraIntrinsics {
            fx: s,
            fy: s,
            cx: s / 2.0,
            cy: s / 2.0,
            width: size,
            height: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Geometry(format!("invalid intrinsics {self:?}")))
        }
    }
}

/// Depth image in meters; `0` marks an invalid reading.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        DepthMap {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "depth data has {} entries, expected {width}x{height}",
                data.len()
            )));
        }
        Ok(DepthMap {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }
}

/// One object instance. Construct through [`InstanceAnnotation::new`] so the
/// derived fields stay consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub amodal_mask: Mask,
    pub visible_mask: Mask,
    pub occluded_mask: Mask,
    pub occluded_flag: bool,
    /// 0 is nearest to the camera.
    pub depth_rank: u32,
    pub label: String,
}

impl InstanceAnnotation {
    /// Derives the occluded mask and the occlusion flag.
    pub fn new(amodal: Mask, visible: Mask, depth_rank: u32, label: impl Into<String>) -> Result<Self> {
        if !visible.same_dims(&amodal) {
            return Err(Error::ShapeMismatch("visible and amodal masks differ in size".into()));
        }
        if !visible.is_subset_of(&amodal) {
            return Err(Error::InvalidAnnotation(
                "visible mask is not contained in the amodal mask".into(),
            ));
        }
        let flag = occlusion_flag(visible.count(), amodal.count())?;
        let occluded = amodal.and_not(&visible);
        Ok(InstanceAnnotation {
            amodal_mask: amodal,
            visible_mask: visible,
            occluded_mask: occluded,
            occluded_flag: flag,
            depth_rank,
            label: label.into(),
        })
    }

    /// Same as [`InstanceAnnotation::new`] but keeps an externally supplied
    /// occlusion flag (e.g. from a converted dataset).
    pub fn with_flag(
        amodal: Mask,
        visible: Mask,
        occluded_flag: bool,
        depth_rank: u32,
        label: impl Into<String>,
    ) -> Result<Self> {
        let mut a = InstanceAnnotation::new(amodal, visible, depth_rank, label)?;
        a.occluded_flag = occluded_flag;
        Ok(a)
    }
}

/// Registered RGB + depth frame with per-instance annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdScene {
    pub scene_id: String,
    pub rgb: image::RgbImage,
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics,
    pub instances: Vec<InstanceAnnotation>,
}

impl RgbdScene {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        if self.rgb.width() as usize != w || self.rgb.height() as usize != h {
            return Err(Error::ShapeMismatch(format!(
                "scene {}: rgb {}x{} vs depth {w}x{h}",
                self.scene_id,
                self.rgb.width(),
                self.rgb.height()
            )));
        }
        for (k, inst) in self.instances.iter().enumerate() {
            if inst.amodal_mask.width() != w || inst.amodal_mask.height() != h {
                return Err(Error::ShapeMismatch(format!(
                    "scene {}: instance {k} mask size differs from image",
                    self.scene_id
                )));
            }
        }
        Ok(())
    }
}
