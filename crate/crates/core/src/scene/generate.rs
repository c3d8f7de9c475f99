use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_visible_masks, CameraIntrinsics, DepthMap, RgbdScene};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mask::Mask;

const PLACEMENT_ATTEMPTS: usize = 100;
const FOAM_COLOR: [f64; 3] = [238.0, 238.0, 232.0];
/// Foam sits this far in front of whatever surface it covers.
const FOAM_THICKNESS_MM: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Capsule,
    Triangle,
    LShape,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Rectangle,
        ShapeKind::Ellipse,
        ShapeKind::Capsule,
        ShapeKind::Triangle,
        ShapeKind::LShape,
    ];

    pub fn is_convex(self) -> bool {
        !matches!(self, ShapeKind::LShape)
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Capsule => "capsule",
            ShapeKind::Triangle => "triangle",
            ShapeKind::LShape => "l-shape",
        }
    }

    /// Point test in the shape's local frame (major half-extent `a` along x,
    /// minor half-extent `b` along y).
    fn contains(self, lx: f64, ly: f64, a: f64, b: f64) -> bool {
        match self {
            ShapeKind::Rectangle => lx.abs() <= a && ly.abs() <= b,
            ShapeKind::Ellipse => (lx / a).powi(2) + (ly / b).powi(2) <= 1.0,
            ShapeKind::Capsule => {
                let half = (a - b).max(0.0);
                let dx = (lx.abs() - half).max(0.0);
                dx * dx + ly * ly <= b * b
            }
            ShapeKind::Triangle => {
                // apex at (0, -b), base from (-a, b) to (a, b)
                if ly > b || ly < -b {
                    return false;
                }
                let half_width = a * (ly + b) / (2.0 * b);
                lx.abs() <= half_width
            }
            ShapeKind::LShape => {
                let t = b;
                let base = lx.abs() <= a && ly <= b && ly >= b - t;
                let arm = lx >= -a && lx <= -a + t && ly.abs() <= b;
                base || arm
            }
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown shape `{s}`")))
    }
}

/// Parameters of the procedural occlusion dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub canvas_size: usize,
    pub object_count_range: [usize; 2],
    pub shape_set: Vec<ShapeKind>,
    /// Meters.
    pub object_depth_range: [f64; 2],
    /// Meters.
    pub background_depth: f64,
    pub foam_cover_fraction_range: [f64; 2],
    /// Pixels.
    pub foam_disc_radius_range: [f64; 2],
    /// Standard deviation in 8-bit units.
    pub color_noise_std: f64,
    /// Object half-extents as fractions of the canvas (major, minor).
    pub major_extent_range: [f64; 2],
    pub minor_extent_range: [f64; 2],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            canvas_size: 128,
            object_count_range: [2, 8],
            shape_set: ShapeKind::ALL.to_vec(),
            object_depth_range: [0.4, 1.0],
            background_depth: 1.2,
            foam_cover_fraction_range: [0.0, 0.5],
            foam_disc_radius_range: [1.5, 4.0],
            color_noise_std: 8.0,
            major_extent_range: [0.10, 0.24],
            minor_extent_range: [0.06, 0.14],
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] >= lo && r[0] <= r[1]) {
        return Err(Error::InvalidConfig(format!("{name} = {r:?} is not a valid range")));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_size < 8 {
            return Err(Error::InvalidConfig("canvas_size must be at least 8".into()));
        }
        let [lo, hi] = self.object_count_range;
        if lo < 1 || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "object_count_range = [{lo}, {hi}] needs 1 <= min <= max"
            )));
        }
        if self.shape_set.is_empty() {
            return Err(Error::InvalidConfig("shape_set is empty".into()));
        }
        check_range("object_depth_range", self.object_depth_range, f64::MIN_POSITIVE)?;
        if self.object_depth_range[0] * 1000.0 <= FOAM_THICKNESS_MM as f64 {
            return Err(Error::InvalidConfig(
                "object_depth_range must stay in front of the foam layer thickness".into(),
            ));
        }
        if !(self.background_depth > self.object_depth_range[1]) || self.background_depth > 65.0 {
            return Err(Error::InvalidConfig(
                "background_depth must exceed the maximum object depth (and fit 16-bit millimeters)".into(),
            ));
        }
        check_range("foam_cover_fraction_range", self.foam_cover_fraction_range, 0.0)?;
        if self.foam_cover_fraction_range[1] > 1.0 {
            return Err(Error::InvalidConfig("foam cover fraction above 1".into()));
        }
        check_range("foam_disc_radius_range", self.foam_disc_radius_range, f64::MIN_POSITIVE)?;
        check_range("major_extent_range", self.major_extent_range, f64::MIN_POSITIVE)?;
        check_range("minor_extent_range", self.minor_extent_range, f64::MIN_POSITIVE)?;
        if !(self.color_noise_std >= 0.0) {
            return Err(Error::InvalidConfig("color_noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream seed for `(seed, index)`; shared by every component that derives
/// per-item randomness.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

struct PlacedObject {
    amodal: Mask,
    foam: Mask,
    depth_mm: u32,
    color: [f64; 3],
    shape: ShapeKind,
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Option<(Mask, ShapeKind)> {
    let s = cfg.canvas_size as f64;
    let shape = cfg.shape_set[rng.random_range(0..cfg.shape_set.len())];
    let a = sample_range(rng, cfg.major_extent_range) * s;
    let b = (sample_range(rng, cfg.minor_extent_range) * s).min(a);
    let theta = rng.random_range(0.0..PI);
    let cx = rng.random_range(0.0..s);
    let cy = rng.random_range(0.0..s);
    let radius = (a * a + b * b).sqrt();
    if cx - radius < 0.0 || cy - radius < 0.0 || cx + radius > s - 1.0 || cy + radius > s - 1.0 {
        return None;
    }
    let (sin, cos) = theta.sin_cos();
    let (x0, x1) = ((cx - radius).floor() as usize, (cx + radius).ceil() as usize);
    let (y0, y1) = ((cy - radius).floor() as usize, (cy + radius).ceil() as usize);
    let mut mask = Mask::new(cfg.canvas_size, cfg.canvas_size);
    for y in y0..=y1.min(cfg.canvas_size - 1) {
        for x in x0..=x1.min(cfg.canvas_size - 1) {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let lx = dx * cos + dy * sin;
            let ly = -dx * sin + dy * cos;
            if shape.contains(lx, ly, a, b) {
                mask.set(x, y, true);
            }
        }
    }
    if mask.is_empty() {
        None
    } else {
        Some((mask, shape))
    }
}

fn sample_foam(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, amodal: &Mask) -> Mask {
    let size = cfg.canvas_size;
    let mut foam = Mask::new(size, size);
    let fraction = sample_range(rng, cfg.foam_cover_fraction_range);
    let target = (fraction * amodal.count() as f64).ceil() as usize;
    if target == 0 {
        return foam;
    }
    let pixels: Vec<(usize, usize)> = amodal.iter_set().collect();
    let mut covered = 0usize;
    for _ in 0..4 * pixels.len().max(64) {
        if covered >= target {
            break;
        }
        let (px, py) = pixels[rng.random_range(0..pixels.len())];
        let r = sample_range(rng, cfg.foam_disc_radius_range);
        let ri = r.ceil() as isize;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if (dx * dx + dy * dy) as f64 > r * r {
                    continue;
                }
                let (x, y) = (px as isize + dx, py as isize + dy);
                if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                    continue;
                }
                let (x, y) = (x as usize, y as usize);
                if !foam.get(x, y) {
                    foam.set(x, y, true);
                    if amodal.get(x, y) {
                        covered += 1;
                    }
                }
            }
        }
    }
    foam
}

/// Depth ranks: nearest object gets 0; ties broken by insertion order.
fn depth_ranks(objects: &[PlacedObject]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by_key(|&i| (objects[i].depth_mm, i));
    let mut ranks = vec![0u32; objects.len()];
    for (rank, &i) in order.iter().enumerate() {
        ranks[i] = rank as u32;
    }
    ranks
}

fn union_foam(objects: &[PlacedObject], size: usize) -> Mask {
    objects
        .iter()
        .fold(Mask::new(size, size), |acc, o| acc.or(&o.foam))
}

/// Renders one scene; a pure function of `(config, scene_index)`.
pub fn generate_scene(config: &GeneratorConfig, scene_index: u64) -> Result<RgbdScene> {
    config.validate()?;
    let size = config.canvas_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, scene_index));
    let [lo, hi] = config.object_count_range;
    let count = rng.random_range(lo..=hi);
    let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(50.0..130.0));
    let depth_mm_range = [
        (config.object_depth_range[0] * 1000.0).round(),
        (config.object_depth_range[1] * 1000.0).round(),
    ];

    let mut objects: Vec<PlacedObject> = Vec::with_capacity(count);
    for object in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let Some((amodal, shape)) = sample_shape(&mut rng, config) else {
                continue;
            };
            let depth_mm = sample_range(&mut rng, depth_mm_range).round() as u32;
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..225.0));
            let foam = sample_foam(&mut rng, config, &amodal);
            objects.push(PlacedObject {
                amodal,
                foam,
                depth_mm,
                color,
                shape,
            });
            let ranks = depth_ranks(&objects);
            let amodals: Vec<Mask> = objects.iter().map(|o| o.amodal.clone()).collect();
            let foam_all = union_foam(&objects, size);
            let all_visible = derive_visible_masks(&amodals, &ranks, &foam_all)
                .map(|anns| anns.iter().all(|a| !a.visible_mask.is_empty()))
                .unwrap_or(false);
            if all_visible {
                placed = true;
                break;
            }
            objects.pop();
        }
        if !placed {
            return Err(Error::Placement {
                scene: scene_index,
                object,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }

    let ranks = depth_ranks(&objects);
    let amodals: Vec<Mask> = objects.iter().map(|o| o.amodal.clone()).collect();
    let foam_all = union_foam(&objects, size);
    let mut instances = derive_visible_masks(&amodals, &ranks, &foam_all)?;
    for (inst, obj) in instances.iter_mut().zip(&objects) {
        inst.label = obj.shape.name().to_string();
    }

    // Painter's algorithm, far to near, then the foam layer on top.
    let bg_mm = (config.background_depth * 1000.0).round() as u32;
    let mut depth_mm = vec![bg_mm; size * size];
    let mut color = vec![background; size * size];
    let mut paint_order: Vec<usize> = (0..objects.len()).collect();
    paint_order.sort_by_key(|&i| std::cmp::Reverse(ranks[i]));
    for &i in &paint_order {
        for (x, y) in objects[i].amodal.iter_set() {
            depth_mm[y * size + x] = objects[i].depth_mm;
            color[y * size + x] = objects[i].color;
        }
    }
    for (x, y) in foam_all.iter_set() {
        depth_mm[y * size + x] -= FOAM_THICKNESS_MM;
        color[y * size + x] = FOAM_COLOR;
    }

    let noise = Normal::new(0.0, config.color_noise_std.max(0.0))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rgb = image::RgbImage::new(size as u32, size as u32);
    for (i, px) in rgb.pixels_mut().enumerate() {
        for c in 0..3 {
            let v = color[i][c] + noise.sample(&mut rng);
            px.0[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    let depth = DepthMap::from_vec(
        size,
        size,
        depth_mm.iter().map(|&mm| super::io::mm_to_depth(mm)).collect(),
    )?;

    Ok(RgbdScene {
        scene_id: format!("scene_{scene_index:06}"),
        rgb,
        depth,
        intrinsics: CameraIntrinsics::synthetic(size),
        instances,
    })
}

/// Generates scenes `first..first + count`.
pub fn generate_dataset(
    config: &GeneratorConfig,
    first: u64,
    count: usize,
    exec: Execution,
) -> Result<Vec<RgbdScene>> {
    config.validate()?;
    exec.try_map_range(count, |i| generate_scene(config, first + i as u64))
}
