//! Cropping around the visible mask, input normalization, mask augmentation
//! and the inverse mapping of crop-space predictions into the image.
//!
//! Sampling convention: pixel `i` covers the continuous interval `[i, i + 1)`
//! and its centre sits at `i + 0.5`. Sample points that fall outside the image
//! area read as zero; inside, bilinear interpolation clamps to the edge pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::scene::{DepthMap, RgbdScene};

/// Half-open integer box `[x0, x1) x [y0, y1)`; may extend past the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::Geometry(format!(
                "degenerate box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }
}

/// Crop geometry used by the model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub expansion_factor: f64,
    pub output_size: usize,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            expansion_factor: 2.0,
            output_size: 64,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.expansion_factor >= 1.0) {
            return Err(Error::InvalidConfig("expansion_factor must be >= 1".into()));
        }
        if self.output_size == 0 || !self.output_size.is_multiple_of(32) {
            return Err(Error::InvalidConfig(format!(
                "output_size {} is not a positive multiple of 32",
                self.output_size
            )));
        }
        Ok(())
    }
}

/// Tightest half-open box around the set pixels.
pub fn bbox_of_mask(mask: &Mask) -> Result<BBox> {
    let mut it = mask.iter_set();
    let (fx, fy) = it.next().ok_or(Error::EmptyMask("no visible prior"))?;
    let (mut x0, mut y0, mut x1, mut y1) = (fx, fy, fx, fy);
    for (x, y) in it {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    Ok(BBox {
        x0: x0 as i64,
        y0: y0 as i64,
        x1: x1 as i64 + 1,
        y1: y1 as i64 + 1,
    })
}

/// Scales width and height by `factor` about the centre, rounding outward.
pub fn expand_bbox(bbox: BBox, factor: f64) -> BBox {
    let (cx, cy) = bbox.center();
    let hw = bbox.width() as f64 * factor / 2.0;
    let hh = bbox.height() as f64 * factor / 2.0;
    BBox {
        x0: (cx - hw).floor() as i64,
        y0: (cy - hh).floor() as i64,
        x1: (cx + hw).ceil() as i64,
        y1: (cy + hh).ceil() as i64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// Planar `f32` image, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn new(channels: usize, width: usize, height: usize) -> Self {
        Patch {
            channels,
            width,
            height,
            data: vec![0.0; channels * width * height],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut p = Patch::new(3, w, h);
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                p.data[c * w * h + i] = px.0[c] as f32;
            }
        }
        p
    }

    pub fn from_depth(depth: &DepthMap) -> Self {
        Patch {
            channels: 1,
            width: depth.width(),
            height: depth.height(),
            data: depth.data().to_vec(),
        }
    }

    pub fn from_mask(mask: &Mask) -> Self {
        Patch {
            channels: 1,
            width: mask.width(),
            height: mask.height(),
            data: mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Channel 0 thresholded with `>= threshold`.
    pub fn to_mask(&self, threshold: f32) -> Mask {
        Mask::from_vec(
            self.width,
            self.height,
            self.plane(0).iter().map(|&v| v >= threshold).collect(),
        )
        .expect("patch dimensions")
    }
}

/// Continuous source coordinate of output sample `j` for a box starting at
/// `origin` with extent `extent` resampled to `out` samples.
#[inline]
fn source_coord(origin: i64, extent: i64, out: usize, j: usize) -> f64 {
    origin as f64 + (j as f64 + 0.5) * extent as f64 / out as f64
}

#[inline]
fn bilinear_taps(u: f64, len: usize) -> (usize, usize, f64) {
    let s = (u - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, s - i0 as f64)
}

/// Resamples the region `bbox` of `src` to a square `output_size` patch.
pub fn crop_and_resize(
    src: &Patch,
    bbox: BBox,
    output_size: usize,
    mode: Interpolation,
) -> Result<Patch> {
    if bbox.width() <= 0 || bbox.height() <= 0 {
        return Err(Error::Geometry(format!("zero-area crop {bbox:?}")));
    }
    if output_size == 0 {
        return Err(Error::Geometry("output_size must be positive".into()));
    }
    let (w, h) = (src.width, src.height);
    let mut out = Patch::new(src.channels, output_size, output_size);
    let xs: Vec<f64> = (0..output_size)
        .map(|j| source_coord(bbox.x0, bbox.width(), output_size, j))
        .collect();
    let ys: Vec<f64> = (0..output_size)
        .map(|i| source_coord(bbox.y0, bbox.height(), output_size, i))
        .collect();
    let inside = |u: f64, len: usize| u >= 0.0 && u < len as f64;
    for c in 0..src.channels {
        let plane = src.plane(c);
        let dst = &mut out.data[c * output_size * output_size..(c + 1) * output_size * output_size];
        for (i, &v) in ys.iter().enumerate() {
            if !inside(v, h) {
                continue;
            }
            for (j, &u) in xs.iter().enumerate() {
                if !inside(u, w) {
                    continue;
                }
                dst[i * output_size + j] = match mode {
                    Interpolation::Nearest => plane[v as usize * w + u as usize],
                    Interpolation::Bilinear => {
                        let (x0, x1, fx) = bilinear_taps(u, w);
                        let (y0, y1, fy) = bilinear_taps(v, h);
                        let top = plane[y0 * w + x0] as f64 * (1.0 - fx) + plane[y0 * w + x1] as f64 * fx;
                        let bot = plane[y1 * w + x0] as f64 * (1.0 - fx) + plane[y1 * w + x1] as f64 * fx;
                        (top * (1.0 - fy) + bot * fy) as f32
                    }
                };
            }
        }
    }
    Ok(out)
}

/// RGB to `[0, 1]`; valid depth min-max scaled within the patch, invalid
/// (zero) depth stays 0, a constant valid depth maps to 0.5.
pub fn normalize_inputs(rgb: &Patch, depth: &Patch) -> (Patch, Patch) {
    let mut rgb_n = rgb.clone();
    for v in &mut rgb_n.data {
        *v = (*v / 255.0).clamp(0.0, 1.0);
    }
    let mut depth_n = depth.clone();
    let valid = |d: f32| d > 0.0 && d.is_finite();
    let (lo, hi) = depth
        .data
        .iter()
        .filter(|&&d| valid(d))
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    for v in &mut depth_n.data {
        *v = if !valid(*v) {
            0.0
        } else if hi > lo {
            (*v - lo) / (hi - lo)
        } else {
            0.5
        };
    }
    (rgb_n, depth_n)
}

/// Mask augmentation simulating an imperfect visible-mask detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub dilate_radius_range: [u32; 2],
    pub erode_radius_range: [u32; 2],
    pub blur_sigma_range: [f64; 2],
    pub dilate_probability: f64,
    pub erode_probability: f64,
    pub blur_probability: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            dilate_radius_range: [1, 2],
            erode_radius_range: [1, 2],
            blur_sigma_range: [0.5, 1.5],
            dilate_probability: 0.3,
            erode_probability: 0.3,
            blur_probability: 0.3,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            dilate_probability: 0.0,
            erode_probability: 0.0,
            blur_probability: 0.0,
            ..Default::default()
        }
    }

    /// Same ranges with every transform always applied.
    pub fn always(self) -> Self {
        AugmentParams {
            dilate_probability: 1.0,
            erode_probability: 1.0,
            blur_probability: 1.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        let ok = self.dilate_radius_range[0] <= self.dilate_radius_range[1]
            && self.erode_radius_range[0] <= self.erode_radius_range[1]
            && self.blur_sigma_range[0] >= 0.0
            && self.blur_sigma_range[0] <= self.blur_sigma_range[1]
            && p_ok(self.dilate_probability)
            && p_ok(self.erode_probability)
            && p_ok(self.blur_probability);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid augmentation parameters {self:?}")))
        }
    }
}

fn disc_offsets(radius: u32) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                v.push((dx, dy));
            }
        }
    }
    v
}

/// Binary dilation with a disc structuring element.
pub fn dilate(mask: &Mask, radius: u32) -> Mask {
    let offsets = disc_offsets(radius);
    Mask::from_fn(mask.width(), mask.height(), |x, y| {
        offsets
            .iter()
            .any(|&(dx, dy)| mask.get_signed(x as isize + dx, y as isize + dy))
    })
}

/// Binary erosion with a disc structuring element; outside the canvas is unset.
pub fn erode(mask: &Mask, radius: u32) -> Mask {
    let offsets = disc_offsets(radius);
    Mask::from_fn(mask.width(), mask.height(), |x, y| {
        offsets
            .iter()
            .all(|&(dx, dy)| mask.get_signed(x as isize + dx, y as isize + dy))
    })
}

/// Separable Gaussian blur (zero padding) followed by `>= 0.5`.
pub fn blur_threshold(mask: &Mask, sigma: f64) -> Mask {
    if sigma <= 0.0 {
        return mask.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let src: Vec<f64> = mask.data().iter().map(|&b| b as u8 as f64).collect();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, d) in (-radius..=radius).enumerate() {
                let xx = x + d;
                if xx >= 0 && xx < w {
                    acc += kernel[k] * src[(y * w + xx) as usize];
                }
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    Mask::from_fn(w as usize, h as usize, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let mut acc = 0.0;
        for (k, d) in (-radius..=radius).enumerate() {
            let yy = y + d;
            if yy >= 0 && yy < h {
                acc += kernel[k] * tmp[(yy * w + x) as usize];
            }
        }
        acc >= 0.5
    })
}

/// Randomly dilates, erodes and blurs a binary mask; returns the input when
/// the result would be empty.
pub fn augment_mask<R: Rng + ?Sized>(mask: &Mask, params: &AugmentParams, rng: &mut R) -> Mask {
    let mut out = mask.clone();
    if rng.random_bool(params.dilate_probability) {
        let r = rng.random_range(params.dilate_radius_range[0]..=params.dilate_radius_range[1]);
        out = dilate(&out, r);
    }
    if rng.random_bool(params.erode_probability) {
        let r = rng.random_range(params.erode_radius_range[0]..=params.erode_radius_range[1]);
        out = erode(&out, r);
    }
    if rng.random_bool(params.blur_probability) {
        let [lo, hi] = params.blur_sigma_range;
        let sigma = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        out = blur_threshold(&out, sigma);
    }
    if out.is_empty() {
        mask.clone()
    } else {
        out
    }
}

/// Probability map resized bilinearly onto `bbox` in a zero canvas of
/// `width x height`; parts of the box outside the canvas are dropped.
pub fn paste_back_prob(prob: &Patch, bbox: BBox, width: usize, height: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; width * height];
    let (s_w, s_h) = (prob.width, prob.height);
    let plane = prob.plane(0);
    let x_lo = bbox.x0.max(0);
    let x_hi = bbox.x1.min(width as i64);
    let y_lo = bbox.y0.max(0);
    let y_hi = bbox.y1.min(height as i64);
    for y in y_lo..y_hi {
        let v = (y - bbox.y0) as f64 + 0.5;
        let (y0, y1, fy) = bilinear_taps(v * s_h as f64 / bbox.height() as f64, s_h);
        for x in x_lo..x_hi {
            let u = (x - bbox.x0) as f64 + 0.5;
            let (x0, x1, fx) = bilinear_taps(u * s_w as f64 / bbox.width() as f64, s_w);
            let top = plane[y0 * s_w + x0] as f64 * (1.0 - fx) + plane[y0 * s_w + x1] as f64 * fx;
            let bot = plane[y1 * s_w + x0] as f64 * (1.0 - fx) + plane[y1 * s_w + x1] as f64 * fx;
            out[y as usize * width + x as usize] = (top * (1.0 - fy) + bot * fy) as f32;
        }
    }
    out
}

/// [`paste_back_prob`] thresholded with `>= threshold`.
pub fn paste_back(prob: &Patch, bbox: BBox, width: usize, height: usize, threshold: f32) -> Mask {
    let p = paste_back_prob(prob, bbox, width, height);
    Mask::from_vec(width, height, p.iter().map(|&v| v >= threshold).collect()).expect("canvas size")
}

/// Network-ready crop of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CropInputs {
    /// Expanded crop box in image coordinates.
    pub bbox: BBox,
    /// 3 channels in `[0, 1]`.
    pub rgb: Patch,
    /// 1 channel in `[0, 1]`, invalid = 0.
    pub depth: Patch,
    /// 1 channel, {0, 1}.
    pub mask: Patch,
}

/// bbox -> expand -> crop (bilinear for images, nearest for the mask) -> normalize.
pub fn prepare_inputs(scene: &RgbdScene, visible_prior: &Mask, spec: &CropSpec) -> Result<CropInputs> {
    if visible_prior.width() != scene.width() || visible_prior.height() != scene.height() {
        return Err(Error::ShapeMismatch("visible prior does not match the scene size".into()));
    }
    let bbox = expand_bbox(bbox_of_mask(visible_prior)?, spec.expansion_factor);
    let size = spec.output_size;
    let rgb = crop_and_resize(&Patch::from_rgb(&scene.rgb), bbox, size, Interpolation::Bilinear)?;
    let depth = crop_and_resize(&Patch::from_depth(&scene.depth), bbox, size, Interpolation::Bilinear)?;
    let mask = Patch::from_mask(&crop_mask(visible_prior, bbox, size)?);
    let (rgb, depth) = normalize_inputs(&rgb, &depth);
    Ok(CropInputs {
        bbox,
        rgb,
        depth,
        mask,
    })
}

/// Bilinear crop of a mask, thresholded at 0.5, with the same box as the
/// inputs.
pub fn crop_mask(mask: &Mask, bbox: BBox, size: usize) -> Result<Mask> {
    Ok(crop_and_resize(&Patch::from_mask(mask), bbox, size, Interpolation::Bilinear)?.to_mask(0.5))
}
