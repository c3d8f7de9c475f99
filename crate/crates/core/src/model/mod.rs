//! The completion network: two-stream residual encoders, per-stage fusion,
//! mask-guided attention and an upsampling decoder with visible and amodal
//! heads.
//!
//! Parameters live in one flat buffer described by [`LacNet::layout`]; the
//! network itself is stateless, so a single [`LacNet`] can run forward passes
//! for many parameter buffers and element types.

mod config;
mod decoder;
mod encoder;
mod loss;

pub use config::{BlockKind, FusionStrategy, ModelConfig};
pub use decoder::{attention_backward, attention_forward, AttentionCache};
pub use loss::{bce_with_logits, loss};

use decoder::{Decoder, DecoderCache};
use encoder::{ConvNorm, ConvNormCache, Encoder, EncoderCache};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{area_downsample, concat_channels, split_channels, Conv2d, ConvCache, ParamLayout, Real, Tensor};
use crate::preprocess::{paste_back_prob, prepare_inputs, CropInputs, CropSpec, Patch};
use crate::scene::RgbdScene;

/// Visible and amodal logits (or their gradients), each `[1, n, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub visible: Tensor<T>,
    pub amodal: Tensor<T>,
}

/// Feature maps at strides 4, 8, 16 and 32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub stages: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Depth,
    Stacked,
}

/// Network inputs for `n` crops, each `[c, n, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub mask: Tensor<T>,
}

fn patches_to_tensor<T: Real>(patches: &[&Patch]) -> Tensor<T> {
    let first = patches[0];
    let (c, h, w) = (first.channels, first.height, first.width);
    let n = patches.len();
    let mut t = Tensor::zeros(c, n, h, w);
    for (b, p) in patches.iter().enumerate() {
        for ch in 0..c {
            for (d, &s) in t.plane_mut(ch, b).iter_mut().zip(p.plane(ch)) {
                *d = T::of(s as f64);
            }
        }
    }
    t
}

/// Stacks 1-channel masks into a `[1, n, S, S]` tensor of zeros and ones.
pub fn masks_to_tensor<T: Real>(masks: &[&Mask]) -> Tensor<T> {
    let (w, h) = (masks[0].width(), masks[0].height());
    let mut t = Tensor::zeros(1, masks.len(), h, w);
    for (b, m) in masks.iter().enumerate() {
        assert_eq!((m.width(), m.height()), (w, h), "mask batch sizes differ");
        for (d, &s) in t.plane_mut(0, b).iter_mut().zip(m.data()) {
            *d = if s { T::one() } else { T::zero() };
        }
    }
    t
}

impl<T: Real> Batch<T> {
    pub fn from_crops(crops: &[CropInputs]) -> Result<Self> {
        let first = crops
            .first()
            .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
        let size = first.rgb.width;
        for c in crops {
            let ok = c.rgb.channels == 3
                && c.depth.channels == 1
                && c.mask.channels == 1
                && [&c.rgb, &c.depth, &c.mask]
                    .iter()
                    .all(|p| p.width == size && p.height == size);
            if !ok {
                return Err(Error::ShapeMismatch("crops must share one square size".into()));
            }
        }
        Ok(Batch {
            rgb: patches_to_tensor(&crops.iter().map(|c| &c.rgb).collect::<Vec<_>>()),
            depth: patches_to_tensor(&crops.iter().map(|c| &c.depth).collect::<Vec<_>>()),
            mask: patches_to_tensor(&crops.iter().map(|c| &c.mask).collect::<Vec<_>>()),
        })
    }

    pub fn len(&self) -> usize {
        self.rgb.n
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.n == 0
    }
}

#[derive(Debug, Clone)]
enum Fusion {
    Linear(Vec<Conv2d>),
    Conv1x1(Vec<ConvNorm>),
    Identity,
}

enum FusionCache<T> {
    Linear(Vec<ConvCache<T>>),
    Conv1x1(Vec<ConvNormCache<T>>),
    Identity,
}

/// Intermediate values of a forward pass, consumed by [`LacNet::backward`].
pub struct ForwardCache<T> {
    encoders: Vec<EncoderCache<T>>,
    fusion: FusionCache<T>,
    fused: Vec<Tensor<T>>,
    attention: Tensor<T>,
    attention_cache: AttentionCache<T>,
    decoder: DecoderCache<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Which ReLU units were active, in a fixed traversal order. Two passes
    /// with equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for e in &self.encoders {
            e.relu_pattern(&mut out);
        }
        if let FusionCache::Conv1x1(caches) = &self.fusion {
            for c in caches {
                c.relu_pattern(&mut out);
            }
        }
        self.decoder.relu_pattern(&mut out);
        out
    }
}

/// Network architecture; parameters are passed in as a flat slice.
#[derive(Debug, Clone)]
pub struct LacNet {
    config: ModelConfig,
    layout: ParamLayout,
    encoders: Vec<Encoder>,
    fusion: Fusion,
    decoder: Decoder,
}

impl LacNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::new();
        let groups = config.norm_groups;
        let encoders = match config.fusion {
            FusionStrategy::Stacked => vec![Encoder::new(&mut layout, "stacked", config.stacked_channels(), &config)],
            _ => vec![
                Encoder::new(&mut layout, "rgb", 3, &config),
                Encoder::new(&mut layout, "depth", 1, &config),
            ],
        };
        let fusion = match config.fusion {
            FusionStrategy::Linear => Fusion::Linear(
                config
                    .stage_channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| Conv2d::averaging(&mut layout, &format!("fusion.{}", i + 1), c))
                    .collect(),
            ),
            FusionStrategy::Conv1x1 => Fusion::Conv1x1(
                config
                    .stage_channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| ConvNorm::new(&mut layout, &format!("fusion.{}", i + 1), 2 * c, c, 1, 1, groups, true))
                    .collect(),
            ),
            FusionStrategy::Stacked => Fusion::Identity,
        };
        let decoder = Decoder::new(
            &mut layout,
            config.input_size,
            config.stage_channels,
            config.decoder_channels,
            groups,
        );
        Ok(LacNet {
            config,
            layout,
            encoders,
            fusion,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    /// Initial parameters drawn from the configured seed.
    pub fn init_params<T: Real>(&self) -> Vec<T> {
        self.layout.initialize(self.config.seed)
    }

    fn check_params<T>(&self, params: &[T]) {
        assert_eq!(params.len(), self.layout.total(), "parameter buffer length");
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>, channels: usize) -> Result<()> {
        let s = self.config.input_size;
        if x.c != channels || x.h != s || x.w != s {
            return Err(Error::ShapeMismatch(format!(
                "expected [{channels}, n, {s}, {s}] input, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn stacked_input<T: Real>(&self, batch: &Batch<T>) -> Tensor<T> {
        if self.config.depth_as_3ch {
            concat_channels(&[&batch.rgb, &batch.depth, &batch.depth, &batch.depth])
        } else {
            concat_channels(&[&batch.rgb, &batch.depth])
        }
    }

    /// Runs one encoder stream.
    pub fn encode<T: Real>(&self, params: &[T], x: &Tensor<T>, stream: Stream) -> Result<FeaturePyramid<T>> {
        self.check_params(params);
        let encoder = match (stream, self.encoders.len()) {
            (Stream::Rgb, 2) => &self.encoders[0],
            (Stream::Depth, 2) => &self.encoders[1],
            (Stream::Stacked, 1) => &self.encoders[0],
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "stream {stream:?} is not built for fusion `{}`",
                    self.config.fusion
                )))
            }
        };
        self.check_input(x, encoder.in_channels)?;
        Ok(FeaturePyramid {
            stages: encoder.forward(params, x).0,
        })
    }

    fn fuse_cached<T: Real>(&self, params: &[T], rgb: &[Tensor<T>], depth: &[Tensor<T>]) -> (Vec<Tensor<T>>, FusionCache<T>) {
        match &self.fusion {
            Fusion::Linear(convs) => {
                let (out, caches) = convs
                    .iter()
                    .zip(rgb.iter().zip(depth))
                    .map(|(conv, (r, d))| conv.forward(params, &concat_channels(&[r, d])))
                    .unzip();
                (out, FusionCache::Linear(caches))
            }
            Fusion::Conv1x1(layers) => {
                let (out, caches) = layers
                    .iter()
                    .zip(rgb.iter().zip(depth))
                    .map(|(layer, (r, d))| layer.forward(params, &concat_channels(&[r, d])))
                    .unzip();
                (out, FusionCache::Conv1x1(caches))
            }
            Fusion::Identity => (rgb.to_vec(), FusionCache::Identity),
        }
    }

    /// Combines the two stream pyramids. Under the stacked strategy the
    /// first pyramid is returned unchanged and the second is ignored.
    pub fn fuse<T: Real>(&self, params: &[T], rgb: &FeaturePyramid<T>, depth: &FeaturePyramid<T>) -> Result<FeaturePyramid<T>> {
        self.check_params(params);
        if !matches!(self.fusion, Fusion::Identity) {
            let ok = rgb.stages.len() == 4
                && depth.stages.len() == 4
                && rgb
                    .stages
                    .iter()
                    .zip(&depth.stages)
                    .zip(&self.config.stage_channels)
                    .all(|((r, d), &c)| r.shape() == d.shape() && r.c == c);
            if !ok {
                return Err(Error::ShapeMismatch("pyramids are not fusion compatible".into()));
            }
        }
        Ok(FeaturePyramid {
            stages: self.fuse_cached(params, &rgb.stages, &depth.stages).0,
        })
    }

    /// Mask-guided attention over the stride-32 stage; `mask` is the
    /// `[1, n, S, S]` visible prior at input resolution.
    pub fn attention_map<T: Real>(&self, fused: &FeaturePyramid<T>, mask: &Tensor<T>) -> Tensor<T> {
        let top = &fused.stages[3];
        attention_forward(top, &area_downsample(mask, mask.h / top.h)).0
    }

    /// Decodes fused features, the visible prior and the attention map into
    /// logits at input resolution.
    pub fn complete<T: Real>(&self, params: &[T], fused: &FeaturePyramid<T>, mask: &Tensor<T>, attention: &Tensor<T>) -> Logits<T> {
        self.check_params(params);
        let masks = self.mask_pyramid(mask);
        self.decoder.forward(params, &fused.stages, &masks, attention).0
    }

    fn mask_pyramid<T: Real>(&self, mask: &Tensor<T>) -> Vec<Tensor<T>> {
        ModelConfig::STAGE_STRIDES
            .iter()
            .map(|&s| area_downsample(mask, s))
            .collect()
    }

    pub fn forward<T: Real>(&self, params: &[T], batch: &Batch<T>) -> Result<(Logits<T>, ForwardCache<T>)> {
        self.check_params(params);
        self.check_input(&batch.mask, 1)?;
        let (pyramids, encoder_caches): (Vec<_>, Vec<_>) = if self.encoders.len() == 1 {
            let x = self.stacked_input(batch);
            self.check_input(&x, self.encoders[0].in_channels)?;
            vec![self.encoders[0].forward(params, &x)].into_iter().unzip()
        } else {
            self.check_input(&batch.rgb, 3)?;
            self.check_input(&batch.depth, 1)?;
            vec![
                self.encoders[0].forward(params, &batch.rgb),
                self.encoders[1].forward(params, &batch.depth),
            ]
            .into_iter()
            .unzip()
        };
        let (fused, fusion) = self.fuse_cached(params, &pyramids[0], pyramids.last().expect("pyramid"));
        let masks = self.mask_pyramid(&batch.mask);
        let (attention, attention_cache) = attention_forward(&fused[3], &masks[3]);
        let (logits, decoder) = self.decoder.forward(params, &fused, &masks, &attention);
        Ok((
            logits,
            ForwardCache {
                encoders: encoder_caches,
                fusion,
                fused,
                attention,
                attention_cache,
                decoder,
            },
        ))
    }

    /// Accumulates the parameter gradient of a scalar whose logit gradient
    /// is `d_logits` into `grads`.
    pub fn backward<T: Real>(&self, params: &[T], cache: &ForwardCache<T>, d_logits: &Logits<T>, grads: &mut [T]) {
        self.check_params(params);
        self.check_params(grads);
        let (mut d_fused, d_attention) =
            self.decoder
                .backward(params, &cache.decoder, &cache.fused, &cache.attention, d_logits, grads);
        d_fused[3].add_assign(&attention_backward(&cache.fused[3], &cache.attention_cache, &d_attention));
        match (&self.fusion, &cache.fusion) {
            (Fusion::Identity, FusionCache::Identity) => {
                self.encoders[0].backward(params, &cache.encoders[0], d_fused, grads);
            }
            (fusion, fusion_cache) => {
                let mut d_rgb = Vec::with_capacity(4);
                let mut d_depth = Vec::with_capacity(4);
                for (i, d) in d_fused.into_iter().enumerate() {
                    let dx = match (fusion, fusion_cache) {
                        (Fusion::Linear(convs), FusionCache::Linear(caches)) => {
                            convs[i].backward(params, &caches[i], &d, grads, true)
                        }
                        (Fusion::Conv1x1(layers), FusionCache::Conv1x1(caches)) => {
                            layers[i].backward(params, &caches[i], d, grads, true)
                        }
                        _ => unreachable!("fusion cache matches the fusion layers"),
                    }
                    .expect("input gradient");
                    let c = self.config.stage_channels[i];
                    let mut parts = split_channels(&dx, &[c, c]).into_iter();
                    d_rgb.push(parts.next().expect("rgb part"));
                    d_depth.push(parts.next().expect("depth part"));
                }
                self.encoders[0].backward(params, &cache.encoders[0], d_rgb, grads);
                self.encoders[1].backward(params, &cache.encoders[1], d_depth, grads);
            }
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Visible and amodal probabilities with their 0.5-thresholded masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub width: usize,
    pub height: usize,
    pub visible_prob: Vec<f32>,
    pub amodal_prob: Vec<f32>,
    pub visible_mask: Mask,
    pub amodal_mask: Mask,
}

impl Prediction {
    pub const THRESHOLD: f32 = 0.5;

    pub fn from_probs(width: usize, height: usize, visible_prob: Vec<f32>, amodal_prob: Vec<f32>) -> Self {
        let binarize = |p: &[f32]| {
            Mask::from_vec(width, height, p.iter().map(|&v| v >= Self::THRESHOLD).collect()).expect("prediction size")
        };
        Prediction {
            width,
            height,
            visible_mask: binarize(&visible_prob),
            amodal_mask: binarize(&amodal_prob),
            visible_prob,
            amodal_prob,
        }
    }
}

/// A network together with trained (or initial) `f32` parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: LacNet,
    pub params: Vec<f32>,
}

impl Model {
    /// A freshly initialized model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let net = LacNet::new(config)?;
        let params = net.init_params();
        Ok(Model { net, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f32>) -> Result<Self> {
        let net = LacNet::new(config)?;
        if params.len() != net.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters given, architecture needs {}",
                params.len(),
                net.num_params()
            )));
        }
        Ok(Model { net, params })
    }

    pub fn crop_spec(&self) -> CropSpec {
        CropSpec {
            expansion_factor: 2.0,
            output_size: self.net.config().input_size,
        }
    }

    /// Probabilities at crop resolution, one `(visible, amodal)` pair per crop.
    pub fn predict_crops(&self, crops: &[CropInputs]) -> Result<Vec<(Patch, Patch)>> {
        if crops.is_empty() {
            return Ok(Vec::new());
        }
        let batch = Batch::<f32>::from_crops(crops)?;
        let (logits, _) = self.net.forward(&self.params, &batch)?;
        let size = self.net.config().input_size;
        let to_patch = |t: &Tensor<f32>, b: usize| Patch {
            channels: 1,
            width: size,
            height: size,
            data: t.plane(0, b).iter().map(|&x| sigmoid(x)).collect(),
        };
        Ok((0..crops.len())
            .map(|b| (to_patch(&logits.visible, b), to_patch(&logits.amodal, b)))
            .collect())
    }

    /// Full-image prediction for one instance given its visible mask.
    pub fn predict_amodal(&self, scene: &RgbdScene, visible: &Mask) -> Result<Prediction> {
        Ok(self
            .predict_instances(scene, std::slice::from_ref(visible))?
            .pop()
            .expect("one prediction"))
    }

    /// Full-image predictions for several instances of one scene, run as a
    /// single batch.
    pub fn predict_instances(&self, scene: &RgbdScene, visible: &[Mask]) -> Result<Vec<Prediction>> {
        let spec = self.crop_spec();
        let crops = visible
            .iter()
            .map(|m| prepare_inputs(scene, m, &spec))
            .collect::<Result<Vec<_>>>()?;
        let (w, h) = (scene.width(), scene.height());
        let probs = self.predict_crops(&crops)?;
        Ok(crops
            .iter()
            .zip(probs)
            .map(|(crop, (v, a))| {
                Prediction::from_probs(w, h, paste_back_prob(&v, crop.bbox, w, h), paste_back_prob(&a, crop.bbox, w, h))
            })
            .collect())
    }
}
