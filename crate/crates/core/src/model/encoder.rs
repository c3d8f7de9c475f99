use super::config::{BlockKind, ModelConfig};
use crate::nn::{relu_backward, relu_forward, Conv2d, ConvCache, GroupNorm, GroupNormCache, ParamLayout, Real, Tensor};

/// Bias-free convolution, group norm and optional ReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvNorm {
    conv: Conv2d,
    norm: GroupNorm,
    relu: bool,
}

pub(crate) struct ConvNormCache<T> {
    conv: ConvCache<T>,
    norm: GroupNormCache<T>,
    out: Option<Tensor<T>>,
}

impl<T: Real> ConvNormCache<T> {
    pub(crate) fn relu_pattern(&self, out: &mut Vec<bool>) {
        if let Some(y) = &self.out {
            out.extend(y.data.iter().map(|&v| v > T::zero()));
        }
    }
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        relu: bool,
    ) -> Self {
        ConvNorm {
            conv: Conv2d::new(layout, &format!("{name}.conv"), in_c, out_c, kernel, stride, kernel / 2, false),
            norm: GroupNorm::new(layout, &format!("{name}.norm"), out_c, groups),
            relu,
        }
    }

    pub(crate) fn out_channels(&self) -> usize {
        self.conv.out_c
    }

    pub(crate) fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, ConvNormCache<T>) {
        let (y, conv) = self.conv.forward(p, x);
        let (y, norm) = self.norm.forward(p, &y);
        if self.relu {
            let y = relu_forward(y);
            let out = Some(y.clone());
            (y, ConvNormCache { conv, norm, out })
        } else {
            (y, ConvNormCache { conv, norm, out: None })
        }
    }

    pub(crate) fn backward<T: Real>(
        &self,
        p: &[T],
        cache: &ConvNormCache<T>,
        dy: Tensor<T>,
        g: &mut [T],
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let dy = match &cache.out {
            Some(out) => relu_backward(out, dy),
            None => dy,
        };
        let dy = self.norm.backward(p, &cache.norm, &dy, g);
        self.conv.backward(p, &cache.conv, &dy, g, need_input_grad)
    }
}

#[derive(Debug, Clone)]
struct Block {
    layers: Vec<ConvNorm>,
    proj: Option<ConvNorm>,
}

struct BlockCache<T> {
    layers: Vec<ConvNormCache<T>>,
    proj: Option<ConvNormCache<T>>,
    out: Tensor<T>,
}

impl<T: Real> BlockCache<T> {
    fn relu_pattern(&self, out: &mut Vec<bool>) {
        for c in self.layers.iter().chain(&self.proj) {
            c.relu_pattern(out);
        }
        out.extend(self.out.data.iter().map(|&v| v > T::zero()));
    }
}

impl Block {
    fn new(layout: &mut ParamLayout, name: &str, kind: BlockKind, in_c: usize, out_c: usize, stride: usize, groups: usize) -> Self {
        let layers = match kind {
            BlockKind::Basic => vec![
                ConvNorm::new(layout, &format!("{name}.conv1"), in_c, out_c, 3, stride, groups, true),
                ConvNorm::new(layout, &format!("{name}.conv2"), out_c, out_c, 3, 1, groups, false),
            ],
            BlockKind::Bottleneck => {
                let mid = out_c / 4;
                vec![
                    ConvNorm::new(layout, &format!("{name}.conv1"), in_c, mid, 1, 1, groups, true),
                    ConvNorm::new(layout, &format!("{name}.conv2"), mid, mid, 3, stride, groups, true),
                    ConvNorm::new(layout, &format!("{name}.conv3"), mid, out_c, 1, 1, groups, false),
                ]
            }
        };
        let proj = (stride != 1 || in_c != out_c)
            .then(|| ConvNorm::new(layout, &format!("{name}.proj"), in_c, out_c, 1, stride, groups, false));
        Block { layers, proj }
    }

    fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut y: Option<Tensor<T>> = None;
        for layer in &self.layers {
            let (out, c) = layer.forward(p, y.as_ref().unwrap_or(x));
            caches.push(c);
            y = Some(out);
        }
        let mut y = y.expect("block has layers");
        let proj = match &self.proj {
            Some(proj) => {
                let (s, c) = proj.forward(p, x);
                y.add_assign(&s);
                Some(c)
            }
            None => {
                y.add_assign(x);
                None
            }
        };
        let y = relu_forward(y);
        (
            y.clone(),
            BlockCache {
                layers: caches,
                proj,
                out: y,
            },
        )
    }

    fn backward<T: Real>(&self, p: &[T], cache: &BlockCache<T>, dy: Tensor<T>, g: &mut [T], need_input_grad: bool) -> Option<Tensor<T>> {
        let d = relu_backward(&cache.out, dy);
        let mut main = Some(d.clone());
        for (i, (layer, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let grad = main.take().expect("gradient of inner layer");
            main = layer.backward(p, c, grad, g, i > 0 || need_input_grad);
        }
        let skip = match (&self.proj, &cache.proj) {
            (Some(proj), Some(c)) => proj.backward(p, c, d, g, need_input_grad),
            _ => Some(d),
        };
        match (main, skip) {
            (Some(mut m), Some(s)) => {
                m.add_assign(&s);
                Some(m)
            }
            _ => None,
        }
    }
}

/// Residual CNN producing features at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    pub(crate) in_channels: usize,
    stem: [ConvNorm; 2],
    stages: Vec<Vec<Block>>,
}

pub(crate) struct EncoderCache<T> {
    stem: Vec<ConvNormCache<T>>,
    stages: Vec<Vec<BlockCache<T>>>,
}

impl<T: Real> EncoderCache<T> {
    pub(crate) fn relu_pattern(&self, out: &mut Vec<bool>) {
        for c in &self.stem {
            c.relu_pattern(out);
        }
        for c in self.stages.iter().flatten() {
            c.relu_pattern(out);
        }
    }
}

impl Encoder {
    pub(crate) fn new(layout: &mut ParamLayout, name: &str, in_channels: usize, cfg: &ModelConfig) -> Self {
        let g = cfg.norm_groups;
        let s = cfg.stem_channels;
        let stem = [
            ConvNorm::new(layout, &format!("{name}.stem1"), in_channels, s, 3, 2, g, true),
            ConvNorm::new(layout, &format!("{name}.stem2"), s, s, 3, 2, g, true),
        ];
        let mut stages = Vec::with_capacity(4);
        let mut in_c = s;
        for (i, (&out_c, &count)) in cfg.stage_channels.iter().zip(&cfg.blocks_per_stage).enumerate() {
            let blocks = (0..count)
                .map(|b| {
                    let stride = if i > 0 && b == 0 { 2 } else { 1 };
                    let block = Block::new(layout, &format!("{name}.layer{}.{b}", i + 1), cfg.block, in_c, out_c, stride, g);
                    in_c = out_c;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        Encoder {
            in_channels,
            stem,
            stages,
        }
    }

    pub(crate) fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Vec<Tensor<T>>, EncoderCache<T>) {
        let (y, c1) = self.stem[0].forward(p, x);
        let (mut y, c2) = self.stem[1].forward(p, &y);
        let mut pyramid = Vec::with_capacity(4);
        let mut stage_caches = Vec::with_capacity(4);
        for stage in &self.stages {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (out, c) = block.forward(p, &y);
                caches.push(c);
                y = out;
            }
            stage_caches.push(caches);
            pyramid.push(y.clone());
        }
        (
            pyramid,
            EncoderCache {
                stem: vec![c1, c2],
                stages: stage_caches,
            },
        )
    }

    /// Back-propagates per-stage output gradients into the parameters.
    pub(crate) fn backward<T: Real>(&self, p: &[T], cache: &EncoderCache<T>, mut d_pyramid: Vec<Tensor<T>>, g: &mut [T]) {
        let mut carry: Option<Tensor<T>> = None;
        for s in (0..self.stages.len()).rev() {
            let mut d = std::mem::replace(&mut d_pyramid[s], Tensor::zeros(0, 0, 0, 0));
            if let Some(c) = carry.take() {
                d.add_assign(&c);
            }
            for (block, c) in self.stages[s].iter().zip(&cache.stages[s]).rev() {
                d = block.backward(p, c, d, g, true).expect("input gradient");
            }
            carry = Some(d);
        }
        let d = carry.expect("stages");
        let d = self.stem[1].backward(p, &cache.stem[1], d, g, true).expect("input gradient");
        self.stem[0].backward(p, &cache.stem[0], d, g, false);
    }
}
