use super::encoder::{ConvNorm, ConvNormCache};
use super::Logits;
use crate::nn::{concat_channels, split_channels, Conv2d, ConvCache, ParamLayout, Real, Resize, Tensor};

/// Cached quantities of [`attention_map`] needed by its backward pass.
pub struct AttentionCache<T> {
    weights: Vec<T>,
    query: Vec<T>,
    attention: Tensor<T>,
}

/// Softmax attention of every position against the mask-pooled query.
///
/// `features` is `[C, n, h, w]`, `mask` is `[1, n, h, w]` with values in
/// `[0, 1]`. A sample whose mask sums to zero pools uniformly instead.
pub fn attention_forward<T: Real>(features: &Tensor<T>, mask: &Tensor<T>) -> (Tensor<T>, AttentionCache<T>) {
    assert_eq!((mask.c, mask.n, mask.h, mask.w), (1, features.n, features.h, features.w), "attention mask shape");
    let (c, n, hw) = (features.c, features.n, features.plane_len());
    let scale = T::one() / T::of(c as f64).sqrt();
    let mut weights = vec![T::zero(); n * hw];
    let mut query = vec![T::zero(); n * c];
    let mut attention = Tensor::zeros(1, n, features.h, features.w);
    for b in 0..n {
        let m = mask.plane(0, b);
        let total: T = m.iter().copied().sum();
        let w = &mut weights[b * hw..(b + 1) * hw];
        if total > T::zero() {
            for (wi, &mi) in w.iter_mut().zip(m) {
                *wi = mi / total;
            }
        } else {
            w.fill(T::one() / T::of(hw as f64));
        }
        let q = &mut query[b * c..(b + 1) * c];
        for (ch, qc) in q.iter_mut().enumerate() {
            *qc = features.plane(ch, b).iter().zip(w.iter()).map(|(&f, &wi)| f * wi).sum();
        }
        let logits = attention.plane_mut(0, b);
        for (ch, &qc) in q.iter().enumerate() {
            for (l, &f) in logits.iter_mut().zip(features.plane(ch, b)) {
                *l += qc * f;
            }
        }
        let mut max = T::neg_infinity();
        for l in logits.iter_mut() {
            *l *= scale;
            if *l > max {
                max = *l;
            }
        }
        let mut sum = T::zero();
        for l in logits.iter_mut() {
            let shifted: T = *l - max;
            *l = shifted.exp();
            sum += *l;
        }
        for l in logits.iter_mut() {
            *l /= sum;
        }
    }
    (
        attention.clone(),
        AttentionCache {
            weights,
            query,
            attention,
        },
    )
}

/// Gradient of [`attention_forward`] with respect to the features.
pub fn attention_backward<T: Real>(features: &Tensor<T>, cache: &AttentionCache<T>, d_attention: &Tensor<T>) -> Tensor<T> {
    let (c, n, hw) = (features.c, features.n, features.plane_len());
    let scale = T::one() / T::of(c as f64).sqrt();
    let mut df = Tensor::zeros(c, n, features.h, features.w);
    for b in 0..n {
        let a = cache.attention.plane(0, b);
        let da = d_attention.plane(0, b);
        let inner: T = a.iter().zip(da).map(|(&x, &y)| x * y).sum();
        let dlogit: Vec<T> = a.iter().zip(da).map(|(&x, &y)| x * (y - inner) * scale).collect();
        let q = &cache.query[b * c..(b + 1) * c];
        let w = &cache.weights[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let f = features.plane(ch, b);
            let dq: T = dlogit.iter().zip(f).map(|(&d, &v)| d * v).sum();
            let out = df.plane_mut(ch, b);
            for i in 0..hw {
                out[i] = dlogit[i] * q[ch] + w[i] * dq;
            }
        }
    }
    df
}

/// Upsampling decoder with two 1-channel output heads.
#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    input_size: usize,
    stage_channels: [usize; 4],
    blocks: Vec<ConvNorm>,
    visible_head: Conv2d,
    amodal_head: Conv2d,
}

pub(crate) struct DecoderCache<T> {
    blocks: Vec<ConvNormCache<T>>,
    visible: ConvCache<T>,
    amodal: ConvCache<T>,
}

impl<T: Real> DecoderCache<T> {
    pub(crate) fn relu_pattern(&self, out: &mut Vec<bool>) {
        for c in &self.blocks {
            c.relu_pattern(out);
        }
    }
}

impl Decoder {
    pub(crate) fn new(layout: &mut ParamLayout, input_size: usize, stage_channels: [usize; 4], channels: [usize; 4], groups: usize) -> Self {
        let mut blocks = Vec::with_capacity(4);
        let mut prev = 0;
        for (i, &out) in channels.iter().enumerate() {
            let skip = stage_channels[3 - i];
            blocks.push(ConvNorm::new(layout, &format!("decoder.block{i}"), prev + skip + 2, out, 3, 1, groups, true));
            prev = out;
        }
        Decoder {
            input_size,
            stage_channels,
            visible_head: Conv2d::new(layout, "decoder.visible_head", prev, 1, 1, 1, 0, true),
            amodal_head: Conv2d::new(layout, "decoder.amodal_head", prev, 1, 1, 1, 0, true),
            blocks,
        }
    }

    /// `masks` holds the visible prior at strides 4, 8, 16 and 32.
    pub(crate) fn forward<T: Real>(
        &self,
        p: &[T],
        fused: &[Tensor<T>],
        masks: &[Tensor<T>],
        attention: &Tensor<T>,
    ) -> (Logits<T>, DecoderCache<T>) {
        let mut caches = Vec::with_capacity(4);
        let mut prev: Option<Tensor<T>> = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let level = 3 - i;
            let skip = &fused[level];
            let a = Resize::new(attention.h, attention.w, skip.h, skip.w).forward(attention);
            let x = match &prev {
                None => concat_channels(&[skip, &masks[level], &a]),
                Some(prev) => {
                    let up = Resize::new(prev.h, prev.w, skip.h, skip.w).forward(prev);
                    concat_channels(&[&up, skip, &masks[level], &a])
                }
            };
            let (y, c) = block.forward(p, &x);
            caches.push(c);
            prev = Some(y);
        }
        let x = prev.expect("decoder blocks");
        let up = Resize::new(x.h, x.w, self.input_size, self.input_size);
        let (v, vc) = self.visible_head.forward(p, &x);
        let (a, ac) = self.amodal_head.forward(p, &x);
        (
            Logits {
                visible: up.forward(&v),
                amodal: up.forward(&a),
            },
            DecoderCache {
                blocks: caches,
                visible: vc,
                amodal: ac,
            },
        )
    }

    /// Returns gradients for the fused pyramid and the attention map.
    pub(crate) fn backward<T: Real>(
        &self,
        p: &[T],
        cache: &DecoderCache<T>,
        fused: &[Tensor<T>],
        attention: &Tensor<T>,
        d_logits: &Logits<T>,
        g: &mut [T],
    ) -> (Vec<Tensor<T>>, Tensor<T>) {
        let s4 = &fused[0];
        let up = Resize::new(s4.h, s4.w, self.input_size, self.input_size);
        let dv = up.backward(&d_logits.visible);
        let da = up.backward(&d_logits.amodal);
        let mut d = self.visible_head.backward(p, &cache.visible, &dv, g, true).expect("input gradient");
        d.add_assign(&self.amodal_head.backward(p, &cache.amodal, &da, g, true).expect("input gradient"));

        let mut d_fused: Vec<Tensor<T>> = vec![Tensor::zeros(0, 0, 0, 0); 4];
        let mut d_attention = Tensor::zeros(1, attention.n, attention.h, attention.w);
        for i in (0..self.blocks.len()).rev() {
            let level = 3 - i;
            let skip = &fused[level];
            let dx = self.blocks[i]
                .backward(p, &cache.blocks[i], d, g, true)
                .expect("input gradient");
            let a_resize = Resize::new(attention.h, attention.w, skip.h, skip.w);
            if i == 0 {
                let mut parts = split_channels(&dx, &[self.stage_channels[level], 1, 1]).into_iter();
                d_fused[level] = parts.next().expect("skip part");
                parts.next();
                d_attention.add_assign(&a_resize.backward(&parts.next().expect("attention part")));
                d = Tensor::zeros(0, 0, 0, 0);
            } else {
                let prev_c = self.blocks[i - 1].out_channels();
                let mut parts = split_channels(&dx, &[prev_c, self.stage_channels[level], 1, 1]).into_iter();
                let d_up = parts.next().expect("upsample part");
                d_fused[level] = parts.next().expect("skip part");
                parts.next();
                d_attention.add_assign(&a_resize.backward(&parts.next().expect("attention part")));
                let next = &fused[level + 1];
                d = Resize::new(next.h, next.w, skip.h, skip.w).backward(&d_up);
            }
        }
        (d_fused, d_attention)
    }
}
