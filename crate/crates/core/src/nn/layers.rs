use super::{matmul, Init, ParamLayout, Real, Slot, Tensor};

/// 2-D convolution with square kernel, implemented as im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Slot,
    pub bias: Option<Slot>,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// Registers `<name>.weight` (He init) and optionally `<name>.bias`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = layout.push(
            format!("{name}.weight"),
            &[out_c, in_c, kernel, kernel],
            Init::HeNormal { fan_in },
        );
        let bias = bias.then(|| layout.push(format!("{name}.bias"), &[out_c], Init::Zeros));
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight,
            bias,
        }
    }

    /// Registers a bias-carrying 1x1 projection `[out, 2 * out]` initialized to
    /// the average of the two concatenated halves.
    pub fn averaging(layout: &mut ParamLayout, name: &str, out_c: usize) -> Self {
        let weight = layout.push(
            format!("{name}.weight"),
            &[out_c, 2 * out_c, 1, 1],
            Init::Average {
                out_channels: out_c,
            },
        );
        let bias = Some(layout.push(format!("{name}.bias"), &[out_c], Init::Zeros));
        Conv2d {
            in_c: 2 * out_c,
            out_c,
            kernel: 1,
            stride: 1,
            pad: 0,
            weight,
            bias,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Vec<T> {
        if self.is_pointwise() {
            return x.data.clone();
        }
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let ncols = x.n * oh * ow;
        let mut cols = vec![T::zero(); self.in_c * k * k * ncols];
        for ci in 0..self.in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for b in 0..x.n {
                        let src = x.plane(ci, b);
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let dst_row = &mut dst[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], shape: (usize, usize, usize, usize), oh: usize, ow: usize) -> Tensor<T> {
        let (c, n, h, w) = shape;
        if self.is_pointwise() {
            return Tensor::from_vec(c, n, h, w, cols.to_vec());
        }
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let ncols = n * oh * ow;
        let mut x = Tensor::zeros(c, n, h, w);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for b in 0..n {
                        let dst = x.plane_mut(ci, b);
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &src[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                            let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, &v) in src_row.iter().enumerate() {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let cols = self.im2col(x, oh, ow);
        let ncols = x.n * oh * ow;
        let kdim = self.in_c * self.kernel * self.kernel;
        let mut y = Tensor::zeros(self.out_c, x.n, oh, ow);
        matmul(
            self.out_c,
            kdim,
            ncols,
            self.weight.get(params),
            false,
            &cols,
            false,
            &mut y.data,
            T::zero(),
        );
        if let Some(bias) = self.bias {
            for (row, &b) in y.data.chunks_mut(ncols).zip(bias.get(params)) {
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        let cache = ConvCache {
            cols,
            in_shape: x.shape(),
            out_hw: (oh, ow),
        };
        (y, cache)
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `need_input_grad`.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        grads: &mut [T],
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (oh, ow) = cache.out_hw;
        let ncols = cache.in_shape.1 * oh * ow;
        let kdim = self.in_c * self.kernel * self.kernel;
        matmul(
            self.out_c,
            ncols,
            kdim,
            &dy.data,
            false,
            &cache.cols,
            true,
            self.weight.get_mut(grads),
            T::one(),
        );
        if let Some(bias) = self.bias {
            for (g, row) in bias.get_mut(grads).iter_mut().zip(dy.data.chunks(ncols)) {
                *g += row.iter().copied().sum::<T>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); kdim * ncols];
        matmul(
            kdim,
            self.out_c,
            ncols,
            self.weight.get(params),
            true,
            &dy.data,
            false,
            &mut dcols,
            T::zero(),
        );
        Some(self.col2im(&dcols, cache.in_shape, oh, ow))
    }
}

/// Group normalization with per-channel affine parameters; statistics are
/// per sample, so results never depend on batch composition.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: Slot,
    pub beta: Slot,
    pub eps: f64,
}

pub struct GroupNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl GroupNorm {
    /// Uses the largest divisor of `channels` not exceeding `max_groups`.
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize, max_groups: usize) -> Self {
        let groups = (1..=max_groups.max(1).min(channels))
            .rev()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1);
        GroupNorm {
            channels,
            groups,
            gamma: layout.push(format!("{name}.gamma"), &[channels], Init::Ones),
            beta: layout.push(format!("{name}.beta"), &[channels], Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, GroupNormCache<T>) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let cg = self.channels / self.groups;
        let hw = x.plane_len();
        let count = T::of((cg * hw) as f64);
        let gamma = self.gamma.get(params);
        let beta = self.beta.get(params);
        let mut xhat = Tensor::zeros(x.c, x.n, x.h, x.w);
        let mut y = Tensor::zeros(x.c, x.n, x.h, x.w);
        let mut inv_std = vec![T::zero(); x.n * self.groups];
        for b in 0..x.n {
            for g in 0..self.groups {
                let chans = g * cg..(g + 1) * cg;
                let mut sum = T::zero();
                for c in chans.clone() {
                    sum += x.plane(c, b).iter().copied().sum::<T>();
                }
                let mean = sum / count;
                let mut var = T::zero();
                for c in chans.clone() {
                    for &v in x.plane(c, b) {
                        var += (v - mean) * (v - mean);
                    }
                }
                let istd = T::one() / (var / count + T::of(self.eps)).sqrt();
                inv_std[b * self.groups + g] = istd;
                for c in chans {
                    let src = x.plane(c, b);
                    let (gm, bt) = (gamma[c], beta[c]);
                    let xh = xhat.plane_mut(c, b);
                    let out = y.plane_mut(c, b);
                    for i in 0..hw {
                        xh[i] = (src[i] - mean) * istd;
                        out[i] = gm * xh[i] + bt;
                    }
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &GroupNormCache<T>,
        dy: &Tensor<T>,
        grads: &mut [T],
    ) -> Tensor<T> {
        let cg = self.channels / self.groups;
        let hw = dy.plane_len();
        let count = T::of((cg * hw) as f64);
        let gamma = self.gamma.get(params);
        let mut dx = Tensor::zeros(dy.c, dy.n, dy.h, dy.w);
        for c in 0..self.channels {
            let mut sg = T::zero();
            let mut sb = T::zero();
            for b in 0..dy.n {
                for (&d, &xh) in dy.plane(c, b).iter().zip(cache.xhat.plane(c, b)) {
                    sg += d * xh;
                    sb += d;
                }
            }
            self.gamma.get_mut(grads)[c] += sg;
            self.beta.get_mut(grads)[c] += sb;
        }
        for b in 0..dy.n {
            for g in 0..self.groups {
                let istd = cache.inv_std[b * self.groups + g];
                let mut sum_dxh = T::zero();
                let mut sum_dxh_xh = T::zero();
                for c in g * cg..(g + 1) * cg {
                    let d = dy.plane(c, b);
                    let xh = cache.xhat.plane(c, b);
                    for i in 0..hw {
                        let dxh = d[i] * gamma[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[i];
                    }
                }
                let mean_dxh = sum_dxh / count;
                let mean_dxh_xh = sum_dxh_xh / count;
                for c in g * cg..(g + 1) * cg {
                    let d = dy.plane(c, b);
                    let xh = cache.xhat.plane(c, b);
                    let out = dx.plane_mut(c, b);
                    for i in 0..hw {
                        out[i] = istd * (d[i] * gamma[c] - mean_dxh - xh[i] * mean_dxh_xh);
                    }
                }
            }
        }
        dx
    }
}

pub fn relu_forward<T: Real>(mut x: Tensor<T>) -> Tensor<T> {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    x
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, mut dy: Tensor<T>) -> Tensor<T> {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dy
}

pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let first = parts[0];
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
    let mut c = 0;
    for p in parts {
        assert_eq!((p.n, p.h, p.w), (first.n, first.h, first.w), "concat spatial shape");
        data.extend_from_slice(&p.data);
        c += p.c;
    }
    Tensor::from_vec(c, first.n, first.h, first.w, data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Real>(x: &Tensor<T>, sizes: &[usize]) -> Vec<Tensor<T>> {
    assert_eq!(sizes.iter().sum::<usize>(), x.c, "split sizes");
    let plane = x.n * x.h * x.w;
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &c in sizes {
        out.push(Tensor::from_vec(c, x.n, x.h, x.w, x.data[start * plane..(start + c) * plane].to_vec()));
        start += c;
    }
    out
}

/// Mean over non-overlapping `factor x factor` blocks.
pub fn area_downsample<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    assert!(x.h.is_multiple_of(factor) && x.w.is_multiple_of(factor), "downsample factor");
    let (oh, ow) = (x.h / factor, x.w / factor);
    let mut y = Tensor::zeros(x.c, x.n, oh, ow);
    let norm = T::of(1.0 / (factor * factor) as f64);
    for c in 0..x.c {
        for b in 0..x.n {
            let src = x.plane(c, b);
            let dst = y.plane_mut(c, b);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..factor {
                        let row = &src[(oy * factor + dy) * x.w + ox * factor..];
                        acc += row[..factor].iter().copied().sum::<T>();
                    }
                    dst[oy * ow + ox] = acc * norm;
                }
            }
        }
    }
    y
}

/// Bilinear resampling with half-pixel centres and edge clamping.
#[derive(Debug, Clone)]
pub struct Resize {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|j| {
            let s = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl Resize {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Resize {
            in_hw: (in_h, in_w),
            out_hw: (out_h, out_w),
            ys: axis_taps(in_h, out_h),
            xs: axis_taps(in_w, out_w),
        }
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!((x.h, x.w), self.in_hw, "resize input size");
        let (oh, ow) = self.out_hw;
        if self.in_hw == self.out_hw {
            return x.clone();
        }
        let mut y = Tensor::zeros(x.c, x.n, oh, ow);
        for c in 0..x.c {
            for b in 0..x.n {
                let src = x.plane(c, b);
                let dst = y.plane_mut(c, b);
                for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
                    let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
                    for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                        let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                        let w = x.w;
                        dst[oy * ow + ox] = gy * (gx * src[y0 * w + x0] + fx * src[y0 * w + x1])
                            + fy * (gx * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Real>(&self, dy: &Tensor<T>) -> Tensor<T> {
        assert_eq!((dy.h, dy.w), self.out_hw, "resize gradient size");
        if self.in_hw == self.out_hw {
            return dy.clone();
        }
        let (ih, iw) = self.in_hw;
        let ow = self.out_hw.1;
        let mut dx = Tensor::zeros(dy.c, dy.n, ih, iw);
        for c in 0..dy.c {
            for b in 0..dy.n {
                let src = dy.plane(c, b);
                let dst = dx.plane_mut(c, b);
                for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
                    let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
                    for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                        let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                        let g = src[oy * ow + ox];
                        dst[y0 * iw + x0] += gy * gx * g;
                        dst[y0 * iw + x1] += gy * fx * g;
                        dst[y1 * iw + x0] += fy * gx * g;
                        dst[y1 * iw + x1] += fy * fx * g;
                    }
                }
            }
        }
        dx
    }
}
