//! Convolutional backbone and spatial pyramid pooling.
//!
//! The backbone is a short conv/ReLU/max-pool stack whose output lands on a
//! 13×13 grid for a 227×227 input, the geometry the SPP head expects. Every
//! layer has a backward pass so the whole network can be trained or
//! gradient-checked.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::imaging::{ImageBuffer, CHANNELS};
use crate::tensor::Tensor;
use crate::{Error, Real, Result, INPUT_SIDE, MAP_SIDE};

/// `channels × height × width` activations, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::Shape {
                context: "feature map",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    /// Planar `3 × H × W` copy of an RGB image.
    pub fn from_image(img: &ImageBuffer) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![T::zero(); CHANNELS * w * h];
        for (i, px) in img.data().chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                data[c * w * h + i] = T::from_f64_lossy(px[c] as f64);
            }
        }
        Self {
            channels: CHANNELS,
            height: h,
            width: w,
            data,
        }
    }

    fn check_finite(&self, layer: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                layer: layer.to_string(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SppMode {
    Max,
    Avg,
}

/// Pyramid of square pooling windows, each with stride one less than its
/// size (stride 1 for size 1).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SppConfig {
    pub sizes: Vec<usize>,
    pub mode: SppMode,
}

impl SppConfig {
    pub fn new(sizes: Vec<usize>, mode: SppMode) -> Self {
        Self { sizes, mode }
    }

    pub fn max() -> Self {
        Self::new(vec![3, 5, 7], SppMode::Max)
    }

    pub fn avg() -> Self {
        Self::new(vec![3, 5, 7], SppMode::Avg)
    }

    #[inline]
    pub fn stride(size: usize) -> usize {
        size.saturating_sub(1).max(1)
    }

    /// Window placements along one axis of length `side`.
    pub fn bins_per_axis(side: usize, size: usize) -> usize {
        if size == 0 || size > side {
            0
        } else {
            (side - size) / Self::stride(size) + 1
        }
    }

    pub fn bins_per_channel(&self, height: usize, width: usize) -> usize {
        self.sizes
            .iter()
            .map(|&k| Self::bins_per_axis(height, k) * Self::bins_per_axis(width, k))
            .sum()
    }

    pub fn output_len(&self, channels: usize, height: usize, width: usize) -> usize {
        channels * self.bins_per_channel(height, width)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::Config("SPP needs at least one pooling size".into()));
        }
        for &k in &self.sizes {
            if k == 0 || k > height || k > width {
                return Err(Error::Config(format!(
                    "SPP size {k} does not fit a {height}x{width} map"
                )));
            }
        }
        Ok(())
    }
}

/// How the final map is turned into the head's input vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Pooling {
    Spp(SppConfig),
    /// The raw map, flattened channel-major.
    Flatten,
}

impl Pooling {
    pub fn output_len(&self, channels: usize, height: usize, width: usize) -> usize {
        match self {
            Pooling::Spp(cfg) => cfg.output_len(channels, height, width),
            Pooling::Flatten => channels * height * width,
        }
    }

    pub fn forward<T: Real>(&self, map: &FeatureMap<T>) -> Result<Vec<T>> {
        match self {
            Pooling::Spp(cfg) => spp_pool(map, cfg),
            Pooling::Flatten => Ok(map.data.clone()),
        }
    }

    pub fn backward<T: Real>(&self, map: &FeatureMap<T>, upstream: &[T]) -> Result<FeatureMap<T>> {
        match self {
            Pooling::Spp(cfg) => spp_backward(map, cfg, upstream),
            Pooling::Flatten => {
                FeatureMap::new(map.channels, map.height, map.width, upstream.to_vec())
            }
        }
    }
}

/// Visits every pooling window; `f(out_index, channel, y0, x0, size)`.
fn for_each_bin(
    map_c: usize,
    h: usize,
    w: usize,
    cfg: &SppConfig,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let mut out = 0;
    for &k in &cfg.sizes {
        let s = SppConfig::stride(k);
        let (ny, nx) = (
            SppConfig::bins_per_axis(h, k),
            SppConfig::bins_per_axis(w, k),
        );
        for c in 0..map_c {
            for by in 0..ny {
                for bx in 0..nx {
                    f(out, c, by * s, bx * s, k);
                    out += 1;
                }
            }
        }
    }
}

/// First flat index (row-major within the window) holding the maximum.
fn window_argmax<T: Real>(plane: &[T], w: usize, y0: usize, x0: usize, k: usize) -> usize {
    let mut best = y0 * w + x0;
    for y in y0..y0 + k {
        for x in x0..x0 + k {
            let i = y * w + x;
            if plane[i] > plane[best] {
                best = i;
            }
        }
    }
    best
}

/// Pools each window of every pyramid level, concatenated size-major then
/// channel-major then bin row-major.
pub fn spp_pool<T: Real>(map: &FeatureMap<T>, cfg: &SppConfig) -> Result<Vec<T>> {
    cfg.validate(map.height, map.width)?;
    let (h, w) = (map.height, map.width);
    let mut out = vec![T::zero(); cfg.output_len(map.channels, h, w)];
    for_each_bin(map.channels, h, w, cfg, |o, c, y0, x0, k| {
        let plane = &map.data[c * h * w..(c + 1) * h * w];
        out[o] = match cfg.mode {
            SppMode::Max => plane[window_argmax(plane, w, y0, x0, k)],
            SppMode::Avg => {
                let mut acc = T::zero();
                for y in y0..y0 + k {
                    acc += plane[y * w + x0..y * w + x0 + k].iter().copied().sum::<T>();
                }
                acc / T::from_usize(k * k).unwrap()
            }
        };
    });
    Ok(out)
}

/// Gradient of `spp_pool` w.r.t. the map. Max routes each bin to its first
/// argmax; Avg spreads it uniformly; overlapping windows accumulate.
pub fn spp_backward<T: Real>(
    map: &FeatureMap<T>,
    cfg: &SppConfig,
    upstream: &[T],
) -> Result<FeatureMap<T>> {
    cfg.validate(map.height, map.width)?;
    let (h, w) = (map.height, map.width);
    let expected = cfg.output_len(map.channels, h, w);
    if upstream.len() != expected {
        return Err(Error::Shape {
            context: "SPP upstream gradient",
            expected,
            actual: upstream.len(),
        });
    }
    let mut grad = FeatureMap::zeros(map.channels, h, w);
    for_each_bin(map.channels, h, w, cfg, |o, c, y0, x0, k| {
        let plane = &map.data[c * h * w..(c + 1) * h * w];
        let g = &mut grad.data[c * h * w..(c + 1) * h * w];
        match cfg.mode {
            SppMode::Max => g[window_argmax(plane, w, y0, x0, k)] += upstream[o],
            SppMode::Avg => {
                let share = upstream[o] / T::from_usize(k * k).unwrap();
                for y in y0..y0 + k {
                    for v in &mut g[y * w + x0..y * w + x0 + k] {
                        *v += share;
                    }
                }
            }
        }
    });
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    /// Trained together with the head.
    Toy,
    /// Frozen random weights; only the head learns.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl BackboneSpec {
    /// conv11/4 → pool3/2 → conv5 → pool3/2 → conv3, mapping 227 → 55 → 27
    /// → 27 → 13 → 13, with ReLU after every conv.
    pub fn alexnet_like(kind: BackboneKind, c1: usize, c2: usize, out: usize) -> Self {
        use LayerSpec::*;
        Self {
            kind,
            in_channels: CHANNELS,
            layers: vec![
                Conv {
                    out_channels: c1,
                    kernel: 11,
                    stride: 4,
                    pad: 0,
                },
                Relu,
                MaxPool {
                    kernel: 3,
                    stride: 2,
                },
                Conv {
                    out_channels: c2,
                    kernel: 5,
                    stride: 1,
                    pad: 2,
                },
                Relu,
                MaxPool {
                    kernel: 3,
                    stride: 2,
                },
                Conv {
                    out_channels: out,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                Relu,
            ],
        }
    }

    /// Default toy stack with `channels` output maps.
    pub fn toy(kind: BackboneKind, channels: usize) -> Self {
        Self::alexnet_like(kind, 16, 32, channels)
    }

    pub fn trainable(&self) -> bool {
        self.kind == BackboneKind::Toy
    }

    /// `(channels, height, width)` after each layer for a square input.
    pub fn shapes(&self, side: usize) -> Result<Vec<(usize, usize, usize)>> {
        let mut shape = (self.in_channels, side, side);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (_, h, w) = shape;
                    if out_channels == 0
                        || kernel == 0
                        || stride == 0
                        || kernel > h + 2 * pad
                        || kernel > w + 2 * pad
                    {
                        return Err(Error::Config(format!(
                            "conv layer {layer:?} does not fit {shape:?}"
                        )));
                    }
                    (
                        out_channels,
                        (h + 2 * pad - kernel) / stride + 1,
                        (w + 2 * pad - kernel) / stride + 1,
                    )
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool { kernel, stride } => {
                    let (c, h, w) = shape;
                    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
                        return Err(Error::Config(format!(
                            "pool layer {layer:?} does not fit {shape:?}"
                        )));
                    }
                    (c, (h - kernel) / stride + 1, (w - kernel) / stride + 1)
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    /// Output shape for the network input; must be `C × 13 × 13`.
    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        let shapes = self.shapes(INPUT_SIDE)?;
        let last = shapes
            .last()
            .copied()
            .ok_or_else(|| Error::Config("backbone has no layers".into()))?;
        if (last.1, last.2) != (MAP_SIDE, MAP_SIDE) {
            return Err(Error::Config(format!(
                "backbone maps {INPUT_SIDE}x{INPUT_SIDE} to {}x{}, expected {MAP_SIDE}x{MAP_SIDE}",
                last.1, last.2
            )));
        }
        Ok(last)
    }

    /// `(out, in, k, k)` weight shapes of the conv layers in order.
    pub fn conv_shapes(&self) -> Vec<[usize; 4]> {
        let mut cin = self.in_channels;
        let mut out = Vec::new();
        for layer in &self.layers {
            if let LayerSpec::Conv {
                out_channels,
                kernel,
                ..
            } = *layer
            {
                out.push([out_channels, cin, kernel, kernel]);
                cin = out_channels;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `(out, in, k, k)`.
    pub weight: Tensor<T>,
    /// `(out)`.
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub convs: Vec<ConvParams<T>>,
}

impl<T: Real> BackboneParams<T> {
    pub fn zeros(spec: &BackboneSpec) -> Self {
        Self {
            convs: spec
                .conv_shapes()
                .into_iter()
                .map(|s| ConvParams {
                    weight: Tensor::zeros(&s),
                    bias: Tensor::zeros(&s[..1]),
                })
                .collect(),
        }
    }

    fn check(&self, spec: &BackboneSpec) -> Result<()> {
        let shapes = spec.conv_shapes();
        if shapes.len() != self.convs.len() {
            return Err(Error::Shape {
                context: "backbone conv layers",
                expected: shapes.len(),
                actual: self.convs.len(),
            });
        }
        for (s, p) in shapes.iter().zip(&self.convs) {
            if p.weight.dims != s[..] || p.bias.dims != s[..1] {
                return Err(Error::Config(format!(
                    "conv parameters {:?}/{:?} do not match layer shape {s:?}",
                    p.weight.dims, p.bias.dims
                )));
            }
        }
        Ok(())
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate for output index `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        (o * self.stride + t)
            .checked_sub(self.pad)
            .filter(|&v| v < limit)
    }

    /// Output indices whose tap `t` lands inside `0..limit`.
    fn valid(&self, t: usize, limit: usize, outputs: usize) -> core::ops::Range<usize> {
        let lo = self.pad.saturating_sub(t).div_ceil(self.stride);
        let hi = (limit + self.pad)
            .checked_sub(t + 1)
            .map_or(0, |v| v / self.stride + 1);
        lo.min(outputs)..hi.min(outputs).max(lo.min(outputs))
    }
}

fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    im2col_rows(input, g, 0..g.oh, &mut cols);
    cols
}

/// Unfolds output rows `oys` into `cols`, a `rows × (len(oys)·ow)` block.
fn im2col_rows<T: Real>(input: &[T], g: &ConvGeom, oys: core::ops::Range<usize>, cols: &mut [T]) {
    let n = oys.len() * g.ow;
    cols.fill(T::zero());
    let mut r = 0;
    for c in 0..g.cin {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let ys = g.valid(ky, g.h, g.oh);
            for kx in 0..g.k {
                let row = &mut cols[r * n..(r + 1) * n];
                let xs = g.valid(kx, g.w, g.ow);
                for oy in ys.start.max(oys.start)..ys.end.min(oys.end) {
                    let src = &plane[(oy * g.stride + ky - g.pad) * g.w..];
                    let dst = &mut row[(oy - oys.start) * g.ow..(oy - oys.start + 1) * g.ow];
                    for ox in xs.clone() {
                        dst[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
                r += 1;
            }
        }
    }
}

/// Output positions unfolded per block on the untraced path.
const IM2COL_BLOCK: usize = 512;

/// `out = W · im2col(input) + b` without materializing the full unfolding.
fn conv_blocked<T: Real>(
    input: &[T],
    g: &ConvGeom,
    p: &ConvParams<T>,
    out_channels: usize,
) -> Vec<T> {
    let n = g.cols();
    let mut out = vec![T::zero(); out_channels * n];
    for (co, row) in out.chunks_exact_mut(n).enumerate() {
        row.fill(p.bias.data[co]);
    }
    let rows_per_block = (IM2COL_BLOCK / g.ow).max(1);
    let mut cols = vec![T::zero(); g.rows() * rows_per_block * g.ow];
    let mut oy = 0;
    while oy < g.oh {
        let end = (oy + rows_per_block).min(g.oh);
        let width = (end - oy) * g.ow;
        let block = &mut cols[..g.rows() * width];
        im2col_rows(input, g, oy..end, block);
        T::gemm(
            out_channels,
            g.rows(),
            width,
            T::one(),
            &p.weight.data,
            (g.rows() as isize, 1),
            block,
            (width as isize, 1),
            T::one(),
            &mut out[oy * g.ow..],
            (n as isize, 1),
        );
        oy = end;
    }
    out
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.cols();
    let mut out = vec![T::zero(); g.cin * g.h * g.w];
    let mut r = 0;
    for c in 0..g.cin {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[r * n..(r + 1) * n];
                for oy in 0..g.oh {
                    let Some(sy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(sx) = g.src(ox, kx, g.w) {
                            plane[sy * g.w + sx] += row[oy * g.ow + ox];
                        }
                    }
                }
                r += 1;
            }
        }
    }
    out
}

enum LayerTrace<T> {
    Conv { cols: Vec<T>, geom: ConvGeom },
    Relu { output: Vec<T> },
    MaxPool { argmax: Vec<u32>, input_len: usize },
}

/// Intermediate state kept by a traced forward pass for the backward pass.
pub struct BackboneTrace<T> {
    layers: Vec<LayerTrace<T>>,
}

fn layer_name(spec: &BackboneSpec, index: usize) -> alloc::string::String {
    let kind = match spec.layers[index] {
        LayerSpec::Conv { .. } => "conv",
        LayerSpec::Relu => "relu",
        LayerSpec::MaxPool { .. } => "maxpool",
    };
    format!("backbone.{index}.{kind}")
}

fn run_backbone<T: Real>(
    img: &ImageBuffer,
    spec: &BackboneSpec,
    params: &BackboneParams<T>,
    mut trace: Option<&mut Vec<LayerTrace<T>>>,
) -> Result<FeatureMap<T>> {
    if img.width() as usize != INPUT_SIDE || img.height() as usize != INPUT_SIDE {
        return Err(Error::Shape {
            context: "backbone input side",
            expected: INPUT_SIDE,
            actual: if img.width() as usize != INPUT_SIDE {
                img.width()
            } else {
                img.height()
            } as usize,
        });
    }
    spec.output_shape()?;
    params.check(spec)?;

    let mut map = FeatureMap::<T>::from_image(img);
    let mut conv_index = 0;
    for (li, layer) in spec.layers.iter().enumerate() {
        map = match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let p = &params.convs[conv_index];
                conv_index += 1;
                let geom = ConvGeom {
                    cin: map.channels,
                    h: map.height,
                    w: map.width,
                    k: kernel,
                    stride,
                    pad,
                    oh: (map.height + 2 * pad - kernel) / stride + 1,
                    ow: (map.width + 2 * pad - kernel) / stride + 1,
                };
                let Some(t) = trace.as_deref_mut() else {
                    let out = conv_blocked(&map.data, &geom, p, out_channels);
                    map = FeatureMap::new(out_channels, geom.oh, geom.ow, out)?;
                    map.check_finite(&layer_name(spec, li))?;
                    continue;
                };
                let cols = im2col(&map.data, &geom);
                let n = geom.cols();
                let mut out = vec![T::zero(); out_channels * n];
                for (co, row) in out.chunks_exact_mut(n).enumerate() {
                    row.fill(p.bias.data[co]);
                }
                T::gemm(
                    out_channels,
                    geom.rows(),
                    n,
                    T::one(),
                    &p.weight.data,
                    (geom.rows() as isize, 1),
                    &cols,
                    (n as isize, 1),
                    T::one(),
                    &mut out,
                    (n as isize, 1),
                );
                let next = FeatureMap::new(out_channels, geom.oh, geom.ow, out)?;
                t.push(LayerTrace::Conv { cols, geom });
                next
            }
            LayerSpec::Relu => {
                let mut next = map;
                for v in &mut next.data {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
                if let Some(t) = trace.as_deref_mut() {
                    t.push(LayerTrace::Relu {
                        output: next.data.clone(),
                    });
                }
                next
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let (c, h, w) = (map.channels, map.height, map.width);
                let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                let mut out = Vec::with_capacity(c * oh * ow);
                let mut argmax = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    let plane = &map.data[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let i = window_argmax(plane, w, oy * stride, ox * stride, kernel);
                            out.push(plane[i]);
                            argmax.push((ch * h * w + i) as u32);
                        }
                    }
                }
                if let Some(t) = trace.as_deref_mut() {
                    t.push(LayerTrace::MaxPool {
                        argmax,
                        input_len: c * h * w,
                    });
                }
                FeatureMap::new(c, oh, ow, out)?
            }
        };
        map.check_finite(&layer_name(spec, li))?;
    }
    Ok(map)
}

/// Runs the backbone on a 227×227 image.
pub fn backbone_forward<T: Real>(
    img: &ImageBuffer,
    spec: &BackboneSpec,
    params: &BackboneParams<T>,
) -> Result<FeatureMap<T>> {
    run_backbone(img, spec, params, None)
}

pub fn backbone_forward_traced<T: Real>(
    img: &ImageBuffer,
    spec: &BackboneSpec,
    params: &BackboneParams<T>,
) -> Result<(FeatureMap<T>, BackboneTrace<T>)> {
    let mut layers = Vec::with_capacity(spec.layers.len());
    let map = run_backbone(img, spec, params, Some(&mut layers))?;
    Ok((map, BackboneTrace { layers }))
}

/// Accumulates parameter gradients into `grads` given the gradient of the
/// output map. The input-image gradient is not formed.
pub fn backbone_backward<T: Real>(
    spec: &BackboneSpec,
    params: &BackboneParams<T>,
    trace: &BackboneTrace<T>,
    grad_out: &FeatureMap<T>,
    grads: &mut BackboneParams<T>,
) -> Result<()> {
    if trace.layers.len() != spec.layers.len() {
        return Err(Error::Shape {
            context: "backbone trace",
            expected: spec.layers.len(),
            actual: trace.layers.len(),
        });
    }
    let mut grad = grad_out.data.clone();
    let mut conv_index = params.convs.len();
    for (li, layer) in trace.layers.iter().enumerate().rev() {
        grad = match layer {
            LayerTrace::Relu { output } => {
                for (g, o) in grad.iter_mut().zip(output) {
                    if *o <= T::zero() {
                        *g = T::zero();
                    }
                }
                grad
            }
            LayerTrace::MaxPool { argmax, input_len } => {
                let mut g = vec![T::zero(); *input_len];
                for (&i, &v) in argmax.iter().zip(&grad) {
                    g[i as usize] += v;
                }
                g
            }
            LayerTrace::Conv { cols, geom } => {
                conv_index -= 1;
                let p = &params.convs[conv_index];
                let gp = &mut grads.convs[conv_index];
                let (n, r) = (geom.cols(), geom.rows());
                let cout = p.bias.len();
                for (co, row) in grad.chunks_exact(n).enumerate() {
                    gp.bias.data[co] += row.iter().copied().sum::<T>();
                }
                // dW += dOut · colsᵀ
                T::gemm(
                    cout,
                    n,
                    r,
                    T::one(),
                    &grad,
                    (n as isize, 1),
                    cols,
                    (1, n as isize),
                    T::one(),
                    &mut gp.weight.data,
                    (r as isize, 1),
                );
                if li == 0 {
                    break;
                }
                // dCols = Wᵀ · dOut
                let mut dcols = vec![T::zero(); r * n];
                T::gemm(
                    r,
                    cout,
                    n,
                    T::one(),
                    &p.weight.data,
                    (1, r as isize),
                    &grad,
                    (n as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (n as isize, 1),
                );
                col2im(&dcols, geom)
            }
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, side: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * side * side)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        FeatureMap::new(c, side, side, data).unwrap()
    }

    fn random_params(spec: &BackboneSpec, seed: u64) -> BackboneParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BackboneParams::zeros(spec);
        for c in &mut params.convs {
            c.weight
                .data
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.1..0.1));
            c.bias
                .data
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        params
    }

    #[test]
    fn pooled_feature_is_12544_for_256_channels() {
        let cfg = SppConfig::max();
        assert_eq!(cfg.bins_per_channel(13, 13), 49);
        let map = FeatureMap::<f32>::zeros(256, 13, 13);
        assert_eq!(spp_pool(&map, &cfg).unwrap().len(), 12_544);
    }

    #[test]
    fn bin_counts_match_window_enumeration() {
        // Enumerate every window origin y0 with y0 % stride == 0 that fits.
        for k in 1..=13usize {
            let stride = if k == 1 { 1 } else { k - 1 };
            let brute = (0..13)
                .filter(|y0| y0 % stride == 0 && y0 + k <= 13)
                .count();
            assert_eq!(SppConfig::bins_per_axis(13, k), brute, "k={k}");
        }
        assert_eq!(
            [3, 5, 7].map(|k| SppConfig::bins_per_axis(13, k).pow(2)),
            [36, 9, 4]
        );
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let map = FeatureMap::new(2, 13, 13, vec![0.75f64; 338]).unwrap();
        for cfg in [SppConfig::max(), SppConfig::avg()] {
            assert!(spp_pool(&map, &cfg).unwrap().iter().all(|&v| v == 0.75));
        }
    }

    #[test]
    fn oversized_pool_is_config_error() {
        let map = FeatureMap::<f32>::zeros(1, 6, 6);
        assert!(matches!(
            spp_pool(&map, &SppConfig::max()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn avg_full_window_gradient_is_uniform() {
        let cfg = SppConfig::new(vec![13], SppMode::Avg);
        let map = random_map(1, 13, 1);
        let g = spp_backward(&map, &cfg, &[1.0]).unwrap();
        assert!(g.data.iter().all(|&v| (v - 1.0 / 169.0).abs() < 1e-15));
    }

    #[test]
    fn max_gradient_lands_on_maxima_only() {
        let cfg = SppConfig::max();
        let map = random_map(3, 13, 2);
        let pooled = spp_pool(&map, &cfg).unwrap();
        let up = vec![1.0; pooled.len()];
        let g = spp_backward(&map, &cfg, &up).unwrap();
        for (i, &gv) in g.data.iter().enumerate() {
            if gv != 0.0 {
                assert!(pooled.contains(&map.data[i]));
            }
        }
        assert_eq!(g.data.iter().sum::<f64>(), pooled.len() as f64);
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let cfg = SppConfig::new(vec![13], SppMode::Max);
        let map = FeatureMap::new(1, 13, 13, vec![1.0f64; 169]).unwrap();
        let g = spp_backward(&map, &cfg, &[2.0]).unwrap();
        assert_eq!(g.data[0], 2.0);
        assert!(g.data[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spp_backward_matches_central_differences() {
        for mode in [SppMode::Max, SppMode::Avg] {
            let cfg = SppConfig::new(vec![3, 5, 7], mode);
            for seed in 0..3 {
                let map = random_map(4, 13, 10 + seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = cfg.output_len(4, 13, 13);
                let up: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let objective = |m: &FeatureMap<f64>| -> f64 {
                    spp_pool(m, &cfg)
                        .unwrap()
                        .iter()
                        .zip(&up)
                        .map(|(a, b)| a * b)
                        .sum()
                };
                let analytic = spp_backward(&map, &cfg, &up).unwrap();
                let h = 1e-6;
                for i in 0..map.data.len() {
                    let mut plus = map.clone();
                    plus.data[i] += h;
                    let mut minus = map.clone();
                    minus.data[i] -= h;
                    let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                    let a = analytic.data[i];
                    let scale = a.abs().max(numeric.abs()).max(1e-8);
                    assert!(
                        (a - numeric).abs() / scale <= 1e-4,
                        "{mode:?} i={i}: {a} vs {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn max_spp_is_monotone_and_avg_is_linear() {
        let max = SppConfig::max();
        let avg = SppConfig::avg();
        let x = random_map(2, 13, 3);
        let y = random_map(2, 13, 4);
        let base = spp_pool(&x, &max).unwrap();
        for i in (0..x.data.len()).step_by(7) {
            let mut bumped = x.clone();
            bumped.data[i] += 0.5;
            let out = spp_pool(&bumped, &max).unwrap();
            assert!(out.iter().zip(&base).all(|(a, b)| a >= b));
        }
        let (a, b) = (1.5, -0.25);
        let mix = FeatureMap::new(
            2,
            13,
            13,
            x.data
                .iter()
                .zip(&y.data)
                .map(|(p, q)| a * p + b * q)
                .collect(),
        )
        .unwrap();
        let lhs = spp_pool(&mix, &avg).unwrap();
        let px = spp_pool(&x, &avg).unwrap();
        let py = spp_pool(&y, &avg).unwrap();
        for i in 0..lhs.len() {
            assert!((lhs[i] - (a * px[i] + b * py[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_backbone_lands_on_13x13() {
        for c in [16, 256] {
            let spec = BackboneSpec::toy(BackboneKind::Toy, c);
            assert_eq!(spec.output_shape().unwrap(), (c, 13, 13));
            let shapes = spec.shapes(INPUT_SIDE).unwrap();
            assert_eq!(shapes[0], (16, 55, 55));
            assert_eq!(shapes[2], (16, 27, 27));
            assert_eq!(shapes[5], (32, 13, 13));
        }
        let mut bad = BackboneSpec::toy(BackboneKind::Toy, 8);
        bad.layers.pop();
        bad.layers.pop();
        bad.layers.push(LayerSpec::MaxPool {
            kernel: 3,
            stride: 2,
        });
        assert!(bad.output_shape().is_err());
    }

    #[test]
    fn zero_image_and_params_give_zero_map() {
        let spec = BackboneSpec::alexnet_like(BackboneKind::Fixed, 4, 4, 4);
        let params = BackboneParams::<f32>::zeros(&spec);
        let img = ImageBuffer::filled(227, 227, [0.0; 3]);
        let map = backbone_forward(&img, &spec, &params).unwrap();
        assert_eq!((map.channels, map.height, map.width), (4, 13, 13));
        assert!(map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let spec = BackboneSpec::alexnet_like(BackboneKind::Fixed, 4, 4, 4);
        let params = BackboneParams::<f32>::zeros(&spec);
        let img = ImageBuffer::filled(226, 227, [0.0; 3]);
        assert!(matches!(
            backbone_forward(&img, &spec, &params),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn blocked_forward_matches_traced_forward() {
        let spec = BackboneSpec::toy(BackboneKind::Toy, 8);
        let params = random_params(&spec, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = ImageBuffer::from_fn(227, 227, |_, _| [rng.random(), rng.random(), rng.random()]);
        let plain = backbone_forward::<f64>(&img, &spec, &params).unwrap();
        let (traced, _) = backbone_forward_traced::<f64>(&img, &spec, &params).unwrap();
        for (a, b) in plain.data.iter().zip(&traced.data) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (h, w, k, stride, pad) in [
            (9, 7, 3, 2, 1),
            (227, 227, 11, 4, 0),
            (27, 27, 5, 1, 2),
            (5, 6, 3, 3, 4),
            (4, 4, 4, 1, 0),
        ] {
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let g = ConvGeom {
                cin: 2,
                h,
                w,
                k,
                stride,
                pad,
                oh,
                ow,
            };
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
            let cols = im2col(&x, &g);
            let mut r = 0;
            for c in 0..2 {
                for ky in 0..k {
                    for kx in 0..k {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let expected = match (g.src(oy, ky, h), g.src(ox, kx, w)) {
                                    (Some(sy), Some(sx)) => x[c * h * w + sy * w + sx],
                                    _ => 0.0,
                                };
                                assert_eq!(cols[r * oh * ow + oy * ow + ox], expected);
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let g = ConvGeom {
            cin: 2,
            h: 9,
            w: 7,
            k: 3,
            stride: 2,
            pad: 1,
            oh: 5,
            ow: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..2 * 9 * 7)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let y: Vec<f64> = (0..g.rows() * g.cols())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
