//! RGB rasters with unit-interval intensities, cropping, bilinear resizing
//! and photometric augmentation.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::geometry::{CropRect, Dims};
use crate::{Error, Result};

pub const CHANNELS: usize = 3;

/// Row-major `height × width × 3` raster, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRect(format!(
                "image {width}x{height} is empty"
            )));
        }
        let expected = width as usize * height as usize * CHANNELS;
        if data.len() != expected {
            return Err(Error::Shape {
                context: "image data",
                expected,
                actual: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * CHANNELS)
            .collect();
        Self::new(width, height, data).expect("fill colour in range")
    }

    /// Builds an image from a per-pixel colour function; values are clamped.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * CHANNELS
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = self.index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = self.index(x, y);
        for c in 0..CHANNELS {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Copies `rect` out of the image. Out-of-bounds rects are an error.
    pub fn extract_crop(&self, rect: CropRect) -> Result<ImageBuffer> {
        rect.ensure_inside(self.dims())?;
        let row = rect.w as usize * CHANNELS;
        let mut data = Vec::with_capacity(row * rect.h as usize);
        for y in rect.y..rect.y + rect.h {
            let start = self.index(rect.x, y);
            data.extend_from_slice(&self.data[start..start + row]);
        }
        Ok(ImageBuffer {
            width: rect.w,
            height: rect.h,
            data,
        })
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> ImageBuffer {
        if width == self.width && height == self.height {
            return self.clone();
        }
        self.resize_region(self.dims().full_rect(), width, height)
    }

    /// Resizes the sub-window `rect` straight to `width × height`; equal to
    /// `extract_crop(rect)` followed by `resize_bilinear`.
    pub fn crop_resized(&self, rect: CropRect, width: u32, height: u32) -> Result<ImageBuffer> {
        rect.ensure_inside(self.dims())?;
        if rect.w == width && rect.h == height {
            return self.extract_crop(rect);
        }
        Ok(self.resize_region(rect, width, height))
    }

    fn resize_region(&self, rect: CropRect, width: u32, height: u32) -> ImageBuffer {
        let (width, height) = (width.max(1), height.max(1));
        let taps = |out: u32, src: u32| -> Vec<(usize, usize, f32)> {
            let scale = src as f64 / out as f64;
            (0..out)
                .map(|i| {
                    let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                    let lo = libm::floor(pos) as usize;
                    let hi = (lo + 1).min(src as usize - 1);
                    (lo, hi, (pos - lo as f64) as f32)
                })
                .collect()
        };
        let xs = taps(width, rect.w);
        let ys = taps(height, rect.h);
        let mut data = Vec::with_capacity(width as usize * height as usize * CHANNELS);
        for &(y0, y1, fy) in &ys {
            let r0 = self.index(rect.x, rect.y + y0 as u32);
            let r1 = self.index(rect.x, rect.y + y1 as u32);
            for &(x0, x1, fx) in &xs {
                for c in 0..CHANNELS {
                    let p = |row: usize, x: usize| self.data[row + x * CHANNELS + c];
                    let top = p(r0, x0) + (p(r0, x1) - p(r0, x0)) * fx;
                    let bottom = p(r1, x0) + (p(r1, x1) - p(r1, x0)) * fx;
                    data.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
                }
            }
        }
        ImageBuffer {
            width,
            height,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> ImageBuffer {
        let mut data = Vec::with_capacity(self.data.len());
        let row = self.width as usize * CHANNELS;
        for r in self.data.chunks_exact(row) {
            for px in r.chunks_exact(CHANNELS).rev() {
                data.extend_from_slice(px);
            }
        }
        ImageBuffer {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Per-channel means.
    ///
    /// Each row is summed as mirrored pairs `(x, W-1-x)`, so a horizontal
    /// flip yields bit-identical means.
    pub fn channel_means(&self) -> [f64; 3] {
        let w = self.width as usize;
        let mut sums = [0.0f64; 3];
        for row in self.data.chunks_exact(w * CHANNELS) {
            for c in 0..CHANNELS {
                let at = |x: usize| row[x * CHANNELS + c] as f64;
                let mut acc = 0.0;
                for x in 0..w / 2 {
                    acc += at(x) + at(w - 1 - x);
                }
                if w % 2 == 1 {
                    acc += at(w / 2);
                }
                sums[c] += acc;
            }
        }
        let n = (self.width as u64 * self.height as u64) as f64;
        sums.map(|s| s / n)
    }
}

/// Training-time photometric and mirror jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub brightness_delta_max: f32,
    pub contrast_range: (f32, f32),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness_delta_max: 0.05,
            contrast_range: (0.9, 1.1),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            brightness_delta_max: 0.0,
            contrast_range: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.contrast_range;
        if !(0.0..=1.0).contains(&self.flip_prob)
            || !(0.0..=0.3).contains(&self.brightness_delta_max)
            || !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi)
        {
            return Err(Error::Config(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// Optional mirror, then `v' = clamp((v - mean) * c + mean + b, 0, 1)` per
/// channel with contrast `c` and brightness `b` drawn from `cfg`.
pub fn augment<R: Rng + ?Sized>(
    img: &ImageBuffer,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> ImageBuffer {
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let (lo, hi) = cfg.contrast_range;
    let contrast = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let d = cfg.brightness_delta_max;
    let brightness = if d > 0.0 {
        rng.random_range(-d..=d)
    } else {
        0.0
    };

    let mut out = if flip {
        img.flip_horizontal()
    } else {
        img.clone()
    };
    if contrast == 1.0 && brightness == 0.0 {
        return out;
    }
    let means = out.channel_means();
    // v*c + m*(1-c) + b is the pivot form rearranged; exact when c == 1.
    let offsets = means.map(|m| m as f32 * (1.0 - contrast) + brightness);
    for px in out.data.chunks_exact_mut(CHANNELS) {
        for c in 0..CHANNELS {
            px[c] = (px[c] * contrast + offsets[c]).clamp(0.0, 1.0);
        }
    }
    out
}
