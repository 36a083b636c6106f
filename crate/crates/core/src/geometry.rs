//! Rectangles, ranking-unit crop sampling and search-window generators.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::{Error, Result};

/// Smallest side a sampled crop may have after perturbation.
pub const MIN_CROP_SIDE: u32 = 16;
/// Smallest source image side accepted by the crop sampler.
pub const MIN_IMAGE_SIDE: u32 = 32;

/// Rounds half away from zero, the convention for every fractional pixel
/// coordinate in this crate.
#[inline]
pub fn round_px(v: f64) -> i64 {
    libm::round(v) as i64
}

/// Width and height of an image in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub width: u32,
    pub height: u32,
}

impl Dims {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    pub fn full_rect(&self) -> CropRect {
        CropRect {
            x: 0,
            y: 0,
            w: self.width,
            h: self.height,
        }
    }
}

/// Axis-aligned rectangle in pixel coordinates; `w` and `h` are positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropRect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidRect(format!(
                "({x},{y},{w},{h}) has zero extent"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    #[inline]
    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    #[inline]
    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    #[inline]
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn is_inside(&self, dims: Dims) -> bool {
        self.w > 0
            && self.h > 0
            && self.right() <= dims.width as u64
            && self.bottom() <= dims.height as u64
    }

    pub fn ensure_inside(&self, dims: Dims) -> Result<()> {
        if self.is_inside(dims) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width: dims.width,
                height: dims.height,
            })
        }
    }

    /// Overlap area with `other`, zero when disjoint.
    pub fn intersection_area(&self, other: &CropRect) -> u64 {
        let x0 = self.x.max(other.x) as u64;
        let y0 = self.y.max(other.y) as u64;
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }

    /// The rect expressed in coordinates of the enclosing `outer` rect's
    /// parent; `self` is relative to `outer`.
    pub fn offset_by(&self, outer: &CropRect) -> CropRect {
        CropRect {
            x: self.x + outer.x,
            y: self.y + outer.y,
            w: self.w,
            h: self.h,
        }
    }

    /// Builds a rect from fractional geometry, rounding and then clamping it
    /// inside `dims` with sides of at least `min_side` (or the image side).
    pub fn clamped_from_f64(x: f64, y: f64, w: f64, h: f64, dims: Dims, min_side: u32) -> Self {
        let clamp_axis = |origin: f64, len: f64, limit: u32| -> (u32, u32) {
            let lo = min_side.min(limit).max(1) as i64;
            let len = round_px(len).clamp(lo, limit as i64);
            let origin = round_px(origin).clamp(0, limit as i64 - len);
            (origin as u32, len as u32)
        };
        let (x, w) = clamp_axis(x, w, dims.width);
        let (y, h) = clamp_axis(y, h, dims.height);
        CropRect { x, y, w, h }
    }
}

/// Which sampling rule produced a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CropKind {
    Border,
    Square,
    Window,
    Pano,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropCandidate {
    pub rect: CropRect,
    pub kind: CropKind,
    pub scale: f64,
    /// Corner index (0..4, TL TR BL BR) for border crops, position along the
    /// long axis for square crops.
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub scales: Vec<f64>,
    pub num_square: u32,
    pub perturb_frac: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            scales: alloc::vec![0.5, 0.6],
            num_square: 3,
            perturb_frac: 0.05,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("sampler needs at least one scale".into()));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::Config(format!("sampler scale {s} outside (0,1)")));
        }
        if self.num_square == 0 {
            return Err(Error::Config("num_square must be at least 1".into()));
        }
        if !(0.0..=0.2).contains(&self.perturb_frac) {
            return Err(Error::Config(format!(
                "perturb_frac {} outside [0, 0.2]",
                self.perturb_frac
            )));
        }
        Ok(())
    }

    /// Crops emitted per source image.
    pub fn crops_per_image(&self) -> usize {
        self.scales.len() * (4 + self.num_square as usize)
    }
}

/// Border and square crops of one source image, perturbed and clamped.
///
/// Per scale: four corner-anchored windows of the image's aspect, then
/// `num_square` squares spaced evenly along the long axis.
pub fn sample_crops<R: Rng + ?Sized>(
    dims: Dims,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<CropCandidate>> {
    cfg.validate()?;
    if dims.width < MIN_IMAGE_SIDE || dims.height < MIN_IMAGE_SIDE {
        return Err(Error::ImageTooSmall {
            width: dims.width,
            height: dims.height,
            reason: "sides must be at least 32 px",
        });
    }
    let smallest = cfg.scales.iter().copied().fold(f64::INFINITY, f64::min);
    let short = dims.width.min(dims.height) as f64;
    if round_px(smallest * short) < MIN_CROP_SIDE as i64 {
        return Err(Error::ImageTooSmall {
            width: dims.width,
            height: dims.height,
            reason: "smallest scaled window is under 16 px",
        });
    }

    let (wf, hf) = (dims.width as f64, dims.height as f64);
    let mut out = Vec::with_capacity(cfg.crops_per_image());
    for &s in &cfg.scales {
        let bw = round_px(s * wf) as u32;
        let bh = round_px(s * hf) as u32;
        let corners = [
            (0, 0),
            (dims.width - bw, 0),
            (0, dims.height - bh),
            (dims.width - bw, dims.height - bh),
        ];
        for (slot, (x, y)) in corners.into_iter().enumerate() {
            let rect = CropRect { x, y, w: bw, h: bh };
            out.push(CropCandidate {
                rect: perturb(rect, dims, cfg.perturb_frac, rng),
                kind: CropKind::Border,
                scale: s,
                slot: slot as u32,
            });
        }
        for (slot, rect) in square_crops(dims, s, cfg.num_square)
            .into_iter()
            .enumerate()
        {
            out.push(CropCandidate {
                rect: perturb(rect, dims, cfg.perturb_frac, rng),
                kind: CropKind::Square,
                scale: s,
                slot: slot as u32,
            });
        }
    }
    Ok(out)
}

/// Unperturbed square crops of side `s * min(W, H)`, centered at fractions
/// (k+1)/(n+1) of the long axis. Ties (square images) run along x.
pub fn square_crops(dims: Dims, scale: f64, count: u32) -> Vec<CropRect> {
    let side = round_px(scale * dims.width.min(dims.height) as f64).max(1) as u32;
    let horizontal = dims.width >= dims.height;
    let (long, short) = if horizontal {
        (dims.width, dims.height)
    } else {
        (dims.height, dims.width)
    };
    let cross = round_px((short as f64 - side as f64) / 2.0).max(0) as u32;
    (0..count)
        .map(|k| {
            let center = (k + 1) as f64 / (count + 1) as f64 * long as f64;
            let along = round_px(center - side as f64 / 2.0).clamp(0, (long - side) as i64) as u32;
            if horizontal {
                CropRect {
                    x: along,
                    y: cross,
                    w: side,
                    h: side,
                }
            } else {
                CropRect {
                    x: cross,
                    y: along,
                    w: side,
                    h: side,
                }
            }
        })
        .collect()
}

/// Jitters origin by up to `frac` of the size and scales each side by a
/// factor in `[1 - frac, 1 + frac]`, then clamps inside the image.
pub fn perturb<R: Rng + ?Sized>(rect: CropRect, dims: Dims, frac: f64, rng: &mut R) -> CropRect {
    if frac <= 0.0 {
        return rect;
    }
    let (w, h) = (rect.w as f64, rect.h as f64);
    let dx = rng.random_range(-frac..=frac) * w;
    let dy = rng.random_range(-frac..=frac) * h;
    let sw = rng.random_range(1.0 - frac..=1.0 + frac);
    let sh = rng.random_range(1.0 - frac..=1.0 + frac);
    CropRect::clamped_from_f64(
        rect.x as f64 + dx,
        rect.y as f64 + dy,
        w * sw,
        h * sh,
        dims,
        MIN_CROP_SIDE,
    )
}

/// Evenly spaced lattice positions covering `0..=span`.
fn lattice(span: u32, points: u32) -> impl Iterator<Item = u32> {
    (0..points).map(move |i| {
        if points <= 1 {
            0
        } else {
            round_px(i as f64 * span as f64 / (points - 1) as f64) as u32
        }
    })
}

/// Search windows at each scale of the image dimensions on a `gx × gy`
/// origin lattice that includes both extreme positions.
///
/// Scale-major, then rows, then columns. Exactly `scales.len() * gx * gy`
/// windows; duplicates are kept so the count is stable.
pub fn sliding_windows(dims: Dims, scales: &[f64], grid: (u32, u32)) -> Vec<CropRect> {
    let (gx, gy) = (grid.0.max(1), grid.1.max(1));
    let mut out = Vec::with_capacity(scales.len() * (gx * gy) as usize);
    for &s in scales {
        let w = round_px(s * dims.width as f64).clamp(1, dims.width as i64) as u32;
        let h = round_px(s * dims.height as f64).clamp(1, dims.height as i64) as u32;
        for y in lattice(dims.height - h, gy) {
            for x in lattice(dims.width - w, gx) {
                out.push(CropRect { x, y, w, h });
            }
        }
    }
    out
}

/// Candidate views for panorama scanning: a lattice of origins per window
/// size with step `stride_frac` of that size, deduplicated in first-seen
/// order.
pub fn pano_candidates(
    dims: Dims,
    sizes: &[(u32, u32)],
    stride_frac: f64,
) -> Result<Vec<CropRect>> {
    if sizes.is_empty() {
        return Err(Error::Empty("panorama window sizes"));
    }
    if !(stride_frac > 0.0) {
        return Err(Error::Config(format!(
            "stride_frac {stride_frac} must be positive"
        )));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &(w, h) in sizes {
        if w == 0 || h == 0 || w > dims.width || h > dims.height {
            return Err(Error::Config(format!(
                "window {w}x{h} does not fit a {}x{} panorama",
                dims.width, dims.height
            )));
        }
        let sx = round_px(stride_frac * w as f64).max(1) as u32;
        let sy = round_px(stride_frac * h as f64).max(1) as u32;
        for y in (0..=dims.height - h).step_by(sy as usize) {
            for x in (0..=dims.width - w).step_by(sx as usize) {
                let r = CropRect { x, y, w, h };
                if seen.insert(r) {
                    out.push(r);
                }
            }
        }
    }
    Ok(out)
}

/// Panorama lattice described relative to the panorama height.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoConfig {
    /// Window heights as fractions of the panorama height.
    pub height_fracs: Vec<f64>,
    /// Window aspect ratios (width / height).
    pub aspects: Vec<f64>,
    pub stride_frac: f64,
}

impl Default for PanoConfig {
    /// Yields 2,112 candidates on a 6000×1200 panorama.
    fn default() -> Self {
        Self {
            height_fracs: alloc::vec![1.0, 0.9, 0.8, 0.7],
            aspects: alloc::vec![3.0 / 4.0, 1.0, 4.0 / 3.0, 2.0],
            stride_frac: 0.1,
        }
    }
}

impl PanoConfig {
    /// Concrete window sizes for a panorama, skipping ones that do not fit.
    pub fn sizes(&self, dims: Dims) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for &hf in &self.height_fracs {
            let h = round_px(hf * dims.height as f64).clamp(1, dims.height as i64) as u32;
            for &a in &self.aspects {
                let w = round_px(a * h as f64).max(1) as u32;
                if w <= dims.width {
                    out.push((w, h));
                }
            }
        }
        out
    }

    pub fn candidates(&self, dims: Dims) -> Result<Vec<CropRect>> {
        pano_candidates(dims, &self.sizes(dims), self.stride_frac)
    }
}
