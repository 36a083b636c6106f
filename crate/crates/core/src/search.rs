//! Best-crop search, composition heatmaps and panorama scanning over a
//! trained scorer.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{sliding_windows, CropRect, Dims, PanoConfig};
use crate::imaging::ImageBuffer;
use crate::ranker::Ranker;
use crate::{Error, Real, Result};

/// Scores candidate views of an image. Implementations must return one
/// finite score per rect, in order.
pub trait WindowScorer {
    fn score_windows(&self, img: &ImageBuffer, rects: &[CropRect]) -> Result<Vec<f64>>;
}

impl<T: Real> WindowScorer for Ranker<T> {
    fn score_windows(&self, img: &ImageBuffer, rects: &[CropRect]) -> Result<Vec<f64>> {
        rects
            .iter()
            .map(|&r| self.score_view(img, r).map(|s| s.to_f64_lossy()))
            .collect()
    }
}

/// Adapts a closure `(image, rect) -> score` into a scorer.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&ImageBuffer, CropRect) -> f64> WindowScorer for FnScorer<F> {
    fn score_windows(&self, img: &ImageBuffer, rects: &[CropRect]) -> Result<Vec<f64>> {
        Ok(rects.iter().map(|&r| (self.0)(img, r)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCrop {
    pub rect: CropRect,
    pub score: f64,
}

pub fn score_crop<S: WindowScorer + ?Sized>(
    img: &ImageBuffer,
    rect: CropRect,
    scorer: &S,
) -> Result<f64> {
    rect.ensure_inside(img.dims())?;
    Ok(scorer.score_windows(img, &[rect])?[0])
}

/// Highest score; the earliest candidate wins ties.
pub fn argmax(rects: &[CropRect], scores: &[f64]) -> Result<ScoredCrop> {
    if rects.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    if rects.len() != scores.len() {
        return Err(Error::Shape {
            context: "candidate scores",
            expected: rects.len(),
            actual: scores.len(),
        });
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFinite {
                layer: "candidate score".into(),
            });
        }
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(ScoredCrop {
        rect: rects[best],
        score: scores[best],
    })
}

pub fn best_of<S: WindowScorer + ?Sized>(
    img: &ImageBuffer,
    scorer: &S,
    candidates: &[CropRect],
) -> Result<ScoredCrop> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    for r in candidates {
        r.ensure_inside(img.dims())?;
    }
    let scores = scorer.score_windows(img, candidates)?;
    argmax(candidates, &scores)
}

/// Argmax over the sliding-window lattice followed by `extra` candidates.
pub fn best_crop<S: WindowScorer + ?Sized>(
    img: &ImageBuffer,
    scorer: &S,
    scales: &[f64],
    grid: (u32, u32),
    extra: &[CropRect],
) -> Result<ScoredCrop> {
    let mut candidates = sliding_windows(img.dims(), scales, grid);
    candidates.extend_from_slice(extra);
    best_of(img, scorer, &candidates)
}

/// Per-pixel sum of the scores of every window covering it, with counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub width: u32,
    pub height: u32,
    pub sum: Vec<f64>,
    pub coverage: Vec<u32>,
}

impl ScalarField {
    pub fn accumulate(dims: Dims, rects: &[CropRect], scores: &[f64]) -> Result<Self> {
        if rects.len() != scores.len() {
            return Err(Error::Shape {
                context: "window scores",
                expected: rects.len(),
                actual: scores.len(),
            });
        }
        let (w, h) = (dims.width as usize, dims.height as usize);
        let stride = w + 1;
        let mut dsum = vec![0.0f64; stride * (h + 1)];
        let mut dcov = vec![0i64; stride * (h + 1)];
        for (r, &s) in rects.iter().zip(scores) {
            r.ensure_inside(dims)?;
            let (x0, y0) = (r.x as usize, r.y as usize);
            let (x1, y1) = (r.right() as usize, r.bottom() as usize);
            for (i, sign) in [
                (y0 * stride + x0, 1),
                (y0 * stride + x1, -1),
                (y1 * stride + x0, -1),
                (y1 * stride + x1, 1),
            ] {
                dsum[i] += sign as f64 * s;
                dcov[i] += sign;
            }
        }
        // 2-D prefix sums over the difference arrays.
        for y in 0..=h {
            for x in 0..=w {
                let i = y * stride + x;
                if x > 0 {
                    dsum[i] += dsum[i - 1];
                    dcov[i] += dcov[i - 1];
                }
            }
        }
        for y in 1..=h {
            for x in 0..=w {
                let i = y * stride + x;
                dsum[i] += dsum[i - stride];
                dcov[i] += dcov[i - stride];
            }
        }
        let mut sum = Vec::with_capacity(w * h);
        let mut coverage = Vec::with_capacity(w * h);
        for y in 0..h {
            sum.extend_from_slice(&dsum[y * stride..y * stride + w]);
            coverage.extend(dcov[y * stride..y * stride + w].iter().map(|&c| c as u32));
        }
        Ok(Self {
            width: dims.width,
            height: dims.height,
            sum,
            coverage,
        })
    }

    pub fn fully_covered(&self) -> bool {
        self.coverage.iter().all(|&c| c > 0)
    }

    /// Mean covering-window score per pixel; undefined pixels are an error.
    pub fn mean(&self) -> Result<Vec<f64>> {
        if !self.fully_covered() {
            return Err(Error::Config("some pixels are covered by no window".into()));
        }
        Ok(self
            .sum
            .iter()
            .zip(&self.coverage)
            .map(|(s, &c)| s / c as f64)
            .collect())
    }
}

/// Separable Gaussian blur with edge clamping; `sigma <= 0` is a no-op.
pub fn gaussian_blur(values: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) || values.is_empty() {
        return values.to_vec();
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let pass =
        |src: &[f64], len: usize, lines: usize, at: &dyn Fn(usize, usize) -> usize| -> Vec<f64> {
            let mut out = vec![0.0; src.len()];
            for line in 0..lines {
                for p in 0..len {
                    let mut acc = 0.0;
                    for (t, k) in kernel.iter().enumerate() {
                        let q =
                            (p as isize + t as isize - radius).clamp(0, len as isize - 1) as usize;
                        acc += k * src[at(line, q)];
                    }
                    out[at(line, p)] = acc;
                }
            }
            out
        };
    let rows = pass(values, width, height, &|line, p| line * width + p);
    pass(&rows, height, width, &|line, p| p * width + line)
}

/// Default smoothing: 2% of the image diagonal.
pub fn default_blur_sigma(dims: Dims) -> f64 {
    0.02 * libm::hypot(dims.width as f64, dims.height as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub field: ScalarField,
    /// Blurred per-pixel mean score, row-major.
    pub smoothed: Vec<f64>,
}

impl Heatmap {
    pub fn width(&self) -> u32 {
        self.field.width
    }

    pub fn height(&self) -> u32 {
        self.field.height
    }

    /// Min-max normalized to `[0, 1]`; a flat field maps to zeros.
    pub fn normalized(&self) -> Vec<f64> {
        normalize_with(&self.smoothed, &self.smoothed)
    }

    /// Mean smoothed value over `rect`.
    pub fn region_mean(&self, values: &[f64], rect: CropRect) -> f64 {
        let w = self.field.width as usize;
        let mut acc = 0.0;
        for y in rect.y as usize..rect.bottom() as usize {
            acc += values[y * w + rect.x as usize..y * w + rect.right() as usize]
                .iter()
                .sum::<f64>();
        }
        acc / rect.area() as f64
    }
}

/// Min-max normalizes `values` using the range of `reference`.
pub fn normalize_with(values: &[f64], reference: &[f64]) -> Vec<f64> {
    let lo = reference.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect()
}

/// Composition heat: every pixel takes the mean score of the windows
/// covering it, then a Gaussian blur of `blur_sigma` pixels.
pub fn heatmap<S: WindowScorer + ?Sized>(
    img: &ImageBuffer,
    scorer: &S,
    scales: &[f64],
    grid: (u32, u32),
    blur_sigma: f64,
) -> Result<Heatmap> {
    let windows = sliding_windows(img.dims(), scales, grid);
    if windows.is_empty() {
        return Err(Error::Empty("heatmap windows"));
    }
    let scores = scorer.score_windows(img, &windows)?;
    heatmap_from_scores(img.dims(), &windows, &scores, blur_sigma)
}

pub fn heatmap_from_scores(
    dims: Dims,
    windows: &[CropRect],
    scores: &[f64],
    blur_sigma: f64,
) -> Result<Heatmap> {
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            layer: alloc::format!("window score {s}"),
        });
    }
    let field = ScalarField::accumulate(dims, windows, scores)?;
    let mean = field.mean()?;
    let smoothed = gaussian_blur(&mean, dims.width as usize, dims.height as usize, blur_sigma);
    Ok(Heatmap { field, smoothed })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanoResult {
    pub best: ScoredCrop,
    pub candidates: usize,
}

/// Best view among the panorama lattice.
pub fn pano_scan<S: WindowScorer + ?Sized>(
    img: &ImageBuffer,
    scorer: &S,
    cfg: &PanoConfig,
) -> Result<PanoResult> {
    let candidates = cfg.candidates(img.dims())?;
    let best = best_of(img, scorer, &candidates)?;
    Ok(PanoResult {
        best,
        candidates: candidates.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pano_candidates;

    fn gray(w: u32, h: u32) -> ImageBuffer {
        ImageBuffer::filled(w, h, [0.5; 3])
    }

    /// Prefers windows whose center is near `target`.
    fn near(target: (f64, f64)) -> FnScorer<impl Fn(&ImageBuffer, CropRect) -> f64> {
        FnScorer(move |_: &ImageBuffer, r: CropRect| {
            let (cx, cy) = r.center();
            -((cx - target.0).powi(2) + (cy - target.1).powi(2))
        })
    }

    #[test]
    fn single_candidate_is_returned() {
        let img = gray(100, 80);
        let r = CropRect::new(10, 10, 20, 20).unwrap();
        let out = best_crop(&img, &near((0.0, 0.0)), &[], (5, 5), &[r]).unwrap();
        assert_eq!(out.rect, r);
        assert!(best_crop(&img, &near((0.0, 0.0)), &[], (5, 5), &[]).is_err());
    }

    #[test]
    fn ties_pick_earliest_candidate() {
        let img = gray(100, 80);
        let constant = FnScorer(|_: &ImageBuffer, _: CropRect| 1.0);
        let out = best_crop(&img, &constant, &[0.5, 0.9], (5, 5), &[]).unwrap();
        assert_eq!(out.rect, sliding_windows(img.dims(), &[0.5], (1, 1))[0]);
    }

    #[test]
    fn extra_candidate_either_wins_or_changes_nothing() {
        let img = gray(120, 90);
        let s = near((70.0, 40.0));
        let base = best_crop(&img, &s, &[0.5, 0.7], (5, 5), &[]).unwrap();
        for r in [
            CropRect::new(45, 15, 50, 50).unwrap(),
            CropRect::new(0, 0, 10, 10).unwrap(),
        ] {
            let with = best_crop(&img, &s, &[0.5, 0.7], (5, 5), &[r]).unwrap();
            assert!(with.rect == base.rect || with.rect == r);
            assert!(with.score >= score_crop(&img, with.rect, &s).unwrap());
            assert!(with.score >= base.score);
        }
    }

    #[test]
    fn full_image_window_gives_constant_field() {
        let img = gray(40, 30);
        let hm = heatmap(&img, &near((3.0, 3.0)), &[1.0], (1, 1), 2.0).unwrap();
        let first = hm.smoothed[0];
        assert!(hm.smoothed.iter().all(|v| (v - first).abs() < 1e-12));
        assert!(hm.normalized().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn protocol_grid_covers_every_pixel() {
        for (w, h) in [(100, 100), (333, 121), (37, 91)] {
            let d = Dims::new(w, h);
            let windows = sliding_windows(d, &[0.5, 0.6, 0.7, 0.8, 0.9], (5, 5));
            let field = ScalarField::accumulate(d, &windows, &vec![0.0; windows.len()]).unwrap();
            assert!(field.fully_covered());
        }
        let d = Dims::new(50, 50);
        let field =
            ScalarField::accumulate(d, &[CropRect::new(0, 0, 10, 10).unwrap()], &[1.0]).unwrap();
        assert!(field.mean().is_err());
    }

    #[test]
    fn accumulation_matches_brute_force_and_is_shift_linear() {
        let d = Dims::new(30, 20);
        let windows = sliding_windows(d, &[0.5, 0.7, 0.9], (4, 3));
        let scores: Vec<f64> = (0..windows.len())
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let field = ScalarField::accumulate(d, &windows, &scores).unwrap();
        for y in 0..20u32 {
            for x in 0..30u32 {
                let (mut s, mut c) = (0.0, 0);
                for (r, v) in windows.iter().zip(&scores) {
                    if x >= r.x && (x as u64) < r.right() && y >= r.y && (y as u64) < r.bottom() {
                        s += v;
                        c += 1;
                    }
                }
                let i = (y * 30 + x) as usize;
                assert_eq!(field.coverage[i], c);
                assert!((field.sum[i] - s).abs() < 1e-9);
            }
        }
        let shifted: Vec<f64> = scores.iter().map(|s| s + 2.5).collect();
        let a = heatmap_from_scores(d, &windows, &scores, 1.5).unwrap();
        let b = heatmap_from_scores(d, &windows, &shifted, 1.5).unwrap();
        for (p, q) in a.smoothed.iter().zip(&b.smoothed) {
            assert!((q - p - 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let v = vec![0.3; 12 * 7];
        assert!(gaussian_blur(&v, 12, 7, 2.0)
            .iter()
            .all(|x| (x - 0.3).abs() < 1e-12));
        let mut spike = vec![0.0; 41 * 41];
        spike[20 * 41 + 20] = 1.0;
        let b = gaussian_blur(&spike, 41, 41, 2.0);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(b[20 * 41 + 20] < 1.0 && b[20 * 41 + 21] > 0.0);
    }

    #[test]
    fn pano_scan_finds_unique_maximum_regardless_of_order() {
        let img = gray(600, 120);
        let s = near((450.0, 60.0));
        let cfg = PanoConfig::default();
        let out = pano_scan(&img, &s, &cfg).unwrap();
        assert_eq!(out.candidates, cfg.candidates(img.dims()).unwrap().len());
        let mut rev = cfg.candidates(img.dims()).unwrap();
        rev.reverse();
        let scores = s.score_windows(&img, &rev).unwrap();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if scores.iter().filter(|&&v| v == max).count() == 1 {
            assert_eq!(argmax(&rev, &scores).unwrap().rect, out.best.rect);
        }
        let one = pano_candidates(img.dims(), &[(600, 120)], 0.5).unwrap();
        assert_eq!(
            best_of(&img, &s, &one).unwrap().rect,
            img.dims().full_rect()
        );
    }
}
