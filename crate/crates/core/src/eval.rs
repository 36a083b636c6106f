//! Cropping-accuracy metrics and the sliding-window evaluation protocol.

use alloc::vec::Vec;

use crate::geometry::{sliding_windows, CropRect, Dims};
use crate::imaging::ImageBuffer;
use crate::search::{best_of, WindowScorer};
use crate::{Error, Result};

/// Intersection over union of two positive-area rects.
pub fn iou(a: &CropRect, b: &CropRect) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Mean absolute offset of the four edges; left/right normalized by the
/// image width, top/bottom by its height.
pub fn boundary_displacement(a: &CropRect, b: &CropRect, dims: Dims) -> f64 {
    let (w, h) = (dims.width as f64, dims.height as f64);
    let dx = |p: u64, q: u64| (p as f64 - q as f64).abs() / w;
    let dy = |p: u64, q: u64| (p as f64 - q as f64).abs() / h;
    (dx(a.x as u64, b.x as u64)
        + dx(a.right(), b.right())
        + dy(a.y as u64, b.y as u64)
        + dy(a.bottom(), b.bottom()))
        / 4.0
}

/// Percentage of IoUs strictly greater than `alpha`.
pub fn alpha_recall(ious: &[f64], alpha: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Empty("IoU list"));
    }
    let hits = ious.iter().filter(|&&v| v > alpha).count();
    Ok(100.0 * hits as f64 / ious.len() as f64)
}

/// Candidate protocol: windows at each scale on a uniform grid, plus the
/// ground truth when `include_ground_truth` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub scales: Vec<f64>,
    pub grid: (u32, u32),
    pub alpha: f64,
    pub include_ground_truth: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            scales: alloc::vec![0.5, 0.6, 0.7, 0.8, 0.9],
            grid: (5, 5),
            alpha: 0.75,
            include_ground_truth: true,
        }
    }
}

impl ProtocolConfig {
    /// Sliding windows first, ground truth last.
    pub fn candidates(&self, dims: Dims, ground_truth: &CropRect) -> Vec<CropRect> {
        let mut c = sliding_windows(dims, &self.scales, self.grid);
        if self.include_ground_truth {
            c.push(*ground_truth);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub index: usize,
    pub chosen: CropRect,
    pub ground_truth: CropRect,
    pub score: f64,
    pub iou: f64,
    pub displacement: f64,
    pub hit: bool,
}

impl BenchRow {
    pub fn new(
        index: usize,
        chosen: CropRect,
        score: f64,
        ground_truth: CropRect,
        dims: Dims,
        alpha: f64,
    ) -> Self {
        let v = iou(&chosen, &ground_truth);
        Self {
            index,
            chosen,
            ground_truth,
            score,
            iou: v,
            displacement: boundary_displacement(&chosen, &ground_truth, dims),
            hit: v > alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregates {
    pub count: usize,
    pub mean_iou: f64,
    pub mean_displacement: f64,
    pub alpha_recall: f64,
}

impl Aggregates {
    pub fn from_rows(rows: &[BenchRow], alpha: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("benchmark rows"));
        }
        let n = rows.len() as f64;
        let ious: Vec<f64> = rows.iter().map(|r| r.iou).collect();
        Ok(Self {
            count: rows.len(),
            mean_iou: ious.iter().sum::<f64>() / n,
            mean_displacement: rows.iter().map(|r| r.displacement).sum::<f64>() / n,
            alpha_recall: alpha_recall(&ious, alpha)?,
        })
    }
}

/// Picks the best protocol candidate for one annotated image.
pub fn evaluate_image<S: WindowScorer + ?Sized>(
    index: usize,
    img: &ImageBuffer,
    ground_truth: CropRect,
    scorer: &S,
    protocol: &ProtocolConfig,
) -> Result<BenchRow> {
    ground_truth.ensure_inside(img.dims())?;
    let candidates = protocol.candidates(img.dims(), &ground_truth);
    let best = best_of(img, scorer, &candidates)?;
    Ok(BenchRow::new(
        index,
        best.rect,
        best.score,
        ground_truth,
        img.dims(),
        protocol.alpha,
    ))
}
