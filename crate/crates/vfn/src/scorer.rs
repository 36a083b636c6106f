//! Window scoring spread over the rayon pool.

use rayon::prelude::*;
use vfn_core::geometry::CropRect;
use vfn_core::imaging::ImageBuffer;
use vfn_core::ranker::Ranker;
use vfn_core::search::WindowScorer;
use vfn_core::Real;

/// Scores windows in parallel; results keep candidate order, so they are
/// identical to sequential scoring.
pub struct ParallelScorer<'a, T>(pub &'a Ranker<T>);

impl<T: Real> WindowScorer for ParallelScorer<'_, T> {
    fn score_windows(&self, img: &ImageBuffer, rects: &[CropRect]) -> vfn_core::Result<Vec<f64>> {
        rects
            .par_iter()
            .map(|&r| self.0.score_view(img, r).map(|s| s.to_f64_lossy()))
            .collect()
    }
}
