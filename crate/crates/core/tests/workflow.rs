use vfn_core::checkpoint::Checkpoint;
use vfn_core::eval::{evaluate_image, iou, Aggregates, ProtocolConfig};
use vfn_core::features::{BackboneKind, BackboneSpec, Pooling, SppConfig};
use vfn_core::geometry::{sliding_windows, CropRect, Dims};
use vfn_core::imaging::ImageBuffer;
use vfn_core::ranker::{Architecture, Ranker};
use vfn_core::search::{best_crop, default_blur_sigma, heatmap_from_scores, FnScorer};

fn canvas() -> ImageBuffer {
    ImageBuffer::filled(300, 200, [0.3, 0.4, 0.5])
}

#[test]
fn overlap_scorer_recovers_planted_window() {
    let img = canvas();
    let windows = sliding_windows(img.dims(), &[0.5, 0.7], (4, 4));
    let target = windows[11];
    let scorer = FnScorer(|_: &ImageBuffer, r: CropRect| iou(&r, &target));
    let best = best_crop(&img, &scorer, &[0.5, 0.7], (4, 4), &[]).unwrap();
    assert_eq!(best.rect, target);
    assert_eq!(best.score, 1.0);
}

#[test]
fn protocol_rows_aggregate() {
    let img = canvas();
    let protocol = ProtocolConfig::default();
    let gts = [
        CropRect::new(10, 10, 150, 100).unwrap(),
        CropRect::new(37, 21, 201, 133).unwrap(),
    ];
    let rows: Vec<_> = gts
        .iter()
        .enumerate()
        .map(|(i, &gt)| {
            let oracle = FnScorer(move |_: &ImageBuffer, r: CropRect| iou(&r, &gt));
            evaluate_image(i, &img, gt, &oracle, &protocol).unwrap()
        })
        .collect();
    // The ground truth is always a candidate, so an oracle recovers it.
    assert!(rows
        .iter()
        .all(|r| r.chosen == r.ground_truth && r.iou == 1.0 && r.displacement == 0.0));
    let agg = Aggregates::from_rows(&rows, protocol.alpha).unwrap();
    assert_eq!(agg.count, 2);
    assert_eq!(agg.alpha_recall, 100.0);

    let constant = FnScorer(|_: &ImageBuffer, _: CropRect| 0.0);
    let row = evaluate_image(0, &img, gts[0], &constant, &protocol).unwrap();
    assert_eq!(
        row.chosen,
        sliding_windows(img.dims(), &protocol.scales, protocol.grid)[0]
    );
}

#[test]
fn heatmap_shifts_with_constant_offset() {
    let dims = Dims::new(120, 80);
    let windows = sliding_windows(dims, &[0.5, 0.8], (3, 3));
    let scores: Vec<f64> = (0..windows.len()).map(|i| (i as f64 * 0.7).sin()).collect();
    let shifted: Vec<f64> = scores.iter().map(|s| s + 2.5).collect();
    let sigma = default_blur_sigma(dims);
    let a = heatmap_from_scores(dims, &windows, &scores, sigma).unwrap();
    let b = heatmap_from_scores(dims, &windows, &shifted, sigma).unwrap();
    for (x, y) in a.smoothed.iter().zip(&b.smoothed) {
        assert!((y - x - 2.5).abs() < 1e-9);
    }
    for (x, y) in a.normalized().iter().zip(&b.normalized()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn damaged_checkpoint_is_rejected() {
    let arch = Architecture::new(
        BackboneSpec::toy(BackboneKind::Fixed, 4),
        Pooling::Spp(SppConfig::max()),
    )
    .unwrap();
    let ranker: Ranker<f32> = Ranker::init(arch, 3).unwrap();
    let mut bytes = Checkpoint::from_ranker(&ranker, 0, 0.0).encode();
    assert!(Checkpoint::decode(&bytes).is_ok());
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(Checkpoint::decode(&bytes).is_err());
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
}
