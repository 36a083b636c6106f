use vfn::dataset::{mine_pairs, PairManifest, Split};
use vfn::io::{load_image, save_png};
use vfn::synth::{generate, SynthConfig};
use vfn_core::checkpoint::Checkpoint;
use vfn_core::features::{BackboneKind, BackboneSpec, Pooling, SppConfig};
use vfn_core::geometry::{CropRect, SamplerConfig};
use vfn_core::imaging::ImageBuffer;
use vfn_core::ranker::{Architecture, Ranker};
use vfn_core::search::WindowScorer;

fn gradient_image() -> ImageBuffer {
    ImageBuffer::from_fn(96, 64, |x, y| {
        let (u, v) = (x as f32 / 95.0, y as f32 / 63.0);
        [u, v, 0.5 * (u + v)]
    })
}

fn golden_ranker() -> Ranker<f32> {
    let arch = Architecture::new(
        BackboneSpec::toy(BackboneKind::Fixed, 8),
        Pooling::Spp(SppConfig::max()),
    )
    .unwrap();
    Ranker::init(arch, 1234).unwrap()
}

#[test]
fn golden_window_score() {
    let ranker = golden_ranker();
    let img = gradient_image();
    let rect = CropRect::new(10, 6, 60, 40).unwrap();
    let score = ranker.score_windows(&img, &[rect]).unwrap()[0];
    assert!(
        (score - GOLDEN).abs() <= 1e-5 * GOLDEN.abs().max(1.0),
        "{score}"
    );
}

// Pinned output of the seeded scorer; guards resize, backbone and head.
const GOLDEN: f64 = -0.698_472_440_242_767_3;

#[test]
fn checkpoint_survives_disk_and_scores_identically() {
    let dir = tempfile::tempdir().unwrap();
    let ranker = golden_ranker();
    let path = dir.path().join("m.vfnc");
    std::fs::write(&path, Checkpoint::from_ranker(&ranker, 7, 0.25).encode()).unwrap();
    let back = Checkpoint::decode(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(
        back.encode(),
        Checkpoint::from_ranker(&ranker, 7, 0.25).encode()
    );
    let img = gradient_image();
    let rect = CropRect::new(0, 0, 64, 64).unwrap();
    assert_eq!(
        ranker.score_windows(&img, &[rect]).unwrap(),
        back.ranker().score_windows(&img, &[rect]).unwrap()
    );
}

#[test]
fn png_round_trip_is_lossless_at_8_bits() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageBuffer::from_fn(40, 36, |x, y| {
        [(x % 256) as f32 / 255.0, (y % 256) as f32 / 255.0, 1.0]
    });
    let path = dir.path().join("x.png");
    save_png(&img, &path).unwrap();
    let back = load_image(&path).unwrap();
    assert_eq!((back.width(), back.height()), (40, 36));
    assert_eq!(back.pixel(7, 5), img.pixel(7, 5));
}

#[test]
fn mined_manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(
        &SynthConfig {
            n: 6,
            ..SynthConfig::default()
        },
        &dir.path().join("c"),
    )
    .unwrap();
    let manifest = mine_pairs(&corpus.train_dir, &SamplerConfig::default(), 0.25, 5).unwrap();
    let path = dir.path().join("pairs.jsonl");
    manifest.write(&path).unwrap();
    let back = PairManifest::read(&path).unwrap();
    assert_eq!(back.to_jsonl(), manifest.to_jsonl());
    let counts = PairManifest::count_splits(&back.records);
    assert_eq!(counts, back.header.counts);
    assert_eq!(counts.train + counts.val, back.records.len());
    assert!(back.records.iter().any(|r| r.split == Split::Val));

    let again = mine_pairs(&corpus.train_dir, &SamplerConfig::default(), 0.25, 5).unwrap();
    assert_eq!(again.to_jsonl(), manifest.to_jsonl());
}
