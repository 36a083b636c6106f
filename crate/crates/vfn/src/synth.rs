//! Synthetic composition corpus.
//!
//! Every image is a single bright disc over a scale-free value-noise
//! background. Training sources place the disc on a rule-of-thirds point
//! of the whole frame. Benchmark scenes place it on a thirds point of one
//! protocol window; the annotated ground truth is the protocol window whose
//! nearest thirds point is closest to the disc center.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vfn_core::eval::ProtocolConfig;
use vfn_core::geometry::{sliding_windows, CropRect, Dims};
use vfn_core::imaging::ImageBuffer;

use crate::bench::Annotation;
use crate::io::{save_png, write_atomic};
use crate::{Error, Result};

/// Noise wavelengths in pixels, one octave each, equal amplitude.
const WAVELENGTHS: [f64; 7] = [8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
const BENCH_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    /// Share of `n` rendered as training sources; the rest are scenes.
    pub train_fraction: f64,
    pub source_size: [u32; 2],
    pub scene_size: [u32; 2],
    /// Disc radius range as a fraction of the framing window's short side.
    pub disc_frac: [f64; 2],
    /// Uniform jitter of the source disc around its thirds point, as a
    /// fraction of each side.
    pub jitter: f64,
    /// Minimum gap, in scene pixels, between the oracle window's thirds
    /// distance and any other window's.
    pub oracle_margin: f64,
    pub scales: Vec<f64>,
    pub grid: [u32; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        let protocol = ProtocolConfig::default();
        Self {
            n: 300,
            seed: 0,
            train_fraction: 2.0 / 3.0,
            source_size: [480, 320],
            scene_size: [540, 360],
            disc_frac: [0.09, 0.13],
            jitter: 0.015,
            oracle_margin: 8.0,
            scales: protocol.scales,
            grid: [protocol.grid.0, protocol.grid.1],
        }
    }
}

impl SynthConfig {
    pub fn counts(&self) -> (usize, usize) {
        let train = (self.n as f64 * self.train_fraction).round() as usize;
        (train.min(self.n), self.n - train.min(self.n))
    }

    pub fn validate(&self) -> Result<()> {
        let (train, bench) = self.counts();
        let ok = self.n >= 2
            && train >= 2
            && bench >= 1
            && self
                .source_size
                .iter()
                .chain(&self.scene_size)
                .all(|&s| s >= 64)
            && 0.0 < self.disc_frac[0]
            && self.disc_frac[0] <= self.disc_frac[1]
            && self.disc_frac[1] < 0.3
            && (0.0..0.1).contains(&self.jitter)
            && self.oracle_margin >= 0.0
            && !self.scales.is_empty()
            && self.grid[0] > 0
            && self.grid[1] > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "invalid synthetic corpus settings: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub color: [f32; 3],
}

impl Disc {
    /// Pixel bounding box, clipped to `dims`.
    pub fn bounds(&self, dims: Dims) -> CropRect {
        let x0 = (self.cx - self.radius).floor().max(0.0);
        let y0 = (self.cy - self.radius).floor().max(0.0);
        let x1 = (self.cx + self.radius).ceil().min(dims.width as f64);
        let y1 = (self.cy + self.radius).ceil().min(dims.height as f64);
        CropRect::new(
            x0 as u32,
            y0 as u32,
            (x1 - x0).max(1.0) as u32,
            (y1 - y0).max(1.0) as u32,
        )
        .expect("disc box has positive size")
    }

    /// Antialiased fraction of pixel `(x, y)` covered by the disc.
    pub fn coverage(&self, x: u32, y: u32) -> f64 {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let dist = ((px - self.cx).powi(2) + (py - self.cy).powi(2)).sqrt();
        (self.radius + 0.5 - dist).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub texture_seed: u64,
    pub dark: [f32; 3],
    pub light: [f32; 3],
    pub disc: Disc,
}

struct Octave {
    step: f64,
    cols: usize,
    values: Vec<f32>,
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl Octave {
    fn sample(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.step, y / self.step);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (tx, ty) = (smooth(gx.fract()), smooth(gy.fract()));
        let v = |i: usize, j: usize| self.values[j * self.cols + i] as f64;
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

impl Scene {
    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }

    fn octaves(&self) -> Vec<Octave> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        WAVELENGTHS
            .iter()
            .map(|&step| {
                let cols = (self.width as f64 / step).ceil() as usize + 2;
                let rows = (self.height as f64 / step).ceil() as usize + 2;
                let values = (0..cols * rows).map(|_| rng.random::<f32>()).collect();
                Octave { step, cols, values }
            })
            .collect()
    }

    /// Background texture, plus the disc when `with_disc` is set. Without
    /// the disc, the pixels it covered show the underlying texture.
    pub fn render(&self, with_disc: bool) -> ImageBuffer {
        let octaves = self.octaves();
        let n = octaves.len() as f64;
        let d = self.disc;
        ImageBuffer::from_fn(self.width, self.height, |x, y| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = octaves.iter().map(|o| o.sample(px, py)).sum::<f64>() / n;
            let t = (0.5 + (t - 0.5) * 3.0).clamp(0.0, 1.0) as f32;
            let bg = [0, 1, 2].map(|c| self.dark[c] + (self.light[c] - self.dark[c]) * t);
            if !with_disc {
                return bg;
            }
            let cover = d.coverage(x, y) as f32;
            [0, 1, 2].map(|c| bg[c] * (1.0 - cover) + d.color[c] * cover)
        })
    }
}

fn thirds_points(r: &CropRect) -> [(f64, f64); 4] {
    let xs = [
        r.x as f64 + r.w as f64 / 3.0,
        r.x as f64 + 2.0 * r.w as f64 / 3.0,
    ];
    let ys = [
        r.y as f64 + r.h as f64 / 3.0,
        r.y as f64 + 2.0 * r.h as f64 / 3.0,
    ];
    [
        (xs[0], ys[0]),
        (xs[1], ys[0]),
        (xs[0], ys[1]),
        (xs[1], ys[1]),
    ]
}

/// Distance from `p` to the nearest thirds point of `r`.
pub fn thirds_distance(r: &CropRect, p: (f64, f64)) -> f64 {
    thirds_points(r)
        .iter()
        .map(|t| ((t.0 - p.0).powi(2) + (t.1 - p.1).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// Protocol window whose nearest thirds point is closest to `center`;
/// the earliest window wins ties.
pub fn oracle_window(
    dims: Dims,
    center: (f64, f64),
    scales: &[f64],
    grid: (u32, u32),
) -> Option<CropRect> {
    let mut best: Option<(CropRect, f64)> = None;
    for w in sliding_windows(dims, scales, grid) {
        let d = thirds_distance(&w, center);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((w, d));
        }
    }
    best.map(|(w, _)| w)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn palette(rng: &mut ChaCha8Rng) -> ([f32; 3], [f32; 3], [f32; 3]) {
    let dark = [0; 3].map(|_| rng.random_range(0.05..0.25));
    let light = [0; 3].map(|_| rng.random_range(0.35..0.6));
    let disc = [
        rng.random_range(0.9..1.0),
        rng.random_range(0.75..0.95),
        rng.random_range(0.2..0.45),
    ];
    (dark, light, disc)
}

/// Training source `index`: disc on a thirds point of the full frame.
pub fn source_scene(cfg: &SynthConfig, index: usize) -> Scene {
    let mut rng = stream_rng(cfg.seed, index as u64);
    let [w, h] = cfg.source_size;
    let (dark, light, color) = palette(&mut rng);
    let full = Dims::new(w, h).full_rect();
    let anchor = thirds_points(&full)[rng.random_range(0..4)];
    let jx = rng.random_range(-cfg.jitter..=cfg.jitter) * w as f64;
    let jy = rng.random_range(-cfg.jitter..=cfg.jitter) * h as f64;
    let radius = rng.random_range(cfg.disc_frac[0]..=cfg.disc_frac[1]) * w.min(h) as f64;
    Scene {
        width: w,
        height: h,
        texture_seed: rng.random(),
        dark,
        light,
        disc: Disc {
            cx: anchor.0 + jx,
            cy: anchor.1 + jy,
            radius,
            color,
        },
    }
}

/// Benchmark scene `index` and its oracle window.
pub fn bench_scene(cfg: &SynthConfig, index: usize) -> (Scene, CropRect) {
    let mut rng = stream_rng(cfg.seed, BENCH_STREAM + index as u64);
    let [w, h] = cfg.scene_size;
    let dims = Dims::new(w, h);
    let grid = (cfg.grid[0], cfg.grid[1]);
    let windows = sliding_windows(dims, &cfg.scales, grid);
    let (dark, light, color) = palette(&mut rng);
    loop {
        let frame = windows[rng.random_range(0..windows.len())];
        let center = thirds_points(&frame)[rng.random_range(0..4)];
        let radius =
            rng.random_range(cfg.disc_frac[0]..=cfg.disc_frac[1]) * frame.w.min(frame.h) as f64;
        let oracle =
            oracle_window(dims, center, &cfg.scales, grid).expect("protocol windows exist");
        let runner_up = windows
            .iter()
            .filter(|r| **r != oracle)
            .map(|r| thirds_distance(r, center))
            .fold(f64::INFINITY, f64::min);
        if oracle == frame && runner_up - thirds_distance(&oracle, center) >= cfg.oracle_margin {
            let scene = Scene {
                width: w,
                height: h,
                texture_seed: rng.random(),
                dark,
                light,
                disc: Disc {
                    cx: center.0,
                    cy: center.1,
                    radius,
                    color,
                },
            };
            return (scene, oracle);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchScene {
    pub image: String,
    pub scene: Scene,
    pub oracle: [u32; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train_dir: PathBuf,
    pub bench_dir: PathBuf,
    pub annotations: PathBuf,
    pub scenes: Vec<BenchScene>,
}

/// Writes `train/`, `bench/`, `bench/annotations.json`,
/// `bench/scenes.json` and `synth.json` under `out`.
pub fn generate(cfg: &SynthConfig, out: &Path) -> Result<SynthCorpus> {
    cfg.validate()?;
    let (n_train, n_bench) = cfg.counts();
    let train_dir = out.join("train");
    let bench_dir = out.join("bench");
    for dir in [&train_dir, &bench_dir] {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    (0..n_train).into_par_iter().try_for_each(|i| {
        save_png(
            &source_scene(cfg, i).render(true),
            &train_dir.join(format!("src_{i:04}.png")),
        )
    })?;
    let scenes: Vec<BenchScene> = (0..n_bench)
        .into_par_iter()
        .map(|i| {
            let (scene, oracle) = bench_scene(cfg, i);
            let image = format!("scene_{i:04}.png");
            save_png(&scene.render(true), &bench_dir.join(&image))?;
            Ok(BenchScene {
                image,
                scene,
                oracle: [oracle.x, oracle.y, oracle.w, oracle.h],
            })
        })
        .collect::<Result<_>>()?;

    let annotations: Vec<Annotation> = scenes
        .iter()
        .map(|s| Annotation {
            image: s.image.clone(),
            crop: s.oracle,
            category: None,
        })
        .collect();
    let annotation_path = bench_dir.join("annotations.json");
    write_atomic(
        &annotation_path,
        crate::bench::AnnotationSet::to_json(&annotations).as_bytes(),
    )?;
    let scenes_json = serde_json::to_string_pretty(&scenes).expect("scenes serialize") + "\n";
    write_atomic(&bench_dir.join("scenes.json"), scenes_json.as_bytes())?;
    let cfg_json = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    write_atomic(&out.join("synth.json"), cfg_json.as_bytes())?;
    Ok(SynthCorpus {
        train_dir,
        bench_dir,
        annotations: annotation_path,
        scenes,
    })
}

/// Reads `bench/scenes.json` written by [`generate`].
pub fn read_scenes(bench_dir: &Path) -> Result<Vec<BenchScene>> {
    let path = bench_dir.join("scenes.json");
    serde_json::from_str(&crate::io::read_to_string(&path)?).map_err(|e| Error::format(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n: 6,
            source_size: [96, 64],
            scene_size: [120, 80],
            oracle_margin: 2.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_split_two_thirds() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.counts(), (200, 100));
    }

    #[test]
    fn sources_put_the_disc_near_a_thirds_point() {
        let cfg = SynthConfig::default();
        for i in 0..20 {
            let s = source_scene(&cfg, i);
            let full = s.dims().full_rect();
            let slack = cfg.jitter * 2f64.sqrt() * s.width as f64 + 1e-9;
            assert!(thirds_distance(&full, (s.disc.cx, s.disc.cy)) <= slack);
            let short = s.width.min(s.height) as f64;
            assert!(
                s.disc.radius >= cfg.disc_frac[0] * short
                    && s.disc.radius <= cfg.disc_frac[1] * short
            );
        }
    }

    #[test]
    fn bench_oracle_is_unique_and_frames_the_disc() {
        let cfg = SynthConfig::default();
        for i in 0..10 {
            let (s, oracle) = bench_scene(&cfg, i);
            let c = (s.disc.cx, s.disc.cy);
            assert!(thirds_distance(&oracle, c) < 1e-9);
            let grid = (cfg.grid[0], cfg.grid[1]);
            assert_eq!(oracle_window(s.dims(), c, &cfg.scales, grid), Some(oracle));
            assert!(sliding_windows(s.dims(), &cfg.scales, grid).contains(&oracle));
        }
    }

    #[test]
    fn removing_the_disc_only_changes_its_box() {
        let cfg = small();
        let s = source_scene(&cfg, 1);
        let with = s.render(true);
        let without = s.render(false);
        let b = s.disc.bounds(s.dims());
        for y in 0..s.height {
            for x in 0..s.width {
                let inside =
                    x >= b.x && (x as u64) < b.right() && y >= b.y && (y as u64) < b.bottom();
                if !inside {
                    assert_eq!(with.pixel(x, y), without.pixel(x, y));
                }
            }
        }
        let (cx, cy) = (s.disc.cx as u32, s.disc.cy as u32);
        assert_eq!(with.pixel(cx, cy), s.disc.color);
    }

    #[test]
    fn generation_is_byte_identical() {
        let cfg = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = generate(&cfg, a.path()).unwrap();
        generate(&cfg, b.path()).unwrap();
        assert_eq!(ca.scenes.len(), 2);
        assert_eq!(read_scenes(&ca.bench_dir).unwrap(), ca.scenes);
        for rel in [
            "train/src_0000.png",
            "train/src_0003.png",
            "bench/scene_0001.png",
            "bench/annotations.json",
            "synth.json",
        ] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }
}
