//! Ranking-pair mining from a directory of well-composed images, the
//! line-delimited JSON manifest, and deterministic minibatch streams.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vfn_core::geometry::{sample_crops, CropKind, CropRect, SamplerConfig};
use vfn_core::imaging::{augment, AugmentConfig, ImageBuffer};
use vfn_core::INPUT_SIDE;

use crate::io::{image_files, load_image, read_to_string, write_atomic};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_VAL_FRACTION: f64 = 0.19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Border,
    Square,
}

/// One ranking unit: the source image is preferred over `crop`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    /// Path relative to the manifest root.
    pub image: String,
    /// `[x, y, w, h]` in source pixels.
    pub crop: [u32; 4],
    pub kind: PairKind,
    pub scale: f64,
    pub split: Split,
}

impl PairRecord {
    pub fn rect(&self) -> Result<CropRect> {
        let [x, y, w, h] = self.crop;
        Ok(CropRect::new(x, y, w, h)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerEcho {
    pub scales: Vec<f64>,
    pub num_square: u32,
    pub perturb_frac: f64,
    pub seed: u64,
}

impl From<&SamplerConfig> for SamplerEcho {
    fn from(c: &SamplerConfig) -> Self {
        Self {
            scales: c.scales.clone(),
            num_square: c.num_square,
            perturb_frac: c.perturb_frac,
            seed: c.seed,
        }
    }
}

impl From<&SamplerEcho> for SamplerConfig {
    fn from(e: &SamplerEcho) -> Self {
        Self {
            scales: e.scales.clone(),
            num_square: e.num_square,
            perturb_frac: e.perturb_frac,
            seed: e.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub seed: u64,
    pub sampler: SamplerEcho,
    pub val_fraction: f64,
    /// Directory the record paths are relative to.
    pub root: String,
    pub images: usize,
    pub skipped: usize,
    pub skipped_images: Vec<String>,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairManifest {
    pub header: ManifestHeader,
    pub records: Vec<PairRecord>,
}

impl PairManifest {
    pub fn root(&self) -> &Path {
        Path::new(&self.header.root)
    }

    pub fn image_path(&self, record: &PairRecord) -> PathBuf {
        self.root().join(&record.image)
    }

    pub fn split(&self, split: Split) -> Vec<&PairRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn count_splits(records: &[PairRecord]) -> SplitCounts {
        let mut c = SplitCounts::default();
        for r in records {
            match r.split {
                Split::Train => c.train += 1,
                Split::Val => c.val += 1,
            }
        }
        c
    }

    /// Checks header counts, duplicate entries and per-image splits.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::Invalid(format!("manifest: {m}"));
        if self.header.version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported version {}", self.header.version)));
        }
        let counts = Self::count_splits(&self.records);
        if counts != self.header.counts {
            return Err(bad(format!(
                "header counts {:?} disagree with records {counts:?}",
                self.header.counts
            )));
        }
        let mut seen = HashSet::new();
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.records {
            r.rect()?;
            if !seen.insert((r.image.as_str(), r.crop)) {
                return Err(bad(format!("duplicate crop {:?} of {}", r.crop, r.image)));
            }
            if *split_of.entry(&r.image).or_insert(r.split) != r.split {
                return Err(bad(format!("{} appears in both splits", r.image)));
            }
        }
        Ok(())
    }

    /// Header line followed by one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, source: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines
            .next()
            .ok_or_else(|| Error::format(source, "empty manifest"))?;
        let header: ManifestHeader = serde_json::from_str(head)
            .map_err(|e| Error::format(source, format!("line 1: {e}")))?;
        let records = lines
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::format(source, format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<PairRecord>>>()?;
        let m = Self { header, records };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&read_to_string(path)?, path)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples border and square crops for every decodable image in
/// `image_dir` and assigns whole images to train or validation.
///
/// Crops of image `i` (in file-name order) come from stream `i` of the
/// sampler seed; the split shuffle uses `seed`. Undecodable or undersized
/// images are skipped with a warning and listed in the header.
pub fn mine_pairs(
    image_dir: &Path,
    sampler: &SamplerConfig,
    val_fraction: f64,
    seed: u64,
) -> Result<PairManifest> {
    sampler.validate()?;
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Invalid(format!(
            "val fraction {val_fraction} outside [0, 1)"
        )));
    }
    let files = image_files(image_dir)?;
    let mined: Vec<(String, Result<Vec<PairRecord>>)> = files
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let name = path
                .strip_prefix(image_dir)
                .unwrap_or(path)
                .to_string_lossy()
                .into_owned();
            let records = load_image(path).and_then(|img| {
                let mut rng = stream_rng(sampler.seed, i as u64);
                let crops = sample_crops(img.dims(), sampler, &mut rng)?;
                Ok(crops
                    .into_iter()
                    .map(|c| PairRecord {
                        image: name.clone(),
                        crop: [c.rect.x, c.rect.y, c.rect.w, c.rect.h],
                        kind: if c.kind == CropKind::Border {
                            PairKind::Border
                        } else {
                            PairKind::Square
                        },
                        scale: c.scale,
                        split: Split::Train,
                    })
                    .collect())
            });
            (name, records)
        })
        .collect();

    let mut per_image = Vec::new();
    let mut skipped_images = Vec::new();
    for (name, result) in mined {
        match result {
            Ok(records) => per_image.push(records),
            Err(e) => {
                warn!("skipping {name}: {e}");
                skipped_images.push(name);
            }
        }
    }
    if per_image.len() < 2 {
        return Err(Error::Invalid(format!(
            "{} holds {} usable images; at least 2 are needed",
            image_dir.display(),
            per_image.len()
        )));
    }

    let mut order: Vec<usize> = (0..per_image.len()).collect();
    order.shuffle(&mut stream_rng(seed, u64::MAX));
    let n_val = (val_fraction * per_image.len() as f64).round() as usize;
    for &i in &order[..n_val] {
        per_image[i].iter_mut().for_each(|r| r.split = Split::Val);
    }

    let records: Vec<PairRecord> = per_image.into_iter().flatten().collect();
    let manifest = PairManifest {
        header: ManifestHeader {
            version: MANIFEST_VERSION,
            seed,
            sampler: sampler.into(),
            val_fraction,
            root: image_dir.to_string_lossy().into_owned(),
            images: files.len() - skipped_images.len(),
            skipped: skipped_images.len(),
            skipped_images,
            counts: PairManifest::count_splits(&records),
        },
        records,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Network inputs of one ranking unit: the whole source and the crop,
/// both resized to the fixed input side.
pub fn pair_inputs(source: &ImageBuffer, crop: CropRect) -> Result<(ImageBuffer, ImageBuffer)> {
    let side = INPUT_SIDE as u32;
    let full = source.resize_bilinear(side, side);
    let crop = source.crop_resized(crop, side, side)?;
    Ok((full, crop))
}

/// Deterministic shuffled cursor over one split. Each epoch reshuffles with
/// `epoch_seed + epoch`; training batches are augmented, validation
/// batches are not.
pub struct BatchStream<'a> {
    manifest: &'a PairManifest,
    records: Vec<&'a PairRecord>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    epoch_seed: u64,
    augment: AugmentConfig,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        manifest: &'a PairManifest,
        split: Split,
        epoch_seed: u64,
        augment_cfg: &AugmentConfig,
    ) -> Result<Self> {
        let records = manifest.split(split);
        if records.is_empty() {
            return Err(Error::Invalid(format!("split {split:?} is empty")));
        }
        let augment = match split {
            Split::Train => {
                augment_cfg.validate()?;
                augment_cfg.clone()
            }
            Split::Val => AugmentConfig::identity(),
        };
        let mut s = Self {
            manifest,
            order: Vec::new(),
            records,
            cursor: 0,
            epoch: 0,
            epoch_seed,
            augment,
            rng: stream_rng(augment_cfg.seed, epoch_seed),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.records.len()).collect();
        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            self.epoch_seed.wrapping_add(self.epoch),
        ));
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn next_record(&mut self) -> &'a PairRecord {
        let r = self.records[self.order[self.cursor]];
        self.cursor += 1;
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        r
    }

    /// Next `batch_pairs` `(full, crop)` inputs. A record that fails to
    /// load is logged and replaced by the following one.
    pub fn next_batch(&mut self, batch_pairs: usize) -> Result<Vec<(ImageBuffer, ImageBuffer)>> {
        let mut batch = Vec::with_capacity(batch_pairs);
        let mut failures = 0;
        while batch.len() < batch_pairs {
            let record = self.next_record();
            match self.load(record) {
                Ok((full, crop)) => {
                    let full = augment(&full, &self.augment, &mut self.rng);
                    let crop = augment(&crop, &self.augment, &mut self.rng);
                    batch.push((full, crop));
                    failures = 0;
                }
                Err(e) => {
                    warn!("substituting next record for {}: {e}", record.image);
                    failures += 1;
                    if failures >= self.records.len() {
                        return Err(Error::Invalid(
                            "no record in the split can be loaded".into(),
                        ));
                    }
                }
            }
        }
        Ok(batch)
    }

    fn load(&self, record: &PairRecord) -> Result<(ImageBuffer, ImageBuffer)> {
        let img = load_image(&self.manifest.image_path(record))?;
        pair_inputs(&img, record.rect()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::save_png;

    fn write_images(dir: &Path, n: usize) {
        for i in 0..n {
            let img = ImageBuffer::from_fn(64 + i as u32, 48, |x, y| {
                [((x + y) % 7) as f32 / 7.0, 0.5, i as f32 / n as f32]
            });
            save_png(&img, &dir.join(format!("img_{i:03}.png"))).unwrap();
        }
    }

    #[test]
    fn record_count_formula_holds_for_other_settings() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), 3);
        for (scales, k) in [(vec![0.5], 1), (vec![0.5, 0.7, 0.9], 2), (vec![0.6], 5)] {
            let cfg = SamplerConfig {
                scales: scales.clone(),
                num_square: k,
                ..SamplerConfig::default()
            };
            let m = mine_pairs(dir.path(), &cfg, 0.0, 1).unwrap();
            assert_eq!(m.records.len(), 3 * scales.len() * (4 + k as usize));
        }
    }

    #[test]
    fn zero_val_fraction_keeps_everything_in_train() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), 4);
        let m = mine_pairs(dir.path(), &SamplerConfig::default(), 0.0, 3).unwrap();
        assert!(m.records.iter().all(|r| r.split == Split::Train));
        assert_eq!(m.header.counts, SplitCounts { train: 56, val: 0 });
    }

    #[test]
    fn splits_are_per_image_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), 6);
        let m = mine_pairs(dir.path(), &SamplerConfig::default(), 0.5, 9).unwrap();
        assert_eq!(m.header.counts, SplitCounts { train: 42, val: 42 });
        let text = m.to_jsonl();
        let back = PairManifest::from_jsonl(&text, Path::new("m.jsonl")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn undecodable_and_tiny_images_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), 2);
        std::fs::write(dir.path().join("broken.png"), b"garbage").unwrap();
        save_png(
            &ImageBuffer::filled(20, 20, [0.1; 3]),
            &dir.path().join("tiny.png"),
        )
        .unwrap();
        let m = mine_pairs(dir.path(), &SamplerConfig::default(), 0.0, 0).unwrap();
        assert_eq!((m.header.images, m.header.skipped), (2, 2));
        assert_eq!(m.header.skipped_images, vec!["broken.png", "tiny.png"]);
        assert_eq!(m.records.len(), 28);
    }

    #[test]
    fn single_image_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), 1);
        assert!(mine_pairs(dir.path(), &SamplerConfig::default(), 0.0, 0).is_err());
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), 2);
        let m = mine_pairs(dir.path(), &SamplerConfig::default(), 0.0, 0).unwrap();
        let mut dup = m.clone();
        dup.records.push(dup.records[0].clone());
        dup.header.counts.train += 1;
        assert!(dup.validate().is_err());
        let mut miscounted = m.clone();
        miscounted.header.counts.val = 1;
        assert!(miscounted.validate().is_err());
        let mut leaked = m;
        leaked.records[0].split = Split::Val;
        leaked.header.counts = PairManifest::count_splits(&leaked.records);
        assert!(leaked.validate().is_err());
    }

    #[test]
    fn batch_of_one_cycles_every_record_each_epoch() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), 2);
        let mut m = mine_pairs(dir.path(), &SamplerConfig::default(), 0.0, 0).unwrap();
        m.records.truncate(3);
        m.header.counts = PairManifest::count_splits(&m.records);
        let mut stream = BatchStream::new(&m, Split::Train, 5, &AugmentConfig::identity()).unwrap();
        for epoch in 0..2 {
            let mut seen = Vec::new();
            for _ in 0..3 {
                assert_eq!(stream.epoch(), epoch);
                let record = stream.records[stream.order[stream.cursor]].crop;
                stream.next_batch(1).unwrap();
                seen.push(record);
            }
            seen.sort();
            let mut all: Vec<_> = m.records.iter().map(|r| r.crop).collect();
            all.sort();
            assert_eq!(seen, all);
        }
    }

    #[test]
    fn streams_are_reproducible_and_validation_is_unaugmented() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), 4);
        let m = mine_pairs(dir.path(), &SamplerConfig::default(), 0.5, 2).unwrap();
        let aug = AugmentConfig::default();
        let a = BatchStream::new(&m, Split::Train, 7, &aug)
            .unwrap()
            .next_batch(4)
            .unwrap();
        let b = BatchStream::new(&m, Split::Train, 7, &aug)
            .unwrap()
            .next_batch(4)
            .unwrap();
        assert_eq!(a, b);

        let mut val = BatchStream::new(&m, Split::Val, 7, &aug).unwrap();
        let record = val.records[val.order[0]];
        let expected = pair_inputs(
            &load_image(&m.image_path(record)).unwrap(),
            record.rect().unwrap(),
        )
        .unwrap();
        assert_eq!(val.next_batch(1).unwrap()[0], expected);
    }
}
