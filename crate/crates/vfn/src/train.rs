//! Training orchestration over a pair manifest.
//!
//! With a fixed backbone the pooled features of every pair are computed
//! once and only the head is optimized; a trainable backbone streams
//! images through the full network every iteration. Minibatches are split
//! into fixed chunks evaluated in parallel and summed in chunk order, so
//! results do not depend on the thread count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use vfn_core::features::BackboneParams;
use vfn_core::imaging::{augment, AugmentConfig};
use vfn_core::ranker::{
    batch_loss_and_grads, head_loss_and_grads, pair_loss, train, CurvePoint, HeadParams,
    PairObjective, Ranker, RankerParams, TrainConfig, TrainFailure, TrainMonitor, TrainOutcome,
};

use crate::dataset::{pair_inputs, BatchStream, PairManifest, PairRecord, Split};
use crate::io::load_image;
use crate::{Error, Result};

/// Pairs per parallel work item.
pub const CHUNK_PAIRS: usize = 25;

/// Row-major pooled features of `len` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub full: Vec<f32>,
    pub crop: Vec<f32>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.full.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.full.is_empty()
    }

    pub fn pair(&self, i: usize) -> (&[f32], &[f32]) {
        let r = i * self.dim..(i + 1) * self.dim;
        (&self.full[r.clone()], &self.crop[r])
    }

    /// `(full, crop)` scores of every pair.
    pub fn scores(&self, ranker: &Ranker<f32>) -> Result<Vec<(f32, f32)>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let (f, c) = self.pair(i);
                Ok((ranker.score_features(f)?, ranker.score_features(c)?))
            })
            .collect()
    }

    /// Mean hinge loss over all pairs.
    pub fn mean_loss(&self, ranker: &Ranker<f32>, gap: f32) -> Result<f64> {
        let scores = self.scores(ranker)?;
        let total: f64 = scores
            .iter()
            .map(|&(f, c)| pair_loss(f, c, gap) as f64)
            .sum();
        Ok(total / scores.len().max(1) as f64)
    }

    /// Fraction of pairs whose source outscores its crop.
    pub fn ordering_accuracy(&self, ranker: &Ranker<f32>) -> Result<f64> {
        let scores = self.scores(ranker)?;
        let good = scores.iter().filter(|(f, c)| f > c).count();
        Ok(good as f64 / scores.len().max(1) as f64)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Pooled features for the records of `split`, in manifest order.
///
/// Each source image is decoded once. With a non-identity `augment`, the
/// source gets one draw per image and every crop its own draw, from the
/// augmentation seed mixed with `variant`, one stream per image.
pub fn extract_features(
    manifest: &PairManifest,
    split: Split,
    ranker: &Ranker<f32>,
    augment_cfg: &AugmentConfig,
    variant: u64,
) -> Result<FeatureTable> {
    augment_cfg.validate()?;
    let dim = ranker.arch.feature_len()?;
    let records = manifest.split(split);
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_image.entry(&r.image).or_default().push(i);
    }
    let groups: Vec<(&str, Vec<usize>)> = by_image.into_iter().collect();
    let rows: Vec<Vec<(usize, Vec<f32>, Vec<f32>)>> = groups
        .par_iter()
        .enumerate()
        .map(|(g, (image, idx))| {
            let first: &PairRecord = records[idx[0]];
            let img = load_image(&manifest.image_path(first))?;
            let mut rng = stream_rng(augment_cfg.seed ^ variant.rotate_left(32), g as u64);
            let (full_input, _) = pair_inputs(&img, first.rect()?)?;
            let full = ranker.features(&augment(&full_input, augment_cfg, &mut rng))?;
            idx.iter()
                .map(|&i| {
                    let (_, crop_input) = pair_inputs(&img, records[i].rect()?)?;
                    let crop = ranker.features(&augment(&crop_input, augment_cfg, &mut rng))?;
                    Ok((i, full.clone(), crop))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Invalid(format!("{image}: {e}")))
        })
        .collect::<Result<_>>()?;

    let mut table = FeatureTable {
        dim,
        full: vec![0.0; records.len() * dim],
        crop: vec![0.0; records.len() * dim],
    };
    for (i, full, crop) in rows.into_iter().flatten() {
        table.full[i * dim..(i + 1) * dim].copy_from_slice(&full);
        table.crop[i * dim..(i + 1) * dim].copy_from_slice(&crop);
    }
    Ok(table)
}

/// Cached features for head-only training.
#[derive(Debug, Clone)]
pub struct HeadCache {
    /// One table per augmentation variant; epoch `e` uses `e % len`.
    pub train: Vec<FeatureTable>,
    pub val: Option<FeatureTable>,
}

impl HeadCache {
    pub fn build(
        manifest: &PairManifest,
        ranker: &Ranker<f32>,
        augment_cfg: &AugmentConfig,
        variants: usize,
    ) -> Result<Self> {
        if ranker.arch.backbone.trainable() {
            return Err(Error::Invalid(
                "feature caching needs a fixed backbone".into(),
            ));
        }
        if manifest.header.counts.train == 0 {
            return Err(Error::Invalid("manifest has no training pairs".into()));
        }
        let variants = variants.max(1);
        let train = (0..variants as u64)
            .map(|v| extract_features(manifest, Split::Train, ranker, augment_cfg, v))
            .collect::<Result<_>>()?;
        let val = (manifest.header.counts.val > 0)
            .then(|| extract_features(manifest, Split::Val, ranker, &AugmentConfig::identity(), 0))
            .transpose()?;
        Ok(Self { train, val })
    }
}

/// Summed loss, violated count and head gradients over `CHUNK_PAIRS`
/// chunks, reduced in chunk order.
pub fn chunked_head_grads(
    head: &HeadParams<f32>,
    full: &[f32],
    crop: &[f32],
    gap: f32,
) -> Result<(f64, usize, HeadParams<f32>)> {
    let d = head.input_len();
    let parts: Vec<_> = full
        .par_chunks(CHUNK_PAIRS * d)
        .zip(crop.par_chunks(CHUNK_PAIRS * d))
        .map(|(f, c)| head_loss_and_grads(head, f, c, gap, false))
        .collect::<vfn_core::Result<_>>()?;
    let mut loss = 0.0;
    let mut violated = 0;
    let mut grads = HeadParams::zeros(d);
    for p in parts {
        loss += p.loss as f64;
        violated += p.violated;
        for (g, q) in [
            (&mut grads.fc1_w, &p.grads.fc1_w),
            (&mut grads.fc1_b, &p.grads.fc1_b),
            (&mut grads.fc2_w, &p.grads.fc2_w),
            (&mut grads.fc2_b, &p.grads.fc2_b),
        ] {
            g.add_assign(q);
        }
    }
    Ok((loss, violated, grads))
}

/// Head-only objective over a [`HeadCache`].
pub struct CachedObjective<'a> {
    cache: &'a HeadCache,
    batch_pairs: usize,
    gap: f32,
    seed: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    zero_backbone: BackboneParams<f32>,
}

impl<'a> CachedObjective<'a> {
    pub fn new(cache: &'a HeadCache, ranker: &Ranker<f32>, cfg: &TrainConfig) -> Self {
        let mut s = Self {
            cache,
            batch_pairs: cfg.batch_pairs,
            gap: cfg.gap as f32,
            seed: cfg.seed,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            zero_backbone: BackboneParams::zeros(&ranker.arch.backbone),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.cache.train[0].len()).collect();
        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            self.seed.wrapping_add(self.epoch),
        ));
        self.cursor = 0;
    }
}

impl PairObjective<f32> for CachedObjective<'_> {
    fn train_batch(
        &mut self,
        _iteration: u64,
        ranker: &Ranker<f32>,
    ) -> vfn_core::Result<(f64, usize, RankerParams<f32>)> {
        let d = self.cache.train[0].dim;
        let mut full = Vec::with_capacity(self.batch_pairs * d);
        let mut crop = Vec::with_capacity(self.batch_pairs * d);
        for _ in 0..self.batch_pairs {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            let table = &self.cache.train[self.epoch as usize % self.cache.train.len()];
            let (f, c) = table.pair(self.order[self.cursor]);
            full.extend_from_slice(f);
            crop.extend_from_slice(c);
            self.cursor += 1;
        }
        let (loss, _, head) = chunked_head_grads(&ranker.params.head, &full, &crop, self.gap)
            .map_err(|e| vfn_core::Error::Config(e.to_string()))?;
        let grads = RankerParams {
            backbone: self.zero_backbone.clone(),
            head,
        };
        Ok((loss, self.batch_pairs, grads))
    }

    fn validation_loss(&mut self, ranker: &Ranker<f32>) -> vfn_core::Result<f64> {
        let table = self.cache.val.as_ref().unwrap_or(&self.cache.train[0]);
        table
            .mean_loss(ranker, self.gap)
            .map_err(|e| vfn_core::Error::Config(e.to_string()))
    }
}

/// Full-network objective streaming decoded images.
pub struct ImageObjective<'a> {
    manifest: &'a PairManifest,
    stream: BatchStream<'a>,
    val_split: Split,
    batch_pairs: usize,
    gap: f32,
}

impl<'a> ImageObjective<'a> {
    pub fn new(
        manifest: &'a PairManifest,
        cfg: &TrainConfig,
        augment_cfg: &AugmentConfig,
    ) -> Result<Self> {
        let val_split = if manifest.header.counts.val > 0 {
            Split::Val
        } else {
            Split::Train
        };
        Ok(Self {
            manifest,
            stream: BatchStream::new(manifest, Split::Train, cfg.seed, augment_cfg)?,
            val_split,
            batch_pairs: cfg.batch_pairs,
            gap: cfg.gap as f32,
        })
    }
}

fn full_network_chunks(
    ranker: &Ranker<f32>,
    batch: &[(
        vfn_core::imaging::ImageBuffer,
        vfn_core::imaging::ImageBuffer,
    )],
    gap: f32,
) -> vfn_core::Result<(f64, RankerParams<f32>)> {
    let parts: Vec<_> = batch
        .par_chunks(CHUNK_PAIRS)
        .map(|c| batch_loss_and_grads(ranker, c, gap))
        .collect::<vfn_core::Result<_>>()?;
    let mut grads = ranker.params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l as f64;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

impl PairObjective<f32> for ImageObjective<'_> {
    fn train_batch(
        &mut self,
        _iteration: u64,
        ranker: &Ranker<f32>,
    ) -> vfn_core::Result<(f64, usize, RankerParams<f32>)> {
        let batch = self
            .stream
            .next_batch(self.batch_pairs)
            .map_err(|e| vfn_core::Error::Config(e.to_string()))?;
        let (loss, grads) = full_network_chunks(ranker, &batch, self.gap)?;
        Ok((loss, batch.len(), grads))
    }

    fn validation_loss(&mut self, ranker: &Ranker<f32>) -> vfn_core::Result<f64> {
        let wrap = |e: Error| vfn_core::Error::Config(e.to_string());
        let mut stream =
            BatchStream::new(self.manifest, self.val_split, 0, &AugmentConfig::identity())
                .map_err(wrap)?;
        let n = stream.len();
        let mut total = 0.0;
        let mut done = 0;
        while done < n {
            let take = self.batch_pairs.min(n - done);
            let batch = stream.next_batch(take).map_err(wrap)?;
            total += full_network_chunks(ranker, &batch, self.gap)?.0;
            done += take;
        }
        Ok(total / n as f64)
    }
}

/// Trains `init` on `manifest`. The outer error covers setup (IO, cache
/// construction); the inner result is the training run itself.
pub fn train_manifest(
    manifest: &PairManifest,
    init: Ranker<f32>,
    cfg: &TrainConfig,
    augment_cfg: &AugmentConfig,
    variants: usize,
    monitor: &mut dyn TrainMonitor,
) -> Result<std::result::Result<TrainOutcome<f32>, TrainFailure<f32>>> {
    cfg.validate()?;
    if init.arch.backbone.trainable() {
        let mut objective = ImageObjective::new(manifest, cfg, augment_cfg)?;
        Ok(train(init, cfg, &mut objective, monitor))
    } else {
        let cache = HeadCache::build(manifest, &init, augment_cfg, variants)?;
        let mut objective = CachedObjective::new(&cache, &init, cfg);
        Ok(train(init, cfg, &mut objective, monitor))
    }
}

/// `iteration,train_loss,val_loss` rows.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("iteration,train_loss,val_loss\n");
    for p in curve {
        out.push_str(&format!(
            "{},{},{}\n",
            p.iteration, p.train_loss, p.val_loss
        ));
    }
    out
}
