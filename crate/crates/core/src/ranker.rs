//! The scoring network, its pairwise hinge loss, gradients and optimizer.
//!
//! `score = fc2(ReLU(fc1(pool(backbone(x)))))`. A training pair is
//! `(full image, crop)`, with loss `max(0, g + score(crop) - score(full))`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::features::{
    backbone_backward, backbone_forward, backbone_forward_traced, BackboneParams, BackboneSpec,
    FeatureMap, Pooling,
};
use crate::geometry::CropRect;
use crate::imaging::ImageBuffer;
use crate::tensor::Tensor;
use crate::{Error, Real, Result, INPUT_SIDE};

/// Width of the hidden fully connected layer.
pub const HIDDEN: usize = 1000;

/// Backbone plus pooling; fixes every parameter shape.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub backbone: BackboneSpec,
    pub pooling: Pooling,
}

impl Architecture {
    pub fn new(backbone: BackboneSpec, pooling: Pooling) -> Result<Self> {
        let arch = Self { backbone, pooling };
        arch.feature_len()?;
        Ok(arch)
    }

    /// Length of the pooled vector fed to fc1.
    pub fn feature_len(&self) -> Result<usize> {
        let (c, h, w) = self.backbone.output_shape()?;
        if let Pooling::Spp(cfg) = &self.pooling {
            cfg.validate(h, w)?;
        }
        Ok(self.pooling.output_len(c, h, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// `(feature_len, HIDDEN)`.
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    /// `(HIDDEN)`.
    pub fc2_w: Tensor<T>,
    /// `(1)`.
    pub fc2_b: Tensor<T>,
}

impl<T: Real> HeadParams<T> {
    pub fn zeros(input: usize) -> Self {
        Self {
            fc1_w: Tensor::zeros(&[input, HIDDEN]),
            fc1_b: Tensor::zeros(&[HIDDEN]),
            fc2_w: Tensor::zeros(&[HIDDEN]),
            fc2_b: Tensor::zeros(&[1]),
        }
    }

    pub fn input_len(&self) -> usize {
        self.fc1_w.dims[0]
    }
}

/// Every trainable array; also used for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerParams<T> {
    pub backbone: BackboneParams<T>,
    pub head: HeadParams<T>,
}

impl<T: Real> RankerParams<T> {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        Ok(Self {
            backbone: BackboneParams::zeros(&arch.backbone),
            head: HeadParams::zeros(arch.feature_len()?),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(T::zero());
        }
        z
    }

    /// Backbone conv weights and biases in layer order, then fc1, fc2.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self
            .backbone
            .convs
            .iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .collect();
        let h = &self.head;
        out.extend([&h.fc1_w, &h.fc1_b, &h.fc2_w, &h.fc2_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self
            .backbone
            .convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect();
        let h = &mut self.head;
        out.extend([&mut h.fc1_w, &mut h.fc1_b, &mut h.fc2_w, &mut h.fc2_b]);
        out
    }

    pub fn backbone_tensor_count(&self) -> usize {
        self.backbone.convs.len() * 2
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn cast<U: Real>(&self) -> RankerParams<U> {
        use crate::features::ConvParams;
        RankerParams {
            backbone: BackboneParams {
                convs: self
                    .backbone
                    .convs
                    .iter()
                    .map(|c| ConvParams {
                        weight: c.weight.cast(),
                        bias: c.bias.cast(),
                    })
                    .collect(),
            },
            head: HeadParams {
                fc1_w: self.head.fc1_w.cast(),
                fc1_b: self.head.fc1_b.cast(),
                fc2_w: self.head.fc2_w.cast(),
                fc2_b: self.head.fc2_b.cast(),
            },
        }
    }
}

/// He initialisation: weights ~ N(0, 2 / fan_in), biases zero.
pub fn init_params<T: Real>(arch: &Architecture, seed: u64) -> Result<RankerParams<T>> {
    let mut params = RankerParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |t: &mut Tensor<T>, fan_in: usize| {
        let std = libm::sqrt(2.0 / fan_in as f64);
        for v in &mut t.data {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::from_f64_lossy(z * std);
        }
    };
    for c in &mut params.backbone.convs {
        let d = &c.weight.dims;
        let fan_in = d[1] * d[2] * d[3];
        fill(&mut c.weight, fan_in);
    }
    let input = params.head.input_len();
    fill(&mut params.head.fc1_w, input);
    fill(&mut params.head.fc2_w, HIDDEN);
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranker<T> {
    pub arch: Architecture,
    pub params: RankerParams<T>,
}

impl<T: Real> Ranker<T> {
    pub fn new(arch: Architecture, params: RankerParams<T>) -> Result<Self> {
        let expected = RankerParams::<T>::zeros(&arch)?;
        let shapes_match = expected.tensors().len() == params.tensors().len()
            && expected
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.dims == b.dims && a.len() == b.len());
        if !shapes_match {
            return Err(Error::Config(
                "parameter shapes do not match the architecture".into(),
            ));
        }
        Ok(Self { arch, params })
    }

    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let params = init_params(&arch, seed)?;
        Ok(Self { arch, params })
    }

    /// Pooled feature vector of a 227×227 input.
    pub fn features(&self, input: &ImageBuffer) -> Result<Vec<T>> {
        let map = backbone_forward(input, &self.arch.backbone, &self.params.backbone)?;
        self.arch.pooling.forward(&map)
    }

    pub fn score_features(&self, feature: &[T]) -> Result<T> {
        score(feature, &self.params.head)
    }

    pub fn score_input(&self, input: &ImageBuffer) -> Result<T> {
        self.score_features(&self.features(input)?)
    }

    /// Crops `rect`, resizes it to the network input and scores it.
    pub fn score_view(&self, img: &ImageBuffer, rect: CropRect) -> Result<T> {
        let input = img.crop_resized(rect, INPUT_SIDE as u32, INPUT_SIDE as u32)?;
        self.score_input(&input)
    }
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            actual,
        })
    }
}

/// `rows × HIDDEN` pre-activations of fc1 for row-major `rows × D` input.
fn fc1_forward<T: Real>(head: &HeadParams<T>, x: &[T], rows: usize) -> Vec<T> {
    let d = head.input_len();
    let mut z: Vec<T> = head
        .fc1_b
        .data
        .iter()
        .copied()
        .cycle()
        .take(rows * HIDDEN)
        .collect();
    if rows == 1 {
        // Packing the weights would dominate a single-row product.
        for (xi, wrow) in x.iter().zip(head.fc1_w.data.chunks_exact(HIDDEN)) {
            if *xi != T::zero() {
                for (zj, wj) in z.iter_mut().zip(wrow) {
                    *zj += *xi * *wj;
                }
            }
        }
        return z;
    }
    T::gemm(
        rows,
        d,
        HIDDEN,
        T::one(),
        x,
        (d as isize, 1),
        &head.fc1_w.data,
        (HIDDEN as isize, 1),
        T::one(),
        &mut z,
        (HIDDEN as isize, 1),
    );
    z
}

fn fc2_forward<T: Real>(head: &HeadParams<T>, z_row: &[T]) -> T {
    let mut s = head.fc2_b.data[0];
    for (z, w) in z_row.iter().zip(&head.fc2_w.data) {
        if *z > T::zero() {
            s += *z * *w;
        }
    }
    s
}

/// `fc2(ReLU(fc1(feature)))`.
pub fn score<T: Real>(feature: &[T], head: &HeadParams<T>) -> Result<T> {
    check_len("score feature", head.input_len(), feature.len())?;
    let z = fc1_forward(head, feature, 1);
    let s = fc2_forward(head, &z);
    if !s.is_finite() {
        return Err(Error::NonFinite {
            layer: "fc2".into(),
        });
    }
    Ok(s)
}

/// Pairwise hinge loss `max(0, g + score_crop - score_full)`.
#[inline]
pub fn pair_loss<T: Real>(score_full: T, score_crop: T, gap: T) -> T {
    (gap + (score_crop - score_full)).max(T::zero())
}

/// Head-only batch result.
#[derive(Debug, Clone)]
pub struct HeadBatch<T> {
    /// Summed pair loss.
    pub loss: T,
    pub pairs: usize,
    pub violated: usize,
    pub grads: HeadParams<T>,
    /// `2B × D` gradient w.r.t. the inputs (full rows, then crop rows), if
    /// requested.
    pub input_grads: Option<Vec<T>>,
}

/// Summed hinge loss and head gradients for `B` pairs given row-major
/// `B × D` full-image and crop features.
pub fn head_loss_and_grads<T: Real>(
    head: &HeadParams<T>,
    full: &[T],
    crop: &[T],
    gap: T,
    want_input_grads: bool,
) -> Result<HeadBatch<T>> {
    let d = head.input_len();
    if full.is_empty() || full.len() % d != 0 {
        return Err(Error::Empty("pair batch"));
    }
    check_len("crop feature batch", full.len(), crop.len())?;
    let b = full.len() / d;
    let zf = fc1_forward(head, full, b);
    let zc = fc1_forward(head, crop, b);
    if !zf.iter().chain(&zc).all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            layer: "fc1".into(),
        });
    }

    let mut loss = T::zero();
    let mut active = Vec::new();
    for i in 0..b {
        let sf = fc2_forward(head, &zf[i * HIDDEN..(i + 1) * HIDDEN]);
        let sc = fc2_forward(head, &zc[i * HIDDEN..(i + 1) * HIDDEN]);
        if !(sf.is_finite() && sc.is_finite()) {
            return Err(Error::NonFinite {
                layer: "fc2".into(),
            });
        }
        let l = pair_loss(sf, sc, gap);
        if l > T::zero() {
            loss += l;
            active.push(i);
        }
    }

    let mut grads = HeadParams::zeros(d);
    let mut input_grads = want_input_grads.then(|| vec![T::zero(); 2 * b * d]);
    if active.is_empty() {
        return Ok(HeadBatch {
            loss,
            pairs: b,
            violated: 0,
            grads,
            input_grads,
        });
    }

    // Rows of the active sub-batch: full images carry d(loss)/d(score) = -1,
    // crops +1. The fc2 bias gradient cancels exactly.
    let rows = 2 * active.len();
    let mut x = Vec::with_capacity(rows * d);
    let mut dz = vec![T::zero(); rows * HIDDEN];
    for (r, (src, z, i, sign)) in active
        .iter()
        .map(|&i| (full, &zf, i, -T::one()))
        .chain(active.iter().map(|&i| (crop, &zc, i, T::one())))
        .enumerate()
    {
        x.extend_from_slice(&src[i * d..(i + 1) * d]);
        let zrow = &z[i * HIDDEN..(i + 1) * HIDDEN];
        let drow = &mut dz[r * HIDDEN..(r + 1) * HIDDEN];
        for j in 0..HIDDEN {
            if zrow[j] > T::zero() {
                grads.fc2_w.data[j] += sign * zrow[j];
                drow[j] = sign * head.fc2_w.data[j];
            }
        }
    }
    for drow in dz.chunks_exact(HIDDEN) {
        for (g, v) in grads.fc1_b.data.iter_mut().zip(drow) {
            *g += *v;
        }
    }
    // dW1 = Xᵀ · dZ
    T::gemm(
        d,
        rows,
        HIDDEN,
        T::one(),
        &x,
        (1, d as isize),
        &dz,
        (HIDDEN as isize, 1),
        T::zero(),
        &mut grads.fc1_w.data,
        (HIDDEN as isize, 1),
    );

    if let Some(ig) = input_grads.as_mut() {
        // dX = dZ · W1ᵀ, scattered back to batch rows.
        let mut dx = vec![T::zero(); rows * d];
        T::gemm(
            rows,
            HIDDEN,
            d,
            T::one(),
            &dz,
            (HIDDEN as isize, 1),
            &head.fc1_w.data,
            (1, HIDDEN as isize),
            T::zero(),
            &mut dx,
            (d as isize, 1),
        );
        let n = active.len();
        for (k, &i) in active.iter().enumerate() {
            ig[i * d..(i + 1) * d].copy_from_slice(&dx[k * d..(k + 1) * d]);
            ig[(b + i) * d..(b + i + 1) * d].copy_from_slice(&dx[(n + k) * d..(n + k + 1) * d]);
        }
    }
    Ok(HeadBatch {
        loss,
        pairs: b,
        violated: active.len(),
        grads,
        input_grads,
    })
}

/// Summed hinge loss over `(full, crop)` network inputs and gradients for
/// every parameter. Backbone gradients stay zero for a fixed backbone.
pub fn batch_loss_and_grads<T: Real>(
    ranker: &Ranker<T>,
    batch: &[(ImageBuffer, ImageBuffer)],
    gap: T,
) -> Result<(T, RankerParams<T>)> {
    if batch.is_empty() {
        return Err(Error::Empty("pair batch"));
    }
    let arch = &ranker.arch;
    let params = &ranker.params;
    let d = arch.feature_len()?;
    let trainable = arch.backbone.trainable();
    let b = batch.len();

    // Full images first, then crops, matching the head's row order.
    let mut features = Vec::with_capacity(2 * b * d);
    let mut traces = Vec::new();
    for img in batch.iter().map(|p| &p.0).chain(batch.iter().map(|p| &p.1)) {
        let feature = if trainable {
            let (map, trace) = backbone_forward_traced(img, &arch.backbone, &params.backbone)?;
            let f = arch.pooling.forward(&map)?;
            traces.push((map, trace));
            f
        } else {
            ranker.features(img)?
        };
        features.extend_from_slice(&feature);
    }

    let (full, crop) = features.split_at(b * d);
    let head = head_loss_and_grads(&params.head, full, crop, gap, trainable)?;
    let mut grads = RankerParams {
        backbone: BackboneParams::zeros(&arch.backbone),
        head: head.grads,
    };
    if let Some(ig) = head.input_grads {
        for (row, (map, trace)) in ig.chunks_exact(d).zip(&traces) {
            if row.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let gmap: FeatureMap<T> = arch.pooling.backward(map, row)?;
            backbone_backward(
                &arch.backbone,
                &params.backbone,
                trace,
                &gmap,
                &mut grads.backbone,
            )?;
        }
    }
    Ok((head.loss, grads))
}

/// Classical momentum: `v = momentum * v + grad; p -= lr * v`. A fixed
/// backbone is neither decayed nor updated.
pub fn sgd_momentum_step<T: Real>(
    params: &mut RankerParams<T>,
    grads: &RankerParams<T>,
    velocity: &mut RankerParams<T>,
    lr: T,
    momentum: T,
    update_backbone: bool,
) {
    let skip = if update_backbone {
        0
    } else {
        params.backbone_tensor_count()
    };
    let ps = params.tensors_mut();
    let gs = grads.tensors();
    let vs = velocity.tensors_mut();
    for ((p, g), v) in ps.into_iter().zip(gs).zip(vs).skip(skip) {
        for ((pv, gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
            *vv = momentum * *vv + *gv;
            *pv -= lr * *vv;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_after: f64,
    pub lr_switch_iter: u64,
    pub momentum: f64,
    pub batch_pairs: usize,
    pub total_iters: u64,
    pub validate_every: u64,
    pub gap: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 0.01,
            lr_after: 0.002,
            lr_switch_iter: 10_000,
            momentum: 0.9,
            batch_pairs: 100,
            total_iters: 15_000,
            validate_every: 1_000,
            gap: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The default schedule compressed to `total_iters`, keeping the switch
    /// at two thirds and fifteen validations.
    pub fn scaled(total_iters: u64) -> Self {
        let d = Self::default();
        let total_iters = total_iters.max(3);
        Self {
            lr_switch_iter: total_iters * d.lr_switch_iter / d.total_iters,
            validate_every: (total_iters * d.validate_every / d.total_iters).max(1),
            total_iters,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.lr_initial > 0.0
            && self.lr_after > 0.0
            && self.momentum > 0.0
            && self.batch_pairs > 0
            && self.total_iters > 0
            && self.validate_every > 0
            && self.lr_switch_iter > 0;
        if !positive {
            return Err(Error::Config(format!(
                "training settings must be positive: {self:?}"
            )));
        }
        if self.lr_switch_iter >= self.total_iters {
            return Err(Error::Config(format!(
                "lr switch at {} is not before the last iteration {}",
                self.lr_switch_iter, self.total_iters
            )));
        }
        if !(self.gap > 0.0) {
            return Err(Error::Config(format!("gap {} must be positive", self.gap)));
        }
        Ok(())
    }

    /// Learning rate of 1-based iteration `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        if iter <= self.lr_switch_iter {
            self.lr_initial
        } else {
            self.lr_after
        }
    }
}

/// Source of minibatch gradients and validation losses for [`train`].
pub trait PairObjective<T: Real> {
    /// Summed hinge loss, number of pairs and gradients for the minibatch
    /// of 1-based `iteration`.
    fn train_batch(
        &mut self,
        iteration: u64,
        ranker: &Ranker<T>,
    ) -> Result<(f64, usize, RankerParams<T>)>;

    /// Mean pair hinge loss over the held-out split, without augmentation.
    fn validation_loss(&mut self, ranker: &Ranker<T>) -> Result<f64>;
}

/// Progress callbacks; all optional.
pub trait TrainMonitor {
    fn validated(&mut self, _point: &CurvePoint, _improved: bool) {}

    /// Polled once per iteration; returning true ends training early with
    /// the best validated snapshot.
    fn should_stop(&mut self) -> bool {
        false
    }
}

impl TrainMonitor for () {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iteration: u64,
    /// Mean pair loss over the minibatches since the previous validation.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub ranker: Ranker<T>,
    pub iteration: u64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Lowest validation loss seen; earliest wins ties.
    pub best: Snapshot<T>,
    pub curve: Vec<CurvePoint>,
    pub interrupted: bool,
}

#[derive(Debug, Clone)]
pub struct TrainFailure<T> {
    pub error: Error,
    pub iteration: u64,
    pub last_good: Option<Snapshot<T>>,
}

/// Minibatch SGD with momentum, a one-step learning-rate schedule and
/// validation-based model selection.
pub fn train<T: Real, O: PairObjective<T> + ?Sized>(
    init: Ranker<T>,
    cfg: &TrainConfig,
    objective: &mut O,
    monitor: &mut dyn TrainMonitor,
) -> core::result::Result<TrainOutcome<T>, TrainFailure<T>> {
    let fail = |error: Error, iteration: u64, last_good: Option<Snapshot<T>>| TrainFailure {
        error,
        iteration,
        last_good,
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, 0, None));
    }
    let update_backbone = init.arch.backbone.trainable();
    let mut ranker = init;
    let mut velocity = ranker.params.zeros_like();
    let mut best: Option<Snapshot<T>> = None;
    let mut curve = Vec::new();
    let (mut window_loss, mut window_pairs) = (0.0f64, 0usize);
    let mut interrupted = false;
    let mut last_validated = 0;

    let validate = |ranker: &Ranker<T>,
                    iteration: u64,
                    train_loss: f64,
                    objective: &mut O,
                    best: &mut Option<Snapshot<T>>,
                    curve: &mut Vec<CurvePoint>,
                    monitor: &mut dyn TrainMonitor|
     -> Result<()> {
        let val_loss = objective.validation_loss(ranker)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                layer: "validation loss".into(),
            });
        }
        let point = CurvePoint {
            iteration,
            train_loss,
            val_loss,
        };
        let improved = best.as_ref().map_or(true, |b| val_loss < b.val_loss);
        if improved {
            *best = Some(Snapshot {
                ranker: ranker.clone(),
                iteration,
                val_loss,
            });
        }
        curve.push(point);
        monitor.validated(&point, improved);
        Ok(())
    };

    for iteration in 1..=cfg.total_iters {
        if monitor.should_stop() {
            interrupted = true;
            break;
        }
        let (loss, pairs, grads) = match objective.train_batch(iteration, &ranker) {
            Ok(v) => v,
            Err(e) => return Err(fail(e, iteration, best)),
        };
        if !loss.is_finite() {
            return Err(fail(
                Error::NonFinite {
                    layer: "batch loss".into(),
                },
                iteration,
                best,
            ));
        }
        window_loss += loss;
        window_pairs += pairs;
        let lr = T::from_f64_lossy(cfg.lr_at(iteration));
        sgd_momentum_step(
            &mut ranker.params,
            &grads,
            &mut velocity,
            lr,
            T::from_f64_lossy(cfg.momentum),
            update_backbone,
        );
        if !ranker.params.is_finite() {
            return Err(fail(
                Error::NonFinite {
                    layer: "parameters".into(),
                },
                iteration,
                best,
            ));
        }

        if iteration % cfg.validate_every == 0 || iteration == cfg.total_iters {
            let train_loss = window_loss / window_pairs.max(1) as f64;
            if let Err(e) = validate(
                &ranker, iteration, train_loss, objective, &mut best, &mut curve, monitor,
            ) {
                return Err(fail(e, iteration, best));
            }
            last_validated = iteration;
            window_loss = 0.0;
            window_pairs = 0;
        }
    }

    if best.is_none() {
        let train_loss = window_loss / window_pairs.max(1) as f64;
        if let Err(e) = validate(
            &ranker,
            last_validated,
            train_loss,
            objective,
            &mut best,
            &mut curve,
            monitor,
        ) {
            return Err(fail(e, last_validated, None));
        }
    }
    Ok(TrainOutcome {
        best: best.expect("validated at least once"),
        curve,
        interrupted,
    })
}
