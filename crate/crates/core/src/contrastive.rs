//! Self-supervised Siamese inference network: query/key encoders coupled by
//! a momentum update, a FIFO dictionary of key representations, and the
//! temperature-scaled InfoNCE objective.

use std::collections::VecDeque;

use canvasinfill_tensor::{Bound, Graph, ParamSet, Sgd, Tensor, Var};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::image::Image;
use crate::mask::{apply_mask, MaskSampler, MaskedImage};
use crate::nn;

/// Norms below this make a representation undefined.
pub const MIN_REPR_NORM: f64 = 1e-12;

/// Six-stage convolutional encoder: stage 0 keeps full resolution, stages
/// 1..5 halve it. Each stage is conv3x3 -> group norm -> ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub norm_groups: usize,
    pub repr_dim: usize,
}

impl EncoderConfig {
    pub const STAGES: usize = 6;

    /// Widths `base * [1, 2, 4, 8, 8, 8]`.
    pub fn with_base(base: usize, repr_dim: usize) -> Self {
        EncoderConfig {
            in_channels: 4,
            widths: [1, 2, 4, 8, 8, 8].iter().map(|m| m * base).collect(),
            norm_groups: 8,
            repr_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != Self::STAGES {
            return Err(config(format!("encoder needs {} stage widths, got {}", Self::STAGES, self.widths.len())));
        }
        if self.widths.contains(&0) || self.repr_dim == 0 || self.norm_groups == 0 {
            return Err(config("encoder widths, repr_dim and norm_groups must be positive"));
        }
        Ok(())
    }

    pub fn stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    /// Spatial downsampling factor of the deepest stage.
    pub fn total_stride() -> usize {
        1 << (Self::STAGES - 1)
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_base(32, 128)
    }
}

/// Encoder trunk parameters under `encoder.` and the projection head under `proj`.
pub fn init_encoder(cfg: &EncoderConfig, rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::new();
    let mut cin = cfg.in_channels;
    for (i, &c) in cfg.widths.iter().enumerate() {
        nn::init_conv(&mut p, rng, &format!("encoder.s{i}.conv"), c, cin, 3);
        nn::init_norm(&mut p, &format!("encoder.s{i}.norm"), c);
        cin = c;
    }
    nn::init_linear(&mut p, rng, "proj", cin, cfg.repr_dim, 1.0);
    p
}

/// The six stage outputs for an `[N, 4, H, W]` input.
pub fn encoder_features<'g>(b: &Bound<'g>, cfg: &EncoderConfig, x: Var<'g>) -> Vec<Var<'g>> {
    let mut h = x;
    let mut out = Vec::with_capacity(cfg.widths.len());
    for (i, &c) in cfg.widths.iter().enumerate() {
        h = nn::conv(b, &format!("encoder.s{i}.conv"), h, EncoderConfig::stride(i), 1);
        h = nn::group_norm(b, &format!("encoder.s{i}.norm"), h, nn::groups_for(c, cfg.norm_groups));
        h = h.relu();
        out.push(h);
    }
    out
}

/// Pooled, projected, un-normalized embeddings `[N, d]`.
pub fn embed_batch<'g>(b: &Bound<'g>, cfg: &EncoderConfig, x: Var<'g>) -> Var<'g> {
    let deepest = *encoder_features(b, cfg, x).last().unwrap();
    nn::linear(b, "proj", nn::global_avg_pool(deepest))
}

/// L2-normalizes each row; fails when any row is (numerically) zero.
pub fn normalize_rows<'g>(z: Var<'g>) -> Result<Var<'g>> {
    let s = z.shape();
    let norms = z.square().sum_to(&[s[0], 1]).sqrt();
    if let Some(&norm) = norms.value().iter().find(|&&n| !(n >= MIN_REPR_NORM)) {
        return Err(Error::DegenerateRepresentation { norm });
    }
    Ok(z.mul(norms.recip()))
}

/// Unit-length representations `[N, d]` for a batch of 4-channel inputs.
pub fn encode_batch<'g>(b: &Bound<'g>, cfg: &EncoderConfig, x: Var<'g>) -> Result<Var<'g>> {
    normalize_rows(embed_batch(b, cfg, x))
}

/// A unit-length embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation(Array1<f64>);

impl Representation {
    pub fn from_unnormalized(v: Array1<f64>) -> Result<Self> {
        let norm = v.dot(&v).sqrt();
        if !(norm >= MIN_REPR_NORM) {
            return Err(Error::DegenerateRepresentation { norm });
        }
        Ok(Representation(v / norm))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dot(&self, other: &Representation) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.dot(&self.0).sqrt()
    }
}

/// Encodes one masked image with the given encoder parameters.
pub fn encode(params: &ParamSet, cfg: &EncoderConfig, x: &MaskedImage, image_size: usize) -> Result<Representation> {
    let (h, w) = (x.pixels.height(), x.pixels.width());
    if (h, w) != (image_size, image_size) {
        return Err(contract(format!("encoder expects {image_size}x{image_size} input, got {h}x{w}")));
    }
    let g = Graph::new();
    let b = params.bind(&g, false);
    let input = g.constant(x.network_input().insert_axis(Axis(0)).into_dyn());
    let z = embed_batch(&b, cfg, input).value();
    let row = z.index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap();
    Representation::from_unnormalized(row)
}

/// Fixed-capacity FIFO of key representations; the oldest entries are
/// evicted first.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyQueue {
    capacity: usize,
    items: VecDeque<Representation>,
    total_enqueued: u64,
    total_evicted: u64,
}

impl KeyQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(config("queue capacity must be at least 1"));
        }
        Ok(KeyQueue { capacity, items: VecDeque::with_capacity(capacity), total_enqueued: 0, total_evicted: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_enqueued(&self) -> u64 {
        self.total_enqueued
    }

    pub fn total_evicted(&self) -> u64 {
        self.total_evicted
    }

    pub fn iter(&self) -> impl Iterator<Item = &Representation> {
        self.items.iter()
    }

    /// Appends `batch` and returns the evicted (oldest) entries in order.
    pub fn enqueue(&mut self, batch: &[Representation]) -> Result<Vec<Representation>> {
        if batch.len() > self.capacity {
            return Err(contract(format!("batch of {} keys exceeds queue capacity {}", batch.len(), self.capacity)));
        }
        if let (Some(first), Some(b)) = (self.items.front(), batch.first()) {
            if first.dim() != b.dim() {
                return Err(contract("key dimension does not match the queue"));
            }
        }
        self.items.extend(batch.iter().cloned());
        let surplus = self.items.len().saturating_sub(self.capacity);
        let evicted: Vec<Representation> = self.items.drain(..surplus).collect();
        self.total_enqueued += batch.len() as u64;
        self.total_evicted += evicted.len() as u64;
        Ok(evicted)
    }

    /// Keys as rows of a `[len, d]` matrix (oldest first).
    pub fn to_matrix(&self) -> Array2<f64> {
        let d = self.items.front().map_or(0, Representation::dim);
        let mut m = Array2::zeros((self.items.len(), d));
        for (mut row, r) in m.outer_iter_mut().zip(&self.items) {
            row.assign(r.as_array());
        }
        m
    }

    /// Rebuilds a queue from stored rows (checkpoint restore).
    pub fn from_matrix(capacity: usize, rows: &Array2<f64>, enqueued: u64, evicted: u64) -> Result<Self> {
        let mut q = KeyQueue::new(capacity)?;
        if rows.nrows() > capacity {
            return Err(contract("stored queue exceeds its capacity"));
        }
        q.items = rows.outer_iter().map(|r| Representation(r.to_owned())).collect();
        q.total_enqueued = enqueued;
        q.total_evicted = evicted;
        Ok(q)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub repr_dim: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { tau: 0.07, momentum: 0.9, queue_capacity: 1024, repr_dim: 128, lr: 0.015, sgd_momentum: 0.9 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.queue_capacity == 0 || self.repr_dim == 0 {
            return Err(config("queue_capacity and repr_dim must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(config("pretraining lr must be > 0"));
        }
        Ok(())
    }
}

/// `-log softmax(logits)[0]` with logits `z_q . [z_pos, negatives...] / tau`.
pub fn info_nce(z_q: &Representation, z_pos: &Representation, queue: &KeyQueue, tau: f64) -> Result<f64> {
    if queue.is_empty() {
        return Err(contract("InfoNCE needs at least one negative key"));
    }
    if !(tau > 0.0) {
        return Err(contract("tau must be > 0"));
    }
    let logits: Vec<f64> = std::iter::once(z_q.dot(z_pos)).chain(queue.iter().map(|k| z_q.dot(k))).map(|s| s / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[0])
}

/// Logits added where a key must not act as its own negative.
const EXCLUDED_LOGIT: f64 = -1e9;

/// Batched InfoNCE on graph values.
///
/// Returns `(mean loss, logits [N, 1 + K])`; column 0 holds the positive.
/// With `exclude_self`, `negatives` is the key batch itself and entry
/// `(i, 1 + i)` is masked out.
pub fn info_nce_batch<'g>(
    z_q: Var<'g>,
    z_pos: Var<'g>,
    negatives: Var<'g>,
    tau: f64,
    exclude_self: bool,
) -> (Var<'g>, Var<'g>) {
    let n = z_q.shape()[0];
    let pos = z_q.mul(z_pos).sum_to(&[n, 1]);
    let neg = z_q.matmul(negatives.transpose_last2());
    let k = neg.shape()[1];
    let mut logits = Var::concat(&[pos, neg], 1).scale(1.0 / tau);
    if exclude_self {
        let mask = ArrayD::from_shape_fn(IxDyn(&[n, 1 + k]), |ix| if ix[1] == ix[0] + 1 { EXCLUDED_LOGIT } else { 0.0 });
        logits = logits.add_const(&mask);
    }
    let loss = logits.logsumexp_last().sub(logits.slice_axis(1, 0, 1).reshape(&[n])).mean();
    (loss, logits)
}

/// `theta_k <- m * theta_k + (1 - m) * theta_q` for every parameter array.
pub fn momentum_update(theta_q: &ParamSet, theta_k: &ParamSet, m: f64) -> Result<ParamSet> {
    if !(0.0..1.0).contains(&m) {
        return Err(config(format!("momentum must lie in [0, 1), got {m}")));
    }
    if !theta_q.same_layout(theta_k) {
        return Err(contract("query and key encoders have different parameter layouts"));
    }
    let mut out = theta_k.clone();
    for (name, k) in out.iter_mut() {
        let q = theta_q.get(name).unwrap();
        k.zip_mut_with(q, |k, &q| *k = m * *k + (1.0 - m) * q);
    }
    Ok(out)
}

/// The same image under two independently drawn masks: `(x_q, x_k)`.
pub fn make_positive_pair(image: &Image, sampler: &MaskSampler, rng: &mut impl Rng) -> Result<(MaskedImage, MaskedImage)> {
    let (h, w) = (image.height(), image.width());
    let mq = sampler.sample(rng, h, w)?;
    let mk = sampler.sample(rng, h, w)?;
    Ok((apply_mask(image, &mq)?, apply_mask(image, &mk)?))
}

/// Everything the pretraining loop mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    pub cfg: ContrastiveConfig,
    pub encoder: EncoderConfig,
    pub query: ParamSet,
    pub key: ParamSet,
    pub queue: KeyQueue,
    pub sgd: Sgd,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainStats {
    pub loss: f64,
    /// Fraction of queries whose positive key outscored every negative.
    pub accuracy: f64,
    /// Negatives each query was scored against (0 when the step only seeded the queue).
    pub negatives: usize,
}

impl PretrainState {
    /// Fresh state; the key encoder starts as an exact copy of the query encoder.
    pub fn new(cfg: ContrastiveConfig, encoder: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        encoder.validate()?;
        if encoder.repr_dim != cfg.repr_dim {
            return Err(config("encoder repr_dim differs from the contrastive repr_dim"));
        }
        let query = init_encoder(&encoder, rng);
        Ok(PretrainState {
            key: query.clone(),
            query,
            queue: KeyQueue::new(cfg.queue_capacity)?,
            sgd: Sgd::new(cfg.lr, cfg.sgd_momentum),
            cfg,
            encoder,
            step: 0,
        })
    }
}

fn stack_inputs(xs: &[MaskedImage]) -> Result<Tensor> {
    let arrays: Vec<_> = xs.iter().map(MaskedImage::network_input).collect();
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).map_err(|_| contract("batch images must share a size"))?.into_dyn())
}

/// One optimization step of the inference network.
///
/// Queries go through the query encoder with gradients; keys go through
/// the key encoder without. The query encoder takes an SGD step, the key
/// encoder follows by momentum, and the batch keys are enqueued. While the
/// queue is still empty the batch's own keys serve as negatives.
pub fn pretrain_step(
    state: &mut PretrainState,
    batch: &[Image],
    sampler: &MaskSampler,
    rng: &mut impl Rng,
) -> Result<PretrainStats> {
    if batch.is_empty() {
        return Err(contract("empty pretraining batch"));
    }
    if batch.len() > state.queue.capacity() {
        return Err(contract("batch larger than the queue capacity"));
    }
    let pairs = batch.iter().map(|img| make_positive_pair(img, sampler, rng)).collect::<Result<Vec<_>>>()?;
    let (xq, xk): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let (xq, xk) = (stack_inputs(&xq)?, stack_inputs(&xk)?);

    let g = Graph::new();
    let bq = state.query.bind(&g, true);
    let z_q = encode_batch(&bq, &state.encoder, g.constant(xq))?;
    let z_k = g.no_grad(|| {
        let bk = state.key.bind(&g, false);
        encode_batch(&bk, &state.encoder, g.constant(xk))
    })?;
    let keys: Vec<Representation> = z_k
        .value()
        .outer_iter()
        .map(|r| Representation(r.to_owned().into_dimensionality().unwrap()))
        .collect();

    let warmup = state.queue.is_empty();
    let negatives = if warmup { batch.len() - 1 } else { state.queue.len() };
    let mut stats = PretrainStats { loss: 0.0, accuracy: 0.0, negatives };
    if negatives > 0 {
        let neg = if warmup { z_k } else { g.constant(state.queue.to_matrix().into_dyn()) };
        let (loss, logits) = info_nce_batch(z_q, z_k, neg, state.cfg.tau, warmup);
        stats.loss = loss.item();
        stats.accuracy = top1_accuracy(&logits.value());
        let grads = bq.grads(loss);
        state.sgd.step(&mut state.query, &grads);
        state.key = momentum_update(&state.query, &state.key, state.cfg.momentum)?;
    }
    state.queue.enqueue(&keys)?;
    state.step += 1;
    Ok(stats)
}

/// Fraction of `images` whose fresh positive key outscores every key in
/// the queue. Nothing is updated; chance level is `1 / (queue.len() + 1)`.
pub fn retrieval_accuracy(state: &PretrainState, images: &[Image], sampler: &MaskSampler, rng: &mut impl Rng) -> Result<f64> {
    if state.queue.is_empty() {
        return Err(contract("retrieval needs a non-empty queue"));
    }
    if images.is_empty() {
        return Err(contract("retrieval needs at least one image"));
    }
    let mut hits = 0.0;
    for chunk in images.chunks(16) {
        let pairs = chunk.iter().map(|img| make_positive_pair(img, sampler, rng)).collect::<Result<Vec<_>>>()?;
        let (xq, xk): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let g = Graph::new();
        let z_q = encode_batch(&state.query.bind(&g, false), &state.encoder, g.constant(stack_inputs(&xq)?))?;
        let z_k = encode_batch(&state.key.bind(&g, false), &state.encoder, g.constant(stack_inputs(&xk)?))?;
        let neg = g.constant(state.queue.to_matrix().into_dyn());
        let (_, logits) = info_nce_batch(z_q, z_k, neg, state.cfg.tau, false);
        hits += top1_accuracy(&logits.value()) * chunk.len() as f64;
    }
    Ok(hits / images.len() as f64)
}

fn top1_accuracy(logits: &Tensor) -> f64 {
    let rows = logits.shape()[0];
    let hits = logits
        .outer_iter()
        .filter(|row| row.iter().skip(1).all(|&v| v < row[0]))
        .count();
    hits as f64 / rows as f64
}

/// Query-side InfoNCE loss of a single representation as a graph value,
/// for gradient checks against `z_q`.
pub fn info_nce_var<'g>(z_q: Var<'g>, z_pos: &Representation, queue: &KeyQueue, tau: f64) -> Var<'g> {
    let g = z_q.graph();
    let d = z_pos.dim();
    let pos = g.constant(z_pos.as_array().clone().into_shape_with_order(IxDyn(&[1, d])).unwrap());
    let neg = g.constant(queue.to_matrix().into_dyn());
    info_nce_batch(z_q.reshape(&[1, d]), pos, neg, tau, false).0
}
