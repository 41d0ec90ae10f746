//! Two-stage training: contrastive pretraining of the inference network,
//! then joint generator/critic training. Both stages checkpoint their full
//! state (parameters, optimizer moments, RNG position) so a resumed run
//! continues bit-for-bit.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use canvasinfill_tensor::{Adam, Graph, ParamSet, Sgd, Tensor};
use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Archive;
use crate::config::TrainConfig;
use crate::contrastive::{pretrain_step, KeyQueue, PretrainState, PretrainStats};
use crate::data::Dataset;
use crate::error::{config, contract, io_err, Error, Result};
use crate::generator::{generator_forward, init_generator, load_pretrained_encoder, GeneratorConfig};
use crate::image::{Image, Mask};
use crate::losses::{critic_loss, scale_targets, total_loss, ConvCritic, FeatureExtractor, LossBreakdown, LossWeights};
use crate::mask::{apply_mask, MaskSampler};

pub const PRETRAIN_FILE: &str = "pretrain.safetensors";
pub const JOINT_FILE: &str = "joint.safetensors";

/// `key=value` pairs joined by spaces; floats use the shortest exact form.
pub fn log_line(stage: &str, step: u64, fields: &[(&str, f64)]) -> String {
    let mut s = format!("stage={stage} step={step}");
    for (k, v) in fields {
        s.push_str(&format!(" {k}={v}"));
    }
    s
}

fn write_log(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(io_err("log stream"))
}

fn rng_to_meta(rng: &ChaCha8Rng, prefix: &str, meta: &mut std::collections::BTreeMap<String, String>) {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    meta.insert(format!("{prefix}.seed"), seed);
    meta.insert(format!("{prefix}.stream"), rng.get_stream().to_string());
    meta.insert(format!("{prefix}.word_pos"), rng.get_word_pos().to_string());
}

fn rng_from_meta(a: &Archive, path: &Path, prefix: &str) -> Result<ChaCha8Rng> {
    let bad = |what: &str| Error::Checkpoint { path: path.to_path_buf(), message: format!("malformed {prefix}.{what}") };
    let hex = a.require_meta(path, &format!("{prefix}.seed"))?;
    if hex.len() != 64 {
        return Err(bad("seed"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(a.require_meta(path, &format!("{prefix}.stream"))?.parse().map_err(|_| bad("stream"))?);
    rng.set_word_pos(a.require_meta(path, &format!("{prefix}.word_pos"))?.parse().map_err(|_| bad("word_pos"))?);
    Ok(rng)
}

fn parse_meta<T: std::str::FromStr>(a: &Archive, path: &Path, key: &str) -> Result<T> {
    a.require_meta(path, key)?
        .parse()
        .map_err(|_| Error::Checkpoint { path: path.to_path_buf(), message: format!("malformed `{key}`") })
}

fn store(a: &mut Archive, prefix: &str, p: &ParamSet) {
    a.tensors.extend_prefixed(prefix, p);
}

/// Draws a batch without replacement (the whole set when it is smaller),
/// flipping each image horizontally with probability 0.5 when `flip`.
pub fn draw_batch(data: &Dataset, batch: usize, flip: bool, rng: &mut impl Rng) -> Result<Vec<Image>> {
    if data.is_empty() {
        return Err(contract("cannot draw a batch from an empty dataset"));
    }
    let idx = index::sample(rng, data.len(), batch.min(data.len()));
    idx.iter()
        .map(|i| {
            let im = data.get(i)?;
            Ok(if flip && rng.random_bool(0.5) { im.flipped_horizontal() } else { im })
        })
        .collect()
}

/// Stage-one state and its sampling configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainRun {
    pub state: PretrainState,
    pub rng: ChaCha8Rng,
    pub sampler: MaskSampler,
    pub batch: usize,
    pub flip: bool,
}

impl PretrainRun {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let state = PretrainState::new(cfg.contrastive(), cfg.encoder(), &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(PretrainRun { state, rng, sampler: cfg.sampler(), batch: cfg.pretrain_batch, flip: cfg.flip })
    }

    pub fn step(&mut self, data: &Dataset) -> Result<PretrainStats> {
        let batch = draw_batch(data, self.batch, self.flip, &mut self.rng)?;
        pretrain_step(&mut self.state, &batch, &self.sampler, &mut self.rng)
    }

    pub fn archive(&self, cfg: &TrainConfig) -> Archive {
        let mut a = Archive::new();
        store(&mut a, "query/", &self.state.query);
        store(&mut a, "key/", &self.state.key);
        store(&mut a, "sgd/", self.state.sgd.state());
        if !self.state.queue.is_empty() {
            a.tensors.insert("queue", self.state.queue.to_matrix().into_dyn());
        }
        let m = &mut a.metadata;
        m.insert("stage".into(), "pretrain".into());
        m.insert("step".into(), self.state.step.to_string());
        m.insert("config".into(), cfg.to_toml());
        m.insert("queue.enqueued".into(), self.state.queue.total_enqueued().to_string());
        m.insert("queue.evicted".into(), self.state.queue.total_evicted().to_string());
        rng_to_meta(&self.rng, "rng", m);
        a
    }

    pub fn resume(cfg: &TrainConfig, a: &Archive, path: &Path) -> Result<Self> {
        if a.meta("stage") != Some("pretrain") {
            return Err(Error::Checkpoint { path: path.to_path_buf(), message: "not a pretraining checkpoint".into() });
        }
        let mut run = PretrainRun::new(cfg)?;
        let query = a.tensors.subset("query/");
        if !query.same_layout(&run.state.query) {
            return Err(Error::Checkpoint { path: path.to_path_buf(), message: "encoder layout differs from the config".into() });
        }
        run.state.query = query;
        run.state.key = a.tensors.subset("key/");
        let mut sgd = Sgd::new(cfg.pretrain_lr, cfg.sgd_momentum);
        sgd.load_state(a.tensors.subset("sgd/"));
        run.state.sgd = sgd;
        let rows = match a.tensors.get("queue") {
            Some(t) => t.clone().into_dimensionality().map_err(|_| contract("queue tensor is not 2-D"))?,
            None => Array2::zeros((0, cfg.repr_dim)),
        };
        run.state.queue = KeyQueue::from_matrix(
            cfg.queue_capacity,
            &rows,
            parse_meta(a, path, "queue.enqueued")?,
            parse_meta(a, path, "queue.evicted")?,
        )?;
        run.state.step = parse_meta(a, path, "step")?;
        run.rng = rng_from_meta(a, path, "rng")?;
        Ok(run)
    }
}

/// Runs stage one for `cfg.pretrain_steps`, logging one line per step, and
/// writes `pretrain.safetensors` under `cfg.out_dir`.
pub fn run_pretrain(cfg: &TrainConfig, data: &Dataset, log: &mut dyn Write) -> Result<(PretrainRun, PathBuf)> {
    if data.is_empty() {
        return Err(Error::Ingestion { path: cfg.data_dir.clone().unwrap_or_default(), message: "dataset is empty".into() });
    }
    let mut run = PretrainRun::new(cfg)?;
    while run.state.step < cfg.pretrain_steps {
        let s = run.step(data)?;
        let line = log_line("pretrain", run.state.step, &[("loss", s.loss), ("accuracy", s.accuracy), ("negatives", s.negatives as f64)]);
        write_log(log, &line)?;
        if cfg.checkpoint_every > 0 && run.state.step % cfg.checkpoint_every == 0 {
            run.archive(cfg).save(&cfg.out_dir.join(PRETRAIN_FILE))?;
        }
    }
    let path = cfg.out_dir.join(PRETRAIN_FILE);
    run.archive(cfg).save(&path)?;
    Ok((run, path))
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointStats {
    pub step: u64,
    pub losses: LossBreakdown,
    /// `None` when the adversarial weight is zero and the critic is idle.
    pub critic: Option<f64>,
    /// Mean |y_hat_1 - y| over hole pixels of this batch.
    pub masked_l1: f64,
}

impl JointStats {
    pub fn log_line(&self) -> String {
        let l = &self.losses;
        let mut fields = vec![("total", l.total), ("structure", l.structure), ("texture", l.texture)];
        let names = ["rec1", "rec2", "rec3", "rec4", "rec5", "rec6"];
        fields.extend(l.rec.iter().zip(names).map(|(v, n)| (n, *v)));
        fields.extend([("per", l.per), ("style", l.style), ("tv", l.tv), ("adv_g", l.adv_g)]);
        if let Some(c) = self.critic {
            fields.push(("critic", c));
        }
        fields.push(("masked_l1", self.masked_l1));
        log_line("joint", self.step, &fields)
    }
}

/// Stage-two state.
#[derive(Clone, Debug, PartialEq)]
pub struct JointRun {
    pub step: u64,
    pub generator: ParamSet,
    pub critic: ParamSet,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub rng: ChaCha8Rng,
    pub gen_cfg: GeneratorConfig,
    pub critic_arch: ConvCritic,
    pub weights: LossWeights,
    pub sampler: MaskSampler,
    pub phi: FeatureExtractor,
    pub batch: usize,
    pub flip: bool,
}

impl JointRun {
    /// Fresh stage-two state; the encoder comes from `init` (a pretraining
    /// archive) when `cfg.use_contrastive_init` is set.
    pub fn new(cfg: &TrainConfig, init: Option<&Archive>) -> Result<Self> {
        cfg.validate()?;
        let gen_cfg = cfg.generator();
        let critic_arch = cfg.critic();
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut generator = init_generator(&gen_cfg, &mut init_rng)?;
        let critic = critic_arch.init(&mut init_rng);
        match (cfg.use_contrastive_init, init) {
            (true, Some(a)) => load_pretrained_encoder(&mut generator, &a.tensors.subset("query/"))?,
            (true, None) => return Err(config("use_contrastive_init needs a pretraining checkpoint")),
            (false, Some(_)) => log::warn!("use_contrastive_init is off; ignoring the pretraining checkpoint"),
            (false, None) => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let phi = FeatureExtractor::load(&cfg.extractor, cfg.extractor_seed, cfg.extractor_path.as_deref())?;
        Ok(JointRun {
            step: 0,
            generator,
            critic,
            g_opt: Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2),
            d_opt: Adam::new(cfg.critic_lr, cfg.adam_beta1, cfg.adam_beta2),
            rng,
            gen_cfg,
            critic_arch,
            weights: cfg.weights(),
            sampler: cfg.sampler(),
            phi,
            batch: cfg.joint_batch,
            flip: cfg.flip,
        })
    }

    fn critic_active(&self) -> bool {
        self.weights.adv > 0.0 && !self.weights.texture_scales.is_empty()
    }

    /// One critic update followed by one generator update on a fresh batch.
    pub fn step(&mut self, data: &Dataset) -> Result<JointStats> {
        let images = draw_batch(data, self.batch, self.flip, &mut self.rng)?;
        let (h, w) = (images[0].height(), images[0].width());
        let masks = images.iter().map(|_| self.sampler.sample(&mut self.rng, h, w)).collect::<Result<Vec<_>>>()?;
        let (x, y) = network_batch(&images, &masks)?;
        let targets = scale_targets(&y, &masks, crate::generator::SCALES)?;

        let g = Graph::new();
        let gb = self.generator.bind(&g, true);
        let outs = generator_forward(&gb, &self.gen_cfg, g.constant(x))?;

        let critic = if self.critic_active() {
            let fakes: Vec<Tensor> = outs.iter().map(|o| (*o.value()).clone()).collect();
            let gd = Graph::new();
            let cb = self.critic.bind(&gd, true);
            let loss = critic_loss(&self.critic_arch, &cb, &fakes, &targets, &self.weights, &mut self.rng)?;
            let grads = cb.grads(loss);
            self.d_opt.step(&mut self.critic, &grads);
            Some(loss.item())
        } else {
            None
        };

        let cb = self.critic.bind(&g, false);
        let (loss, losses) = total_loss(&outs, &targets, &self.weights, &self.phi, &self.critic_arch, &cb)?;
        let masked_l1 = hole_l1(&outs[0].value(), &y, &masks);
        let grads = gb.grads(loss);
        self.g_opt.step(&mut self.generator, &grads);
        self.step += 1;
        Ok(JointStats { step: self.step, losses, critic, masked_l1 })
    }

    pub fn archive(&self, cfg: &TrainConfig) -> Archive {
        let mut a = Archive::new();
        store(&mut a, "gen/", &self.generator);
        store(&mut a, "critic/", &self.critic);
        let (gt, gm, gv) = self.g_opt.state();
        store(&mut a, "gopt.m/", gm);
        store(&mut a, "gopt.v/", gv);
        let (dt, dm, dv) = self.d_opt.state();
        store(&mut a, "dopt.m/", dm);
        store(&mut a, "dopt.v/", dv);
        let m = &mut a.metadata;
        m.insert("stage".into(), "joint".into());
        m.insert("step".into(), self.step.to_string());
        m.insert("config".into(), cfg.to_toml());
        m.insert("gopt.t".into(), gt.to_string());
        m.insert("dopt.t".into(), dt.to_string());
        rng_to_meta(&self.rng, "rng", m);
        a
    }

    /// Restores a stage-two archive written by [`JointRun::archive`].
    pub fn resume(cfg: &TrainConfig, a: &Archive, path: &Path) -> Result<Self> {
        if a.meta("stage") != Some("joint") {
            return Err(Error::Checkpoint { path: path.to_path_buf(), message: "not a joint-training checkpoint".into() });
        }
        let fresh = TrainConfig { use_contrastive_init: false, ..cfg.clone() };
        let mut run = JointRun::new(&fresh, None)?;
        let generator = a.tensors.subset("gen/");
        if !generator.same_layout(&run.generator) {
            return Err(Error::Checkpoint { path: path.to_path_buf(), message: "generator layout differs from the config".into() });
        }
        run.generator = generator;
        run.critic = a.tensors.subset("critic/");
        run.g_opt.load_state(parse_meta(a, path, "gopt.t")?, a.tensors.subset("gopt.m/"), a.tensors.subset("gopt.v/"));
        run.d_opt.load_state(parse_meta(a, path, "dopt.t")?, a.tensors.subset("dopt.m/"), a.tensors.subset("dopt.v/"));
        run.step = parse_meta(a, path, "step")?;
        run.rng = rng_from_meta(a, path, "rng")?;
        Ok(run)
    }
}

/// `[N, 4, H, W]` network inputs and `[N, 3, H, W]` targets.
pub fn network_batch(images: &[Image], masks: &[Mask]) -> Result<(Tensor, Tensor)> {
    let inputs = images
        .iter()
        .zip(masks)
        .map(|(im, m)| Ok(apply_mask(im, m)?.network_input()))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    let x = ndarray::stack(Axis(0), &views).map_err(|_| contract("batch images must share a size"))?;
    let y = crate::image::stack_images(images)?;
    Ok((x.into_dyn(), y.into_dyn()))
}

/// Mean absolute error over hole pixels (all channels); 0 without holes.
pub fn hole_l1(y_hat: &Tensor, y: &Tensor, masks: &[Mask]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((ix, &a), &b) in y_hat.indexed_iter().zip(y.iter()) {
        if masks[ix[0]].is_hole(ix[2], ix[3]) {
            sum += (a - b).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Hole-region L1 of the full-resolution output over a fixed image/mask set.
pub fn masked_l1(params: &ParamSet, cfg: &GeneratorConfig, images: &[Image], masks: &[Mask]) -> Result<f64> {
    let (x, y) = network_batch(images, masks)?;
    let g = Graph::new();
    let b = params.bind(&g, false);
    let out = generator_forward(&b, cfg, g.constant(x))?[0].value();
    Ok(hole_l1(&out, &y, masks))
}

/// Runs stage two up to `cfg.joint_steps`, logging every step and writing
/// `joint.safetensors` under `cfg.out_dir` (periodically and at the end).
///
/// `on_step` may stop the run early; validation snapshots are written every
/// `cfg.validate_every` steps when `val` is non-empty.
pub fn run_joint(
    cfg: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    mut run: JointRun,
    log: &mut dyn Write,
    mut on_step: impl FnMut(&JointRun, &JointStats) -> ControlFlow<()>,
) -> Result<(JointRun, PathBuf)> {
    if data.is_empty() {
        return Err(Error::Ingestion { path: cfg.data_dir.clone().unwrap_or_default(), message: "dataset is empty".into() });
    }
    let path = cfg.out_dir.join(JOINT_FILE);
    while run.step < cfg.joint_steps {
        let stats = run.step(data)?;
        write_log(log, &stats.log_line())?;
        if cfg.checkpoint_every > 0 && run.step % cfg.checkpoint_every == 0 {
            run.archive(cfg).save(&path)?;
        }
        if let Some(val) = val.filter(|v| !v.is_empty() && cfg.validate_every > 0 && run.step % cfg.validate_every == 0) {
            validation_snapshot(cfg, &run, val, log)?;
        }
        if on_step(&run, &stats).is_break() {
            break;
        }
    }
    run.archive(cfg).save(&path)?;
    Ok((run, path))
}

/// Writes a `[masked | output | target]` grid of up to four validation
/// images and logs the validation metrics.
fn validation_snapshot(cfg: &TrainConfig, run: &JointRun, val: &Dataset, log: &mut dyn Write) -> Result<()> {
    let n = val.len().min(4);
    let images = (0..n).map(|i| val.get(i)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let size = cfg.image_size;
    let masks = (0..n).map(|_| run.sampler.sample(&mut rng, size, size)).collect::<Result<Vec<_>>>()?;
    let inpainter = crate::evaluation::GeneratorInpainter { params: &run.generator, cfg: &run.gen_cfg, composite: cfg.composite };
    let mut grid = ndarray::Array3::<f64>::zeros((3, n * size, 3 * size));
    let mut l1 = 0.0;
    let mut psnr = 0.0;
    for (k, (im, m)) in images.iter().zip(&masks).enumerate() {
        let out = crate::evaluation::Inpainter::inpaint(&inpainter, im, m)?;
        l1 += crate::evaluation::l1_error(&out, im)? / n as f64;
        psnr += crate::evaluation::psnr(&out, im, 1.0)? / n as f64;
        let masked = apply_mask(im, m)?.pixels;
        for (col, src) in [&masked, &out, im].into_iter().enumerate() {
            grid.slice_mut(ndarray::s![.., k * size..(k + 1) * size, col * size..(col + 1) * size]).assign(src.data());
        }
    }
    Image::new(grid)?.save_png(&cfg.out_dir.join(format!("val_{:06}.png", run.step)))?;
    write_log(log, &log_line("val", run.step, &[("l1_error", l1), ("psnr", psnr)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::toy_set;

    fn tiny_cfg(dir: &Path) -> TrainConfig {
        TrainConfig {
            out_dir: dir.to_path_buf(),
            image_size: 32,
            width_base: 4,
            repr_dim: 8,
            daf_reduction: 4,
            daf_hidden: 4,
            critic_base: 4,
            pretrain_steps: 2,
            pretrain_batch: 4,
            queue_capacity: 8,
            joint_steps: 2,
            joint_batch: 2,
            use_contrastive_init: false,
            ..Default::default()
        }
    }

    #[test]
    fn pretrain_budget_one_records_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { pretrain_steps: 1, ..tiny_cfg(dir.path()) };
        let data = Dataset::from_images(toy_set(6, 32, 0), 32);
        let mut log = Vec::new();
        let (_, path) = run_pretrain(&cfg, &data, &mut log).unwrap();
        assert_eq!(String::from_utf8(log).unwrap().lines().count(), 1);
        assert_eq!(Archive::load(&path).unwrap().meta("step"), Some("1"));
    }

    #[test]
    fn joint_requires_init_when_configured() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { use_contrastive_init: true, ..tiny_cfg(dir.path()) };
        assert!(matches!(JointRun::new(&cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn joint_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let data = Dataset::from_images(toy_set(4, 32, 1), 32);
        let mut a = JointRun::new(&cfg, None).unwrap();
        a.step(&data).unwrap();
        let path = dir.path().join("mid.safetensors");
        a.archive(&cfg).save(&path).unwrap();
        let mut b = JointRun::resume(&cfg, &Archive::load(&path).unwrap(), &path).unwrap();
        assert_eq!(a, b);
        let (sa, sb) = (a.step(&data).unwrap(), b.step(&data).unwrap());
        assert_eq!(sa, sb);
        assert_eq!(a.generator, b.generator);
    }

    #[test]
    fn hole_l1_counts_only_holes() {
        let y = Tensor::zeros(ndarray::IxDyn(&[1, 3, 2, 2]));
        let y_hat = Tensor::from_shape_fn(ndarray::IxDyn(&[1, 3, 2, 2]), |ix| if ix[3] == 0 { 0.5 } else { 9.0 });
        let m = Mask::new(ndarray::arr2(&[[1, 0], [1, 0]])).unwrap();
        assert_eq!(hole_l1(&y_hat, &y, &[m]), 0.5);
        assert_eq!(hole_l1(&y_hat, &y, &[Mask::zeros(2, 2)]), 0.0);
    }
}
