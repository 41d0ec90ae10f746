//! Training objectives: reconstruction, perceptual, style, total variation,
//! and the gradient-penalty adversary, combined into multi-scale structure
//! and texture losses.
//!
//! Images are `[N, 3, H, W]` graph values; every L1 term is a per-element mean.

use std::path::Path;
use std::rc::Rc;

use canvasinfill_tensor::{Bound, Graph, ParamSet, Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{config, contract, Result};
use crate::image::Mask;
use crate::mask::{dilate1, mask_pyramid};
use crate::nn;

fn same_shape(a: Var<'_>, b: Var<'_>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn rec_loss<'g>(y_hat: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    same_shape(y_hat, y, "reconstruction loss")?;
    Ok(y_hat.sub(y).abs().mean())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// 3x3 (or 1x1) convolution `name`, padding `pad`.
    Conv { name: String, pad: usize },
    Relu,
    /// 2x2 max pooling; its output is a feature tap.
    Pool,
}

/// Frozen convolutional network whose pooling outputs feed the perceptual
/// and style losses.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    params: ParamSet,
    layers: Vec<Layer>,
    /// Per-channel `(mean, std)` applied to inputs first.
    input_norm: Option<([f64; 3], [f64; 3])>,
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorChoice {
    /// Seeded random three-stage conv-pool network.
    Substitute,
    /// VGG-16 weights from a safetensors file with torchvision names.
    Vgg16,
}

impl FeatureExtractor {
    pub fn new(params: ParamSet, layers: Vec<Layer>) -> Result<Self> {
        for l in &layers {
            if let Layer::Conv { name, .. } = l {
                for part in ["weight", "bias"] {
                    if !params.contains(&format!("{name}.{part}")) {
                        return Err(config(format!("feature extractor is missing `{name}.{part}`")));
                    }
                }
            }
        }
        if !layers.contains(&Layer::Pool) {
            return Err(config("feature extractor needs at least one pooling layer"));
        }
        Ok(FeatureExtractor { params, layers, input_norm: None })
    }

    /// Three conv-ReLU-pool stages (3 -> 16 -> 32 -> 64) with He-normal
    /// weights from `seed`.
    pub fn substitute(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut layers = Vec::new();
        for (i, (cin, cout)) in [(3, 16), (16, 32), (32, 64)].into_iter().enumerate() {
            let name = format!("phi{i}");
            nn::init_conv(&mut p, &mut rng, &name, cout, cin, 3);
            layers.extend([Layer::Conv { name, pad: 1 }, Layer::Relu, Layer::Pool]);
        }
        FeatureExtractor::new(p, layers).unwrap()
    }

    /// The first three blocks of VGG-16 (taps at pool1..pool3).
    pub fn vgg16(path: &Path) -> Result<Self> {
        let archive = Archive::load(path)?;
        let mut p = ParamSet::new();
        let mut layers = Vec::new();
        for block in [&[0usize, 2][..], &[5, 7], &[10, 12, 14]] {
            for &idx in block {
                let name = format!("features.{idx}");
                for part in ["weight", "bias"] {
                    let key = format!("{name}.{part}");
                    let t = archive.tensors.get(&key).ok_or_else(|| config(format!("{}: missing `{key}`", path.display())))?;
                    p.insert(key, t.clone());
                }
                layers.extend([Layer::Conv { name, pad: 1 }, Layer::Relu]);
            }
            layers.push(Layer::Pool);
        }
        let mut fe = FeatureExtractor::new(p, layers)?;
        fe.input_norm = Some((IMAGENET_MEAN, IMAGENET_STD));
        Ok(fe)
    }

    pub fn load(choice: &ExtractorChoice, seed: u64, path: Option<&Path>) -> Result<Self> {
        match choice {
            ExtractorChoice::Substitute => Ok(Self::substitute(seed)),
            ExtractorChoice::Vgg16 => Self::vgg16(path.ok_or_else(|| config("vgg16 extractor needs a weights path"))?),
        }
    }

    pub fn taps(&self) -> usize {
        self.layers.iter().filter(|l| **l == Layer::Pool).count()
    }

    /// Channel count of each tap.
    pub fn tap_channels(&self) -> Vec<usize> {
        let mut c = 3;
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv { name, .. } => c = self.params.get(&format!("{name}.weight")).unwrap().shape()[0],
                Layer::Pool => out.push(c),
                Layer::Relu => {}
            }
        }
        out
    }

    /// Pooling outputs for `[N, 3, H, W]` images.
    pub fn features<'g>(&self, x: Var<'g>) -> Result<Vec<Var<'g>>> {
        let s = x.shape();
        let min = 1usize << self.taps();
        if s.len() != 4 || s[1] != 3 || s[2] < min || s[3] < min {
            return Err(contract(format!("feature extractor needs [N, 3, >={min}, >={min}] images, got {s:?}")));
        }
        let b = self.params.bind(x.graph(), false);
        let mut h = x;
        if let Some((mean, std)) = self.input_norm {
            let shift = ArrayD::from_shape_fn(IxDyn(&[1, 3, 1, 1]), |ix| -mean[ix[1]]);
            let scale = ArrayD::from_shape_fn(IxDyn(&[1, 3, 1, 1]), |ix| 1.0 / std[ix[1]]);
            h = h.add_const(&shift).mul_const(Rc::new(scale));
        }
        let mut taps = Vec::new();
        for l in &self.layers {
            h = match l {
                Layer::Conv { name, pad } => nn::conv(&b, name, h, 1, *pad),
                Layer::Relu => h.relu(),
                Layer::Pool => {
                    let p = h.max_pool2();
                    taps.push(p);
                    p
                }
            };
        }
        Ok(taps)
    }
}

/// `(1/N) sum_i mean |phi_i(y) - phi_i(y_hat)|` over the N taps.
pub fn perceptual_loss<'g>(phi: &FeatureExtractor, y_hat: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    same_shape(y_hat, y, "perceptual loss")?;
    let (fa, fb) = (phi.features(y_hat)?, phi.features(y)?);
    let n = fa.len() as f64;
    let terms: Vec<Var<'g>> = fa.iter().zip(&fb).map(|(a, b)| a.sub(*b).abs().mean()).collect();
    Ok(sum_vars(&terms).scale(1.0 / n))
}

/// Unnormalized Gram matrices `[N, C, C]` of `[N, C, h, w]` features.
pub fn gram<'g>(f: Var<'g>) -> Var<'g> {
    let s = f.shape();
    let flat = f.reshape(&[s[0], s[1], s[2] * s[3]]);
    flat.matmul(flat.transpose_last2())
}

/// `(1/N) sum_i (1/C_i^2) ||G_i(y) - G_i(y_hat)||_1`, also averaged over the batch.
pub fn style_loss<'g>(phi: &FeatureExtractor, y_hat: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    same_shape(y_hat, y, "style loss")?;
    let (fa, fb) = (phi.features(y_hat)?, phi.features(y)?);
    let n = fa.len() as f64;
    // The mean over C x C entries (and the batch) is exactly the 1 / C^2 factor.
    let terms: Vec<Var<'g>> = fa.iter().zip(&fb).map(|(a, b)| gram(*a).sub(gram(*b)).abs().mean()).collect();
    Ok(sum_vars(&terms).scale(1.0 / n))
}

fn sum_vars<'g>(vs: &[Var<'g>]) -> Var<'g> {
    vs[1..].iter().fold(vs[0], |acc, v| acc.add(*v))
}

/// Total variation over the one-pixel dilation of the holes.
///
/// A neighbour pair counts when both pixels lie in the region; the sum of
/// channel-averaged absolute differences is divided by the number of counted
/// pairs over both directions. An empty region gives 0.
pub fn tv_loss<'g>(y_hat: Var<'g>, masks: &[Mask]) -> Result<Var<'g>> {
    let s = y_hat.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if masks.len() != n || masks.iter().any(|m| (m.height(), m.width()) != (h, w)) {
        return Err(contract(format!("tv loss needs {n} masks of size {h}x{w}")));
    }
    let omega: Vec<_> = masks.iter().map(|m| dilate1(m).to_f64()).collect();
    let hw = ArrayD::from_shape_fn(IxDyn(&[n, 1, h, w.saturating_sub(1)]), |ix| {
        omega[ix[0]][[ix[2], ix[3]]] * omega[ix[0]][[ix[2], ix[3] + 1]]
    });
    let vw = ArrayD::from_shape_fn(IxDyn(&[n, 1, h.saturating_sub(1), w]), |ix| {
        omega[ix[0]][[ix[2], ix[3]]] * omega[ix[0]][[ix[2] + 1, ix[3]]]
    });
    let pairs = hw.sum() + vw.sum();
    let g = y_hat.graph();
    if pairs == 0.0 {
        return Ok(g.scalar(0.0));
    }
    let mut total = g.scalar(0.0);
    if w > 1 {
        let dx = y_hat.slice_axis(3, 1, w - 1).sub(y_hat.slice_axis(3, 0, w - 1)).abs();
        total = total.add(dx.mul_const(Rc::new(hw)).sum());
    }
    if h > 1 {
        let dy = y_hat.slice_axis(2, 1, h - 1).sub(y_hat.slice_axis(2, 0, h - 1)).abs();
        total = total.add(dy.mul_const(Rc::new(vw)).sum());
    }
    Ok(total.scale(1.0 / (pairs * c as f64)))
}

/// A scalar-valued image critic: `[N, 3, H, W] -> [N]`.
pub trait Critic {
    fn score<'g>(&self, params: &Bound<'g>, x: Var<'g>) -> Var<'g>;
}

/// Strided conv stack with leaky rectifiers, global pooling and a linear
/// scalar head; no normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvCritic {
    pub widths: Vec<usize>,
    pub slope: f64,
}

impl ConvCritic {
    /// Five stride-2 layers of width `base * [1, 2, 4, 8, 8]`.
    pub fn with_base(base: usize) -> Self {
        ConvCritic { widths: [1, 2, 4, 8, 8].iter().map(|m| m * base).collect(), slope: 0.2 }
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let mut cin = 3;
        for (i, &c) in self.widths.iter().enumerate() {
            nn::init_conv(&mut p, rng, &format!("critic.c{i}"), c, cin, 3);
            cin = c;
        }
        nn::init_linear(&mut p, rng, "critic.head", cin, 1, 1.0);
        p
    }
}

impl Default for ConvCritic {
    fn default() -> Self {
        Self::with_base(64)
    }
}

impl Critic for ConvCritic {
    fn score<'g>(&self, b: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let mut h = x;
        for i in 0..self.widths.len() {
            h = nn::conv(b, &format!("critic.c{i}"), h, 2, 1).leaky_relu(self.slope);
        }
        let n = h.shape()[0];
        nn::linear(b, "critic.head", nn::global_avg_pool(h)).reshape(&[n])
    }
}

/// `-E[D(y_hat)]`.
pub fn adv_loss_g<'g, C: Critic>(critic: &C, cb: &Bound<'g>, y_hat: Var<'g>) -> Var<'g> {
    critic.score(cb, y_hat).mean().neg()
}

/// Random points between real and fake images, passed through a bilinear
/// resize by a factor in `[0.75, 1.25]` and back.
pub fn penalty_samples(real: &Tensor, fake: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    if real.shape() != fake.shape() || real.ndim() != 4 {
        return Err(contract("penalty samples need equal [N, C, H, W] batches"));
    }
    let s = real.shape();
    let eps: Vec<f64> = (0..s[0]).map(|_| rng.random::<f64>()).collect();
    let factor = rng.random_range(0.75..=1.25);
    let mixed = ArrayD::from_shape_fn(IxDyn(s), |ix| eps[ix[0]] * real[&ix] + (1.0 - eps[ix[0]]) * fake[&ix]);
    let g = Graph::new();
    let (h, w) = (s[2], s[3]);
    let sized = |d: usize| ((d as f64 * factor).round() as usize).max(1);
    let out = g.constant(mixed).resize_bilinear(sized(h), sized(w)).resize_bilinear(h, w).value();
    Ok((*out).clone())
}

/// `lambda * mean_n (||grad_x D(x_n)||_2 - 1)^2` at the given samples.
/// Differentiable with respect to the critic parameters.
pub fn gradient_penalty<'g, C: Critic>(critic: &C, cb: &Bound<'g>, samples: Tensor, lambda: f64) -> Var<'g> {
    let g = cb.graph();
    let n = samples.shape()[0];
    let x = g.param(samples);
    let d = critic.score(cb, x).sum();
    let grad = g.grad_with_graph(d, &[x]).remove(0);
    let norms = grad.square().sum_to(&[n, 1, 1, 1]).sqrt();
    norms.add_scalar(-1.0).square().mean().scale(lambda)
}

/// Critic objective `E[D(fake)] - E[D(real)] + penalty`.
pub fn adv_loss_d<'g, C: Critic>(
    critic: &C,
    cb: &Bound<'g>,
    real: &Tensor,
    fake: &Tensor,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<Var<'g>> {
    let g = cb.graph();
    let samples = penalty_samples(real, fake, rng)?;
    let d_fake = critic.score(cb, g.constant(fake.clone())).mean();
    let d_real = critic.score(cb, g.constant(real.clone())).mean();
    Ok(d_fake.sub(d_real).add(gradient_penalty(critic, cb, samples, lambda)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub per: f64,
    pub style: f64,
    pub tv: f64,
    pub adv: f64,
    pub gp: f64,
    /// Scales `P` carrying the structure loss (1 = full resolution).
    pub structure_scales: Vec<usize>,
    /// Scales `Q` carrying the texture loss.
    pub texture_scales: Vec<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 6.0,
            per: 0.1,
            style: 240.0,
            tv: 0.1,
            adv: 0.001,
            gp: 10.0,
            structure_scales: vec![1, 2, 3, 4, 5, 6],
            texture_scales: vec![1, 2, 3],
        }
    }
}

impl LossWeights {
    pub fn validate(&self, scales: usize) -> Result<()> {
        let ws = [self.rec, self.per, self.style, self.tv, self.adv, self.gp];
        if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(config("loss weights must be finite and >= 0"));
        }
        if self.structure_scales.is_empty() {
            return Err(config("structure_scales must not be empty"));
        }
        if self.structure_scales.iter().chain(&self.texture_scales).any(|&k| k == 0 || k > scales) {
            return Err(config(format!("loss scales must lie in 1..={scales}")));
        }
        if self.texture_scales.iter().any(|k| !self.structure_scales.contains(k)) {
            return Err(config("texture_scales must be a subset of structure_scales"));
        }
        Ok(())
    }
}

/// Targets and masks at every scale: index `k - 1` holds scale `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTargets {
    pub images: Vec<Tensor>,
    pub masks: Vec<Vec<Mask>>,
}

/// Bilinear image targets and any-covered mask pyramids for `scales` levels.
pub fn scale_targets(y: &Tensor, masks: &[Mask], scales: usize) -> Result<ScaleTargets> {
    let s = y.shape();
    if s.len() != 4 || masks.len() != s[0] {
        return Err(contract("targets need an [N, 3, H, W] batch and one mask per image"));
    }
    let g = Graph::new();
    let yv = g.constant(y.clone());
    let images = (0..scales)
        .map(|k| (*yv.resize_bilinear(s[2] >> k, s[3] >> k).value()).clone())
        .collect();
    let pyramids = masks.iter().map(|m| mask_pyramid(m, scales)).collect::<Result<Vec<_>>>()?;
    let masks = (0..scales).map(|k| pyramids.iter().map(|p| p[k].clone()).collect()).collect();
    Ok(ScaleTargets { images, masks })
}

/// Unweighted term values for logging; texture terms are averaged over `Q`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: Vec<f64>,
    pub per: f64,
    pub style: f64,
    pub tv: f64,
    pub adv_g: f64,
    pub structure: f64,
    pub texture: f64,
    pub total: f64,
}

/// `(1/|P|) sum_k lambda_rec * rec(y_hat_k, y_k)`.
pub fn structure_loss<'g>(outs: &[Var<'g>], t: &ScaleTargets, w: &LossWeights) -> Result<(Var<'g>, Vec<f64>)> {
    let g = outs[0].graph();
    let mut terms = Vec::new();
    let mut recs = Vec::new();
    for &k in &w.structure_scales {
        let r = rec_loss(outs[k - 1], g.constant(t.images[k - 1].clone()))?;
        recs.push(r.item());
        terms.push(r.scale(w.rec));
    }
    Ok((sum_vars(&terms).scale(1.0 / terms.len() as f64), recs))
}

/// `(1/|Q|) sum_k (lambda_per per + lambda_style style + lambda_tv tv + lambda_adv adv_g)`.
/// Terms with zero weight are skipped and logged as 0.
pub fn texture_loss<'g, C: Critic>(
    outs: &[Var<'g>],
    t: &ScaleTargets,
    w: &LossWeights,
    phi: &FeatureExtractor,
    critic: &C,
    cb: &Bound<'g>,
    log: &mut LossBreakdown,
) -> Result<Var<'g>> {
    let g = outs[0].graph();
    if w.texture_scales.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let q = w.texture_scales.len() as f64;
    let mut terms = Vec::new();
    for &k in &w.texture_scales {
        let (y_hat, y) = (outs[k - 1], g.constant(t.images[k - 1].clone()));
        if w.per > 0.0 {
            let v = perceptual_loss(phi, y_hat, y)?;
            log.per += v.item() / q;
            terms.push(v.scale(w.per));
        }
        if w.style > 0.0 {
            let v = style_loss(phi, y_hat, y)?;
            log.style += v.item() / q;
            terms.push(v.scale(w.style));
        }
        if w.tv > 0.0 {
            let v = tv_loss(y_hat, &t.masks[k - 1])?;
            log.tv += v.item() / q;
            terms.push(v.scale(w.tv));
        }
        if w.adv > 0.0 {
            let v = adv_loss_g(critic, cb, y_hat);
            log.adv_g += v.item() / q;
            terms.push(v.scale(w.adv));
        }
    }
    if terms.is_empty() {
        return Ok(g.scalar(0.0));
    }
    Ok(sum_vars(&terms).scale(1.0 / q))
}

/// Structure plus texture loss of the generator.
pub fn total_loss<'g, C: Critic>(
    outs: &[Var<'g>],
    t: &ScaleTargets,
    w: &LossWeights,
    phi: &FeatureExtractor,
    critic: &C,
    cb: &Bound<'g>,
) -> Result<(Var<'g>, LossBreakdown)> {
    if outs.len() != t.images.len() {
        return Err(contract(format!("{} outputs for {} target scales", outs.len(), t.images.len())));
    }
    let mut log = LossBreakdown::default();
    let (structure, recs) = structure_loss(outs, t, w)?;
    let texture = texture_loss(outs, t, w, phi, critic, cb, &mut log)?;
    let total = structure.add(texture);
    log.rec = recs;
    log.structure = structure.item();
    log.texture = texture.item();
    log.total = total.item();
    Ok((total, log))
}

/// Critic objective averaged over the texture scales.
pub fn critic_loss<'g, C: Critic>(
    critic: &C,
    cb: &Bound<'g>,
    fakes: &[Tensor],
    t: &ScaleTargets,
    w: &LossWeights,
    rng: &mut impl Rng,
) -> Result<Var<'g>> {
    let terms = w
        .texture_scales
        .iter()
        .map(|&k| adv_loss_d(critic, cb, &t.images[k - 1], &fakes[k - 1], w.gp, rng))
        .collect::<Result<Vec<_>>>()?;
    if terms.is_empty() {
        return Ok(cb.graph().scalar(0.0));
    }
    Ok(sum_vars(&terms).scale(1.0 / terms.len() as f64))
}
