//! Image-quality metrics (L1, PSNR, SSIM, FID) and the evaluation report.

use std::path::Path;

use canvasinfill_tensor::{Exec, Graph, ParamSet};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use serde::{Serialize, Serializer};

use crate::error::{contract, io_err, Result};
use crate::generator::{inpaint, GeneratorConfig};
use crate::image::{stack_images, Image, Mask};
use crate::losses::FeatureExtractor;
use crate::mask::{MaskKind, MaskSampler, MaskMode};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.data().shape() != b.data().shape() {
        return Err(contract(format!("image shapes differ: {:?} vs {:?}", a.data().shape(), b.data().shape())));
    }
    Ok(())
}

/// Mean absolute error over every pixel and channel.
pub fn l1_error(y_hat: &Image, y: &Image) -> Result<f64> {
    same_shape(y_hat, y)?;
    Ok((y_hat.data() - y.data()).mapv(f64::abs).mean().unwrap_or(0.0))
}

pub fn mse(y_hat: &Image, y: &Image) -> Result<f64> {
    same_shape(y_hat, y)?;
    Ok((y_hat.data() - y.data()).mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// `10 log10(max^2 / mse)`; `+inf` for identical images.
pub fn psnr(y_hat: &Image, y: &Image, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(y_hat, y)?, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

fn gaussian_window() -> Array2<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| {
        (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s = w.sum();
    w / s
}

/// Mean SSIM of the luma planes over all fully contained 11x11 Gaussian
/// windows, dynamic range 1.
pub fn ssim(y_hat: &Image, y: &Image) -> Result<f64> {
    same_shape(y_hat, y)?;
    if y.height() < SSIM_WINDOW || y.width() < SSIM_WINDOW {
        return Err(contract(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}", y.height(), y.width())));
    }
    ssim_planes(&y_hat.grayscale(), &y.grayscale())
}

pub fn ssim_planes(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let (h, w) = a.dim();
    if b.dim() != (h, w) || h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(contract("ssim planes must match and cover one window"));
    }
    let win = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let pa = a.slice(ndarray::s![i..i + SSIM_WINDOW, j..j + SSIM_WINDOW]);
            let pb = b.slice(ndarray::s![i..i + SSIM_WINDOW, j..j + SSIM_WINDOW]);
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ((&g, &x), &y) in win.iter().zip(pa.iter()).zip(pb.iter()) {
                ma += g * x;
                mb += g * y;
                aa += g * x * x;
                bb += g * y * y;
                ab += g * x * y;
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

fn mean_cov(x: &DMatrix<f64>) -> (nalgebra::DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two feature sets (rows are
/// samples). The cross term is `tr((sqrt(A) B sqrt(A))^(1/2))`, which
/// equals `tr((A B)^(1/2))` for PSD `A`, `B`; eigenvalues below zero are
/// clipped.
pub fn fid(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(contract("fid needs at least two samples per set"));
    }
    if a.ncols() != b.ncols() {
        return Err(contract(format!("feature widths differ: {} vs {}", a.ncols(), b.ncols())));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(contract("fid features must be finite"));
    }
    let to_m = |x: &Array2<f64>| DMatrix::from_row_iterator(x.nrows(), x.ncols(), x.iter().copied());
    let (mu_a, cov_a) = mean_cov(&to_m(a));
    let (mu_b, cov_b) = mean_cov(&to_m(b));
    let sa = psd_sqrt(&cov_a);
    let inner = &sa * &cov_b * &sa;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5).eigenvalues;
    let worst = eig.min();
    if worst < -1e-6 * eig.amax().max(1.0) {
        log::warn!("fid: clipping eigenvalue {worst}");
    }
    let cross: f64 = eig.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Globally pooled deepest-tap activations, one row per image.
pub fn fid_features(phi: &FeatureExtractor, images: &[Image]) -> Result<Array2<f64>> {
    let g = Graph::new();
    let x = g.constant(stack_images(images)?.into_dyn());
    let taps = phi.features(x)?;
    let last = taps.last().ok_or_else(|| contract("feature extractor has no taps"))?.value();
    let pooled = last.mean_axis(Axis(3)).and_then(|t| t.mean_axis(Axis(2))).ok_or_else(|| contract("empty feature map"))?;
    pooled.into_dimensionality().map_err(|_| contract("unexpected feature rank"))
}

/// Anything that fills the holes of a masked image.
pub trait Inpainter: Sync {
    fn inpaint(&self, image: &Image, mask: &Mask) -> Result<Image>;
}

pub struct GeneratorInpainter<'a> {
    pub params: &'a ParamSet,
    pub cfg: &'a GeneratorConfig,
    pub composite: bool,
}

impl Inpainter for GeneratorInpainter<'_> {
    fn inpaint(&self, image: &Image, mask: &Mask) -> Result<Image> {
        inpaint(self.params, self.cfg, image, mask, self.composite)
    }
}

fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    }
}

/// One report row: `{l1_error, psnr, ssim, fid}` for one mask type.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub mask: MaskKind,
    pub l1_error: f64,
    /// Mean per-image PSNR in dB; `"inf"` when every image is exact.
    #[serde(serialize_with = "finite_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub fid: f64,
    pub mean_hole_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub samples: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Caller-supplied run description, e.g. the training config.
    pub config: String,
}

impl MetricReport {
    /// Flat `"<mask>.<metric>": value` JSON object.
    pub fn to_json(&self) -> String {
        let mut map = serde_json::Map::new();
        for r in &self.rows {
            let row = serde_json::to_value(r).expect("row serializes");
            let prefix = serde_json::to_value(r.mask).expect("kind serializes");
            let prefix = prefix.as_str().expect("kind is a string");
            for (k, v) in row.as_object().expect("row is an object") {
                if k != "mask" {
                    map.insert(format!("{prefix}.{k}"), v.clone());
                }
            }
        }
        map.insert("samples".into(), self.samples.into());
        map.insert("seed".into(), self.seed.into());
        map.insert("image_size".into(), self.image_size.into());
        map.insert("config".into(), self.config.clone().into());
        serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }

    /// Fixed-width table, one row per mask type.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>10} {:>10} {:>8} {:>10}\n", "mask", "L1", "PSNR", "SSIM", "FID");
        for r in &self.rows {
            let kind = if r.mask == MaskKind::Rectangular { "rectangular" } else { "irregular" };
            s.push_str(&format!("{kind:<12} {:>10.4} {:>10.2} {:>8.4} {:>10.4}\n", r.l1_error, r.psnr, r.ssim, r.fid));
        }
        s
    }
}

struct Sample {
    out: Image,
    l1: f64,
    psnr: f64,
    ssim: f64,
    hole_ratio: f64,
}

fn score(inpainter: &dyn Inpainter, image: &Image, mask: &Mask) -> Result<Sample> {
    let out = inpainter.inpaint(image, mask)?;
    Ok(Sample { l1: l1_error(&out, image)?, psnr: psnr(&out, image, 1.0)?, ssim: ssim(&out, image)?, hole_ratio: mask.hole_ratio(), out })
}

fn score_all(exec: Exec, inpainter: &dyn Inpainter, images: &[Image], masks: &[Mask]) -> Result<Vec<Sample>> {
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            images.par_iter().zip(masks.par_iter()).map(|(im, m)| score(inpainter, im, m)).collect()
        }
        _ => images.iter().zip(masks).map(|(im, m)| score(inpainter, im, m)).collect(),
    }
}

/// The evaluation mask for image `index`: a pure function of the seed.
pub fn eval_mask(kind: MaskKind, seed: u64, index: usize, h: usize, w: usize) -> Result<Mask> {
    let sampler = MaskSampler::for_size(MaskMode::Mixed, h, w);
    let salt = if kind == MaskKind::Rectangular { 0 } else { 1u64 << 63 };
    sampler.spec(kind, seed ^ salt ^ index as u64).generate(h, w)
}

/// Inpaints every image under each mask kind and averages the metrics.
pub fn evaluate(
    inpainter: &dyn Inpainter,
    images: &[Image],
    kinds: &[MaskKind],
    seed: u64,
    phi: &FeatureExtractor,
    config: String,
) -> Result<MetricReport> {
    evaluate_with(Exec::default(), inpainter, images, kinds, seed, phi, config)
}

/// [`evaluate`] with an explicit per-image execution strategy; both give
/// identical reports.
pub fn evaluate_with(
    exec: Exec,
    inpainter: &dyn Inpainter,
    images: &[Image],
    kinds: &[MaskKind],
    seed: u64,
    phi: &FeatureExtractor,
    config: String,
) -> Result<MetricReport> {
    if images.len() < 2 {
        return Err(contract("evaluation needs at least two images"));
    }
    let (h, w) = (images[0].height(), images[0].width());
    let real = fid_features(phi, images)?;
    let mut rows = Vec::new();
    for &kind in kinds {
        let masks = (0..images.len()).map(|i| eval_mask(kind, seed, i, h, w)).collect::<Result<Vec<_>>>()?;
        let samples = score_all(exec, inpainter, images, &masks)?;
        let n = samples.len() as f64;
        let outs: Vec<Image> = samples.iter().map(|s| s.out.clone()).collect();
        rows.push(MetricRow {
            mask: kind,
            l1_error: samples.iter().map(|s| s.l1).sum::<f64>() / n,
            psnr: samples.iter().map(|s| s.psnr).sum::<f64>() / n,
            ssim: samples.iter().map(|s| s.ssim).sum::<f64>() / n,
            fid: fid(&real, &fid_features(phi, &outs)?)?,
            mean_hole_ratio: samples.iter().map(|s| s.hole_ratio).sum::<f64>() / n,
        });
    }
    Ok(MetricReport { rows, samples: images.len(), seed, image_size: h, config })
}
