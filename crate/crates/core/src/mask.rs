//! On-the-fly free-form mask generation and mask-derived regions.
//!
//! Generators are pure functions of `(spec, h, w)`: the spec carries its
//! own seed, so concurrent data workers only need distinct seeds.

use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::image::{Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Rectangular,
    Irregular,
}

/// Side lengths as fractions of the image dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectParams {
    pub min_frac: f64,
    pub max_frac: f64,
}

impl Default for RectParams {
    fn default() -> Self {
        RectParams { min_frac: 0.25, max_frac: 0.5 }
    }
}

/// Random-walk brush strokes. Widths are in pixels; segment lengths are
/// fractions of the smaller image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeParams {
    pub strokes: (usize, usize),
    pub brush_width: (f64, f64),
    pub vertices: (usize, usize),
    pub max_angle_step: f64,
    pub segment_len: (f64, f64),
}

impl StrokeParams {
    /// Defaults tuned at 256x256, with brush widths scaled to the image size.
    pub fn for_size(h: usize, w: usize) -> Self {
        let scale = h.min(w) as f64 / 256.0;
        StrokeParams {
            strokes: (1, 5),
            brush_width: ((4.0 * scale).max(1.0), (18.0 * scale).max(1.0)),
            vertices: (4, 12),
            max_angle_step: FRAC_PI_2,
            segment_len: (0.1, 0.3),
        }
    }
}

impl Default for StrokeParams {
    fn default() -> Self {
        Self::for_size(256, 256)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub seed: u64,
    pub rect: RectParams,
    pub strokes: StrokeParams,
}

impl MaskSpec {
    pub fn rectangular(min_frac: f64, max_frac: f64, seed: u64) -> Self {
        MaskSpec {
            kind: MaskKind::Rectangular,
            seed,
            rect: RectParams { min_frac, max_frac },
            strokes: StrokeParams::default(),
        }
    }

    pub fn irregular(strokes: StrokeParams, seed: u64) -> Self {
        MaskSpec { kind: MaskKind::Irregular, seed, rect: RectParams::default(), strokes }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rect;
        if !(0.0..=1.0).contains(&r.min_frac) || !(0.0..=1.0).contains(&r.max_frac) || r.min_frac > r.max_frac {
            return Err(config(format!(
                "rectangle fractions must satisfy 0 <= min <= max <= 1, got [{}, {}]",
                r.min_frac, r.max_frac
            )));
        }
        let s = &self.strokes;
        if s.strokes.0 > s.strokes.1 {
            return Err(config("stroke count range has min > max"));
        }
        if s.vertices.0 > s.vertices.1 {
            return Err(config("vertex count range has min > max"));
        }
        if s.vertices.0 == 0 {
            return Err(config("strokes need at least one vertex"));
        }
        if !(s.brush_width.0 >= 1.0 && s.brush_width.0 <= s.brush_width.1) {
            return Err(config("brush width range must satisfy 1 <= min <= max"));
        }
        if !(s.segment_len.0 >= 0.0 && s.segment_len.0 <= s.segment_len.1) {
            return Err(config("segment length range must satisfy 0 <= min <= max"));
        }
        if !(s.max_angle_step >= 0.0 && s.max_angle_step.is_finite()) {
            return Err(config("max angle step must be finite and non-negative"));
        }
        Ok(())
    }

    /// Draws a mask of the configured kind.
    pub fn generate(&self, h: usize, w: usize) -> Result<Mask> {
        match self.kind {
            MaskKind::Rectangular => gen_rectangular(self, h, w),
            MaskKind::Irregular => gen_irregular(self, h, w),
        }
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h < 8 || w < 8 {
        return Err(contract(format!("mask size must be at least 8x8, got {h}x{w}")));
    }
    Ok(())
}

fn uniform_usize(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn uniform_f64(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// One axis-aligned rectangle of holes.
pub fn gen_rectangular(spec: &MaskSpec, h: usize, w: usize) -> Result<Mask> {
    check_size(h, w)?;
    if spec.kind != MaskKind::Rectangular {
        return Err(config("gen_rectangular called with an irregular spec"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = |rng: &mut ChaCha8Rng, dim: usize| {
        let frac = uniform_f64(rng, (spec.rect.min_frac, spec.rect.max_frac));
        ((frac * dim as f64).round() as usize).clamp(0, dim)
    };
    let rh = side(&mut rng, h);
    let rw = side(&mut rng, w);
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let mut data = Array2::zeros((h, w));
    data.slice_mut(ndarray::s![top..top + rh, left..left + rw]).fill(1u8);
    Ok(Mask::from_raw(data))
}

/// A polyline brush stroke; `points` are `(row, col)` pixel-center coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Stroke {
    pub points: Vec<(f64, f64)>,
    pub width: f64,
}

/// Rasterizes strokes: a pixel is a hole when its center lies within
/// `width / 2` of any stroke segment (round caps and joins).
pub fn rasterize_strokes(strokes: &[Stroke], h: usize, w: usize) -> Mask {
    let mut data = Array2::<u8>::zeros((h, w));
    for stroke in strokes {
        let r = stroke.width / 2.0;
        let r2 = r * r;
        let segs: Vec<((f64, f64), (f64, f64))> = if stroke.points.len() == 1 {
            vec![(stroke.points[0], stroke.points[0])]
        } else {
            stroke.points.windows(2).map(|p| (p[0], p[1])).collect()
        };
        for (a, b) in segs {
            let i0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
            let i1 = ((a.0.max(b.0) + r).ceil().max(0.0) as usize).min(h.saturating_sub(1));
            let j0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
            let j1 = ((a.1.max(b.1) + r).ceil().max(0.0) as usize).min(w.saturating_sub(1));
            for i in i0..=i1 {
                for j in j0..=j1 {
                    if point_segment_dist2((i as f64, j as f64), a, b) <= r2 {
                        data[[i, j]] = 1;
                    }
                }
            }
        }
    }
    Mask::from_raw(data)
}

fn point_segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - qx).powi(2) + (p.1 - qy).powi(2)
}

/// Samples the random-walk strokes an irregular spec describes.
pub fn sample_strokes(spec: &MaskSpec, h: usize, w: usize) -> Vec<Stroke> {
    let s = &spec.strokes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = uniform_usize(&mut rng, s.strokes);
    let dim = h.min(w) as f64;
    (0..n)
        .map(|_| {
            let width = uniform_f64(&mut rng, s.brush_width);
            let verts = uniform_usize(&mut rng, s.vertices);
            let mut p = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
            let mut angle = rng.random_range(0.0..2.0 * PI);
            let mut points = vec![p];
            for _ in 1..verts {
                angle += if s.max_angle_step > 0.0 {
                    rng.random_range(-s.max_angle_step..=s.max_angle_step)
                } else {
                    0.0
                };
                let len = uniform_f64(&mut rng, s.segment_len) * dim;
                p = (
                    (p.0 + len * angle.sin()).clamp(0.0, (h - 1) as f64),
                    (p.1 + len * angle.cos()).clamp(0.0, (w - 1) as f64),
                );
                points.push(p);
            }
            Stroke { points, width }
        })
        .collect()
}

/// Union of random polyline brush strokes.
pub fn gen_irregular(spec: &MaskSpec, h: usize, w: usize) -> Result<Mask> {
    check_size(h, w)?;
    if spec.kind != MaskKind::Irregular {
        return Err(config("gen_irregular called with a rectangular spec"));
    }
    spec.validate()?;
    Ok(rasterize_strokes(&sample_strokes(spec, h, w), h, w))
}

/// Which generator a [`MaskSampler`] draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Rectangular,
    Irregular,
    /// Rectangular or irregular with equal probability.
    Mixed,
}

/// Draws fresh masks from a parent RNG, one derived seed per mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSampler {
    pub mode: MaskMode,
    pub rect: RectParams,
    pub strokes: StrokeParams,
}

impl MaskSampler {
    pub fn for_size(mode: MaskMode, h: usize, w: usize) -> Self {
        MaskSampler { mode, rect: RectParams::default(), strokes: StrokeParams::for_size(h, w) }
    }

    pub fn spec(&self, kind: MaskKind, seed: u64) -> MaskSpec {
        MaskSpec { kind, seed, rect: self.rect, strokes: self.strokes }
    }

    pub fn sample(&self, rng: &mut impl Rng, h: usize, w: usize) -> Result<Mask> {
        let kind = match self.mode {
            MaskMode::Rectangular => MaskKind::Rectangular,
            MaskMode::Irregular => MaskKind::Irregular,
            MaskMode::Mixed => {
                if rng.random_bool(0.5) {
                    MaskKind::Rectangular
                } else {
                    MaskKind::Irregular
                }
            }
        };
        self.spec(kind, rng.next_u64()).generate(h, w)
    }
}

/// An image with its hole pixels zeroed, carrying the mask alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    pub pixels: Image,
    pub mask: Mask,
}

impl MaskedImage {
    /// The 4-channel network input: masked RGB followed by the mask.
    pub fn network_input(&self) -> Array3<f64> {
        let (h, w) = (self.pixels.height(), self.pixels.width());
        let m = self.mask.to_f64();
        Array3::from_shape_fn((4, h, w), |(c, i, j)| if c < 3 { self.pixels.data()[[c, i, j]] } else { m[[i, j]] })
    }
}

pub fn apply_mask(image: &Image, mask: &Mask) -> Result<MaskedImage> {
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(contract(format!(
            "image is {}x{} but mask is {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    let keep = mask.to_f64().mapv(|m| 1.0 - m);
    let pixels = image.data() * &keep.insert_axis(ndarray::Axis(0));
    Ok(MaskedImage { pixels: Image::new(pixels)?, mask: mask.clone() })
}

/// One-pixel dilation with the full 3x3 structuring element.
pub fn dilate1(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let src = mask.data();
    let data = Array2::from_shape_fn((h, w), |(i, j)| {
        let (i0, i1) = (i.saturating_sub(1), (i + 1).min(h - 1));
        let (j0, j1) = (j.saturating_sub(1), (j + 1).min(w - 1));
        let any = (i0..=i1).any(|a| (j0..=j1).any(|b| src[[a, b]] == 1));
        u8::from(any)
    });
    Mask::from_raw(data)
}

/// Halves a mask: a coarse pixel is a hole iff any of its 2x2 fine pixels is.
pub fn max_pool_mask(mask: &Mask) -> Result<Mask> {
    let (h, w) = (mask.height(), mask.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(contract(format!("cannot halve a {h}x{w} mask")));
    }
    let src = mask.data();
    let data = Array2::from_shape_fn((h / 2, w / 2), |(i, j)| {
        src[[2 * i, 2 * j]] | src[[2 * i + 1, 2 * j]] | src[[2 * i, 2 * j + 1]] | src[[2 * i + 1, 2 * j + 1]]
    });
    Ok(Mask::from_raw(data))
}

/// Masks at full, half, quarter, ... resolution (`levels` entries).
pub fn mask_pyramid(mask: &Mask, levels: usize) -> Result<Vec<Mask>> {
    if levels == 0 {
        return Err(contract("mask pyramid needs at least one level"));
    }
    let div = 1usize << (levels - 1);
    if mask.height() % div != 0 || mask.width() % div != 0 {
        return Err(contract(format!(
            "{}x{} mask is not divisible by 2^{} for {levels} levels",
            mask.height(),
            mask.width(),
            levels - 1
        )));
    }
    let mut out = vec![mask.clone()];
    for _ in 1..levels {
        let next = max_pool_mask(out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}
