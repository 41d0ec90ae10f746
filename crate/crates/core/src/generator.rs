//! Inpainting network: the query encoder feeding a U-Net style decoder with
//! an output head at each of the six scales.
//!
//! Scale `k = 1` is full resolution; scale `k` has size `H / 2^(k-1)`.

use canvasinfill_tensor::{Bound, Graph, ParamSet, Var};
use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{encoder_features, init_encoder, EncoderConfig};
use crate::daf::{daf_forward, init_daf, DafConfig};
use crate::error::{config, contract, Result};
use crate::image::{Image, Mask};
use crate::mask::apply_mask;
use crate::nn;

pub const SCALES: usize = EncoderConfig::STAGES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub encoder: EncoderConfig,
    pub daf: DafConfig,
    /// Plain 3x3 conv heads replace the fusion heads when off.
    pub use_daf: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { encoder: EncoderConfig::default(), daf: DafConfig::default(), use_daf: true }
    }
}

impl GeneratorConfig {
    /// Decoder widths by scale: `decoder_widths()[k - 1]` is the width at scale `k`.
    pub fn decoder_widths(&self) -> Vec<usize> {
        self.encoder.widths.clone()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.use_daf {
            for &c in &self.decoder_widths() {
                self.daf.validate_for(c)?;
            }
        }
        Ok(())
    }

    /// Images must be divisible by the encoder's total stride.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let d = EncoderConfig::total_stride();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(contract(format!("input size {h}x{w} is not divisible by {d}")));
        }
        Ok(())
    }
}

/// Encoder (without the projection head), decoder and heads.
pub fn init_generator(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    p.extend_prefixed("encoder.", &init_encoder(&cfg.encoder, rng).subset("encoder."));
    let widths = cfg.decoder_widths();
    for k in (1..=SCALES).rev() {
        let c = widths[k - 1];
        let cin = if k == SCALES { cfg.encoder.widths[k - 1] } else { widths[k] + cfg.encoder.widths[k - 1] };
        nn::init_conv(&mut p, rng, &format!("decoder.d{k}.conv"), c, cin, 3);
        nn::init_norm(&mut p, &format!("decoder.d{k}.norm"), c);
        if cfg.use_daf {
            init_daf(&mut p, rng, &format!("head{k}"), c, &cfg.daf)?;
        } else {
            nn::init_conv(&mut p, rng, &format!("head{k}.conv"), 3, c, 3);
        }
    }
    Ok(p)
}

/// Copies the pretrained query-encoder trunk into generator parameters.
pub fn load_pretrained_encoder(generator: &mut ParamSet, query: &ParamSet) -> Result<()> {
    let trunk = query.subset("encoder.");
    let mut loaded = 0;
    for (name, value) in trunk.iter() {
        let full = format!("encoder.{name}");
        let slot = generator
            .get_mut(&full)
            .ok_or_else(|| config(format!("pretrained parameter `{full}` has no generator counterpart")))?;
        if slot.shape() != value.shape() {
            return Err(config(format!("pretrained parameter `{full}` has shape {:?}, expected {:?}", value.shape(), slot.shape())));
        }
        slot.assign(value);
        loaded += 1;
    }
    if loaded == 0 {
        return Err(config("pretrained checkpoint holds no encoder parameters"));
    }
    Ok(())
}

/// `[Y_1, ..., Y_6]` for an `[N, 4, H, W]` input, each `[N, 3, H / 2^(k-1), W / 2^(k-1)]`.
pub fn generator_forward<'g>(b: &Bound<'g>, cfg: &GeneratorConfig, x: Var<'g>) -> Result<Vec<Var<'g>>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != cfg.encoder.in_channels {
        return Err(contract(format!("generator expects [N, {}, H, W] input, got {s:?}", cfg.encoder.in_channels)));
    }
    cfg.check_size(s[2], s[3])?;
    let feats = encoder_features(b, &cfg.encoder, x);
    let widths = cfg.decoder_widths();
    let mut outputs = vec![None; SCALES];
    let mut prev: Option<Var<'g>> = None;
    for k in (1..=SCALES).rev() {
        let skip = feats[k - 1];
        let h = match prev {
            None => skip,
            Some(p) => Var::concat(&[p.upsample_nearest2(), skip], 1),
        };
        let h = nn::conv(b, &format!("decoder.d{k}.conv"), h, 1, 1);
        let c = widths[k - 1];
        let h = nn::group_norm(b, &format!("decoder.d{k}.norm"), h, nn::groups_for(c, cfg.encoder.norm_groups)).relu();
        let y = if cfg.use_daf {
            daf_forward(b, &format!("head{k}"), h, x)?.y
        } else {
            nn::conv(b, &format!("head{k}.conv"), h, 1, 1)
        };
        outputs[k - 1] = Some(y);
        prev = Some(h);
    }
    Ok(outputs.into_iter().map(Option::unwrap).collect())
}

/// Inference on one image: the clipped full-resolution output, with known
/// pixels copied from the input when `composite` is set.
pub fn inpaint(params: &ParamSet, cfg: &GeneratorConfig, image: &Image, mask: &Mask, composite: bool) -> Result<Image> {
    let masked = apply_mask(image, mask)?;
    let g = Graph::new();
    let b = params.bind(&g, false);
    let x = g.constant(masked.network_input().insert_axis(Axis(0)).into_dyn());
    let y = generator_forward(&b, cfg, x)?[0].value();
    let mut out = y.index_axis(Axis(0), 0).to_owned().into_dimensionality::<ndarray::Ix3>().unwrap();
    if composite {
        let m = mask.to_f64();
        for ((c, i, j), v) in out.indexed_iter_mut() {
            if m[[i, j]] == 0.0 {
                *v = image.data()[[c, i, j]];
            }
        }
    }
    Image::new(out.mapv(|v| v.clamp(0.0, 1.0)))
}
