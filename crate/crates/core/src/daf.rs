//! Dual attention fusion output head.
//!
//! A squeeze-and-gate channel attention rescales the decoder features, a
//! 1x1 projection maps them to RGB, and a learned per-pixel combine map
//! `alpha` blends that projection with a downscaled copy of the masked
//! input: `y = alpha * proj + (1 - alpha) * x'`.

use canvasinfill_tensor::{Bound, ParamSet, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::nn;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DafConfig {
    /// Channel reduction ratio of the gate.
    pub reduction: usize,
    /// Width of the two hidden 3x3 layers of the combine-map transform.
    pub hidden: usize,
    /// Channels of the network input (masked RGB plus mask).
    pub in_channels: usize,
}

impl Default for DafConfig {
    fn default() -> Self {
        DafConfig { reduction: 16, hidden: 16, in_channels: 4 }
    }
}

impl DafConfig {
    pub fn validate_for(&self, channels: usize) -> Result<()> {
        if self.reduction == 0 || self.hidden == 0 || self.in_channels == 0 {
            return Err(config("DAF reduction, hidden and in_channels must be >= 1"));
        }
        if channels % self.reduction != 0 {
            return Err(config(format!("DAF reduction {} does not divide {channels} channels", self.reduction)));
        }
        Ok(())
    }
}

/// Parameters of one head under `prefix` for a `channels`-wide feature map.
pub fn init_daf(p: &mut ParamSet, rng: &mut impl Rng, prefix: &str, channels: usize, cfg: &DafConfig) -> Result<()> {
    cfg.validate_for(channels)?;
    let squeezed = channels / cfg.reduction;
    nn::init_linear(p, rng, &format!("{prefix}.gate_down"), channels, squeezed, 2f64.sqrt());
    nn::init_linear(p, rng, &format!("{prefix}.gate_up"), squeezed, channels, 1.0);
    nn::init_conv(p, rng, &format!("{prefix}.input_proj"), 3, cfg.in_channels, 1);
    nn::init_conv(p, rng, &format!("{prefix}.feat_proj"), 3, channels, 1);
    nn::init_conv(p, rng, &format!("{prefix}.a1"), cfg.hidden, 6, 3);
    nn::init_conv(p, rng, &format!("{prefix}.a2"), cfg.hidden, cfg.hidden, 3);
    nn::init_conv(p, rng, &format!("{prefix}.a3"), 3, cfg.hidden, 3);
    Ok(())
}

/// Channel statistics `[N, C]`: the spatial mean of each feature channel.
pub fn global_pool<'g>(f: Var<'g>) -> Var<'g> {
    nn::global_avg_pool(f)
}

/// `omega = sigmoid(W_U relu(W_D z))`, shape `[N, C]`.
pub fn channel_gate<'g>(b: &Bound<'g>, prefix: &str, z: Var<'g>) -> Result<Var<'g>> {
    let c = b.get(&format!("{prefix}.gate_down.weight")).shape()[0];
    if z.shape().len() != 2 || z.shape()[1] != c {
        return Err(contract(format!("gate expects [N, {c}] statistics, got {:?}", z.shape())));
    }
    let h = nn::linear(b, &format!("{prefix}.gate_down"), z).relu();
    Ok(nn::linear(b, &format!("{prefix}.gate_up"), h).sigmoid())
}

/// Per-channel scaling `f_c * omega_c`.
pub fn rescale<'g>(f: Var<'g>, omega: Var<'g>) -> Var<'g> {
    let s = omega.shape();
    f.mul(omega.reshape(&[s[0], s[1], 1, 1]))
}

/// 1x1 projection of the 4-channel input to RGB, then bilinear downscaling.
pub fn downscale_input<'g>(b: &Bound<'g>, prefix: &str, x_in: Var<'g>, size: (usize, usize)) -> Result<Var<'g>> {
    let s = x_in.shape();
    let (h, w) = (s[2], s[3]);
    let fits = |full: usize, part: usize| part > 0 && full % part == 0 && (full / part).is_power_of_two();
    if !fits(h, size.0) || !fits(w, size.1) || h / size.0 != w / size.1 {
        return Err(contract(format!("cannot downscale {h}x{w} input to {}x{}", size.0, size.1)));
    }
    let projected = nn::conv(b, &format!("{prefix}.input_proj"), x_in, 1, 0);
    Ok(projected.resize_bilinear(size.0, size.1))
}

/// 1x1 projection of the rescaled features to RGB.
pub fn project_features<'g>(b: &Bound<'g>, prefix: &str, f_hat: Var<'g>) -> Var<'g> {
    nn::conv(b, &format!("{prefix}.feat_proj"), f_hat, 1, 0)
}

/// `alpha = sigmoid(A(cat(proj, x')))` with A three 3x3 convolutions.
pub fn combine_map<'g>(b: &Bound<'g>, prefix: &str, proj: Var<'g>, x_prime: Var<'g>) -> Result<Var<'g>> {
    if proj.shape() != x_prime.shape() {
        return Err(contract(format!("combine map inputs differ: {:?} vs {:?}", proj.shape(), x_prime.shape())));
    }
    let h = Var::concat(&[proj, x_prime], 1);
    let h = nn::conv(b, &format!("{prefix}.a1"), h, 1, 1).relu();
    let h = nn::conv(b, &format!("{prefix}.a2"), h, 1, 1).relu();
    Ok(nn::conv(b, &format!("{prefix}.a3"), h, 1, 1).sigmoid())
}

/// `alpha * proj + (1 - alpha) * x'`.
pub fn blend<'g>(alpha: Var<'g>, proj: Var<'g>, x_prime: Var<'g>) -> Result<Var<'g>> {
    if alpha.shape() != proj.shape() || proj.shape() != x_prime.shape() {
        return Err(contract("blend inputs must share a shape"));
    }
    Ok(alpha.mul(proj).add(alpha.one_minus().mul(x_prime)))
}

/// Every intermediate of one head, for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct DafOutput<'g> {
    pub omega: Var<'g>,
    pub f_hat: Var<'g>,
    pub proj: Var<'g>,
    pub x_prime: Var<'g>,
    pub alpha: Var<'g>,
    pub y: Var<'g>,
}

/// Full head: pool, gate, rescale, project, downscale input, combine map, blend.
pub fn daf_forward<'g>(b: &Bound<'g>, prefix: &str, f: Var<'g>, x_in: Var<'g>) -> Result<DafOutput<'g>> {
    let s = f.shape();
    if s.len() != 4 || x_in.shape().len() != 4 || x_in.shape()[0] != s[0] {
        return Err(contract(format!("DAF expects [N, C, h, w] features and input, got {:?} and {:?}", s, x_in.shape())));
    }
    let omega = channel_gate(b, prefix, global_pool(f))?;
    let f_hat = rescale(f, omega);
    let proj = project_features(b, prefix, f_hat);
    let x_prime = downscale_input(b, prefix, x_in, (s[2], s[3]))?;
    let alpha = combine_map(b, prefix, proj, x_prime)?;
    let y = blend(alpha, proj, x_prime)?;
    Ok(DafOutput { omega, f_hat, proj, x_prime, alpha, y })
}
