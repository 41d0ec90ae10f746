//! Parameter initialization and the layer building blocks shared by the
//! encoder, decoder, fusion heads, critic, and feature extractor.
//!
//! Parameters live in a flat [`ParamSet`]; a layer called `name` owns
//! `name.weight` and `name.bias` (or `name.gamma` / `name.beta`).

use canvasinfill_tensor::{Bound, ParamSet, Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.sample::<f64, _>(StandardNormal) * std)
}

/// He-normal `[cout, cin, k, k]` kernel and zero bias.
pub fn init_conv(p: &mut ParamSet, rng: &mut impl Rng, name: &str, cout: usize, cin: usize, k: usize) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    p.insert(format!("{name}.weight"), normal(rng, &[cout, cin, k, k], std));
    p.insert(format!("{name}.bias"), Tensor::zeros(IxDyn(&[cout])));
}

/// `[fin, fout]` weight and zero bias.
pub fn init_linear(p: &mut ParamSet, rng: &mut impl Rng, name: &str, fin: usize, fout: usize, gain: f64) {
    let std = gain / (fin as f64).sqrt();
    p.insert(format!("{name}.weight"), normal(rng, &[fin, fout], std));
    p.insert(format!("{name}.bias"), Tensor::zeros(IxDyn(&[fout])));
}

pub fn init_norm(p: &mut ParamSet, name: &str, c: usize) {
    p.insert(format!("{name}.gamma"), Tensor::ones(IxDyn(&[c])));
    p.insert(format!("{name}.beta"), Tensor::zeros(IxDyn(&[c])));
}

pub fn conv<'g>(b: &Bound<'g>, name: &str, x: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
    let w = b.get(&format!("{name}.weight"));
    let bias = b.get(&format!("{name}.bias"));
    let c = bias.shape()[0];
    x.conv2d(w, stride, pad).add(bias.reshape(&[1, c, 1, 1]))
}

/// `x [N, fin] -> [N, fout]`.
pub fn linear<'g>(b: &Bound<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    let w = b.get(&format!("{name}.weight"));
    let bias = b.get(&format!("{name}.bias"));
    x.matmul(w).add(bias)
}

pub const NORM_EPS: f64 = 1e-5;

/// Group normalization over `(C / groups, H, W)` per sample, then a
/// per-channel affine map.
pub fn group_norm<'g>(b: &Bound<'g>, name: &str, x: Var<'g>, groups: usize) -> Var<'g> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(c % groups, 0, "group_norm: {c} channels not divisible into {groups} groups");
    let m = (c / groups) * h * w;
    let xg = x.reshape(&[n, groups, m]);
    let mean = xg.sum_to(&[n, groups, 1]).scale(1.0 / m as f64);
    let centered = xg.sub(mean);
    let var = centered.square().sum_to(&[n, groups, 1]).scale(1.0 / m as f64);
    let normed = centered.mul(var.add_scalar(NORM_EPS).sqrt().recip()).reshape(&[n, c, h, w]);
    let gamma = b.get(&format!("{name}.gamma")).reshape(&[1, c, 1, 1]);
    let beta = b.get(&format!("{name}.beta")).reshape(&[1, c, 1, 1]);
    normed.mul(gamma).add(beta)
}

/// Spatial mean: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<'g>(x: Var<'g>) -> Var<'g> {
    let s = x.shape();
    x.sum_to(&[s[0], s[1], 1, 1]).scale(1.0 / (s[2] * s[3]) as f64).reshape(&[s[0], s[1]])
}

/// Largest group count `<= preferred` dividing `c`.
pub fn groups_for(c: usize, preferred: usize) -> usize {
    (1..=preferred.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use canvasinfill_tensor::gradcheck::check_params;
    use canvasinfill_tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_norm_normalizes_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        init_norm(&mut p, "n", 4);
        p.insert("x", normal(&mut rng, &[2, 4, 3, 3], 2.0).mapv(|v| v + 1.0));
        let g = Graph::new();
        let b = p.bind(&g, false);
        let y = group_norm(&b, "n", b.get("x"), 2).value();
        for n in 0..2 {
            let grp: Vec<f64> = (0..2).flat_map(|c| (0..9).map(move |k| (c, k))).map(|(c, k)| y[[n, c, k / 3, k % 3]]).collect();
            let mean = grp.iter().sum::<f64>() / 18.0;
            let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        p.get_mut("n.gamma").unwrap().assign(&ndarray::arr1(&[0.5, 1.5, -1.0, 2.0]).into_dyn());
        let w = ArrayD::from_shape_fn(IxDyn(&[2, 4, 3, 3]), |ix| ix[3] as f64 - ix[1] as f64 * 0.3);
        let r = check_params(&p, 20, 1e-6, move |b| group_norm(b, "n", b.get("x"), 2).mul_const(std::rc::Rc::new(w.clone())).sum());
        assert!(r.passes(1e-5), "{r:?}");
    }

    #[test]
    fn groups_for_divides() {
        assert_eq!(groups_for(32, 8), 8);
        assert_eq!(groups_for(12, 8), 6);
        assert_eq!(groups_for(3, 8), 3);
    }
}
