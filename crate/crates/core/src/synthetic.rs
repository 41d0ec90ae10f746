//! Procedural toy images: a colour gradient background with a few discs,
//! boxes and stripe patches. Used for smoke runs and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc { ci: f64, cj: f64, r: f64 },
    Box { i0: f64, j0: f64, i1: f64, j1: f64 },
    Stripes { i0: f64, j0: f64, i1: f64, j1: f64, period: f64, angle: f64 },
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// One image, fully determined by `seed`.
pub fn toy_image(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let count = rng.random_range(2..=4);
    let shapes: Vec<(Shape, [f64; 3])> = (0..count)
        .map(|_| {
            let shape = match rng.random_range(0..3) {
                0 => Shape::Disc { ci: rng.random_range(0.0..s), cj: rng.random_range(0.0..s), r: rng.random_range(0.1..0.3) * s },
                k => {
                    let (i0, j0) = (rng.random_range(0.0..0.7) * s, rng.random_range(0.0..0.7) * s);
                    let (i1, j1) = (i0 + rng.random_range(0.2..0.5) * s, j0 + rng.random_range(0.2..0.5) * s);
                    if k == 1 {
                        Shape::Box { i0, j0, i1, j1 }
                    } else {
                        let period = rng.random_range(3.0..8.0) * s / 64.0;
                        Shape::Stripes { i0, j0, i1, j1, period: period.max(2.0), angle: rng.random_range(0.0..std::f64::consts::PI) }
                    }
                }
            };
            (shape, color(&mut rng))
        })
        .collect();
    Image::from_fn(size, size, |c, i, j| {
        let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
        let t = (((x / s - 0.5) * ca + (y / s - 0.5) * sa) + 0.75) / 1.5;
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for (shape, col) in &shapes {
            let inside = match *shape {
                Shape::Disc { ci, cj, r } => (y - ci).powi(2) + (x - cj).powi(2) <= r * r,
                Shape::Box { i0, j0, i1, j1 } => (i0..i1).contains(&y) && (j0..j1).contains(&x),
                Shape::Stripes { i0, j0, i1, j1, period, angle } => {
                    let u = x * angle.cos() + y * angle.sin();
                    (i0..i1).contains(&y) && (j0..j1).contains(&x) && (u / period).rem_euclid(2.0) < 1.0
                }
            };
            if inside {
                v = col[c];
            }
        }
        v.clamp(0.0, 1.0)
    })
}

/// `count` images with seeds `seed, seed + 1, ...`.
pub fn toy_set(count: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..count as u64).map(|k| toy_image(seed.wrapping_add(k), size)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_range_and_varied() {
        let a = toy_set(4, 32, 9);
        assert_eq!(a, toy_set(4, 32, 9));
        assert!(a.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(a[i], a[j]);
            }
        }
        let d = a[0].data();
        let mean = d.mean().unwrap();
        assert!(d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64 > 1e-3);
    }
}
