//! Reference implementations and numeric helpers shared by integration
//! tests. Nothing here calls into the library's own kernels.

#![allow(dead_code)]

pub mod gradcheck;

use lcarep_core::{Tensor, Weighting};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Required agreement between analytic and numeric gradients.
pub const GRAD_REL_TOL: f64 = 1e-6;
/// Magnitude below which gradient entries are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;
/// Inputs this close to a kink are not finite-differenced.
pub const GUARD_BAND: f64 = 1e-3;
/// Step of the five-point stencil; the stencil spans `2 * FD_STEP`, well
/// inside the guard band.
pub const FD_STEP: f64 = 2e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::new(vec![h, w, c], uniform_vec(rng, h * w * c, -1.0, 1.0)).unwrap()
}

/// Fourth-order central difference of `f` at `x` along every coordinate in
/// `coords`.
pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize]) -> Vec<f64> {
    numeric_grad_with_step(f, x, coords, FD_STEP)
}

pub fn numeric_grad_with_step(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let mut at = |offset: f64| {
                probe[i] = x[i] + offset;
                let v = f(&probe);
                probe[i] = x[i];
                v
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
        })
        .collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Largest relative error over `coords`; `analytic` is indexed like `x`.
pub fn max_grad_err(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
) -> f64 {
    let numeric = numeric_grad(f, x, coords);
    coords
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| rel_err(analytic[i], n))
        .fold(0.0, f64::max)
}

/// Every coordinate for small inputs, otherwise a seeded sample of `k`.
pub fn sample_coords(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, k).into_vec()
    }
}

pub fn weighted_sum(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(a, b)| a * b).sum()
}

/// Direct enumeration of every window and its mean.
pub fn oracle_lca(map: &Tensor<f64>, include_1x1: bool, weighting: Weighting) -> Vec<f64> {
    let (hh, ww, cc) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let at = |i: usize, j: usize, c: usize| map.data()[(i * ww + j) * cc + c];
    let mut size_means: Vec<Vec<f64>> = Vec::new();
    let mut window_means: Vec<Vec<f64>> = Vec::new();
    for h in 1..=hh {
        for w in 1..=ww {
            if h == 1 && w == 1 && !include_1x1 {
                continue;
            }
            let mut this_size: Vec<Vec<f64>> = Vec::new();
            for top in 0..=hh - h {
                for left in 0..=ww - w {
                    let mean: Vec<f64> = (0..cc)
                        .map(|c| {
                            let mut s = 0.0;
                            for i in top..top + h {
                                for j in left..left + w {
                                    s += at(i, j, c);
                                }
                            }
                            s / (h * w) as f64
                        })
                        .collect();
                    this_size.push(mean);
                }
            }
            size_means.push(
                (0..cc)
                    .map(|c| this_size.iter().map(|m| m[c]).sum::<f64>() / this_size.len() as f64)
                    .collect(),
            );
            window_means.extend(this_size);
        }
    }
    let avg = |rows: &[Vec<f64>]| -> Vec<f64> {
        (0..cc)
            .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64)
            .collect()
    };
    match weighting {
        Weighting::FlatOverWindows => avg(&window_means),
        Weighting::UniformPerSize => avg(&size_means),
    }
}

/// Counts window instances by walking every size and position.
pub fn oracle_window_count(hh: usize, ww: usize, include_1x1: bool) -> u64 {
    let mut n = 0u64;
    for h in 1..=hh {
        for w in 1..=ww {
            if h == 1 && w == 1 && !include_1x1 {
                continue;
            }
            for _top in 0..=hh - h {
                for _left in 0..=ww - w {
                    n += 1;
                }
            }
        }
    }
    n
}

/// Plain zero-padded 3x3 cross-correlation, loop order chosen for clarity.
pub fn oracle_conv(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
    let (h, w, cin) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let cout = kernel.dims()[3];
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for co in 0..cout {
                let mut s = bias.data()[co];
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (iy, ix) = (y + dy, x + dx);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let v = input.data()[((iy as usize) * w + ix as usize) * cin + ci];
                            let k = kernel.data()[((((dy + 1) * 3 + dx + 1) as usize) * cin + ci) * cout + co];
                            s += v * k;
                        }
                    }
                }
                out[((y as usize) * w + x as usize) * cout + co] = s;
            }
        }
    }
    out
}
