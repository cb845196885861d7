//! Local Concepts Accumulation (LCA) pooling.
//!
//! Every rectangular window of the feature map (all sizes except, by
//! default, 1x1; stride 1) is average pooled into a "local concept" vector,
//! and the local concepts are averaged into a single embedding.
//!
//! The layer is linear in its input, so it is fully described by a
//! per-cell coefficient map: `forward(x)[c] = sum_ij coeff[i][j] * x[i][j][c]`.
//! The forward pass goes through a summed-area table (O(C) per window);
//! the backward pass broadcasts the cached coefficient map (O(HWC)).

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, SummedAreaTable, Tensor};

/// How local concepts are combined into the final embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Weighting {
    /// Every window instance counts once.
    #[default]
    #[serde(rename = "flat")]
    FlatOverWindows,
    /// Average over positions within each size, then over sizes.
    #[serde(rename = "per-size")]
    UniformPerSize,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::FlatOverWindows => "flat",
            Weighting::UniformPerSize => "per-size",
        }
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Weighting::FlatOverWindows),
            "per-size" => Ok(Weighting::UniformPerSize),
            other => Err(Error::Config(format!(
                "unknown LCA weighting {other:?} (expected \"flat\" or \"per-size\")"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LcaConfig {
    pub include_1x1: bool,
    pub weighting: Weighting,
}

/// Window sizes `(h, w)` admitted for an `H x W` map, in row-major size order.
pub fn window_sizes(height: usize, width: usize, cfg: &LcaConfig) -> Vec<(usize, usize)> {
    let mut sizes = Vec::with_capacity(height * width);
    for h in 1..=height {
        for w in 1..=width {
            if h * w > 1 || cfg.include_1x1 {
                sizes.push((h, w));
            }
        }
    }
    sizes
}

/// Number of (size, position) window instances.
pub fn lca_window_count(height: usize, width: usize, cfg: &LcaConfig) -> u64 {
    let (h, w) = (height as u64, width as u64);
    let all = h * (h + 1) / 2 * (w * (w + 1) / 2);
    if cfg.include_1x1 {
        all
    } else {
        all - h * w
    }
}

fn positions(height: usize, width: usize, (h, w): (usize, usize)) -> usize {
    (height - h + 1) * (width - w + 1)
}

/// Weight each single window of the given size carries in the final average.
fn per_window_weights(
    height: usize,
    width: usize,
    cfg: &LcaConfig,
) -> Result<Vec<((usize, usize), f64)>> {
    let sizes = window_sizes(height, width, cfg);
    if height == 0 || width == 0 || sizes.is_empty() {
        return Err(Error::invalid(format!(
            "empty LCA window set for a {height}x{width} map (include_1x1 = {})",
            cfg.include_1x1
        )));
    }
    let n_windows = lca_window_count(height, width, cfg) as f64;
    let n_sizes = sizes.len() as f64;
    Ok(sizes
        .into_iter()
        .map(|s| {
            let weight = match cfg.weighting {
                Weighting::FlatOverWindows => 1.0 / n_windows,
                Weighting::UniformPerSize => 1.0 / (n_sizes * positions(height, width, s) as f64),
            };
            (s, weight)
        })
        .collect())
}

/// Pools an `H x W x C` map into a length-`C` embedding via a summed-area
/// table.
pub fn lca_forward<T: Real>(map: &Tensor<T>, cfg: &LcaConfig) -> Result<Vec<T>> {
    let (height, width, channels) = map.hwc()?;
    let weights = per_window_weights(height, width, cfg)?;
    let sat = SummedAreaTable::build(map)?;
    let mut out = vec![0.0f64; channels];
    let mut acc = vec![0.0f64; channels];
    for ((h, w), weight) in weights {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for top in 0..=height - h {
            for left in 0..=width - w {
                sat.accumulate_window(top, left, h, w, &mut acc);
            }
        }
        let scale = weight / (h * w) as f64;
        for (o, a) in out.iter_mut().zip(&acc) {
            *o += a * scale;
        }
    }
    Ok(out.into_iter().map(T::lift).collect())
}

/// Literal enumeration of every window with direct summation. Used as the
/// reference for [`lca_forward`] and as the naive baseline in benchmarks.
pub fn lca_forward_bruteforce<T: Real>(map: &Tensor<T>, cfg: &LcaConfig) -> Result<Vec<T>> {
    let (height, width, channels) = map.hwc()?;
    let sizes = window_sizes(height, width, cfg);
    if sizes.is_empty() {
        return Err(Error::invalid(format!(
            "empty LCA window set for a {height}x{width} map"
        )));
    }
    let data = map.data();
    let mut per_size_means: Vec<Vec<f64>> = Vec::with_capacity(sizes.len());
    let mut all_window_sum = vec![0.0f64; channels];
    let mut n_windows = 0usize;
    for &(h, w) in &sizes {
        let mut size_sum = vec![0.0f64; channels];
        let mut n_pos = 0usize;
        for top in 0..=height - h {
            for left in 0..=width - w {
                let mut window = vec![0.0f64; channels];
                for i in top..top + h {
                    for j in left..left + w {
                        for (c, v) in window.iter_mut().enumerate() {
                            *v += data[(i * width + j) * channels + c].widen();
                        }
                    }
                }
                for c in 0..channels {
                    let mean = window[c] / (h * w) as f64;
                    size_sum[c] += mean;
                    all_window_sum[c] += mean;
                }
                n_pos += 1;
                n_windows += 1;
            }
        }
        per_size_means.push(size_sum.into_iter().map(|s| s / n_pos as f64).collect());
    }
    let out: Vec<f64> = match cfg.weighting {
        Weighting::FlatOverWindows => all_window_sum
            .into_iter()
            .map(|s| s / n_windows as f64)
            .collect(),
        Weighting::UniformPerSize => (0..channels)
            .map(|c| per_size_means.iter().map(|m| m[c]).sum::<f64>() / sizes.len() as f64)
            .collect(),
    };
    Ok(out.into_iter().map(T::lift).collect())
}

/// Closed form of the LCA layer: the weight each input cell carries in the
/// output.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl CoefficientMap {
    fn compute(height: usize, width: usize, cfg: &LcaConfig) -> Result<Self> {
        let weights = per_window_weights(height, width, cfg)?;
        // Number of placements of a length-`len` span along an axis of size
        // `axis` that cover index `i`.
        let cover = |i: usize, len: usize, axis: usize| -> f64 {
            let lo = (i + 1).saturating_sub(len);
            let hi = i.min(axis - len);
            (hi + 1 - lo) as f64
        };
        let mut values = vec![0.0f64; height * width];
        for ((h, w), weight) in weights {
            let scale = weight / (h * w) as f64;
            for i in 0..height {
                let rows = cover(i, h, height);
                for j in 0..width {
                    values[i * width + j] += scale * rows * cover(j, w, width);
                }
            }
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    /// Row-major `H x W` coefficients.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

type CacheKey = (usize, usize, LcaConfig);

fn cache() -> &'static RwLock<HashMap<CacheKey, Arc<CoefficientMap>>> {
    static CACHE: OnceLock<RwLock<HashMap<CacheKey, Arc<CoefficientMap>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Coefficient map for `(H, W, cfg)`, computed once and cached.
pub fn lca_coefficient_map(
    height: usize,
    width: usize,
    cfg: &LcaConfig,
) -> Result<Arc<CoefficientMap>> {
    let key = (height, width, *cfg);
    if let Some(map) = cache().read().unwrap().get(&key) {
        return Ok(Arc::clone(map));
    }
    let computed = Arc::new(CoefficientMap::compute(height, width, cfg)?);
    let mut guard = cache().write().unwrap();
    Ok(Arc::clone(guard.entry(key).or_insert(computed)))
}

/// Adjoint of [`lca_forward`]: `grad_in[i][j][c] = coeff[i][j] * grad_out[c]`.
pub fn lca_backward<T: Real>(
    grad_out: &[T],
    height: usize,
    width: usize,
    cfg: &LcaConfig,
) -> Result<Tensor<T>> {
    let coeff = lca_coefficient_map(height, width, cfg)?;
    let channels = grad_out.len();
    if channels == 0 {
        return Err(Error::invalid("empty LCA gradient"));
    }
    let mut data = Vec::with_capacity(height * width * channels);
    for &k in coeff.values() {
        data.extend(grad_out.iter().map(|&g| T::lift(k * g.widen())));
    }
    Tensor::new(vec![height, width, channels], data)
}
