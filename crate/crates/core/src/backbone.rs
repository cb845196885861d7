//! Small convolutional feature extractor and its checkpoint format.
//!
//! Each block is `conv3x3 (stride 1, zero pad 1) -> ReLU -> 2x2 max-pool`.
//! Kernels are laid out `3 x 3 x Cin x Cout`, feature maps `H x W x C`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::Container;
use crate::error::{Error, Result};
use crate::lca::{self, LcaConfig};
use crate::tensor::{l2_normalize, l2_normalize_backward, Real, Tensor};
use crate::tnsr;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub block_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            block_channels: vec![16, 32, 64],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return Err(Error::Config(format!(
                "block_channels must be a nonempty list of positive counts, got {:?}",
                self.block_channels
            )));
        }
        let k = self.block_channels.len() as u32;
        let div = 1usize.checked_shl(k).unwrap_or(0);
        if div == 0 || !self.input_size.is_multiple_of(div) || self.input_size / div < 2 {
            return Err(Error::Config(format!(
                "input_size {} must be divisible by 2^{k} with a final feature-map side >= 2",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.block_channels.last().unwrap_or(&0)
    }

    /// Side length of the final feature map.
    pub fn feature_side(&self) -> usize {
        self.input_size >> self.block_channels.len()
    }
}

fn shape_err(what: &str, got: &[usize], want: String) -> Error {
    Error::invalid(format!("{what}: got dims {got:?}, expected {want}"))
}

fn check_conv_shapes<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (h, w, cin) = input.hwc()?;
    match kernel.dims() {
        &[3, 3, kc, cout] if kc == cin => Ok((h, w, cin, cout)),
        other => Err(shape_err(
            "conv kernel",
            other,
            format!("[3, 3, {cin}, Cout]"),
        )),
    }
}

/// 3x3 cross-correlation with zero padding 1, plus bias.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, cin, cout) = check_conv_shapes(input, kernel)?;
    if bias.dims() != [cout] {
        return Err(shape_err("conv bias", bias.dims(), format!("[{cout}]")));
    }
    let src = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            o.copy_from_slice(bias.data());
            for ky in 0..3 {
                let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let px = &src[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let kbase = (ky * 3 + kx) * cin * cout;
                    for (ci, &a) in px.iter().enumerate() {
                        if a == T::zero() {
                            continue;
                        }
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov = *ov + a * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, cout], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (gi, gk, gb) = conv2d_backward_impl(input, kernel, grad_out, true)?;
    Ok((gi.expect("input gradient requested"), gk, gb))
}

fn conv2d_backward_impl<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (h, w, cin, cout) = check_conv_shapes(input, kernel)?;
    if grad_out.dims() != [h, w, cout] {
        return Err(shape_err(
            "conv grad_out",
            grad_out.dims(),
            format!("[{h}, {w}, {cout}]"),
        ));
    }
    let src = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); cout];
    let mut gi = if want_input_grad {
        vec![T::zero(); src.len()]
    } else {
        Vec::new()
    };
    for y in 0..h {
        for x in 0..w {
            let go = &g[(y * w + x) * cout..(y * w + x + 1) * cout];
            for (b, &v) in gb.iter_mut().zip(go) {
                *b = *b + v;
            }
            for ky in 0..3 {
                let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let pix = (iy * w + ix) * cin;
                    let kbase = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = src[pix + ci];
                        let range = kbase + ci * cout..kbase + (ci + 1) * cout;
                        if a != T::zero() {
                            for (gkv, &gv) in gk[range.clone()].iter_mut().zip(go) {
                                *gkv = *gkv + a * gv;
                            }
                        }
                        if want_input_grad {
                            let s: T = k[range].iter().zip(go).map(|(&kv, &gv)| kv * gv).sum();
                            gi[pix + ci] = gi[pix + ci] + s;
                        }
                    }
                }
            }
        }
    }
    let gi = if want_input_grad {
        Some(Tensor::new(input.dims().to_vec(), gi)?)
    } else {
        None
    };
    Ok((
        gi,
        Tensor::new(kernel.dims().to_vec(), gk)?,
        Tensor::new(vec![cout], gb)?,
    ))
}

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
    out
}

/// Masks `grad_out` by `input > 0`.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.dims() != grad_out.dims() {
        return Err(shape_err("relu grad_out", grad_out.dims(), format!("{:?}", input.dims())));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.dims().to_vec(), data)
}

/// Max over non-overlapping 2x2 tiles. Returns the pooled map and, per
/// output element, the flat input index of the winning cell (first maximum
/// in row-major tile order).
pub fn maxpool2_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (h, w, c) = input.hwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "max-pool needs even side lengths, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            let cells = [
                ((2 * y) * w + 2 * x) * c,
                ((2 * y) * w + 2 * x + 1) * c,
                ((2 * y + 1) * w + 2 * x) * c,
                ((2 * y + 1) * w + 2 * x + 1) * c,
            ];
            for ch in 0..c {
                let mut best = cells[0] + ch;
                for &cell in &cells[1..] {
                    if src[cell + ch] > src[best] {
                        best = cell + ch;
                    }
                }
                out.push(src[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, argmax))
}

/// Routes each pooled gradient back to its argmax cell.
pub fn maxpool2_backward<T: Real>(
    grad_out: &Tensor<T>,
    argmax: &[u32],
    input_dims: &[usize],
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::invalid("max-pool argmax does not match grad_out"));
    }
    let mut grad = Tensor::zeros(input_dims.to_vec())?;
    let data = grad.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        let slot = data
            .get_mut(idx as usize)
            .ok_or_else(|| Error::invalid("max-pool argmax out of range"))?;
        *slot = *slot + g;
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Parameter gradients, one entry per block, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(backbone: &Backbone<T>) -> Self {
        let layers = backbone
            .layers
            .iter()
            .map(|l| ConvLayer {
                kernel: Tensor::zeros(l.kernel.dims().to_vec()).unwrap(),
                bias: Tensor::zeros(l.bias.dims().to_vec()).unwrap(),
            })
            .collect();
        Self { layers }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.kernel.data_mut().iter_mut().zip(b.kernel.data()) {
                *x = *x + y;
            }
            for (x, &y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                *x = *x + y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.kernel.all_finite() && l.bias.all_finite())
    }
}

struct BlockCache<T> {
    input: Tensor<T>,
    pre_activation: Tensor<T>,
    argmax: Vec<u32>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache<T = f32> {
    blocks: Vec<BlockCache<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T = f32> {
    config: BackboneConfig,
    pub layers: Vec<ConvLayer<T>>,
}

impl Backbone<f32> {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` kernels, zero biases, drawn
    /// from ChaCha8 seeded with `seed`.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.block_channels.len());
        let mut cin = 3;
        for &cout in &config.block_channels {
            let bound = 1.0 / ((9 * cin) as f64).sqrt();
            let kernel: Vec<f32> = (0..9 * cin * cout)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect();
            layers.push(ConvLayer {
                kernel: Tensor::new(vec![3, 3, cin, cout], kernel)?,
                bias: Tensor::zeros(vec![cout])?,
            });
            cin = cout;
        }
        Ok(Self { config, layers })
    }
}

impl<T: Real> Backbone<T> {
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut cin = 3;
        let mut layers = Vec::new();
        for &cout in &config.block_channels {
            layers.push(ConvLayer {
                kernel: Tensor::zeros(vec![3, 3, cin, cout])?,
                bias: Tensor::zeros(vec![cout])?,
            });
            cin = cout;
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    kernel: l.kernel.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        if image.dims() != [s, s, 3] {
            return Err(shape_err("backbone input", image.dims(), format!("[{s}, {s}, 3]")));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let mut x = image.clone();
        for layer in &self.layers {
            let z = conv2d_forward(&x, &layer.kernel, &layer.bias)?;
            x = maxpool2_forward(&relu_forward(&z))?.0;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, image: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_image(image)?;
        let mut x = image.clone();
        let mut blocks = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = conv2d_forward(&x, &layer.kernel, &layer.bias)?;
            let (pooled, argmax) = maxpool2_forward(&relu_forward(&z))?;
            blocks.push(BlockCache {
                input: std::mem::replace(&mut x, pooled),
                pre_activation: z,
                argmax,
            });
        }
        Ok((x, ForwardCache { blocks }))
    }

    /// Parameter gradients given `dL/d(feature map)`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_map: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_map.clone();
        for (idx, (layer, block)) in self.layers.iter().zip(&cache.blocks).enumerate().rev() {
            let g_act = maxpool2_backward(&g, &block.argmax, block.pre_activation.dims())?;
            let g_pre = relu_backward(&block.pre_activation, &g_act)?;
            let (gi, gk, gb) = conv2d_backward_impl(&block.input, &layer.kernel, &g_pre, idx > 0)?;
            grads.push(ConvLayer {
                kernel: gk,
                bias: gb,
            });
            if let Some(gi) = gi {
                g = gi;
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Input gradient of the whole backbone; used for gradient checks.
    pub fn backward_input(&self, cache: &ForwardCache<T>, grad_map: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_map.clone();
        for (layer, block) in self.layers.iter().zip(&cache.blocks).rev() {
            let g_act = maxpool2_backward(&g, &block.argmax, block.pre_activation.dims())?;
            let g_pre = relu_backward(&block.pre_activation, &g_act)?;
            g = conv2d_backward(&block.input, &layer.kernel, &g_pre)?.0;
        }
        Ok(g)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum()
    }
}

/// A backbone plus the pooling configuration applied on top of it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T = f32> {
    pub backbone: Backbone<T>,
    pub lca: LcaConfig,
}

/// State from [`Checkpoint::embed_traced`] needed to backpropagate an
/// embedding gradient into the backbone.
pub struct EmbedTrace<T = f32> {
    cache: ForwardCache<T>,
    pooled: Vec<T>,
    map_side: (usize, usize),
}

impl<T: Real> Checkpoint<T> {
    pub fn backbone_forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.backbone.forward(image)
    }

    /// `l2_normalize(lca(backbone(image)))`.
    pub fn embed(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let map = self.backbone.forward(image)?;
        Ok(l2_normalize(&lca::lca_forward(&map, &self.lca)?))
    }

    pub fn embed_traced(&self, image: &Tensor<T>) -> Result<(Vec<T>, EmbedTrace<T>)> {
        let (map, cache) = self.backbone.forward_cached(image)?;
        let (h, w, _) = map.hwc()?;
        let pooled = lca::lca_forward(&map, &self.lca)?;
        let emb = l2_normalize(&pooled);
        Ok((
            emb,
            EmbedTrace {
                cache,
                pooled,
                map_side: (h, w),
            },
        ))
    }

    pub fn embed_backward(&self, trace: &EmbedTrace<T>, grad_embedding: &[T]) -> Result<Gradients<T>> {
        let g_pooled = l2_normalize_backward(&trace.pooled, grad_embedding);
        let (h, w) = trace.map_side;
        let g_map = lca::lca_backward(&g_pooled, h, w, &self.lca)?;
        self.backbone.backward(&trace.cache, &g_map)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format_version: u32,
    backbone: BackboneConfig,
    lca: LcaConfig,
}

impl Checkpoint<f32> {
    pub fn init(backbone: BackboneConfig, lca: LcaConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::init(backbone, seed)?,
            lca,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            backbone: self.backbone.config.clone(),
            lca: self.lca,
        };
        let text = toml::to_string(&meta).map_err(|e| Error::invalid(e.to_string()))?;
        let mut c = Container::new();
        c.push_text("config", &text)?;
        for (i, layer) in self.backbone.layers.iter().enumerate() {
            c.push(format!("block{i}.kernel"), layer.kernel.clone())?;
            c.push(format!("block{i}.bias"), layer.bias.clone())?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta = toml::from_str(&c.text("config")?)
            .map_err(|e| Error::format(0, format!("bad checkpoint config: {e}")))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(
                0,
                format!("unsupported checkpoint format version {}", meta.format_version),
            ));
        }
        meta.backbone
            .validate()
            .map_err(|e| Error::format(0, e.to_string()))?;
        let mut backbone = Backbone::<f32>::zeros(meta.backbone)?;
        for (i, layer) in backbone.layers.iter_mut().enumerate() {
            for (name, slot) in [("kernel", &mut layer.kernel), ("bias", &mut layer.bias)] {
                let key = format!("block{i}.{name}");
                let t = c.require(&key)?;
                if t.dims() != slot.dims() {
                    return Err(Error::format(
                        0,
                        format!("entry {key:?} has dims {:?}, expected {:?}", t.dims(), slot.dims()),
                    ));
                }
                *slot = t.clone();
            }
        }
        Ok(Self {
            backbone,
            lca: meta.lca,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Reads an externally computed `H x W x C` feature map from a TNSR file.
pub fn load_external_features(path: &Path) -> Result<Tensor> {
    let t = tnsr::read_tnsr(path)?;
    match t.dims() {
        &[h, w, _] if h >= 2 && w >= 2 => Ok(t),
        &[_, _, _] => Err(Error::format(10, format!("feature map {:?} smaller than 2x2", t.dims()))),
        other => Err(Error::format(
            6,
            format!("feature map must have 3 dims (H, W, C), got {}", other.len()),
        )),
    }
}
