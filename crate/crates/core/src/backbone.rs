//! Frozen ResNet image encoder with the three-convolution stem and
//! average-pool downsampling used by CLIP's visual towers, and extraction of
//! its multi-scale dense feature pyramid.
//!
//! Batch norms are folded into the preceding convolutions at load time, so the
//! encoder is a chain of biased convolutions, ReLUs and average pools.
//!
//! Weight names follow the CLIP state dict (`visual.conv1.weight`,
//! `visual.layer3.5.bn2.running_var`, ...); the `visual.` prefix is optional
//! and the attention-pool head is ignored.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, RangeTag};
use crate::ops::{self, Conv2d, ConvGrad};
use crate::rng::{derive_seed, stream};
use crate::scenes;
use crate::store::{self, NamedTensor, TensorMap};
use crate::tensor::{Element, Tensor};

/// Per-channel input normalization the CLIP encoders were trained with.
pub const PIXEL_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
pub const PIXEL_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

/// Spatial size the encoder input must be a multiple of.
pub const ALIGN: usize = 32;

const BN_EPS: f64 = 1e-5;

/// Encoder family. `Custom` infers width and depth from the weight file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    #[default]
    Rn50,
    Rn101,
    Rn50x4,
    Rn50x16,
    Custom,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Rn50 => "RN50",
            Variant::Rn101 => "RN101",
            Variant::Rn50x4 => "RN50x4",
            Variant::Rn50x16 => "RN50x16",
            Variant::Custom => "custom",
        }
    }

    /// Published layout, or `None` for [`Variant::Custom`].
    pub fn arch(self) -> Option<Arch> {
        let (width, layers) = match self {
            Variant::Rn50 => (64, [3, 4, 6, 3]),
            Variant::Rn101 => (64, [3, 4, 23, 3]),
            Variant::Rn50x4 => (80, [4, 6, 10, 6]),
            Variant::Rn50x16 => (96, [6, 8, 18, 8]),
            Variant::Custom => return None,
        };
        Some(Arch { width, layers })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.as_str().to_string()
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rn50" => Ok(Variant::Rn50),
            "rn101" => Ok(Variant::Rn101),
            "rn50x4" => Ok(Variant::Rn50x4),
            "rn50x16" => Ok(Variant::Rn50x16),
            "custom" | "pluggable" => Ok(Variant::Custom),
            _ => Err(Error::param(
                "variant",
                format!("unknown encoder variant `{s}` (expected one of: RN50, RN101, RN50x4, RN50x16, custom)"),
            )),
        }
    }
}

/// Stem width and residual blocks per stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arch {
    /// Output channels of the stem; `C` in the pyramid shape law.
    pub width: usize,
    pub layers: [usize; 4],
}

impl Arch {
    /// Channel count of pyramid level `i` (1-based).
    pub fn level_channels(&self, level: usize) -> usize {
        match level {
            1 => self.width,
            _ => self.width << level,
        }
    }

    /// Number of frozen parameters (convolution kernels plus batch-norm
    /// scale and shift) needed to produce levels `1..=max_level`.
    pub fn parameter_count(&self, max_level: usize) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
        let w = self.width;
        let mut n = conv(3, w / 2, 3) + conv(w / 2, w / 2, 3) + conv(w / 2, w, 3);
        let mut inplanes = w;
        for (stage, &blocks) in self.layers.iter().enumerate().take(max_level - 1) {
            let planes = w << stage;
            for b in 0..blocks {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                n += conv(inplanes, planes, 1) + conv(planes, planes, 3) + conv(planes, planes * 4, 1);
                if b == 0 && (stride > 1 || inplanes != planes * 4) {
                    n += conv(inplanes, planes * 4, 1);
                }
                inplanes = planes * 4;
            }
        }
        n
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Bottleneck<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    conv3: Conv2d<T>,
    downsample: Option<Conv2d<T>>,
    stride: usize,
}

struct BlockTrace<T> {
    x: Tensor<T>,
    h1: Tensor<T>,
    h2: Tensor<T>,
    h2p: Option<Tensor<T>>,
    xp: Option<Tensor<T>>,
    out: Tensor<T>,
}

impl<T: Element> Bottleneck<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, None)
    }

    fn run(&self, x: &Tensor<T>, trace: Option<&mut Vec<BlockTrace<T>>>) -> Tensor<T> {
        let mut h1 = self.conv1.forward(x);
        ops::relu_inplace(&mut h1);
        let mut h2 = self.conv2.forward(&h1);
        ops::relu_inplace(&mut h2);
        let h2p = (self.stride > 1).then(|| ops::avg_pool(&h2, self.stride));
        let mut out = self.conv3.forward(h2p.as_ref().unwrap_or(&h2));
        let xp = match &self.downsample {
            Some(ds) => {
                let xp = (self.stride > 1).then(|| ops::avg_pool(x, self.stride));
                out.add_assign(&ds.forward(xp.as_ref().unwrap_or(x)));
                xp
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        ops::relu_inplace(&mut out);
        if let Some(trace) = trace {
            trace.push(BlockTrace {
                x: x.clone(),
                h1,
                h2,
                h2p,
                xp,
                out: out.clone(),
            });
        }
        out
    }

    fn backward(&self, t: &BlockTrace<T>, mut d: Tensor<T>) -> Tensor<T> {
        ops::relu_backward(&t.out, &mut d);
        let mut dh2 = self
            .conv3
            .backward(t.h2p.as_ref().unwrap_or(&t.h2), &d, None, true)
            .expect("input gradient");
        if self.stride > 1 {
            dh2 = ops::avg_pool_backward(&dh2, self.stride, t.h2.shape());
        }
        ops::relu_backward(&t.h2, &mut dh2);
        let mut dh1 = self.conv2.backward(&t.h1, &dh2, None, true).expect("input gradient");
        ops::relu_backward(&t.h1, &mut dh1);
        let mut dx = self.conv1.backward(&t.x, &dh1, None, true).expect("input gradient");
        match &self.downsample {
            Some(ds) => {
                let dxp = ds
                    .backward(t.xp.as_ref().unwrap_or(&t.x), &d, None, true)
                    .expect("input gradient");
                if self.stride > 1 {
                    dx.add_assign(&ops::avg_pool_backward(&dxp, self.stride, t.x.shape()));
                } else {
                    dx.add_assign(&dxp);
                }
            }
            None => dx.add_assign(&d),
        }
        dx
    }

    fn cast<U: Element>(&self) -> Bottleneck<U> {
        Bottleneck {
            conv1: cast_conv(&self.conv1),
            conv2: cast_conv(&self.conv2),
            conv3: cast_conv(&self.conv3),
            downsample: self.downsample.as_ref().map(cast_conv),
            stride: self.stride,
        }
    }
}

fn cast_conv<T: Element, U: Element>(c: &Conv2d<T>) -> Conv2d<U> {
    Conv2d::new(
        c.weight.cast(),
        c.bias.as_ref().map(|b| b.iter().map(|v| U::of(v.f64())).collect()),
        c.stride,
        c.padding,
    )
}

/// Activations retained by [`FrozenEncoder::forward_traced`] for backpropagation
/// to the input.
pub struct EncoderTrace<T> {
    x: Tensor<T>,
    a1: Tensor<T>,
    a2: Tensor<T>,
    a3: Tensor<T>,
    blocks: Vec<Vec<BlockTrace<T>>>,
}

/// Multi-scale dense features; `levels[i - 1]` holds level `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T = f32> {
    pub levels: Vec<Tensor<T>>,
    pub base_channels: usize,
}

impl<T: Element> FeaturePyramid<T> {
    pub fn max_level(&self) -> usize {
        self.levels.len()
    }

    /// Level `i`, 1-based.
    pub fn level(&self, i: usize) -> &Tensor<T> {
        &self.levels[i - 1]
    }

    /// `(height, width, channels)` per level.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.levels
            .iter()
            .map(|t| (t.height(), t.width(), t.channels()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(Tensor::all_finite)
    }
}

/// Immutable encoder; every method takes `&self`, so one instance can serve
/// any number of concurrent extractions.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder<T = f32> {
    variant: Variant,
    arch: Arch,
    max_level: usize,
    stem: [Conv2d<T>; 3],
    stages: Vec<Vec<Bottleneck<T>>>,
    digest: String,
}

fn check_level(max_level: usize) -> Result<()> {
    if (1..=5).contains(&max_level) {
        Ok(())
    } else {
        Err(Error::param("max_level", format!("must lie in 1..=5, got {max_level}")))
    }
}

fn mismatch(name: &str, message: impl Into<String>) -> Error {
    Error::TensorMismatch {
        name: name.to_string(),
        message: message.into(),
    }
}

/// Looks up tensors with or without the `visual.` prefix.
struct Lookup<'a> {
    map: &'a TensorMap,
    prefix: &'static str,
}

impl<'a> Lookup<'a> {
    fn new(map: &'a TensorMap) -> Self {
        let prefix = if map.contains_key("visual.conv1.weight") {
            "visual."
        } else {
            ""
        };
        Lookup { map, prefix }
    }

    fn full(&self, name: &str) -> String {
        format!("{}{name}", self.prefix)
    }

    fn get(&self, name: &str, shape: &[usize]) -> Result<&'a NamedTensor> {
        let full = self.full(name);
        let t = self
            .map
            .get(&full)
            .ok_or_else(|| mismatch(&full, "missing from weight file"))?;
        if t.shape != shape {
            return Err(mismatch(
                &full,
                format!("expected shape {shape:?}, found {:?}", t.shape),
            ));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(mismatch(&full, "contains non-finite values"));
        }
        Ok(t)
    }

    fn has(&self, name: &str) -> bool {
        self.map.contains_key(&self.full(name))
    }

    /// Convolution `conv` followed by batch norm `bn`, folded.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &self,
        conv: &str,
        bn: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Conv2d<f32>> {
        let w = self.get(&format!("{conv}.weight"), &[cout, cin, k, k])?;
        let gamma = self.get(&format!("{bn}.weight"), &[cout])?;
        let beta = self.get(&format!("{bn}.bias"), &[cout])?;
        let mean = self.get(&format!("{bn}.running_mean"), &[cout])?;
        let var = self.get(&format!("{bn}.running_var"), &[cout])?;
        if let Some(v) = var.data.iter().find(|v| **v < 0.0) {
            return Err(mismatch(&self.full(&format!("{bn}.running_var")), format!("negative variance {v}")));
        }
        let per = cin * k * k;
        let mut weight = Vec::with_capacity(w.data.len());
        let mut bias = Vec::with_capacity(cout);
        for o in 0..cout {
            let scale = gamma.data[o] as f64 / (var.data[o] as f64 + BN_EPS).sqrt();
            weight.extend(w.data[o * per..(o + 1) * per].iter().map(|&v| (v as f64 * scale) as f32));
            bias.push((beta.data[o] as f64 - mean.data[o] as f64 * scale) as f32);
        }
        Ok(Conv2d::new(
            Tensor::from_vec([cout, cin, k, k], weight),
            Some(bias),
            stride,
            padding,
        ))
    }
}

fn count_blocks(look: &Lookup<'_>, stage: usize) -> usize {
    (0..)
        .take_while(|b| look.has(&format!("layer{stage}.{b}.conv1.weight")))
        .count()
}

/// Infers the layout of a weight file.
fn infer_arch(look: &Lookup<'_>, max_level: usize) -> Result<Arch> {
    let name = look.full("conv1.weight");
    let t = look.map.get(&name).ok_or_else(|| mismatch(&name, "missing from weight file"))?;
    if t.shape.len() != 4 || t.shape[1] != 3 {
        return Err(mismatch(&name, format!("expected shape [w/2, 3, 3, 3], found {:?}", t.shape)));
    }
    let mut layers = [0; 4];
    for (s, n) in layers.iter_mut().enumerate() {
        *n = count_blocks(look, s + 1);
        if *n == 0 && s + 1 < max_level {
            return Err(mismatch(&look.full(&format!("layer{}.0.conv1.weight", s + 1)), "missing from weight file"));
        }
    }
    Ok(Arch {
        width: t.shape[0] * 2,
        layers,
    })
}

impl FrozenEncoder<f32> {
    /// Builds an encoder from a CLIP-layout tensor map, keeping only the
    /// stages needed for `max_level`.
    pub fn from_tensors(map: &TensorMap, variant: Variant, max_level: usize) -> Result<Self> {
        check_level(max_level)?;
        let look = Lookup::new(map);
        let arch = match variant.arch() {
            Some(arch) => arch,
            None => infer_arch(&look, max_level)?,
        };
        let w = arch.width;
        let stem = [
            look.conv_bn("conv1", "bn1", 3, w / 2, 3, 2, 1)?,
            look.conv_bn("conv2", "bn2", w / 2, w / 2, 3, 1, 1)?,
            look.conv_bn("conv3", "bn3", w / 2, w, 3, 1, 1)?,
        ];
        let mut stages = Vec::new();
        let mut inplanes = w;
        for s in 0..max_level - 1 {
            let planes = w << s;
            let found = count_blocks(&look, s + 1);
            if found > arch.layers[s] {
                return Err(mismatch(
                    &look.full(&format!("layer{}.{}.conv1.weight", s + 1, arch.layers[s])),
                    format!("unexpected block: {variant} has {} blocks in stage {}", arch.layers[s], s + 1),
                ));
            }
            let mut blocks = Vec::new();
            for b in 0..arch.layers[s] {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let p = format!("layer{}.{b}", s + 1);
                let downsample = if b == 0 && (stride > 1 || inplanes != planes * 4) {
                    Some(look.conv_bn(
                        &format!("{p}.downsample.0"),
                        &format!("{p}.downsample.1"),
                        inplanes,
                        planes * 4,
                        1,
                        1,
                        0,
                    )?)
                } else {
                    None
                };
                blocks.push(Bottleneck {
                    conv1: look.conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), inplanes, planes, 1, 1, 0)?,
                    conv2: look.conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), planes, planes, 3, 1, 1)?,
                    conv3: look.conv_bn(&format!("{p}.conv3"), &format!("{p}.bn3"), planes, planes * 4, 1, 1, 0)?,
                    downsample,
                    stride,
                });
                inplanes = planes * 4;
            }
            stages.push(blocks);
        }
        let mut enc = FrozenEncoder {
            variant,
            arch,
            max_level,
            stem,
            stages,
            digest: String::new(),
        };
        enc.digest = enc.compute_digest();
        Ok(enc)
    }
}

/// Loads a frozen encoder from a named-tensor weight file.
pub fn load_encoder(path: impl AsRef<Path>, variant: Variant, max_level: usize) -> Result<FrozenEncoder> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::WeightFile {
            path: path.to_path_buf(),
            message: "file does not exist".into(),
        });
    }
    let (map, _) = store::read(path)?;
    let enc = FrozenEncoder::from_tensors(&map, variant, max_level)?;
    log::info!(
        "loaded {} encoder from {} (levels 1..={max_level}, sha256 {})",
        enc.variant,
        path.display(),
        enc.digest
    );
    Ok(enc)
}

impl<T: Element> FrozenEncoder<T> {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    /// Deepest pyramid level this encoder can produce.
    pub fn max_level(&self) -> usize {
        self.max_level
    }

    /// Stem width `C`.
    pub fn base_channels(&self) -> usize {
        self.arch.width
    }

    /// Digest recorded when the encoder was built.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Hex SHA-256 over the folded weights in canonical order; equals
    /// [`FrozenEncoder::digest`] for as long as the weights are untouched.
    pub fn compute_digest(&self) -> String {
        let mut h = Sha256::new();
        for conv in self.convs() {
            for &d in &conv.weight.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in conv.weight.data().iter().chain(conv.bias.iter().flatten()) {
                h.update((v.f64() as f32).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d<T>> {
        self.stem.iter().chain(self.stages.iter().flatten().flat_map(|b| {
            [&b.conv1, &b.conv2, &b.conv3]
                .into_iter()
                .chain(b.downsample.as_ref())
        }))
    }

    /// Frozen parameter count in the original (unfolded) parameterization.
    pub fn parameter_count(&self) -> usize {
        self.arch.parameter_count(self.max_level)
    }

    /// Same weights in another precision.
    pub fn cast<U: Element>(&self) -> FrozenEncoder<U> {
        FrozenEncoder {
            variant: self.variant,
            arch: self.arch,
            max_level: self.max_level,
            stem: [cast_conv(&self.stem[0]), cast_conv(&self.stem[1]), cast_conv(&self.stem[2])],
            stages: self
                .stages
                .iter()
                .map(|s| s.iter().map(Bottleneck::cast).collect())
                .collect(),
            digest: self.digest.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>, levels: usize) -> Result<()> {
        if levels == 0 || levels > self.max_level {
            return Err(Error::param(
                "max_level",
                format!("encoder provides levels 1..={}, requested {levels}", self.max_level),
            ));
        }
        let [_, c, h, w] = x.shape();
        if c != 3 || h % ALIGN != 0 || w % ALIGN != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "encoder input must be N×3×H×W with H, W positive multiples of {ALIGN}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Levels `1..=levels` for a normalized, aligned batch.
    pub fn forward(&self, x: &Tensor<T>, levels: usize) -> Result<Vec<Tensor<T>>> {
        self.check_input(x, levels)?;
        Ok(self.run(x, levels, None))
    }

    /// Like [`FrozenEncoder::forward`], also keeping the activations needed by
    /// [`FrozenEncoder::backward`].
    pub fn forward_traced(&self, x: &Tensor<T>, levels: usize) -> Result<(Vec<Tensor<T>>, EncoderTrace<T>)> {
        self.check_input(x, levels)?;
        let mut trace = EncoderTrace {
            x: x.clone(),
            a1: Tensor::zeros([0; 4]),
            a2: Tensor::zeros([0; 4]),
            a3: Tensor::zeros([0; 4]),
            blocks: Vec::new(),
        };
        let out = self.run(x, levels, Some(&mut trace));
        Ok((out, trace))
    }

    fn run(&self, x: &Tensor<T>, levels: usize, mut trace: Option<&mut EncoderTrace<T>>) -> Vec<Tensor<T>> {
        let mut a1 = self.stem[0].forward(x);
        ops::relu_inplace(&mut a1);
        let mut a2 = self.stem[1].forward(&a1);
        ops::relu_inplace(&mut a2);
        let mut a3 = self.stem[2].forward(&a2);
        ops::relu_inplace(&mut a3);
        let mut h = ops::avg_pool(&a3, 2);
        if let Some(t) = trace.as_deref_mut() {
            t.a1 = a1;
            t.a2 = a2;
            t.a3 = a3.clone();
        }
        let mut out = vec![a3];
        for stage in &self.stages[..levels - 1] {
            let mut st = trace.is_some().then(Vec::new);
            for block in stage {
                h = match st.as_mut() {
                    Some(st) => block.run(&h, Some(st)),
                    None => block.forward(&h),
                };
            }
            if let (Some(t), Some(st)) = (trace.as_deref_mut(), st) {
                t.blocks.push(st);
            }
            out.push(h.clone());
        }
        out
    }

    /// Gradient with respect to the (normalized) encoder input, given
    /// gradients for some pyramid levels. No weight gradient is formed.
    pub fn backward(&self, trace: &EncoderTrace<T>, grads: &[Option<&Tensor<T>>]) -> Tensor<T> {
        let deepest = grads.iter().rposition(Option::is_some);
        let Some(deepest) = deepest else {
            return Tensor::zeros(trace.x.shape());
        };
        let mut g: Option<Tensor<T>> = None;
        for level in (2..=deepest + 1).rev() {
            let mut d = g.take().unwrap_or_else(|| {
                Tensor::zeros(trace.blocks[level - 2].last().expect("non-empty stage").out.shape())
            });
            if let Some(extra) = grads[level - 1] {
                d.add_assign(extra);
            }
            for (block, bt) in self.stages[level - 2].iter().zip(&trace.blocks[level - 2]).rev() {
                d = block.backward(bt, d);
            }
            g = Some(d);
        }
        let mut d3 = match g {
            Some(g) => ops::avg_pool_backward(&g, 2, trace.a3.shape()),
            None => Tensor::zeros(trace.a3.shape()),
        };
        if let Some(extra) = grads[0] {
            d3.add_assign(extra);
        }
        ops::relu_backward(&trace.a3, &mut d3);
        let mut d2 = self.stem[2].backward(&trace.a2, &d3, None, true).expect("input gradient");
        ops::relu_backward(&trace.a2, &mut d2);
        let mut d1 = self.stem[1].backward(&trace.a1, &d2, None, true).expect("input gradient");
        ops::relu_backward(&trace.a1, &mut d1);
        self.stem[0].backward(&trace.x, &d1, None, true).expect("input gradient")
    }
}

/// Applies the encoder's per-channel input normalization.
pub fn normalize<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for n in 0..x.batch() {
        for c in 0..3 {
            let (m, s) = (T::of(PIXEL_MEAN[c]), T::of(1.0 / PIXEL_STD[c]));
            for v in y.plane_mut(n, c) {
                *v = (*v - m) * s;
            }
        }
    }
    y
}

pub fn normalize_backward<T: Element>(dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for n in 0..dy.batch() {
        for c in 0..3 {
            let s = T::of(1.0 / PIXEL_STD[c]);
            for v in dx.plane_mut(n, c) {
                *v *= s;
            }
        }
    }
    dx
}

/// Padding needed to bring `n` up to a multiple of [`ALIGN`].
#[inline]
pub fn align_pad(n: usize) -> usize {
    n.next_multiple_of(ALIGN) - n
}

/// Extracts the pyramid of one 3-channel image.
///
/// The image is taken to unit range, reflect-padded at the bottom/right to a
/// multiple of 32 and normalized; level `i` is cropped back to
/// `⌈H/2^i⌉ × ⌈W/2^i⌉`.
pub fn extract_features<T: Element>(enc: &FrozenEncoder<T>, img: &Image, max_level: usize) -> Result<FeaturePyramid<T>> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!(
            "feature extraction needs a 3-channel image, got {} channel(s); adapt single-channel input first",
            img.channels()
        )));
    }
    if img.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder input image".into()));
    }
    let unit = img.to_range(RangeTag::Unit);
    let x: Tensor<T> = Image::to_tensor(std::slice::from_ref(&unit))?;
    let (h, w) = (img.height(), img.width());
    let padded = ops::reflect_pad(&x, align_pad(h), align_pad(w));
    let feats = enc.forward(&normalize(&padded), max_level)?;
    let levels = feats
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let s = 1usize << (i + 1);
            ops::crop(&f, h.div_ceil(s), w.div_ceil(s))
        })
        .collect();
    Ok(FeaturePyramid {
        levels,
        base_channels: enc.base_channels(),
    })
}

// ---------------------------------------------------------------------------
// Random initialization

fn kaiming_normal(shape: [usize; 4], rng: &mut impl Rng) -> Vec<f32> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let std = (2.0 / fan_in).sqrt();
    (0..shape.iter().product::<usize>())
        .map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

/// Builds CLIP-layout weights layer by layer, setting each batch norm's
/// running statistics from the activations it sees on `calib`.
struct Calibrator<'a> {
    map: TensorMap,
    seed: u64,
    counter: u64,
    look_prefix: &'a str,
}

impl Calibrator<'_> {
    /// Creates conv `conv` + bn `bn`, calibrates it on `x` and returns the
    /// folded convolution applied to `x` (before any activation).
    #[allow(clippy::too_many_arguments)]
    fn layer(
        &mut self,
        conv: &str,
        bn: &str,
        x: &Tensor<f32>,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        gamma: f32,
    ) -> (Conv2d<f32>, Tensor<f32>) {
        let cin = x.channels();
        let mut rng = stream(derive_seed(self.seed, &[self.counter]), 0);
        self.counter += 1;
        let shape = [cout, cin, k, k];
        let weight = kaiming_normal(shape, &mut rng);
        let raw = Conv2d::new(Tensor::from_vec(shape, weight.clone()), None, stride, padding);
        let y = raw.forward(x);
        let count = (y.batch() * y.height() * y.width()) as f64;
        let mut mean = vec![0f32; cout];
        let mut var = vec![0f32; cout];
        for c in 0..cout {
            let vals = (0..y.batch()).flat_map(|n| y.plane(n, c).iter().map(|&v| v as f64));
            let m = vals.clone().sum::<f64>() / count;
            let v = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mean[c] = m as f32;
            var[c] = v as f32;
        }
        let p = self.look_prefix;
        let put = |map: &mut TensorMap, name: String, shape: Vec<usize>, data: Vec<f32>| {
            map.insert(format!("{p}{name}"), NamedTensor::new(shape, data));
        };
        put(&mut self.map, format!("{conv}.weight"), shape.to_vec(), weight);
        put(&mut self.map, format!("{bn}.weight"), vec![cout], vec![gamma; cout]);
        put(&mut self.map, format!("{bn}.bias"), vec![cout], vec![0.0; cout]);
        put(&mut self.map, format!("{bn}.running_mean"), vec![cout], mean);
        put(&mut self.map, format!("{bn}.running_var"), vec![cout], var);
        let look = Lookup::new(&self.map);
        let folded = look
            .conv_bn(conv, bn, cin, cout, k, stride, padding)
            .expect("freshly written tensors are consistent");
        let out = folded.forward(x);
        (folded, out)
    }
}

/// Seeded stand-in weights in the CLIP layout for architecture `arch`,
/// covering stages up to `max_level`.
///
/// Convolutions are Kaiming-normal and every batch norm's running statistics
/// are calibrated on procedural scenes so activations stay well scaled. Such
/// an encoder exercises every code path but carries none of the robustness of
/// contrastively pretrained weights.
pub fn random_weights(arch: Arch, max_level: usize, seed: u64) -> Result<TensorMap> {
    check_level(max_level)?;
    let imgs = scenes::scene_set(2, 64, 64, 3, derive_seed(seed, &[u64::MAX]));
    let x = normalize(&Image::to_tensor::<f32>(&imgs)?);
    let mut cal = Calibrator {
        map: TensorMap::new(),
        seed,
        counter: 0,
        look_prefix: "visual.",
    };
    let w = arch.width;
    let (_, mut h) = cal.layer("conv1", "bn1", &x, w / 2, 3, 2, 1, 1.0);
    ops::relu_inplace(&mut h);
    let (_, mut h2) = cal.layer("conv2", "bn2", &h, w / 2, 3, 1, 1, 1.0);
    ops::relu_inplace(&mut h2);
    let (_, mut h3) = cal.layer("conv3", "bn3", &h2, w, 3, 1, 1, 1.0);
    ops::relu_inplace(&mut h3);
    let mut h = ops::avg_pool(&h3, 2);
    let mut inplanes = w;
    for s in 0..max_level - 1 {
        let planes = w << s;
        for b in 0..arch.layers[s] {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let p = format!("layer{}.{b}", s + 1);
            let (_, mut a) = cal.layer(&format!("{p}.conv1"), &format!("{p}.bn1"), &h, planes, 1, 1, 0, 1.0);
            ops::relu_inplace(&mut a);
            let (_, mut a) = cal.layer(&format!("{p}.conv2"), &format!("{p}.bn2"), &a, planes, 3, 1, 1, 1.0);
            ops::relu_inplace(&mut a);
            if stride > 1 {
                a = ops::avg_pool(&a, stride);
            }
            // Damped residual branch keeps the variance of deep stacks bounded.
            let (_, mut out) = cal.layer(&format!("{p}.conv3"), &format!("{p}.bn3"), &a, planes * 4, 1, 1, 0, 0.5);
            if b == 0 && (stride > 1 || inplanes != planes * 4) {
                let xp = if stride > 1 { ops::avg_pool(&h, stride) } else { h.clone() };
                let (_, idn) = cal.layer(
                    &format!("{p}.downsample.0"),
                    &format!("{p}.downsample.1"),
                    &xp,
                    planes * 4,
                    1,
                    1,
                    0,
                    1.0,
                );
                out.add_assign(&idn);
            } else {
                out.add_assign(&h);
            }
            ops::relu_inplace(&mut out);
            h = out;
            inplanes = planes * 4;
        }
    }
    Ok(cal.map)
}

/// Writes a CLIP-layout weight map to `path`.
pub fn save_weights(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    store::write(path.as_ref(), map, None)
}

// ---------------------------------------------------------------------------
// Channel adapter

/// Learnable 1×1 convolution mapping a single-channel image to three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAdapter<T = f32> {
    /// `[3, 1, 1, 1]`
    pub conv: Conv2d<T>,
}

impl<T: Element> Default for ChannelAdapter<T> {
    fn default() -> Self {
        ChannelAdapter::replicate()
    }
}

impl<T: Element> ChannelAdapter<T> {
    /// All weights 1, bias 0: copies the input into every channel.
    pub fn replicate() -> Self {
        ChannelAdapter {
            conv: Conv2d::new(Tensor::full([3, 1, 1, 1], T::one()), Some(vec![T::zero(); 3]), 1, 0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels() != 1 {
            return Err(Error::Shape(format!(
                "channel adapter expects 1-channel input, got {}",
                x.channels()
            )));
        }
        Ok(self.conv.forward(x))
    }

    /// Accumulates weight and bias gradients for input `x`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut ConvGrad<T>) {
        self.conv.backward(x, dy, Some(grad), false);
    }
}

/// Maps a single-channel image to three channels with `adapter`.
pub fn adapt_channels(adapter: &ChannelAdapter<f32>, img: &Image) -> Result<Image> {
    if img.channels() != 1 {
        return Err(Error::Shape(format!(
            "adapt_channels expects a 1-channel image, got {} channels",
            img.channels()
        )));
    }
    let x: Tensor<f32> = Image::to_tensor(std::slice::from_ref(img))?;
    Image::from_tensor(&adapter.forward(&x)?, 0, img.range())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const TINY: Arch = Arch {
        width: 8,
        layers: [1, 1, 1, 1],
    };

    pub(crate) fn tiny_encoder(max_level: usize) -> FrozenEncoder {
        let map = random_weights(TINY, max_level, 3).unwrap();
        FrozenEncoder::from_tensors(&map, Variant::Custom, max_level).unwrap()
    }

    #[test]
    fn rn50_frozen_budget_through_stage_three() {
        let arch = Variant::Rn50.arch().unwrap();
        assert_eq!(arch.parameter_count(4), 8_562_528);
        assert!(arch.parameter_count(5) > 23_000_000);
    }

    #[test]
    fn variant_names_parse_case_insensitively() {
        assert_eq!("rn50x16".parse::<Variant>().unwrap(), Variant::Rn50x16);
        assert_eq!("RN50".parse::<Variant>().unwrap(), Variant::Rn50);
        let msg = "vit-b".parse::<Variant>().unwrap_err().to_string();
        assert!(msg.contains("expected one of"), "{msg}");
    }

    #[test]
    fn pyramid_shapes_follow_the_halving_law() {
        let enc = tiny_encoder(5);
        for (h, w) in [(64, 64), (96, 64), (70, 45)] {
            let img = scenes::scene(h, w, 3, 1);
            let pyr = extract_features(&enc, &img, 5).unwrap();
            for (i, &(fh, fw, c)) in pyr.shapes().iter().enumerate() {
                let s = 1 << (i + 1);
                assert_eq!((fh, fw), (h.div_ceil(s), w.div_ceil(s)), "level {}", i + 1);
                assert_eq!(c, TINY.level_channels(i + 1));
            }
            assert!(pyr.all_finite());
        }
    }

    #[test]
    fn extraction_is_deterministic_and_checks_input() {
        let enc = tiny_encoder(4);
        let img = scenes::scene(64, 64, 3, 2);
        assert_eq!(extract_features(&enc, &img, 4).unwrap(), extract_features(&enc, &img, 4).unwrap());
        assert!(extract_features(&enc, &img, 5).is_err());
        assert!(extract_features(&enc, &img.to_gray(), 4).is_err());
    }

    #[test]
    fn calibration_keeps_activations_alive() {
        let enc = tiny_encoder(5);
        let pyr = extract_features(&enc, &scenes::scene(64, 64, 3, 5), 5).unwrap();
        for lvl in &pyr.levels {
            let n = lvl.len() as f64;
            let rms = (lvl.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / n).sqrt();
            let live = lvl.data().iter().filter(|v| **v > 0.0).count() as f64 / n;
            assert!(rms > 0.05 && rms < 20.0, "rms {rms}");
            assert!(live > 0.05, "live fraction {live}");
        }
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = tiny_encoder(4);
        let b = tiny_encoder(4);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.compute_digest());
        let mut c = a.clone();
        c.stem[0].weight.data_mut()[0] += 1.0;
        assert_ne!(c.compute_digest(), a.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn loading_reports_missing_and_misshapen_tensors() {
        let mut map = random_weights(TINY, 4, 1).unwrap();
        map.remove("visual.layer2.0.bn2.running_var");
        match FrozenEncoder::from_tensors(&map, Variant::Custom, 4).unwrap_err() {
            Error::TensorMismatch { name, .. } => assert_eq!(name, "visual.layer2.0.bn2.running_var"),
            e => panic!("{e}"),
        }
        let map = random_weights(TINY, 4, 1).unwrap();
        // A width-8 file is not an RN50.
        match FrozenEncoder::from_tensors(&map, Variant::Rn50, 4).unwrap_err() {
            Error::TensorMismatch { name, .. } => assert_eq!(name, "visual.conv1.weight"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn prefix_is_optional() {
        let map = random_weights(TINY, 4, 1).unwrap();
        let bare: TensorMap = map
            .iter()
            .map(|(k, v)| (k.trim_start_matches("visual.").to_string(), v.clone()))
            .collect();
        let a = FrozenEncoder::from_tensors(&map, Variant::Custom, 4).unwrap();
        let b = FrozenEncoder::from_tensors(&bare, Variant::Custom, 4).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn adapter_replicates_and_rejects_rgb() {
        let img = scenes::scene(20, 24, 1, 4);
        let out = adapt_channels(&ChannelAdapter::replicate(), &img).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (20, 24, 3));
        for (px, &v) in out.data().chunks_exact(3).zip(img.data()) {
            assert_eq!(px, [v, v, v]);
        }
        assert!(adapt_channels(&ChannelAdapter::replicate(), &out).is_err());
    }

    #[test]
    fn encoder_input_gradient_matches_finite_differences() {
        let enc: FrozenEncoder<f64> = tiny_encoder(4).cast();
        let img = scenes::scene(32, 32, 3, 8);
        let x = normalize(&Image::to_tensor::<f64>(&[img]).unwrap());
        let (feats, trace) = enc.forward_traced(&x, 4).unwrap();
        // Loss = Σ_i <r_i, F_i> with fixed random r_i.
        let mut rng = stream(17, 0);
        let probes: Vec<Tensor<f64>> = feats
            .iter()
            .map(|f| {
                let data = (0..f.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                Tensor::from_vec(f.shape(), data)
            })
            .collect();
        let loss = |x: &Tensor<f64>| -> f64 {
            enc.forward(x, 4)
                .unwrap()
                .iter()
                .zip(&probes)
                .map(|(f, r)| f.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let grads: Vec<Option<&Tensor<f64>>> = probes.iter().map(Some).collect();
        let dx = enc.backward(&trace, &grads);
        let eps = 1e-6;
        for idx in [0, 100, 517, 1023, 2048, 3071] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            let an = dx.data()[idx];
            assert!(
                (fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())),
                "idx {idx}: fd {fd} vs analytic {an}"
            );
        }
    }
}
