//! The denoiser: frozen encoder pyramid, a learnable U-shaped decoder with an
//! optional skip from the noisy input, and progressive feature augmentation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, ChannelAdapter, EncoderTrace, FeaturePyramid, FrozenEncoder, Variant};
use crate::error::{Error, Result};
use crate::image::{Image, RangeTag};
use crate::ops::{self, Conv2d, ConvGrad, UpsampleMode};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Element, Tensor};

/// Architecture hyperparameters of a [`Denoiser`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub backbone_variant: Variant,
    /// Decode from the stage-4 features as well.
    pub use_f5: bool,
    /// Concatenate the noisy image before the last decoder block.
    pub inject_noisy_input: bool,
    /// Progressive feature augmentation strength γ.
    pub pfa_gamma: f64,
    /// Output channels per decoder block, deepest first; one entry per
    /// pyramid level plus one for the full-resolution block.
    pub decoder_widths: Vec<usize>,
    pub upsample_mode: UpsampleMode,
    /// 1 enables the learnable channel adapter in front of the encoder.
    pub channels_in: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            backbone_variant: Variant::Rn50,
            use_f5: false,
            inject_noisy_input: true,
            pfa_gamma: 0.025,
            decoder_widths: DenoiserConfig::default_widths(false),
            upsample_mode: UpsampleMode::Bilinear,
            channels_in: 3,
        }
    }
}

impl DenoiserConfig {
    pub fn default_widths(use_f5: bool) -> Vec<usize> {
        if use_f5 {
            vec![1024, 512, 256, 128, 64, 64]
        } else {
            vec![512, 256, 128, 64, 64]
        }
    }

    /// Deepest pyramid level the decoder consumes.
    pub fn levels(&self) -> usize {
        if self.use_f5 {
            5
        } else {
            4
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pfa_gamma.is_finite() && self.pfa_gamma >= 0.0) {
            return Err(Error::param("pfa_gamma", format!("must be >= 0, got {}", self.pfa_gamma)));
        }
        if self.decoder_widths.len() != self.levels() + 1 {
            return Err(Error::param(
                "decoder_widths",
                format!(
                    "needs {} entries (one per pyramid level plus the full-resolution block), got {}",
                    self.levels() + 1,
                    self.decoder_widths.len()
                ),
            ));
        }
        if self.decoder_widths.contains(&0) {
            return Err(Error::param("decoder_widths", "widths must be positive"));
        }
        if !matches!(self.channels_in, 1 | 3) {
            return Err(Error::param("channels_in", format!("must be 1 or 3, got {}", self.channels_in)));
        }
        Ok(())
    }
}

/// Multiplicative Gaussian factors `α ~ N(1, (γ·level)²)` of the given shape.
pub fn pfa_factors<T: Element>(shape: [usize; 4], level: usize, gamma: f64, seed: u64) -> Tensor<T> {
    let std = gamma * level as f64;
    let key = derive_seed(seed, &[level as u64]);
    let plane = shape[2] * shape[3];
    let mut data = Vec::with_capacity(shape.iter().product());
    for block in 0..shape[0] * shape[1] {
        let mut rng = stream(key, block as u64);
        data.extend((0..plane).map(|_| T::of(1.0 + std * rng.sample::<f64, _>(StandardNormal))));
    }
    Tensor::from_vec(shape, data)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma >= 0.0 {
        Ok(())
    } else {
        Err(Error::param("pfa_gamma", format!("must be >= 0, got {gamma}")))
    }
}

/// Scales levels 1–4 element-wise by fresh `N(1, (γ·i)²)` factors; level 5 is
/// left untouched and `γ = 0` returns an exact copy.
pub fn apply_pfa<T: Element>(pyr: &FeaturePyramid<T>, gamma: f64, seed: u64) -> Result<FeaturePyramid<T>> {
    check_gamma(gamma)?;
    let mut out = pyr.clone();
    if gamma == 0.0 {
        return Ok(out);
    }
    for (i, lvl) in out.levels.iter_mut().enumerate().take(4) {
        let alpha = pfa_factors::<T>(lvl.shape(), i + 1, gamma, seed);
        for (v, a) in lvl.data_mut().iter_mut().zip(alpha.data()) {
            *v *= *a;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
}

struct StageTrace<T> {
    input: Tensor<T>,
    h1: Tensor<T>,
    h2: Tensor<T>,
    /// Channel split of `input`: `[upsampled previous, skip]`.
    split: Vec<usize>,
}

/// Activations kept by a training forward pass.
pub struct DecoderTrace<T> {
    stages: Vec<StageTrace<T>>,
}

fn kaiming_uniform<T: Element>(cout: usize, cin: usize, k: usize, rng: &mut impl Rng) -> Conv2d<T> {
    let bound = (6.0 / (cin * k * k) as f64).sqrt();
    let w = (0..cout * cin * k * k)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Conv2d::new(Tensor::from_vec([cout, cin, k, k], w), Some(vec![T::zero(); cout]), 1, k / 2)
}

/// Learnable decoder. Block 0 consumes the deepest level; each following
/// block consumes the upsampled previous output concatenated with the next
/// shallower level, the last one with the noisy input (when injected).
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T = f32> {
    blocks: Vec<ConvBlock<T>>,
    head: Conv2d<T>,
    levels: usize,
    inject: bool,
    upsample: UpsampleMode,
}

impl<T: Element> Decoder<T> {
    /// `level_channels[i]` is the channel count of pyramid level `i + 1`.
    pub fn new(cfg: &DenoiserConfig, level_channels: &[usize], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.levels();
        if level_channels.len() < levels {
            return Err(Error::Shape(format!(
                "decoder needs {levels} pyramid levels, encoder provides {}",
                level_channels.len()
            )));
        }
        let mut rng = stream(derive_seed(seed, &[0xdec0]), 0);
        let w = &cfg.decoder_widths;
        let mut blocks = Vec::with_capacity(levels + 1);
        for k in 0..=levels {
            let cin = match k {
                0 => level_channels[levels - 1],
                _ if k < levels => w[k - 1] + level_channels[levels - 1 - k],
                _ => w[k - 1] + if cfg.inject_noisy_input { cfg.channels_in } else { 0 },
            };
            blocks.push(ConvBlock {
                conv1: kaiming_uniform(w[k], cin, 3, &mut rng),
                conv2: kaiming_uniform(w[k], w[k], 3, &mut rng),
            });
        }
        let head = kaiming_uniform(cfg.channels_in, w[levels], 3, &mut rng);
        Ok(Decoder {
            blocks,
            head,
            levels,
            inject: cfg.inject_noisy_input,
            upsample: cfg.upsample_mode,
        })
    }

    /// Learnable convolutions with their parameter-name stems, in canonical order.
    pub fn named_convs(&self) -> Vec<(String, &Conv2d<T>)> {
        let mut out = Vec::new();
        for (k, b) in self.blocks.iter().enumerate() {
            let lvl = self.levels - k;
            out.push((format!("decoder.level{lvl}.conv1"), &b.conv1));
            out.push((format!("decoder.level{lvl}.conv2"), &b.conv2));
        }
        out.push(("decoder.head".to_string(), &self.head));
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut out: Vec<&mut Conv2d<T>> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv1);
            out.push(&mut b.conv2);
        }
        out.push(&mut self.head);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_convs().iter().map(|(_, c)| c.parameter_count()).sum()
    }

    /// True when the decoder has an input path for the raw noisy image.
    pub fn reads_noisy_input(&self) -> bool {
        self.inject
    }

    /// Decodes `feats` (levels `1..=levels`, aligned sizes). `noisy` must be
    /// given exactly when the decoder injects the noisy input.
    pub fn decode(
        &self,
        feats: &[Tensor<T>],
        noisy: Option<&Tensor<T>>,
        keep_trace: bool,
    ) -> Result<(Tensor<T>, Option<DecoderTrace<T>>)> {
        if feats.len() < self.levels {
            return Err(Error::Shape(format!("decoder needs {} levels, got {}", self.levels, feats.len())));
        }
        if noisy.is_some() != self.inject {
            return Err(Error::Shape(if self.inject {
                "decoder injects the noisy input but none was given".into()
            } else {
                "decoder was built without noisy-input injection".into()
            }));
        }
        let mut stages = Vec::new();
        let mut prev: Option<Tensor<T>> = None;
        for (k, block) in self.blocks.iter().enumerate() {
            let skip = if k < self.levels {
                Some(&feats[self.levels - 1 - k])
            } else {
                noisy
            };
            let (input, split) = match (prev.take(), skip) {
                (None, Some(s)) => (s.clone(), vec![s.channels()]),
                (Some(p), s) => {
                    let up = ops::upsample2x(&p, self.upsample);
                    match s {
                        Some(s) => {
                            if s.shape()[2..] != up.shape()[2..] {
                                return Err(Error::Shape(format!(
                                    "decoder skip {:?} does not match upsampled {:?}",
                                    s.shape(),
                                    up.shape()
                                )));
                            }
                            let split = vec![up.channels(), s.channels()];
                            (ops::concat_channels(&[&up, s]), split)
                        }
                        None => {
                            let split = vec![up.channels()];
                            (up, split)
                        }
                    }
                }
                (None, None) => unreachable!("block 0 always has a skip"),
            };
            let mut h1 = block.conv1.forward(&input);
            ops::relu_inplace(&mut h1);
            let mut h2 = block.conv2.forward(&h1);
            ops::relu_inplace(&mut h2);
            prev = Some(h2.clone());
            if keep_trace {
                stages.push(StageTrace { input, h1, h2, split });
            }
        }
        let last = prev.expect("at least one block");
        let out = self.head.forward(&last);
        Ok((out, keep_trace.then_some(DecoderTrace { stages })))
    }

    /// Accumulates parameter gradients into `grads` (ordered as
    /// [`Decoder::named_convs`]) and returns gradients for the pyramid levels
    /// when `feature_grads` is set.
    pub fn backward(
        &self,
        trace: &DecoderTrace<T>,
        dout: &Tensor<T>,
        grads: &mut [ConvGrad<T>],
        feature_grads: bool,
    ) -> Vec<Option<Tensor<T>>> {
        let nb = self.blocks.len();
        let last = &trace.stages[nb - 1].h2;
        let mut d = self
            .head
            .backward(last, dout, Some(&mut grads[2 * nb]), true)
            .expect("input gradient");
        let mut fgrads: Vec<Option<Tensor<T>>> = (0..self.levels).map(|_| None).collect();
        for k in (0..nb).rev() {
            let (block, st) = (&self.blocks[k], &trace.stages[k]);
            let (g1, g2) = grads[2 * k..2 * k + 2].split_at_mut(1);
            ops::relu_backward(&st.h2, &mut d);
            let mut dh1 = block
                .conv2
                .backward(&st.h1, &d, Some(&mut g2[0]), true)
                .expect("input gradient");
            ops::relu_backward(&st.h1, &mut dh1);
            let need_input = k > 0 || feature_grads;
            let Some(dinput) = block.conv1.backward(&st.input, &dh1, Some(&mut g1[0]), need_input) else {
                break;
            };
            if k == 0 {
                fgrads[self.levels - 1] = Some(dinput);
                break;
            }
            let mut parts = ops::split_channels(&dinput, &st.split).into_iter();
            let dup = parts.next().expect("upsampled part");
            if k < self.levels && feature_grads {
                fgrads[self.levels - 1 - k] = parts.next();
            }
            d = ops::upsample2x_backward(&dup, self.upsample);
        }
        fgrads
    }

    fn cast<U: Element>(&self) -> Decoder<U> {
        let c = |c: &Conv2d<T>| {
            Conv2d::new(
                c.weight.cast(),
                c.bias.as_ref().map(|b| b.iter().map(|v| U::of(v.f64())).collect()),
                c.stride,
                c.padding,
            )
        };
        Decoder {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    conv1: c(&b.conv1),
                    conv2: c(&b.conv2),
                })
                .collect(),
            head: c(&self.head),
            levels: self.levels,
            inject: self.inject,
            upsample: self.upsample,
        }
    }
}

/// Whether stochastic training-time perturbations run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Gradients of every learnable tensor, ordered as [`Denoiser::named_parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    pub convs: Vec<ConvGrad<T>>,
}

impl<T: Element> Gradients<T> {
    /// Flat views in canonical parameter order (weight then bias per conv).
    pub fn slices(&self) -> Vec<&[T]> {
        self.convs
            .iter()
            .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
            .collect()
    }
}

/// Activations of one training forward pass.
pub struct ForwardTrace<T> {
    padded: Tensor<T>,
    encoder: Option<EncoderTrace<T>>,
    pfa: Vec<Option<Tensor<T>>>,
    decoder: DecoderTrace<T>,
}

/// Frozen encoder + learnable decoder (+ adapter for single-channel input).
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T = f32> {
    encoder: FrozenEncoder<T>,
    decoder: Decoder<T>,
    adapter: Option<ChannelAdapter<T>>,
    config: DenoiserConfig,
    mode: Mode,
}

impl<T: Element> Denoiser<T> {
    /// Assembles a denoiser with a freshly initialized decoder.
    pub fn new(encoder: FrozenEncoder<T>, config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if encoder.variant() != config.backbone_variant {
            return Err(Error::param(
                "backbone_variant",
                format!(
                    "config names {} but the encoder is {}",
                    config.backbone_variant,
                    encoder.variant()
                ),
            ));
        }
        if encoder.max_level() < config.levels() {
            return Err(Error::param(
                "use_f5",
                format!(
                    "decoder needs pyramid level {}, encoder was loaded up to level {}",
                    config.levels(),
                    encoder.max_level()
                ),
            ));
        }
        let arch = encoder.arch();
        let channels: Vec<usize> = (1..=config.levels()).map(|i| arch.level_channels(i)).collect();
        let decoder = Decoder::new(&config, &channels, seed)?;
        let adapter = (config.channels_in == 1).then(ChannelAdapter::replicate);
        Ok(Denoiser {
            encoder,
            decoder,
            adapter,
            config,
            mode: Mode::Eval,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn encoder(&self) -> &FrozenEncoder<T> {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder<T> {
        &self.decoder
    }

    pub fn adapter(&self) -> Option<&ChannelAdapter<T>> {
        self.adapter.as_ref()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// `(frozen, learnable)` parameter counts.
    pub fn count_parameters(&self) -> (usize, usize) {
        let adapter = self.adapter.as_ref().map_or(0, |a| a.conv.parameter_count());
        (
            self.encoder.parameter_count(),
            self.decoder.parameter_count() + adapter,
        )
    }

    /// Learnable convolutions with name stems (`<stem>.weight`, `<stem>.bias`).
    pub fn named_parameters(&self) -> Vec<(String, &Conv2d<T>)> {
        let mut out = self.decoder.named_convs();
        if let Some(a) = &self.adapter {
            out.push(("adapter".to_string(), &a.conv));
        }
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut out = self.decoder.convs_mut();
        if let Some(a) = &mut self.adapter {
            out.push(&mut a.conv);
        }
        out
    }

    /// Mutable flat views of every learnable tensor (weight then bias per conv),
    /// in the order of [`Gradients::slices`].
    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.convs_mut()
            .into_iter()
            .flat_map(|c| {
                let bias = c.bias.as_mut().expect("learnable convs carry a bias");
                [c.weight.data_mut(), bias.as_mut_slice()]
            })
            .collect()
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            convs: self
                .named_parameters()
                .into_iter()
                .map(|(_, c)| ConvGrad::zeros_like(c))
                .collect(),
        }
    }

    /// Same model in another precision.
    pub fn cast<U: Element>(&self) -> Denoiser<U> {
        Denoiser {
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            adapter: self.adapter.as_ref().map(|a| ChannelAdapter {
                conv: Conv2d::new(
                    a.conv.weight.cast(),
                    a.conv.bias.as_ref().map(|b| b.iter().map(|v| U::of(v.f64())).collect()),
                    1,
                    0,
                ),
            }),
            config: self.config.clone(),
            mode: self.mode,
        }
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.config.channels_in {
            let hint = if x.channels() == 1 {
                "; single-channel input needs a model trained with channels_in = 1 (1×1 channel adapter)"
            } else {
                ""
            };
            return Err(Error::Shape(format!(
                "model expects {}-channel input, got {}{hint}",
                self.config.channels_in,
                x.channels()
            )));
        }
        if x.height() == 0 || x.width() == 0 {
            return Err(Error::Shape("empty input".into()));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor<T>, seed: u64, keep_trace: bool) -> Result<(Tensor<T>, Option<ForwardTrace<T>>)> {
        self.check_batch(x)?;
        let (h, w) = (x.height(), x.width());
        let padded = ops::reflect_pad(x, backbone::align_pad(h), backbone::align_pad(w));
        let rgb = match &self.adapter {
            Some(a) => a.forward(&padded)?,
            None => padded.clone(),
        };
        let enc_in = backbone::normalize(&rgb);
        let levels = self.config.levels();
        let trace_encoder = keep_trace && self.adapter.is_some();
        let (mut feats, enc_trace) = if trace_encoder {
            let (f, t) = self.encoder.forward_traced(&enc_in, levels)?;
            (f, Some(t))
        } else {
            (self.encoder.forward(&enc_in, levels)?, None)
        };
        let mut pfa = vec![None; levels];
        let gamma = self.config.pfa_gamma;
        if self.mode == Mode::Train && gamma > 0.0 {
            for (i, f) in feats.iter_mut().enumerate().take(4) {
                let alpha = pfa_factors::<T>(f.shape(), i + 1, gamma, seed);
                for (v, a) in f.data_mut().iter_mut().zip(alpha.data()) {
                    *v *= *a;
                }
                if trace_encoder {
                    pfa[i] = Some(alpha);
                }
            }
        }
        let skip = self.config.inject_noisy_input.then_some(&padded);
        let (out, dec_trace) = self.decoder.decode(&feats, skip, keep_trace)?;
        let out = ops::crop(&out, h, w);
        let trace = dec_trace.map(|decoder| ForwardTrace {
            padded,
            encoder: enc_trace,
            pfa,
            decoder,
        });
        Ok((out, trace))
    }

    /// Denoises a unit-range NCHW batch. In train mode feature augmentation is
    /// drawn from `seed`; in eval mode `seed` is unused.
    pub fn forward_batch(&self, x: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
        Ok(self.run(x, seed, false)?.0)
    }

    /// [`Denoiser::forward_batch`] keeping what [`Denoiser::backward`] needs.
    pub fn forward_traced(&self, x: &Tensor<T>, seed: u64) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let (out, trace) = self.run(x, seed, true)?;
        Ok((out, trace.expect("trace requested")))
    }

    /// Gradients of the learnable tensors given `dout = ∂L/∂output`.
    /// The encoder only propagates activation gradients; it owns no gradient
    /// buffers.
    pub fn backward(&self, trace: &ForwardTrace<T>, dout: &Tensor<T>) -> Gradients<T> {
        let mut grads = self.zero_gradients();
        let [_, _, hp, wp] = trace.padded.shape();
        let dfull = ops::crop_backward(dout, hp, wp);
        let ndec = self.decoder.named_convs().len();
        let adapter_grad = self.adapter.is_some();
        let mut fgrads = self
            .decoder
            .backward(&trace.decoder, &dfull, &mut grads.convs[..ndec], adapter_grad);
        if let (Some(adapter), Some(enc_trace)) = (&self.adapter, &trace.encoder) {
            for (g, a) in fgrads.iter_mut().zip(&trace.pfa) {
                if let (Some(g), Some(a)) = (g.as_mut(), a) {
                    for (v, f) in g.data_mut().iter_mut().zip(a.data()) {
                        *v *= *f;
                    }
                }
            }
            let refs: Vec<Option<&Tensor<T>>> = fgrads.iter().map(Option::as_ref).collect();
            let dnorm = self.encoder.backward(enc_trace, &refs);
            let drgb = backbone::normalize_backward(&dnorm);
            adapter.backward(&trace.padded, &drgb, &mut grads.convs[ndec]);
        }
        grads
    }

    /// Denoises one image; output has the input's shape and range and is
    /// clipped to it.
    pub fn forward(&self, noisy: &Image, seed: u64) -> Result<Image> {
        if noisy.channels() != self.config.channels_in {
            let x: Tensor<T> = Tensor::zeros([1, noisy.channels(), 1, 1]);
            self.check_batch(&x)?;
        }
        let unit = noisy.to_range(RangeTag::Unit);
        let x: Tensor<T> = Image::to_tensor(std::slice::from_ref(&unit))?;
        let y = self.forward_batch(&x, seed)?;
        if !y.all_finite() {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok(Image::from_tensor(&y, 0, RangeTag::Unit)?.clipped().to_range(noisy.range()))
    }

    /// Replaces the learnable tensors (used when restoring checkpoints).
    pub(crate) fn learnable_mut(&mut self) -> Vec<(String, &mut Conv2d<T>)> {
        let names: Vec<String> = self.named_parameters().into_iter().map(|(n, _)| n).collect();
        names.into_iter().zip(self.convs_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::tests::tiny_encoder;
    use crate::scenes;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            backbone_variant: Variant::Custom,
            decoder_widths: vec![8, 8, 8, 8, 8],
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn default_decoder_budget() {
        let cfg = DenoiserConfig::default();
        let channels = [64, 256, 512, 1024];
        let dec = Decoder::<f32>::new(&cfg, &channels, 0).unwrap();
        assert_eq!(dec.parameter_count(), 10_990_979);
    }

    #[test]
    fn output_shape_matches_input_for_unaligned_sizes() {
        let model = Denoiser::new(tiny_encoder(4), tiny_config(), 1).unwrap();
        for (h, w) in [(32, 32), (40, 57)] {
            let img = scenes::scene(h, w, 3, 3);
            let out = model.forward(&img, 0).unwrap();
            assert_eq!((out.height(), out.width(), out.channels()), (h, w, 3));
        }
    }

    #[test]
    fn eval_is_deterministic_and_train_mode_is_stochastic() {
        let mut model = Denoiser::new(tiny_encoder(4), tiny_config(), 1).unwrap();
        let img = scenes::scene(32, 32, 3, 3);
        assert_eq!(model.forward(&img, 1).unwrap(), model.forward(&img, 2).unwrap());
        model.set_mode(Mode::Train);
        assert_ne!(model.forward(&img, 1).unwrap(), model.forward(&img, 2).unwrap());
        assert_eq!(model.forward(&img, 1).unwrap(), model.forward(&img, 1).unwrap());
    }

    #[test]
    fn pfa_zero_gamma_is_exact_identity_and_level_five_untouched() {
        let enc = tiny_encoder(5);
        let pyr = backbone::extract_features(&enc, &scenes::scene(64, 64, 3, 1), 5).unwrap();
        assert_eq!(apply_pfa(&pyr, 0.0, 9).unwrap(), pyr);
        let p = apply_pfa(&pyr, 0.1, 9).unwrap();
        assert_eq!(p.level(5), pyr.level(5));
        assert_ne!(p.level(1), pyr.level(1));
        assert_eq!(p.shapes(), pyr.shapes());
        assert!(apply_pfa(&pyr, -0.1, 9).is_err());
    }

    #[test]
    fn rejects_wrong_channel_count_with_adapter_hint() {
        let model = Denoiser::new(tiny_encoder(4), tiny_config(), 1).unwrap();
        let msg = model.forward(&scenes::scene(32, 32, 1, 3), 0).unwrap_err().to_string();
        assert!(msg.contains("adapter"), "{msg}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.pfa_gamma = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.use_f5 = true;
        assert!(cfg.validate().is_err());
        cfg.decoder_widths.push(8);
        assert!(cfg.validate().is_ok());
        assert!(Denoiser::new(tiny_encoder(4), cfg, 0).is_err());
    }

    #[test]
    fn without_injection_the_raw_input_has_no_decoder_path() {
        let cfg = DenoiserConfig {
            inject_noisy_input: false,
            ..tiny_config()
        };
        let model = Denoiser::new(tiny_encoder(4), cfg, 1).unwrap();
        assert!(!model.decoder().reads_noisy_input());
        let img = scenes::scene(32, 32, 3, 3);
        let x: Tensor = Image::to_tensor(&[img]).unwrap();
        let feats = model.encoder().forward(&backbone::normalize(&x), 4).unwrap();
        assert!(model.decoder().decode(&feats, Some(&x), false).is_err());
        let (a, _) = model.decoder().decode(&feats, None, false).unwrap();
        assert_eq!(a, model.forward_batch(&x, 0).unwrap());
    }
}
