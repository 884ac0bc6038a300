//! Seeded synthesis of the corruption families used for training and
//! out-of-distribution evaluation.
//!
//! Randomness is drawn per image row (or per padded row and channel for the
//! spatially correlated field) from [`crate::rng::stream`], so every output is
//! a pure function of `(image, parameters, seed)`.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, RangeTag};
use crate::rng::stream;

/// Low-pass kernel that correlates the spatial Gaussian field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialKernel {
    /// Odd side length.
    pub size: usize,
    /// Gaussian std in pixels; `0` selects the delta kernel.
    pub std: f64,
}

impl Default for SpatialKernel {
    fn default() -> Self {
        SpatialKernel { size: 5, std: 1.0 }
    }
}

impl SpatialKernel {
    pub const DELTA: SpatialKernel = SpatialKernel { size: 1, std: 0.0 };

    /// Normalized (unit-sum) taps, row-major `size × size`.
    pub fn taps(&self) -> Vec<f64> {
        if self.size <= 1 || self.std == 0.0 {
            return vec![1.0];
        }
        let r = (self.size / 2) as f64;
        let mut taps = Vec::with_capacity(self.size * self.size);
        for i in 0..self.size {
            for j in 0..self.size {
                let (dy, dx) = (i as f64 - r, j as f64 - r);
                taps.push((-(dy * dy + dx * dx) / (2.0 * self.std * self.std)).exp());
            }
        }
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        taps
    }

    fn side(&self) -> usize {
        if self.size <= 1 || self.std == 0.0 {
            1
        } else {
            self.size
        }
    }
}

/// One corruption family with its level parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    Gaussian { sigma: f64 },
    SpatialGaussian { sigma: f64, kernel: SpatialKernel },
    Poisson { alpha: f64 },
    Speckle { var: f64 },
    SaltPepper { d: f64 },
    PoissonGaussian { sigma_s: f64, sigma_c: f64 },
}

pub const KIND_NAMES: [&str; 6] = [
    "gaussian",
    "spatial_gaussian",
    "poisson",
    "speckle",
    "salt_pepper",
    "poisson_gaussian",
];

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian { .. } => "gaussian",
            NoiseKind::SpatialGaussian { .. } => "spatial_gaussian",
            NoiseKind::Poisson { .. } => "poisson",
            NoiseKind::Speckle { .. } => "speckle",
            NoiseKind::SaltPepper { .. } => "salt_pepper",
            NoiseKind::PoissonGaussian { .. } => "poisson_gaussian",
        }
    }

    /// Range the level parameters are expressed in. Gaussian families use
    /// `[0, 255]`, the others `[0, 1]`.
    pub fn range(&self) -> RangeTag {
        match self {
            NoiseKind::Gaussian { .. } | NoiseKind::SpatialGaussian { .. } => RangeTag::Byte,
            _ => RangeTag::Unit,
        }
    }

    /// The headline level (σ, α, σ², d or σ_s).
    pub fn level(&self) -> f64 {
        match *self {
            NoiseKind::Gaussian { sigma } | NoiseKind::SpatialGaussian { sigma, .. } => sigma,
            NoiseKind::Poisson { alpha } => alpha,
            NoiseKind::Speckle { var } => var,
            NoiseKind::SaltPepper { d } => d,
            NoiseKind::PoissonGaussian { sigma_s, .. } => sigma_s,
        }
    }

    fn validate(&self) -> Result<()> {
        let nonneg = |name, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::param(name, format!("must be a finite value >= 0, got {v}")))
            }
        };
        match *self {
            NoiseKind::Gaussian { sigma } => nonneg("sigma", sigma),
            NoiseKind::SpatialGaussian { sigma, kernel } => {
                nonneg("sigma", sigma)?;
                nonneg("kernel_std", kernel.std)?;
                if kernel.size == 0 || kernel.size % 2 == 0 {
                    return Err(Error::param("kernel_size", "must be odd and positive"));
                }
                Ok(())
            }
            NoiseKind::Poisson { alpha } => {
                if alpha.is_finite() && alpha > 0.0 {
                    Ok(())
                } else {
                    Err(Error::param("alpha", format!("must be > 0, got {alpha}")))
                }
            }
            NoiseKind::Speckle { var } => nonneg("var", var),
            NoiseKind::SaltPepper { d } => {
                if (0.0..=1.0).contains(&d) {
                    Ok(())
                } else {
                    Err(Error::param("d", format!("must lie in [0, 1], got {d}")))
                }
            }
            NoiseKind::PoissonGaussian { sigma_s, sigma_c } => {
                nonneg("sigma_s", sigma_s)?;
                nonneg("sigma_c", sigma_c)
            }
        }
    }
}

/// A validated corruption: family, levels and seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseRecord", into = "NoiseRecord")]
pub struct NoiseSpec {
    kind: NoiseKind,
    seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        Ok(NoiseSpec { kind, seed })
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        NoiseSpec::new(NoiseKind::Gaussian { sigma }, 0)
    }

    #[inline]
    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    #[inline]
    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn range(&self) -> RangeTag {
        self.kind.range()
    }

    pub fn with_seed(self, seed: u64) -> Self {
        NoiseSpec { seed, ..self }
    }

    /// True when applying the spec leaves every image unchanged.
    pub fn is_identity(&self) -> bool {
        match self.kind {
            NoiseKind::Gaussian { sigma } | NoiseKind::SpatialGaussian { sigma, .. } => sigma == 0.0,
            NoiseKind::Poisson { .. } => false,
            NoiseKind::Speckle { var } => var == 0.0,
            NoiseKind::SaltPepper { d } => d == 0.0,
            NoiseKind::PoissonGaussian { sigma_s, sigma_c } => sigma_s == 0.0 && sigma_c == 0.0,
        }
    }

    /// Corrupts `img` with this spec's seed, converting levels to the image's
    /// range convention. Output is clipped to that range.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        Ok(self.apply_unclipped(img)?.clipped())
    }

    /// [`NoiseSpec::apply`] without the final clip.
    pub fn apply_unclipped(&self, img: &Image) -> Result<Image> {
        let seed = self.seed;
        match self.kind {
            NoiseKind::Gaussian { sigma } => {
                let s = sigma * RangeTag::Byte.scale_to(img.range());
                gaussian_raw(img, s, seed)
            }
            NoiseKind::SpatialGaussian { sigma, kernel } => {
                let s = sigma * RangeTag::Byte.scale_to(img.range());
                spatial_gaussian_raw(img, s, kernel, seed)
            }
            _ => {
                let unit = img.to_range(RangeTag::Unit);
                let out = match self.kind {
                    NoiseKind::Poisson { alpha } => poisson_raw(&unit, alpha, seed)?,
                    NoiseKind::Speckle { var } => speckle_raw(&unit, var, seed)?,
                    NoiseKind::SaltPepper { d } => salt_pepper_raw(&unit, d, seed)?,
                    NoiseKind::PoissonGaussian { sigma_s, sigma_c } => {
                        poisson_gaussian_raw(&unit, sigma_s, sigma_c, seed)?
                    }
                    _ => unreachable!(),
                };
                Ok(out.to_range(img.range()))
            }
        }
    }

    /// Short human-readable label, e.g. `gaussian(sigma=25)`.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NoiseKind::Gaussian { sigma } => write!(f, "gaussian(sigma={sigma})"),
            NoiseKind::SpatialGaussian { sigma, kernel } => {
                if kernel == SpatialKernel::default() {
                    write!(f, "spatial_gaussian(sigma={sigma})")
                } else {
                    write!(f, "spatial_gaussian(sigma={sigma},k={},std={})", kernel.size, kernel.std)
                }
            }
            NoiseKind::Poisson { alpha } => write!(f, "poisson(alpha={alpha})"),
            NoiseKind::Speckle { var } => write!(f, "speckle(var={var})"),
            NoiseKind::SaltPepper { d } => write!(f, "salt_pepper(d={d})"),
            NoiseKind::PoissonGaussian { sigma_s, sigma_c } => {
                write!(f, "poisson_gaussian(sigma_s={sigma_s},sigma_c={sigma_c})")
            }
        }
    }
}

/// Flat key-value form of a [`NoiseSpec`] used in config files and manifests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRecord {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<RangeTag>,
    #[serde(default)]
    pub seed: u64,
}

impl TryFrom<NoiseRecord> for NoiseSpec {
    type Error = Error;

    fn try_from(r: NoiseRecord) -> Result<Self> {
        fn need(v: Option<f64>, name: &'static str, kind: &str) -> Result<f64> {
            v.ok_or_else(|| Error::param(name, format!("required for noise kind `{kind}`")))
        }
        let allowed: &[&str] = match r.kind.as_str() {
            "gaussian" => &["sigma"],
            "spatial_gaussian" => &["sigma", "kernel_size", "kernel_std"],
            "poisson" => &["alpha"],
            "speckle" => &["var"],
            "salt_pepper" => &["d"],
            "poisson_gaussian" => &["sigma_s", "sigma_c"],
            other => {
                return Err(Error::param(
                    "kind",
                    format!(
                        "unknown noise kind `{other}` (expected one of: {})",
                        KIND_NAMES.join(", ")
                    ),
                ))
            }
        };
        let present = [
            ("sigma", r.sigma.is_some()),
            ("kernel_size", r.kernel_size.is_some()),
            ("kernel_std", r.kernel_std.is_some()),
            ("alpha", r.alpha.is_some()),
            ("var", r.var.is_some()),
            ("d", r.d.is_some()),
            ("sigma_s", r.sigma_s.is_some()),
            ("sigma_c", r.sigma_c.is_some()),
        ];
        for (name, set) in present {
            if set && !allowed.contains(&name) {
                return Err(Error::param(
                    "kind",
                    format!("parameter `{name}` does not apply to noise kind `{}`", r.kind),
                ));
            }
        }
        let k = r.kind.as_str();
        let kind = match k {
            "gaussian" => NoiseKind::Gaussian {
                sigma: need(r.sigma, "sigma", k)?,
            },
            "spatial_gaussian" => NoiseKind::SpatialGaussian {
                sigma: need(r.sigma, "sigma", k)?,
                kernel: SpatialKernel {
                    size: r.kernel_size.unwrap_or(5),
                    std: r.kernel_std.unwrap_or(1.0),
                },
            },
            "poisson" => NoiseKind::Poisson {
                alpha: need(r.alpha, "alpha", k)?,
            },
            "speckle" => NoiseKind::Speckle {
                var: need(r.var, "var", k)?,
            },
            "salt_pepper" => NoiseKind::SaltPepper { d: need(r.d, "d", k)? },
            _ => NoiseKind::PoissonGaussian {
                sigma_s: need(r.sigma_s, "sigma_s", k)?,
                sigma_c: need(r.sigma_c, "sigma_c", k)?,
            },
        };
        if let Some(range) = r.range {
            if range != kind.range() {
                return Err(Error::param(
                    "range",
                    format!(
                        "noise kind `{k}` is expressed in the {} range",
                        kind.range().as_str()
                    ),
                ));
            }
        }
        NoiseSpec::new(kind, r.seed)
    }
}

impl From<NoiseSpec> for NoiseRecord {
    fn from(spec: NoiseSpec) -> Self {
        let mut r = NoiseRecord {
            kind: spec.kind.name().to_string(),
            range: Some(spec.range()),
            seed: spec.seed,
            ..NoiseRecord::default()
        };
        match spec.kind {
            NoiseKind::Gaussian { sigma } => r.sigma = Some(sigma),
            NoiseKind::SpatialGaussian { sigma, kernel } => {
                r.sigma = Some(sigma);
                r.kernel_size = Some(kernel.size);
                r.kernel_std = Some(kernel.std);
            }
            NoiseKind::Poisson { alpha } => r.alpha = Some(alpha),
            NoiseKind::Speckle { var } => r.var = Some(var),
            NoiseKind::SaltPepper { d } => r.d = Some(d),
            NoiseKind::PoissonGaussian { sigma_s, sigma_c } => {
                r.sigma_s = Some(sigma_s);
                r.sigma_c = Some(sigma_c);
            }
        }
        r
    }
}

fn require_unit(img: &Image, op: &'static str) -> Result<()> {
    if img.range() != RangeTag::Unit {
        return Err(Error::param(op, "expects a unit-range [0, 1] image"));
    }
    Ok(())
}

fn nonneg(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be >= 0, got {v}")))
    }
}

/// Maps every sample through `f(value, rng)`, one stream per image row.
fn per_sample(img: &Image, seed: u64, mut f: impl FnMut(f32, &mut rand_chacha::ChaCha8Rng) -> f32) -> Image {
    let row = img.width() * img.channels();
    let mut out = Vec::with_capacity(img.data().len());
    for (y, chunk) in img.data().chunks_exact(row).enumerate() {
        let mut rng = stream(seed, y as u64);
        out.extend(chunk.iter().map(|&v| f(v, &mut rng)));
    }
    img.with_data(out)
}

fn gaussian_raw(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    nonneg("sigma", sigma)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    Ok(per_sample(img, seed, |v, rng| {
        let n: f64 = rng.sample(StandardNormal);
        (v as f64 + sigma * n) as f32
    }))
}

/// White Gaussian field filtered by `kernel` and rescaled to marginal std `sigma`.
fn spatial_gaussian_raw(img: &Image, sigma: f64, kernel: SpatialKernel, seed: u64) -> Result<Image> {
    nonneg("sigma", sigma)?;
    NoiseKind::SpatialGaussian { sigma, kernel }.validate()?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let taps = kernel.taps();
    let k = kernel.side();
    let r = k / 2;
    let scale = sigma / taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (hp, wp) = (h + 2 * r, w + 2 * r);
    let mut out = img.data().to_vec();
    let mut field = vec![0.0f64; hp * wp];
    for ch in 0..c {
        for (py, row) in field.chunks_exact_mut(wp).enumerate() {
            let mut rng = stream(seed, (ch * hp + py) as u64);
            for v in row {
                *v = rng.sample(StandardNormal);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..k {
                    let frow = &field[(y + i) * wp + x..(y + i) * wp + x + k];
                    for (t, f) in taps[i * k..(i + 1) * k].iter().zip(frow) {
                        acc += t * f;
                    }
                }
                out[(y * w + x) * c + ch] += (scale * acc) as f32;
            }
        }
    }
    Ok(img.with_data(out))
}

/// Photon scale for Poisson level `alpha`: larger levels mean fewer photons.
pub fn poisson_scale(alpha: f64) -> f64 {
    10f64.powf(4.0 - alpha)
}

fn poisson_raw(img: &Image, alpha: f64, seed: u64) -> Result<Image> {
    require_unit(img, "alpha")?;
    NoiseKind::Poisson { alpha }.validate()?;
    let s = poisson_scale(alpha);
    Ok(per_sample(img, seed, |v, rng| {
        let lambda = v as f64 * s;
        if lambda <= 0.0 {
            return 0.0;
        }
        let count: f64 = Poisson::new(lambda).expect("positive finite rate").sample(rng);
        (count / s) as f32
    }))
}

fn speckle_raw(img: &Image, var: f64, seed: u64) -> Result<Image> {
    require_unit(img, "var")?;
    nonneg("var", var)?;
    if var == 0.0 {
        return Ok(img.clone());
    }
    let std = var.sqrt();
    Ok(per_sample(img, seed, |v, rng| {
        let n: f64 = rng.sample(StandardNormal);
        (v as f64 * (1.0 + std * n)) as f32
    }))
}

fn salt_pepper_raw(img: &Image, d: f64, seed: u64) -> Result<Image> {
    require_unit(img, "d")?;
    NoiseKind::SaltPepper { d }.validate()?;
    if d == 0.0 {
        return Ok(img.clone());
    }
    let c = img.channels();
    let row = img.width() * c;
    let mut out = img.data().to_vec();
    for (y, chunk) in out.chunks_exact_mut(row).enumerate() {
        let mut rng = stream(seed, y as u64);
        for px in chunk.chunks_exact_mut(c) {
            let u: f64 = rng.random();
            if u < d / 2.0 {
                px.fill(1.0);
            } else if u < d {
                px.fill(0.0);
            }
        }
    }
    Ok(img.with_data(out))
}

fn poisson_gaussian_raw(img: &Image, sigma_s: f64, sigma_c: f64, seed: u64) -> Result<Image> {
    require_unit(img, "sigma_s")?;
    nonneg("sigma_s", sigma_s)?;
    nonneg("sigma_c", sigma_c)?;
    if sigma_s == 0.0 && sigma_c == 0.0 {
        return Ok(img.clone());
    }
    let (s2, c2) = (sigma_s * sigma_s, sigma_c * sigma_c);
    Ok(per_sample(img, seed, |v, rng| {
        let x = v as f64;
        let std = (s2 * x.max(0.0) + c2).sqrt();
        let n: f64 = rng.sample(StandardNormal);
        (x + std * n) as f32
    }))
}

/// i.i.d. Gaussian noise with std `sigma` in the image's own range units.
pub fn add_gaussian(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    Ok(gaussian_raw(img, sigma, seed)?.clipped())
}

/// Spatially correlated Gaussian noise with marginal std `sigma` (image range units).
pub fn add_spatial_gaussian(img: &Image, sigma: f64, kernel: SpatialKernel, seed: u64) -> Result<Image> {
    Ok(spatial_gaussian_raw(img, sigma, kernel, seed)?.clipped())
}

/// `Poisson(x·s)/s` with `s = 10^(4-alpha)`.
pub fn add_poisson(img: &Image, alpha: f64, seed: u64) -> Result<Image> {
    Ok(poisson_raw(img, alpha, seed)?.clipped())
}

/// Multiplicative noise `x + x·n`, `n ~ N(0, var)`.
pub fn add_speckle(img: &Image, var: f64, seed: u64) -> Result<Image> {
    Ok(speckle_raw(img, var, seed)?.clipped())
}

/// Replaces whole pixels by white or black, each with probability `d/2`.
pub fn add_salt_pepper(img: &Image, d: f64, seed: u64) -> Result<Image> {
    Ok(salt_pepper_raw(img, d, seed)?.clipped())
}

/// Heteroscedastic noise with variance `sigma_s²·x + sigma_c²`.
pub fn add_poisson_gaussian(img: &Image, sigma_s: f64, sigma_c: f64, seed: u64) -> Result<Image> {
    Ok(poisson_gaussian_raw(img, sigma_s, sigma_c, seed)?.clipped())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(side: usize, v: f32, range: RangeTag) -> Image {
        Image::filled(side, side, 1, v, range)
    }

    fn ramp() -> Image {
        Image::from_fn(64, 64, 3, RangeTag::Unit, |y, x, c| {
            ((y * 64 + x) as f32 / 4096.0 + c as f32 * 0.1).min(1.0)
        })
    }

    fn moments(a: &Image, b: &Image) -> (f64, f64) {
        let n = a.data().len() as f64;
        let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (*x - *y) as f64).collect();
        let mean = diff.iter().sum::<f64>() / n;
        let var = diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn zero_levels_are_identity() {
        let img = ramp();
        assert_eq!(add_gaussian(&img, 0.0, 1).unwrap(), img);
        assert_eq!(add_spatial_gaussian(&img, 0.0, SpatialKernel::default(), 1).unwrap(), img);
        assert_eq!(add_speckle(&img, 0.0, 1).unwrap(), img);
        assert_eq!(add_salt_pepper(&img, 0.0, 1).unwrap(), img);
        assert_eq!(add_poisson_gaussian(&img, 0.0, 0.0, 1).unwrap(), img);
    }

    #[test]
    fn negative_levels_are_rejected() {
        let img = ramp();
        assert!(add_gaussian(&img, -1.0, 0).is_err());
        assert!(add_spatial_gaussian(&img, -1.0, SpatialKernel::default(), 0).is_err());
        assert!(add_poisson(&img, 0.0, 0).is_err());
        assert!(add_poisson(&img, -2.0, 0).is_err());
        assert!(add_speckle(&img, -0.1, 0).is_err());
        assert!(add_salt_pepper(&img, 1.5, 0).is_err());
        assert!(add_salt_pepper(&img, -0.1, 0).is_err());
        assert!(add_poisson_gaussian(&img, -0.1, 0.0, 0).is_err());
        assert!(add_poisson_gaussian(&img, 0.0, -0.1, 0).is_err());
    }

    #[test]
    fn unit_only_generators_reject_byte_images() {
        let img = constant(8, 100.0, RangeTag::Byte);
        assert!(add_poisson(&img, 3.0, 0).is_err());
        assert!(add_speckle(&img, 0.02, 0).is_err());
        assert!(add_salt_pepper(&img, 0.02, 0).is_err());
        assert!(add_poisson_gaussian(&img, 0.04, 0.03, 0).is_err());
    }

    #[test]
    fn poisson_of_black_is_black() {
        let img = constant(32, 0.0, RangeTag::Unit);
        assert_eq!(add_poisson(&img, 3.5, 9).unwrap(), img);
    }

    #[test]
    fn speckle_leaves_black_untouched() {
        let img = constant(32, 0.0, RangeTag::Unit);
        assert_eq!(add_speckle(&img, 0.04, 9).unwrap(), img);
    }

    #[test]
    fn salt_pepper_full_density_saturates_every_pixel() {
        let img = ramp();
        let out = add_salt_pepper(&img, 1.0, 3).unwrap();
        for px in out.data().chunks_exact(3) {
            assert!(px == [0.0; 3] || px == [1.0; 3], "pixel {px:?}");
        }
    }

    #[test]
    fn poisson_gaussian_at_zero_signal_has_read_noise_variance() {
        let img = constant(512, 0.0, RangeTag::Unit);
        let noisy = NoiseSpec::new(NoiseKind::PoissonGaussian { sigma_s: 0.04, sigma_c: 0.03 }, 5)
            .unwrap()
            .apply_unclipped(&img)
            .unwrap();
        let (_, std) = moments(&noisy, &img);
        assert!((std * std / (0.03 * 0.03) - 1.0).abs() < 0.02, "variance {}", std * std);
    }

    #[test]
    fn delta_kernel_reduces_to_white_noise() {
        let img = constant(512, 128.0, RangeTag::Byte);
        let out = spatial_gaussian_raw(&img, 25.0, SpatialKernel::DELTA, 4).unwrap();
        let (mean, std) = moments(&out, &img);
        assert!(mean.abs() < 0.25);
        assert!((std / 25.0 - 1.0).abs() < 0.01, "std {std}");
    }

    #[test]
    fn every_kind_is_deterministic_and_in_range() {
        let img = ramp();
        let kinds = [
            NoiseKind::Gaussian { sigma: 50.0 },
            NoiseKind::SpatialGaussian { sigma: 55.0, kernel: SpatialKernel::default() },
            NoiseKind::Poisson { alpha: 3.5 },
            NoiseKind::Speckle { var: 0.04 },
            NoiseKind::SaltPepper { d: 0.02 },
            NoiseKind::PoissonGaussian { sigma_s: 0.04, sigma_c: 0.03 },
        ];
        for kind in kinds {
            let spec = NoiseSpec::new(kind, 77).unwrap();
            let a = spec.apply(&img).unwrap();
            let b = spec.apply(&img).unwrap();
            assert_eq!(a, b, "{spec}");
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)), "{spec} left the range");
            assert_ne!(spec.with_seed(78).apply(&img).unwrap(), a, "{spec} ignores its seed");
        }
    }

    #[test]
    fn byte_range_images_get_levels_in_their_own_units() {
        let unit = constant(256, 0.5, RangeTag::Unit);
        let byte = unit.to_range(RangeTag::Byte);
        let spec = NoiseSpec::gaussian(25.0).unwrap();
        let (_, su) = moments(&spec.apply_unclipped(&unit).unwrap(), &unit);
        let (_, sb) = moments(&spec.apply_unclipped(&byte).unwrap(), &byte);
        assert!((su * 255.0 / sb - 1.0).abs() < 1e-6);
        assert!((sb / 25.0 - 1.0).abs() < 0.02);
    }

    #[test]
    fn record_round_trip_and_validation() {
        let spec = NoiseSpec::new(NoiseKind::Poisson { alpha: 3.0 }, 11).unwrap();
        let rec = NoiseRecord::from(spec);
        assert_eq!(NoiseSpec::try_from(rec).unwrap(), spec);

        let bad = NoiseRecord {
            kind: "pink".into(),
            ..NoiseRecord::default()
        };
        let msg = NoiseSpec::try_from(bad).unwrap_err().to_string();
        assert!(msg.contains("expected one of: gaussian, spatial_gaussian"), "{msg}");

        let wrong_range = NoiseRecord {
            kind: "gaussian".into(),
            sigma: Some(25.0),
            range: Some(RangeTag::Unit),
            ..NoiseRecord::default()
        };
        assert!(NoiseSpec::try_from(wrong_range).is_err());

        let stray = NoiseRecord {
            kind: "speckle".into(),
            var: Some(0.02),
            alpha: Some(3.0),
            ..NoiseRecord::default()
        };
        assert!(NoiseSpec::try_from(stray).is_err());
    }

    #[test]
    fn spatial_kernel_taps_are_normalized() {
        let taps = SpatialKernel::default().taps();
        assert_eq!(taps.len(), 25);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(taps[12] > taps[13] && taps[13] > taps[14]);
    }
}
