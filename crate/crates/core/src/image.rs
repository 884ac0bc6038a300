//! Dense images with an explicit intensity-range convention.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Intensity convention an image (or a noise level) is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RangeTag {
    /// `[0, 1]`
    #[default]
    Unit,
    /// `[0, 255]`
    Byte,
}

impl RangeTag {
    #[inline]
    pub fn peak(self) -> f64 {
        match self {
            RangeTag::Unit => 1.0,
            RangeTag::Byte => 255.0,
        }
    }

    /// Factor converting a value expressed in `self` units into `to` units.
    #[inline]
    pub fn scale_to(self, to: RangeTag) -> f64 {
        to.peak() / self.peak()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RangeTag::Unit => "unit",
            RangeTag::Byte => "byte",
        }
    }
}

impl std::str::FromStr for RangeTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "unit" => Ok(RangeTag::Unit),
            "byte" => Ok(RangeTag::Byte),
            other => Err(format!("unknown range `{other}` (expected one of: unit, byte)")),
        }
    }
}

/// `height × width × channels` image stored interleaved (HWC), `f32` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    range: RangeTag,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
        range: RangeTag,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("images carry 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} samples for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image data".into()));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
            range,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32, range: RangeTag) -> Self {
        Image::new(height, width, channels, vec![value; height * width * channels], range)
            .expect("constant image is valid")
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        range: RangeTag,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image::new(height, width, channels, data, range).expect("generated image is valid")
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn range(&self) -> RangeTag {
        self.range
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    /// Same geometry and range, new samples.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Image {
        debug_assert_eq!(data.len(), self.data.len());
        self.derived(self.height, self.width, self.channels, data)
    }

    fn derived(&self, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Image {
        Image {
            height,
            width,
            channels,
            data,
            range: self.range,
        }
    }

    /// Clamps every sample into the declared range.
    pub fn clipped(mut self) -> Image {
        let peak = self.range.peak() as f32;
        for v in &mut self.data {
            *v = v.clamp(0.0, peak);
        }
        self
    }

    pub fn to_range(&self, range: RangeTag) -> Image {
        if range == self.range {
            return self.clone();
        }
        let s = self.range.scale_to(range) as f32;
        let data = self.data.iter().map(|v| v * s).collect();
        Image {
            range,
            ..self.derived(self.height, self.width, self.channels, data)
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(self.derived(h, w, c, data))
    }

    /// Applies one of the 8 symmetries of the square: `index % 4` quarter
    /// turns counter-clockwise, preceded by a horizontal flip when `index >= 4`.
    pub fn dihedral(&self, index: u8) -> Image {
        let index = index % 8;
        let flip = index >= 4;
        let turns = index % 4;
        let (h, w, c) = (self.height, self.width, self.channels);
        let (oh, ow) = if turns % 2 == 0 { (h, w) } else { (w, h) };
        let mut data = vec![0.0; h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                // Invert the rotation to find the source pixel.
                let (sy, mut sx) = match turns {
                    0 => (oy, ox),
                    1 => (ox, w - 1 - oy),
                    2 => (h - 1 - oy, w - 1 - ox),
                    _ => (h - 1 - ox, oy),
                };
                if flip {
                    sx = w - 1 - sx;
                }
                let src = (sy * w + sx) * c;
                let dst = (oy * ow + ox) * c;
                data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        self.derived(oh, ow, c, data)
    }

    /// Converts a batch of equally sized images into an NCHW tensor.
    pub fn to_tensor<T: Element>(images: &[Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut t = Tensor::zeros([images.len(), c, h, w]);
        for (n, img) in images.iter().enumerate() {
            if !img.same_shape(first) {
                return Err(Error::Shape("images in a batch must share one shape".into()));
            }
            let sample = t.sample_mut(n);
            for (i, px) in img.data.chunks_exact(c).enumerate() {
                for (ch, &v) in px.iter().enumerate() {
                    sample[ch * h * w + i] = T::of(v as f64);
                }
            }
        }
        Ok(t)
    }

    /// Extracts sample `n` of an NCHW tensor as an image.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, n: usize, range: RangeTag) -> Result<Image> {
        let [_, c, h, w] = t.shape();
        let sample = t.sample(n);
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h * w {
            for ch in 0..c {
                data.push(sample[ch * h * w + i].f64() as f32);
            }
        }
        Image::new(h, w, c, data, range)
    }

    /// Loads an 8- or 16-bit image file as a unit-range image.
    ///
    /// Grayscale files stay single-channel, everything else becomes RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let dynimg = ::image::open(path).map_err(|e| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let gray = !dynimg.color().has_color();
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        let (channels, data) = if gray {
            (1, dynimg.into_luma16().into_raw())
        } else {
            (3, dynimg.into_rgb16().into_raw())
        };
        let data = data.into_iter().map(|v| v as f32 / 65535.0).collect();
        Image::new(h, w, channels, data, RangeTag::Unit)
    }

    /// Writes an 8-bit PNG (after clipping and rounding).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let unit = self.to_range(RangeTag::Unit).clipped();
        let bytes: Vec<u8> = unit
            .data
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = if self.channels == 1 {
            ::image::GrayImage::from_raw(w, h, bytes).map(|img| img.save(path))
        } else {
            ::image::RgbImage::from_raw(w, h, bytes).map(|img| img.save(path))
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(Error::Codec {
                path: path.to_path_buf(),
                message: e.to_string(),
            }),
            None => Err(Error::Shape("pixel buffer does not match dimensions".into())),
        }
    }

    /// Luma-replicated 3-channel copy of a grayscale image.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        self.derived(self.height, self.width, 3, data)
    }

    /// ITU-R BT.601 luma of an RGB image.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        self.derived(self.height, self.width, 1, data)
    }
}
