use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB image with values in `[0, 1]`, stored planar (channel, row, column).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    /// Builds an image from planar `3 x height x width` data.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image dims must be positive, got {height}x{width}")));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "expected {} values for a 3x{height}x{width} image, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Uniform image of a single colour.
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self::new(height, width, data)
    }

    /// Builds an image by evaluating `f(y, x)` for every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for (c, v) in px.into_iter().enumerate() {
                    data[c * plane + y * width + x] = v;
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Planar `3 x H x W` values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[channel * self.height * self.width + y * self.width + x]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn hflip(&self) -> Self {
        let (h, w) = self.dims();
        let mut data = vec![0.0; self.data.len()];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[c * h * w + y * w + x] = self.data[c * h * w + y * w + (w - 1 - x)];
                }
            }
        }
        Self { height: h, width: w, data }
    }

    /// `3 x H x W` tensor on the CPU.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (3, self.height, self.width), &Device::Cpu)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |y, x| {
            let p = img.get_pixel(x as u32, y as u32).0;
            [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = self.pixel(y as usize, x as usize);
            image::Rgb(px.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        })
    }
}

/// A `1 x H x W` foreground mask; 1 marks foreground, 0 background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("mask dims must be positive, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} mask entries for {height}x{width}, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(Error::Shape(format!("mask entry {v} is not 0 or 1")));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self::new(height, width, data)
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![1; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    /// Thresholds a row-major probability map: entry is 1 iff `p >= threshold`.
    pub fn from_probabilities(height: usize, width: usize, probs: &[f32], threshold: f32) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::Shape(format!(
                "probability map has {} entries, expected {}",
                probs.len(),
                height * width
            )));
        }
        Self::new(height, width, probs.iter().map(|p| u8::from(*p >= threshold)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().map(|v| *v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count_foreground() as f64 / self.data.len() as f64
    }

    /// The complementary mask (foreground and background swapped).
    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    pub fn hflip(&self) -> Self {
        let (h, w) = self.dims();
        let mut data = vec![0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = self.data[y * w + (w - 1 - x)];
            }
        }
        Self { height: h, width: w, data }
    }

    /// `1 x H x W` tensor of 0.0/1.0 values.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let vals: Vec<f32> = self.data.iter().map(|v| *v as f32).collect();
        Ok(Tensor::from_vec(vals, (1, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Binarizes an 8-bit grayscale mask: values `>= 128` are foreground.
    pub fn from_luma8(img: &image::GrayImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |y, x| img.get_pixel(x as u32, y as u32).0[0] >= 128)
    }
}

/// Dataset partition a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    IdTest,
    OodTest,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Pretrain, Split::Train, Split::Val, Split::IdTest, Split::OodTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::IdTest => "id_test",
            Split::OodTest => "ood_test",
        }
    }

    pub(crate) fn code(self) -> u64 {
        self as u64
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::field("split", format!("unknown split `{s}`")))
    }
}

/// One labelled sample with its ground-truth foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: Image,
    pub mask: BinaryMask,
    pub label: usize,
    pub bg_family: usize,
    pub split: Split,
}

impl SampleRecord {
    pub fn new(
        id: impl Into<String>,
        image: Image,
        mask: BinaryMask,
        label: usize,
        bg_family: usize,
        split: Split,
    ) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match image {:?}",
                mask.dims(),
                image.dims()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
            label,
            bg_family,
            split,
        })
    }
}

/// Records of one split, borrowed from a larger collection.
pub fn records_in(records: &[SampleRecord], split: Split) -> Vec<&SampleRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

/// Owned copy of the records of one split.
pub fn split_records(records: &[SampleRecord], split: Split) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}
