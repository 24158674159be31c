//! Planar float RGB images, tensor conversion and PNG I/O for images and
//! label masks.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{arg_err, Error, Result};
use crate::mask::{LabelMask, MismatchMask};

/// RGB image with planar (channel-major) f32 samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FloatImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return arg_err("image data length does not match 3 x height x width");
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &FloatImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let n = self.height * self.width;
        let p = y * self.width + x;
        [self.data[p], self.data[n + p], self.data[2 * n + p]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let n = self.height * self.width;
        let p = y * self.width + x;
        self.data[p] = rgb[0];
        self.data[n + p] = rgb[1];
        self.data[2 * n + p] = rgb[2];
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// (3, h, w) tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// From a (3, h, w) tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return arg_err(format!("expected 3 channels, got {c}"));
        }
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Self::new(h, w, data)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Selects `other` where `mask` is true and `self` elsewhere.
    pub fn select(&self, other: &FloatImage, mask: &[bool]) -> Result<FloatImage> {
        if !self.same_shape(other) || mask.len() != self.height * self.width {
            return arg_err("select operands differ in size");
        }
        let n = self.height * self.width;
        let mut out = self.clone();
        for c in 0..3 {
            for p in 0..n {
                if mask[p] {
                    out.data[c * n + p] = other.data[c * n + p];
                }
            }
        }
        Ok(out)
    }

    /// Box-filter downsizing by an integer factor.
    pub fn downsize(&self, factor: usize) -> Result<FloatImage> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return arg_err("downsize factor must divide image size");
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = FloatImage::filled(h, w, [0.0; 3]);
        let norm = 1.0 / (factor * factor) as f32;
        for c in 0..3 {
            let src = self.channel(c);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += src[(y * factor + dy) * self.width + x * factor + dx];
                        }
                    }
                    out.data[c * h * w + y * w + x] = acc * norm;
                }
            }
        }
        Ok(out)
    }

    /// Bilinear resize (edge-aligned sample grid).
    pub fn resize(&self, height: usize, width: usize) -> Result<FloatImage> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let t = crate::nn::resize_bilinear(&self.to_tensor(DType::F64)?, height, width)?;
        Self::from_tensor(&t)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = FloatImage::filled(h, w, [0.0; 3]);
        for (x, y, px) in img.enumerate_pixels() {
            out.set_pixel(y as usize, x as usize, px.0.map(|v| v as f32 / 255.0));
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.pixel(y, x).map(quantize);
                img.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        img.save(path)?;
        Ok(())
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a single-channel PNG whose values are category ids.
pub fn load_mask_png(path: &Path, num_categories: usize) -> Result<LabelMask> {
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => other.to_luma8(),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    LabelMask::new(h, w, num_categories, gray.into_raw()).map_err(|e| match e {
        Error::Taxonomy(msg) => Error::Taxonomy(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_mask_png(mask: &LabelMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.labels().to_vec())
        .ok_or_else(|| Error::Argument("mask buffer size".into()))?;
    img.save(path)?;
    Ok(())
}

/// Mismatch masks are written as 0/255 single-channel PNGs.
pub fn save_mismatch_png(mask: &MismatchMask, path: &Path) -> Result<()> {
    let mut img = GrayImage::new(mask.width() as u32, mask.height() as u32);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            img.put_pixel(x as u32, y as u32, Luma([if mask.get(y, x) { 255 } else { 0 }]));
        }
    }
    img.save(path)?;
    Ok(())
}
