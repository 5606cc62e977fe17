//! Image geometry and the conversion between the internal `[-1, 1]` pixel
//! range and 8-bit PNG files.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel count and spatial size shared by every image a model accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    /// Number of scalar values in one image.
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Checks that `batch` is `[B, C, H, W]` with this geometry and returns `B`.
    pub fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        match batch.dims() {
            &[b, c, h, w] if (c, h, w) == (self.channels, self.height, self.width) => Ok(b),
            dims => Err(Error::validation(format!(
                "expected a batch of {}x{}x{} images, got shape {dims:?}",
                self.channels, self.height, self.width
            ))),
        }
    }

    /// Checks that `image` is a single `[C, H, W]` image with this geometry.
    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        match image.dims() {
            &[c, h, w] if (c, h, w) == (self.channels, self.height, self.width) => Ok(()),
            dims => Err(Error::validation(format!(
                "expected a {}x{}x{} image, got shape {dims:?}",
                self.channels, self.height, self.width
            ))),
        }
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Maps an internal pixel value in `[-1, 1]` to an 8-bit level.
pub fn quantize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Maps an 8-bit level to the internal `[-1, 1]` range.
pub fn dequantize(level: u8) -> f32 {
    level as f32 / 127.5 - 1.0
}

/// Converts a `[0, 1]` value into the internal range.
pub fn from_unit(v: f32) -> f32 {
    2.0 * v - 1.0
}

/// Converts an internal value into `[0, 1]`.
pub fn to_unit(v: f32) -> f32 {
    (v + 1.0) / 2.0
}

/// Encodes a `[C, H, W]` image (C = 1 or 3) as an 8-bit PNG.
pub fn save_png(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    to_dynamic(image)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Encodes a `[C, H, W]` image into PNG bytes.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    to_dynamic(image)?.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn to_dynamic(image: &Tensor) -> Result<DynamicImage> {
    let (c, h, w) = image.dims3()?;
    let data = image.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let plane = h * w;
    match c {
        1 => {
            let buf: Vec<u8> = data.iter().map(|&v| quantize(v)).collect();
            Ok(DynamicImage::ImageLuma8(
                GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from dims"),
            ))
        }
        3 => {
            let mut buf = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for ch in 0..3 {
                    buf.push(quantize(data[ch * plane + p]));
                }
            }
            Ok(DynamicImage::ImageRgb8(
                RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from dims"),
            ))
        }
        _ => Err(Error::validation(format!("cannot encode a {c}-channel image as PNG"))),
    }
}

/// Writes a binary `H x W` mask as a grayscale PNG with levels 0 and 255.
pub fn save_mask_png(bits: &[u8], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let buf: Vec<u8> = bits.iter().map(|&b| if b != 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, buf)
        .ok_or_else(|| Error::validation("mask buffer does not match its dimensions"))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Decodes a PNG into a `[C, H, W]` tensor in the internal range.
///
/// `channels` selects grayscale (1) or RGB (3) decoding.
pub fn load_png(path: impl AsRef<Path>, channels: usize) -> Result<Tensor> {
    let img = image::open(path.as_ref())?;
    decode_dynamic(img, channels)
}

/// Decodes PNG bytes into a `[C, H, W]` tensor in the internal range.
pub fn decode_png(bytes: &[u8], channels: usize) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    decode_dynamic(img, channels)
}

fn decode_dynamic(img: DynamicImage, channels: usize) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(dequantize).collect(),
        3 => {
            let raw = img.to_rgb8().into_raw();
            let plane = h * w;
            let mut out = vec![0f32; 3 * plane];
            for p in 0..plane {
                for ch in 0..3 {
                    out[ch * plane + p] = dequantize(raw[3 * p + ch]);
                }
            }
            out
        }
        c => return Err(Error::validation(format!("cannot decode PNG into {c} channels"))),
    };
    Ok(Tensor::from_vec(data, (channels, h, w), &Device::Cpu)?)
}
