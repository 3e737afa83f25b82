//! 8-bit images: the raw `RIMG` raster and PNG.
//!
//! `RIMG` layout: magic `RIMG`, width, height, channels as little-endian
//! u32, then `width * height * channels` bytes in row-major HWC order.

use std::path::Path;

use aesvl_autograd::{Real, Tensor};

use crate::error::{Error, Result};

pub const RIMG_MAGIC: [u8; 4] = *b"RIMG";
const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(Error::Invalid(format!(
                "{width}x{height}x{channels} image with {} bytes",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Mean intensity over all pixels and channels, in [0, 1].
    pub fn mean_luminance(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / (self.data.len() as f64 * 255.0)
    }

    pub fn to_rimg(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len());
        out.extend_from_slice(&RIMG_MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_rimg(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || bytes[..4] != RIMG_MAGIC {
            return Err("not a RIMG file".into());
        }
        let u = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
        let (w, h, c) = (u(4), u(8), u(12));
        let n = w
            .checked_mul(h)
            .and_then(|p| p.checked_mul(c))
            .ok_or("dimensions overflow")?;
        if bytes.len() - 16 != n {
            return Err(format!("{w}x{h}x{c} header but {} data bytes", bytes.len() - 16));
        }
        Image::new(w, h, c, bytes[16..].to_vec()).map_err(|e| e.to_string())
    }

    /// Decodes RIMG or PNG, converting PNGs to `channels` (1 or 3).
    pub fn decode(bytes: &[u8], channels: usize) -> std::result::Result<Self, String> {
        if bytes.starts_with(&RIMG_MAGIC) {
            let img = Self::from_rimg(bytes)?;
            if img.channels != channels {
                return Err(format!("image has {} channels, expected {channels}", img.channels));
            }
            return Ok(img);
        }
        if bytes.starts_with(&PNG_MAGIC) {
            let dynimg =
                image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| e.to_string())?;
            let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
            let data = match channels {
                1 => dynimg.to_luma8().into_raw(),
                3 => dynimg.to_rgb8().into_raw(),
                c => return Err(format!("PNG conversion to {c} channels unsupported")),
            };
            return Image::new(w, h, channels, data).map_err(|e| e.to_string());
        }
        Err("unrecognized image format (expected RIMG or PNG)".into())
    }

    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, channels).map_err(|msg| Error::Image {
            path: path.to_path_buf(),
            msg,
        })
    }

    /// Square crop of side `size` at (`y0`, `x0`), optionally mirrored.
    pub fn crop(&self, y0: usize, x0: usize, size: usize, flip: bool) -> Self {
        let c = self.channels;
        let mut data = Vec::with_capacity(size * size * c);
        for y in y0..y0 + size {
            for i in 0..size {
                let x = if flip { x0 + size - 1 - i } else { x0 + i };
                let p = (y * self.width + x) * c;
                data.extend_from_slice(&self.data[p..p + c]);
            }
        }
        Self {
            width: size,
            height: size,
            channels: c,
            data,
        }
    }
}

/// Stacks same-sized images into `[N, H, W, C]` with bytes mapped to [-1, 1].
pub fn images_to_tensor<T: Real>(images: &[Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    if images.iter().any(|i| (i.height, i.width, i.channels) != (h, w, c)) {
        return Err(Error::Invalid("images in a batch differ in size".into()));
    }
    let scale = T::lit(1.0 / 127.5);
    let data = images
        .iter()
        .flat_map(|i| i.data.iter().map(move |&v| T::lit(v as f64) * scale - T::one()))
        .collect();
    Ok(Tensor::new(&[images.len(), h, w, c], data)?)
}
