//! Float RGB image buffer plus its two on-disk encodings: 8-bit PNG and a
//! lossless little-endian f32 dump.
//!
//! Float dump layout: magic `RGBF`, u32 width, u32 height, u32 channels,
//! then `width * height * channels` f32 values, row-major, channels
//! interleaved. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const DUMP_MAGIC: &[u8; 4] = b"RGBF";

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, 3 interleaved channels.
    pub data: Vec<f64>,
}

/// How 8-bit PNG values relate to the linear floats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PngEncoding {
    /// value / 255 is the linear intensity.
    Linear,
    /// value / 255 = linear^(1/2.2).
    Gamma22,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Image::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image data has {} values, expected {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape(format!(
                "image {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn save_png(&self, path: &Path, encoding: PngEncoding) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| {
                let v = v.clamp(0.0, 1.0);
                let v = match encoding {
                    PngEncoding::Linear => v,
                    PngEncoding::Gamma22 => v.powf(1.0 / 2.2),
                };
                (v * 255.0).round() as u8
            })
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("png buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::load(path, format!("png encode: {e}")))
    }

    pub fn load_png(path: &Path, encoding: PngEncoding) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb
            .into_raw()
            .into_iter()
            .map(|b| {
                let v = b as f64 / 255.0;
                match encoding {
                    PngEncoding::Linear => v,
                    PngEncoding::Gamma22 => v.powf(2.2),
                }
            })
            .collect();
        Image::from_data(w as usize, h as usize, data)
    }

    pub fn encode_dump(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&3u32.to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode_dump(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..4] != DUMP_MAGIC {
            return Err("bad float dump header".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (w, h, c) = (word(4), word(8), word(12));
        if c != 3 {
            return Err(format!("float dump has {c} channels, expected 3"));
        }
        let n = w * h * c;
        if bytes.len() != 16 + n * 4 {
            return Err(format!("float dump truncated: {} bytes for {w}x{h}", bytes.len()));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Image { width: w, height: h, data })
    }

    pub fn save_dump(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_dump()).map_err(|e| Error::io(path, e))
    }

    pub fn load_dump(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_dump(&bytes).map_err(|r| Error::load(path, r))
    }
}

/// Single-channel 8-bit mask; `true` where the pixel is selected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![true; width * height] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.data.iter().map(|&b| if b { 255u8 } else { 0 }).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::load(path, format!("png encode: {e}")))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?;
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        Ok(Mask {
            width: w as usize,
            height: h as usize,
            data: g.into_raw().into_iter().map(|v| v >= 128).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_roundtrip_is_exact_at_f32() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i as f32 * 0.137) as f64).collect();
        let img = Image::from_data(2, 3, data).unwrap();
        let back = Image::decode_dump(&img.encode_dump()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn truncated_dump_is_rejected() {
        let img = Image::new(4, 4);
        let bytes = img.encode_dump();
        assert!(Image::decode_dump(&bytes[..bytes.len() - 1]).is_err());
        assert!(Image::decode_dump(b"nope").is_err());
    }

    #[test]
    fn png_linear_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let mut img = Image::new(5, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 17) as f64 / 16.0;
        }
        img.save_png(&p, PngEncoding::Linear).unwrap();
        let back = Image::load_png(&p, PngEncoding::Linear).unwrap();
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }
}
