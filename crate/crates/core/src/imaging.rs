//! Floating-point image containers and PNG I/O.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// BT.601 luma weights for (R, G, B).
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Three-channel image, interleaved row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Single-channel image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

fn check_len(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width * height * channels != len {
        return Err(Error::Shape(format!(
            "{width}x{height}x{channels} image needs {} values, got {len}",
            width * height * channels
        )));
    }
    Ok(())
}

fn clamp_unit(data: Vec<f32>) -> Vec<f32> {
    data.into_iter()
        .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
        .collect()
}

impl RgbImage {
    /// Builds an image from interleaved RGB values; values are clamped to `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_len(width, height, 3, data.len())?;
        Ok(Self {
            width,
            height,
            data: clamp_unit(data),
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data).expect("consistent dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let start = 3 * (y * self.width + x0);
            data.extend_from_slice(&self.data[start..start + 3 * width]);
        }
        Self::new(width, height, data)
    }

    /// Box-filter downsampling by an integer factor.
    pub fn area_downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::Shape(format!(
                "{}x{} is not divisible by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f32;
        let mut data = vec![0.0; w * h * 3];
        for y in 0..self.height {
            for x in 0..self.width {
                let dst = 3 * ((y / factor) * w + x / factor);
                let src = 3 * (y * self.width + x);
                for c in 0..3 {
                    data[dst + c] += self.data[src + c] * norm;
                }
            }
        }
        Self::new(w, h, data)
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), &Device::Cpu)?;
        Ok(t.permute((2, 0, 1))?.unsqueeze(0)?.to_dtype(dtype)?.contiguous()?)
    }

    /// Inverse of [`RgbImage::to_tensor`] for one batch item; clamps to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(w, h, data)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: "<memory>".into(),
            source: e,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Self::new(w, h, rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes).map_err(|e| relabel(e, path))
    }

    /// 8-bit PNG encoding, rounding to the nearest code value.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("rgb buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: "<memory>".into(),
                source: e,
            })?;
        Ok(out.into_inner())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_len(width, height, 1, data.len())?;
        Ok(Self {
            width,
            height,
            data: clamp_unit(data),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let start = y * self.width + x0;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Self::new(width, height, data)
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 1, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        let (h, w) = match dims {
            [1, 1, h, w] | [1, h, w] | [h, w] => (*h, *w),
            _ => return Err(Error::Shape(format!("expected a single-channel image, got {dims:?}"))),
        };
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(w, h, data)
    }

    /// Gray replicated into three channels, for montages.
    pub fn to_rgb(&self) -> RgbImage {
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RgbImage::new(self.width, self.height, data).expect("consistent dimensions")
    }

    /// 8-bit grayscale PNG encoding.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("gray buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: "<memory>".into(),
                source: e,
            })?;
        Ok(out.into_inner())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Image { source, .. } => Error::Image {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    }
}

/// BT.601 luma, clamped to `[0, 1]`.
pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    let [wr, wg, wb] = LUMA_WEIGHTS;
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            // Achromatic pixels map to their channel value exactly.
            if p[0] == p[1] && p[1] == p[2] {
                p[0]
            } else {
                wr * p[0] + wg * p[1] + wb * p[2]
            }
        })
        .collect();
    GrayImage::new(img.width, img.height, data).expect("consistent dimensions")
}

/// Side-by-side montage of equally sized tiles.
pub fn montage(tiles: &[RgbImage]) -> Result<RgbImage> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::Shape("montage needs at least one tile".into()))?;
    let (w, h) = (first.width, first.height);
    if tiles.iter().any(|t| t.width != w || t.height != h) {
        return Err(Error::Shape("montage tiles must share dimensions".into()));
    }
    let total_w = w * tiles.len();
    let mut data = vec![0.0; total_w * h * 3];
    for (i, tile) in tiles.iter().enumerate() {
        for y in 0..h {
            let dst = 3 * (y * total_w + i * w);
            let src = 3 * y * w;
            data[dst..dst + 3 * w].copy_from_slice(&tile.data[src..src + 3 * w]);
        }
    }
    RgbImage::new(total_w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_examples() {
        let g = to_grayscale(&RgbImage::filled(1, 1, [1.0, 1.0, 1.0]));
        assert_eq!(g.data(), &[1.0]);
        let g = to_grayscale(&RgbImage::filled(1, 1, [1.0, 0.0, 0.0]));
        assert!((g.data()[0] - 0.299).abs() < 1e-7);
        for v in [0.0f32, 0.1, 0.37, 0.5, 0.999] {
            assert_eq!(to_grayscale(&RgbImage::filled(2, 2, [v, v, v])).data(), &[v; 4]);
        }
    }

    #[test]
    fn tensor_roundtrip() {
        let data: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32 / 18.0).collect();
        let img = RgbImage::new(3, 2, data).unwrap();
        let t = img.to_tensor(DType::F32).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 3]);
        assert_eq!(RgbImage::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn png_roundtrip_is_exact_on_code_values() {
        let data: Vec<f32> = (0..4 * 4 * 3).map(|i| ((i * 17) % 256) as f32 / 255.0).collect();
        let img = RgbImage::new(4, 4, data).unwrap();
        let back = RgbImage::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn values_are_clamped() {
        let img = RgbImage::new(1, 1, vec![-0.5, 2.0, f32::NAN]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let img = RgbImage::new(2, 1, vec![0.0, 0.2, 0.4, 1.0, 0.8, 0.6]).unwrap();
        assert!(img.area_downsample(2).is_err());
        let img = RgbImage::new(2, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let d = img.area_downsample(2).unwrap();
        assert_eq!(d.data(), &[0.5, 0.5, 0.5]);
    }
}
