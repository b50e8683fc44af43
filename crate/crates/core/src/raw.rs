//! Bayer RAW handling and synthetic RAW/sRGB pair generation.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{relabel, to_grayscale, GrayImage, RgbImage};

/// Colour filter layout of the top-left 2×2 tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfaPattern {
    #[default]
    Rggb,
}

impl CfaPattern {
    /// Channel index (0 = R, 1 = G, 2 = B) sampled at `(x, y)`.
    pub fn channel_at(self, x: usize, y: usize) -> usize {
        match self {
            CfaPattern::Rggb => match (y % 2, x % 2) {
                (0, 0) => 0,
                (1, 1) => 2,
                _ => 1,
            },
        }
    }
}

/// Single-channel sensor mosaic with integer code values.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerRaw {
    width: usize,
    height: usize,
    bit_depth: u8,
    cfa: CfaPattern,
    pixels: Vec<u16>,
    pub meta: BTreeMap<String, String>,
}

impl BayerRaw {
    pub fn new(width: usize, height: usize, bit_depth: u8, pixels: Vec<u16>) -> Result<Self> {
        let raw = Self {
            width,
            height,
            bit_depth,
            cfa: CfaPattern::Rggb,
            pixels,
            meta: BTreeMap::new(),
        };
        raw.validate()?;
        Ok(raw)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn cfa(&self) -> CfaPattern {
        self.cfa
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn max_code(&self) -> u16 {
        ((1u32 << self.bit_depth) - 1) as u16
    }

    /// Checks bit depth, even full-tile dimensions and the code-value range.
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bit_depth, 10 | 12) {
            return Err(Error::Validation(format!(
                "bit depth {} is not supported (expected 10 or 12)",
                self.bit_depth
            )));
        }
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(2) || !self.height.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "mosaic {}x{} must have positive even dimensions",
                self.width, self.height
            )));
        }
        if self.pixels.len() != self.width * self.height {
            return Err(Error::Shape(format!(
                "{}x{} mosaic with {} pixels",
                self.width,
                self.height,
                self.pixels.len()
            )));
        }
        let max = self.max_code();
        let bad: Vec<(usize, usize)> = self
            .pixels
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > max)
            .map(|(i, _)| (i % self.width, i / self.width))
            .collect();
        if !bad.is_empty() {
            let shown: Vec<String> = bad.iter().take(8).map(|(x, y)| format!("({x}, {y})")).collect();
            return Err(Error::Validation(format!(
                "{} pixel(s) exceed the {}-bit range at {}{}",
                bad.len(),
                self.bit_depth,
                shown.join(", "),
                if bad.len() > shown.len() { ", ..." } else { "" }
            )));
        }
        Ok(())
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if !x0.is_multiple_of(2) || !y0.is_multiple_of(2) {
            return Err(Error::Shape(format!("crop origin ({x0}, {y0}) breaks the CFA phase")));
        }
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let start = y * self.width + x0;
            pixels.extend_from_slice(&self.pixels[start..start + width]);
        }
        let mut out = Self::new(width, height, self.bit_depth, pixels)?;
        out.meta = self.meta.clone();
        Ok(out)
    }

    /// Decodes a 16-bit (or 8-bit) grayscale PNG holding raw code values.
    pub fn decode_png(bytes: &[u8], bit_depth: u8) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: "<memory>".into(),
            source: e,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = match img {
            image::DynamicImage::ImageLuma16(buf) => buf.into_raw(),
            image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u16::from).collect(),
            other => {
                return Err(Error::Validation(format!(
                    "RAW PNG must be single-channel, found {:?}",
                    other.color()
                )))
            }
        };
        Self::new(w, h, bit_depth, pixels)
    }

    pub fn read_png(path: &Path, bit_depth: u8) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes, bit_depth).map_err(|e| relabel(e, path))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels.clone(),
        )
        .ok_or_else(|| Error::Shape("raw buffer size".into()))?;
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

/// Code values divided by `2^bit_depth − 1`; the mosaic layout is kept.
pub fn normalize_raw(raw: &BayerRaw) -> Result<GrayImage> {
    raw.validate()?;
    let scale = 1.0 / raw.max_code() as f32;
    GrayImage::new(
        raw.width,
        raw.height,
        raw.pixels.iter().map(|&p| p as f32 * scale).collect(),
    )
}

/// RGGB mosaic packed into half-resolution 4-channel form, channels `[R, G1, G2, B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedCfa {
    pub width: usize,
    pub height: usize,
    /// Interleaved `(y, x, channel)`.
    pub data: Vec<f32>,
}

pub fn pack_cfa(mosaic: &GrayImage) -> Result<PackedCfa> {
    let (w, h) = (mosaic.width(), mosaic.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::Shape(format!("cannot pack odd-sized mosaic {w}x{h}")));
    }
    let (pw, ph) = (w / 2, h / 2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..ph {
        for x in 0..pw {
            data.push(mosaic.get(2 * x, 2 * y));
            data.push(mosaic.get(2 * x + 1, 2 * y));
            data.push(mosaic.get(2 * x, 2 * y + 1));
            data.push(mosaic.get(2 * x + 1, 2 * y + 1));
        }
    }
    Ok(PackedCfa {
        width: pw,
        height: ph,
        data,
    })
}

pub fn unpack_cfa(packed: &PackedCfa) -> Result<GrayImage> {
    let (w, h) = (packed.width * 2, packed.height * 2);
    if packed.data.len() != w * h {
        return Err(Error::Shape(format!(
            "packed {}x{}x4 holds {} values",
            packed.width,
            packed.height,
            packed.data.len()
        )));
    }
    let mut data = vec![0.0; w * h];
    for y in 0..packed.height {
        for x in 0..packed.width {
            let s = 4 * (y * packed.width + x);
            data[2 * y * w + 2 * x] = packed.data[s];
            data[2 * y * w + 2 * x + 1] = packed.data[s + 1];
            data[(2 * y + 1) * w + 2 * x] = packed.data[s + 2];
            data[(2 * y + 1) * w + 2 * x + 1] = packed.data[s + 3];
        }
    }
    GrayImage::new(w, h, data)
}

/// Inverse-ISP degradation used to synthesize RAW inputs from sRGB images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub gamma: f64,
    pub gains: [f64; 3],
    /// Read-noise standard deviation in normalized units.
    pub noise_sigma: f64,
    pub bit_depth: u8,
}

impl Default for Degradation {
    fn default() -> Self {
        Self {
            gamma: 2.2,
            gains: [2.0, 1.0, 1.6],
            noise_sigma: 0.002,
            bit_depth: 10,
        }
    }
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0) {
            return Err(Error::config("gamma", format!("{} must be at least 1", self.gamma)));
        }
        if let Some(g) = self.gains.iter().find(|g| !(**g > 0.0)) {
            return Err(Error::config("gains", format!("{g} must be positive")));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        if !matches!(self.bit_depth, 10 | 12) {
            return Err(Error::config(
                "bit_depth",
                format!("{} (expected 10 or 12)", self.bit_depth),
            ));
        }
        Ok(())
    }
}

/// Degamma → inverse white-balance gains → RGGB mosaic → Gaussian read noise → quantize.
///
/// Deterministic for a given seed. The returned sRGB image is the input.
pub fn synth_pair(srgb: &RgbImage, params: &Degradation, seed: u64) -> Result<(BayerRaw, RgbImage)> {
    params.validate()?;
    let (w, h) = (srgb.width(), srgb.height());
    if w % 2 != 0 || h % 2 != 0 || w == 0 || h == 0 {
        return Err(Error::Shape(format!("synthesis needs even dimensions, got {w}x{h}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = ((1u32 << params.bit_depth) - 1) as f64;
    let cfa = CfaPattern::Rggb;
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let c = cfa.channel_at(x, y);
            let v = srgb.pixel(x, y)[c] as f64;
            let mut lin = v.powf(params.gamma) / params.gains[c];
            if params.noise_sigma > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                lin += params.noise_sigma * n;
            }
            pixels.push((lin.clamp(0.0, 1.0) * max).round() as u16);
        }
    }
    let mut raw = BayerRaw::new(w, h, params.bit_depth, pixels)?;
    raw.meta.insert("source".into(), "synthetic".into());
    raw.meta.insert("seed".into(), seed.to_string());
    Ok((raw, srgb.clone()))
}

/// Aligned crops of one training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTriple {
    pub x: usize,
    pub y: usize,
    /// Normalized mosaic.
    pub raw: GrayImage,
    pub srgb: RgbImage,
    pub gray: GrayImage,
}

/// `count` random crops of side `patch_size` at even offsets (CFA phase kept).
pub fn extract_patches(
    raw: &BayerRaw,
    srgb: &RgbImage,
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PatchTriple>> {
    if patch_size == 0 || !patch_size.is_multiple_of(2) {
        return Err(Error::config(
            "patch_size",
            format!("{patch_size} must be positive and even"),
        ));
    }
    if raw.width() != srgb.width() || raw.height() != srgb.height() {
        return Err(Error::Shape(format!(
            "RAW {}x{} and sRGB {}x{} are not aligned",
            raw.width(),
            raw.height(),
            srgb.width(),
            srgb.height()
        )));
    }
    if patch_size > raw.width().min(raw.height()) {
        return Err(Error::Shape(format!(
            "patch {patch_size} larger than image {}x{}",
            raw.width(),
            raw.height()
        )));
    }
    let mosaic = normalize_raw(raw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span_x = (raw.width() - patch_size) / 2;
    let span_y = (raw.height() - patch_size) / 2;
    (0..count)
        .map(|_| {
            let x = 2 * rng.random_range(0..=span_x);
            let y = 2 * rng.random_range(0..=span_y);
            let srgb = srgb.crop(x, y, patch_size, patch_size)?;
            Ok(PatchTriple {
                x,
                y,
                raw: mosaic.crop(x, y, patch_size, patch_size)?,
                gray: to_grayscale(&srgb),
                srgb,
            })
        })
        .collect()
}

/// Smooth colourful scene with a few soft-edged shapes, used as a synthetic
/// sRGB source when no photographs are available.
pub fn procedural_scene(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = [[0.0f32; 3]; 2];
    for c in base.iter_mut() {
        for v in c.iter_mut() {
            *v = rng.random_range(0.15..0.85);
        }
    }
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    struct Blob {
        cx: f32,
        cy: f32,
        r: f32,
        color: [f32; 3],
    }
    let blobs: Vec<Blob> = (0..3)
        .map(|_| Blob {
            cx: rng.random_range(0.1..0.9),
            cy: rng.random_range(0.1..0.9),
            r: rng.random_range(0.12..0.3),
            color: [
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
            ],
        })
        .collect();
    let freq: f32 = rng.random_range(2.0..5.0);
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let u = (x as f32 + 0.5) / width as f32;
            let v = (y as f32 + 0.5) / height as f32;
            let s = ((u - 0.5) * dx + (v - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = base[0][c] * (1.0 - s) + base[1][c] * s;
            }
            for b in &blobs {
                let d = ((u - b.cx).powi(2) + (v - b.cy).powi(2)).sqrt();
                let edge = 1.0 / (1.0 + ((d - b.r) * 40.0).exp());
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - edge) + b.color[c] * edge;
                }
            }
            let ripple = 0.04 * (freq * std::f32::consts::TAU * (u + 0.5 * v)).sin();
            data.extend(px.iter().map(|p| (p + ripple).clamp(0.0, 1.0)));
        }
    }
    RgbImage::new(width, height, data).expect("consistent dimensions")
}
