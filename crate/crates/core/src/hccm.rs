//! Histogram-guided colorization of the regenerated grayscale latent.
//!
//! A color histogram predictor (CHP) estimates the sRGB histogram from the
//! RAW latent. The histogram is turned into a per-image channel-mixing
//! matrix applied to the RAW latent, and the result queries the grayscale
//! latent through cross-attention.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::codec::{LatentFeature, Modality};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::nn::layers::{Conv1d, Conv2d, GroupNorm, Linear};
use crate::nn::loss::mean_l2;
use crate::nn::{Init, ParamBuilder, ParamStore};
use crate::rng;

pub const BINS: usize = 256;
const CHUNK: usize = 1024;

/// Differentiable per-channel histogram with a triangular kernel of width
/// one bin: `(B, 3, H, W)` in `[0, 1]` → `(B, 3, 256)`, each row summing to 1.
pub fn soft_histogram(img: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = img
        .dims4()
        .map_err(|_| Error::Shape(format!("histogram needs (B, 3, H, W), got {:?}", img.dims())))?;
    if c != 3 || h * w == 0 {
        return Err(Error::Shape(format!(
            "histogram needs a non-empty 3-channel image, got {:?}",
            img.dims()
        )));
    }
    let n = h * w;
    let centers = Tensor::arange(0u32, BINS as u32, img.device())?
        .to_dtype(img.dtype())?
        .reshape((1, 1, 1, BINS))?;
    let v = (img.clamp(0.0, 1.0)? * (BINS - 1) as f64)?.reshape((b, c, n, 1))?;
    let mut acc: Option<Tensor> = None;
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let d = v.narrow(2, start, len)?.broadcast_sub(&centers)?.abs()?;
        let part = d.affine(-1.0, 1.0)?.relu()?.sum(2)?;
        acc = Some(match acc {
            Some(a) => (a + part)?,
            None => part,
        });
        start += len;
    }
    let counts = acc.expect("non-empty image");
    Ok(counts.broadcast_div(&counts.sum_keepdim(2)?)?)
}

/// Soft histogram of an image computed directly in 64-bit, `(1, 3, 256)`.
pub fn image_histogram(img: &RgbImage) -> Result<Tensor> {
    let mut rows = vec![0.0f64; 3 * BINS];
    let n = img.width() * img.height();
    if n == 0 {
        return Err(Error::Shape("histogram of an empty image".into()));
    }
    for px in img.data().chunks_exact(3) {
        for (ch, &v) in px.iter().enumerate() {
            let x = (v as f64).clamp(0.0, 1.0) * (BINS - 1) as f64;
            let lo = x.floor() as usize;
            let f = x - lo as f64;
            rows[ch * BINS + lo] += 1.0 - f;
            if lo + 1 < BINS {
                rows[ch * BINS + lo + 1] += f;
            }
        }
    }
    for row in rows.chunks_exact_mut(BINS) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(Tensor::from_vec(rows, (1, 3, BINS), &Device::Cpu)?)
}

/// Per-item RMS distance between predicted and target histograms.
pub fn ccl_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    mean_l2(pred, target)
}

/// Per-item RMS distance between colorized and true sRGB latents.
pub fn fea_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    mean_l2(pred, target)
}

/// `L_fea + λ2·L_ccl`; `λ2 = 0` returns the feature term alone.
pub fn hccm_loss(fea: &Tensor, ccl: &Tensor, lambda_ccl: f64) -> Result<Tensor> {
    if lambda_ccl < 0.0 || !lambda_ccl.is_finite() {
        return Err(Error::config(
            "lambda_ccl",
            format!("{lambda_ccl} must be a finite value >= 0"),
        ));
    }
    if lambda_ccl == 0.0 {
        return Ok(fea.clone());
    }
    Ok((fea + (ccl * lambda_ccl)?)?)
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(D::Minus1)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HccmConfig {
    pub channels: usize,
    /// Width of the histogram predictor's conv stack.
    pub chp_width: usize,
    pub heads: usize,
    /// Position-wise feed-forward refinement after the attention.
    pub ffn: bool,
    pub groups: usize,
}

impl Default for HccmConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            chp_width: 64,
            heads: 1,
            ffn: true,
            groups: 8,
        }
    }
}

impl HccmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.chp_width == 0 {
            return Err(Error::config("latent_channels", "must be positive"));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(
                "attn_heads",
                format!("{} heads do not divide {} channels", self.heads, self.channels),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Chp {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    head: Linear,
}

#[derive(Debug, Clone)]
struct ColorProjection {
    conv1: Conv1d,
    conv2: Conv1d,
    linear: Linear,
}

const PROJ_CH: usize = 8;
const PROJ_POOL: usize = 4;

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct Ffn {
    fc1: Linear,
    fc2: Linear,
}

/// Outputs of one HCCM forward pass.
#[derive(Debug)]
pub struct HccmOutput {
    /// Predicted histogram `(B, 3, 256)`.
    pub histogram: Tensor,
    /// Histogram-mixed RAW latent.
    pub color: Tensor,
    /// Colorized latent, same shape as the grayscale input.
    pub srgb: Tensor,
}

#[derive(Debug, Clone)]
pub struct Hccm {
    config: HccmConfig,
    params: ParamStore,
    chp: Chp,
    proj: ColorProjection,
    attn: Attention,
    ffn: Option<Ffn>,
}

impl Hccm {
    pub fn new(config: HccmConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut stream = rng::stream(seed, &[0xCC]);
        let mut b = ParamBuilder::new(&mut params, &mut stream);
        let (c, w) = (config.channels, config.chp_width);
        let chp = Chp {
            conv1: Conv2d::new(&mut b.pp("chp.conv1"), c, w, 3, 1)?,
            norm1: GroupNorm::new(&mut b.pp("chp.norm1"), w, config.groups)?,
            conv2: Conv2d::new(&mut b.pp("chp.conv2"), w, w, 3, 2)?,
            norm2: GroupNorm::new(&mut b.pp("chp.norm2"), w, config.groups)?,
            head: Linear::new(&mut b.pp("chp.head"), w, 3 * BINS, true)?,
        };
        let flat = PROJ_CH * BINS / PROJ_POOL;
        let identity: Vec<f64> = (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect();
        let proj = ColorProjection {
            conv1: Conv1d::new(&mut b.pp("proj.conv1"), 3, PROJ_CH, 5)?,
            conv2: Conv1d::new(&mut b.pp("proj.conv2"), PROJ_CH, PROJ_CH, 5)?,
            linear: Linear::with_init(
                &mut b.pp("proj.linear"),
                flat,
                c * c,
                Init::FanIn {
                    fan_in: flat,
                    gain: 0.1,
                },
                Init::Values(identity),
            )?,
        };
        let attn = Attention {
            q: Linear::new(&mut b.pp("attn.q"), c, c, true)?,
            k: Linear::new(&mut b.pp("attn.k"), c, c, true)?,
            v: Linear::new(&mut b.pp("attn.v"), c, c, true)?,
            o: Linear::new(&mut b.pp("attn.o"), c, c, true)?,
        };
        let ffn = if config.ffn {
            Some(Ffn {
                fc1: Linear::new(&mut b.pp("ffn.fc1"), c, 4 * c, true)?,
                fc2: Linear::with_init(&mut b.pp("ffn.fc2"), 4 * c, c, Init::Zeros, Init::Zeros)?,
            })
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            chp,
            proj,
            attn,
            ffn,
        })
    }

    pub fn config(&self) -> &HccmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn check_latent(&self, t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
        let dims = t
            .dims4()
            .map_err(|_| Error::Shape(format!("{what} must be (B, c, h, w), got {:?}", t.dims())))?;
        if dims.1 != self.config.channels {
            return Err(Error::Shape(format!(
                "{what} has {} channels, module expects {}",
                dims.1, self.config.channels
            )));
        }
        Ok(dims)
    }

    /// Predicted sRGB histogram from a RAW latent.
    pub fn chp_forward(&self, f_r: &LatentFeature) -> Result<Tensor> {
        if f_r.modality() != Modality::Raw {
            return Err(Error::config(
                "modality",
                format!("histogram predictor expects a raw latent, got {}", f_r.modality()),
            ));
        }
        let x = f_r.values().to_dtype(self.params.dtype())?;
        let (b, ..) = self.check_latent(&x, "raw latent")?;
        let h = self.chp.norm1.forward_silu(&self.chp.conv1.forward(&x)?)?;
        let h = self.chp.norm2.forward_silu(&self.chp.conv2.forward(&h)?)?;
        let pooled = h.mean(3)?.mean(2)?;
        let logits = self.chp.head.forward(&pooled)?.reshape((b, 3, BINS))?;
        softmax_last(&logits)
    }

    /// Channel-mixing matrix `(B, c, c)` derived from a histogram.
    pub fn mixing_matrix(&self, hist: &Tensor) -> Result<Tensor> {
        let (b, ch, bins) = hist
            .dims3()
            .map_err(|_| Error::Shape(format!("histogram must be (B, 3, 256), got {:?}", hist.dims())))?;
        if ch != 3 || bins != BINS {
            return Err(Error::Shape(format!(
                "histogram must be (B, 3, 256), got {:?}",
                hist.dims()
            )));
        }
        let x = hist.to_dtype(self.params.dtype())?;
        let h = self.proj.conv1.forward(&x)?.silu()?;
        let h = self.proj.conv2.forward(&h)?.silu()?;
        let h = h.reshape((b, PROJ_CH, BINS / PROJ_POOL, PROJ_POOL))?.mean(3)?;
        let m = self.proj.linear.forward(&h.reshape((b, PROJ_CH * BINS / PROJ_POOL))?)?;
        let c = self.config.channels;
        Ok(m.reshape((b, c, c))?)
    }

    /// `F_c`: the mixing matrix applied to the channel vector at every
    /// spatial position of `F_r`.
    pub fn color_feature(&self, hist: &Tensor, f_r: &Tensor) -> Result<Tensor> {
        let m = self.mixing_matrix(hist)?;
        apply_mixing(&m, &f_r.to_dtype(self.params.dtype())?)
    }

    /// Row-softmax attention weights `(B, heads, hw, hw)` of `F_c` queries
    /// against `F̂_g` keys.
    pub fn attention_weights(&self, f_c: &Tensor, g_hat: &Tensor) -> Result<Tensor> {
        Ok(self.attention(f_c, g_hat)?.1)
    }

    /// Cross-attention with queries from `f_c` and keys and values from
    /// `g_hat`; the output has the shape of `g_hat`.
    pub fn colorize(&self, f_c: &Tensor, g_hat: &Tensor) -> Result<Tensor> {
        Ok(self.attention(f_c, g_hat)?.0)
    }

    fn attention(&self, f_c: &Tensor, g_hat: &Tensor) -> Result<(Tensor, Tensor)> {
        if f_c.dims() != g_hat.dims() {
            return Err(Error::Shape(format!(
                "color feature {:?} and grayscale latent {:?} differ",
                f_c.dims(),
                g_hat.dims()
            )));
        }
        let (b, c, h, w) = self.check_latent(f_c, "color feature")?;
        let dtype = self.params.dtype();
        let n = h * w;
        let heads = self.config.heads;
        let dh = c / heads;
        let tokens = |t: &Tensor| -> Result<Tensor> {
            Ok(t.to_dtype(dtype)?.reshape((b, c, n))?.transpose(1, 2)?.contiguous()?)
        };
        let split = |t: Tensor| -> Result<Tensor> { Ok(t.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()?) };
        let qt = tokens(f_c)?;
        let kt = tokens(g_hat)?;
        let q = split(self.attn.q.forward(&qt)?)?;
        let k = split(self.attn.k.forward(&kt)?)?;
        let v = split(self.attn.v.forward(&kt)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let weights = softmax_last(&scores)?;
        let mixed = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        let out = self.attn.o.forward(&mixed)?;
        Ok((out.transpose(1, 2)?.reshape((b, c, h, w))?, weights))
    }

    /// Full module: histogram prediction, color feature, attention and the
    /// residual refinement `F̂_s = y + FFN(y)` with `y = F_c + colorize`.
    pub fn forward(&self, f_r: &LatentFeature, g_hat: &Tensor) -> Result<HccmOutput> {
        let histogram = self.chp_forward(f_r)?;
        let color = self.color_feature(&histogram, f_r.values())?;
        let attended = self.colorize(&color, g_hat)?;
        let y = (&color + attended)?;
        let srgb = match &self.ffn {
            Some(ffn) => {
                let (b, c, h, w) = y.dims4()?;
                let t = y.reshape((b, c, h * w))?.transpose(1, 2)?;
                let r = ffn.fc2.forward(&ffn.fc1.forward(&t)?.silu()?)?;
                (&y + r.transpose(1, 2)?.reshape((b, c, h, w))?)?
            }
            None => y,
        };
        Ok(HccmOutput { histogram, color, srgb })
    }
}

/// `out[:, :, p] = M · f[:, :, p]` for every spatial position `p`.
pub fn apply_mixing(m: &Tensor, f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f
        .dims4()
        .map_err(|_| Error::Shape(format!("feature must be (B, c, h, w), got {:?}", f.dims())))?;
    let dims = m.dims();
    if dims != [b, c, c] {
        return Err(Error::Shape(format!(
            "mixing matrix {dims:?} does not match feature {:?} reshaped to ({b}, {c}, {})",
            f.dims(),
            h * w
        )));
    }
    Ok(m.matmul(&f.reshape((b, c, h * w))?)?.reshape((b, c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::scalar;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        rng::gaussian(&mut rng::stream(seed, &[]), shape, DType::F64).unwrap()
    }

    fn small() -> Hccm {
        let cfg = HccmConfig {
            channels: 4,
            chp_width: 8,
            heads: 1,
            ffn: true,
            groups: 4,
        };
        Hccm::new(cfg, 1, DType::F64).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    #[test]
    fn constant_image_is_one_hot() {
        let img = Tensor::full(0.0f64, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let h = vals(&soft_histogram(&img).unwrap());
        for c in 0..3 {
            assert_eq!(h[c * BINS], 1.0);
            assert!(h[c * BINS + 1..(c + 1) * BINS].iter().all(|v| *v == 0.0));
        }
        let half = Tensor::full(0.5f64 / 255.0, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let h = vals(&soft_histogram(&half).unwrap());
        assert!((h[0] - 0.5).abs() < 1e-12 && (h[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn histogram_is_permutation_invariant_and_matches_direct() {
        let img = randn(&[1, 3, 6, 5], 3).affine(0.3, 0.5).unwrap();
        let flipped = img.flip(&[2, 3]).unwrap();
        let a = vals(&soft_histogram(&img).unwrap());
        let b = vals(&soft_histogram(&flipped).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        let rgb = RgbImage::from_tensor(&img.get(0).unwrap().to_dtype(DType::F32).unwrap()).unwrap();
        let direct = vals(&image_histogram(&rgb).unwrap());
        let via = vals(&soft_histogram(&rgb.to_tensor(DType::F64).unwrap()).unwrap());
        assert!(direct.iter().zip(&via).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn ccl_examples() {
        assert_eq!(
            scalar(&ccl_loss(&randn(&[2, 3, 256], 1), &randn(&[2, 3, 256], 1)).unwrap()).unwrap(),
            0.0
        );
        let mut a = vec![0.0; 3 * BINS];
        let mut b = vec![0.0; 3 * BINS];
        for c in 0..3 {
            a[c * BINS] = 1.0;
            b[c * BINS + 1] = 1.0;
        }
        let a = Tensor::from_vec(a, (1, 3, BINS), &Device::Cpu).unwrap();
        let b = Tensor::from_vec(b, (1, 3, BINS), &Device::Cpu).unwrap();
        let l = scalar(&ccl_loss(&a, &b).unwrap()).unwrap();
        assert!((l - (6.0f64 / 768.0).sqrt()).abs() < 1e-15);
        let zero = Tensor::new(0.0f64, &Device::Cpu).unwrap();
        let fea = Tensor::new(0.25f64, &Device::Cpu).unwrap();
        assert_eq!(scalar(&hccm_loss(&fea, &zero, 0.0).unwrap()).unwrap(), 0.25);
    }

    #[test]
    fn chp_rows_are_distributions_and_need_raw() {
        let m = small();
        let f = LatentFeature::new(randn(&[2, 4, 8, 8], 2), Modality::Raw).unwrap();
        let h = m.chp_forward(&f).unwrap();
        assert_eq!(h.dims(), &[2, 3, BINS]);
        for row in vals(&h).chunks(BINS) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
        let g = LatentFeature::new(randn(&[2, 4, 8, 8], 2), Modality::Gray).unwrap();
        assert!(matches!(m.chp_forward(&g), Err(Error::Config { .. })));
    }

    #[test]
    fn one_by_one_mixing_is_matrix_vector() {
        let mv = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], (1, 2, 2), &Device::Cpu).unwrap();
        let u = Tensor::from_vec(vec![5.0, 6.0], (1, 2, 1, 1), &Device::Cpu).unwrap();
        assert_eq!(vals(&apply_mixing(&mv, &u).unwrap()), vec![17.0, 39.0]);
        let err = apply_mixing(&mv, &randn(&[1, 3, 2, 2], 1)).unwrap_err();
        assert!(
            err.to_string().contains("[1, 2, 2]") && err.to_string().contains("[1, 3, 2, 2]"),
            "{err}"
        );
    }

    #[test]
    fn untrained_mixing_is_identity() {
        let m = small();
        let hist = softmax_last(&randn(&[1, 3, BINS], 4)).unwrap();
        let mat = vals(&m.mixing_matrix(&hist).unwrap());
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((mat[i * 4 + j] - expect).abs() < 0.5);
            }
        }
    }

    #[test]
    fn attention_rows_and_degenerate_cases() {
        let m = small();
        let fc = randn(&[1, 4, 3, 3], 1);
        let g = randn(&[1, 4, 3, 3], 2);
        let w = m.attention_weights(&fc, &g).unwrap();
        assert_eq!(w.dims(), &[1, 1, 9, 9]);
        for row in vals(&w).chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.colorize(&fc, &g).unwrap().dims(), g.dims());

        // One location: the output is the projected value of that location.
        let fc1 = randn(&[1, 4, 1, 1], 3);
        let g1 = randn(&[1, 4, 1, 1], 4);
        let out = m.colorize(&fc1, &g1).unwrap();
        let tok = g1.reshape((1, 1, 4)).unwrap();
        let expect = m.attn.o.forward(&m.attn.v.forward(&tok).unwrap()).unwrap();
        let d: f64 = vals(&out)
            .iter()
            .zip(vals(&expect))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-12);

        // Identical keys everywhere: uniform weights.
        let flat = Tensor::ones((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let w = vals(&m.attention_weights(&randn(&[1, 4, 2, 2], 5), &flat).unwrap());
        assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-12));

        assert!(matches!(
            m.colorize(&fc, &randn(&[1, 4, 3, 2], 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn heads_must_divide_channels() {
        let cfg = HccmConfig {
            channels: 6,
            heads: 4,
            ..HccmConfig::default()
        };
        assert!(matches!(Hccm::new(cfg, 0, DType::F32), Err(Error::Config { .. })));
    }

    #[test]
    fn forward_shapes() {
        let m = small();
        let f = LatentFeature::new(randn(&[2, 4, 8, 8], 2), Modality::Raw).unwrap();
        let out = m.forward(&f, &randn(&[2, 4, 8, 8], 3)).unwrap();
        assert_eq!(out.srgb.dims(), &[2, 4, 8, 8]);
        assert_eq!(out.color.dims(), &[2, 4, 8, 8]);
    }
}
