//! Shared-backbone latent encoder/decoder over RAW, grayscale and sRGB images.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{avg_pool2x, sigmoid, upsample2x, Conv2d, GroupNorm};
use crate::nn::loss::mean_l2;
use crate::nn::{ParamBuilder, ParamStore};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Raw,
    Gray,
    Srgb,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Raw, Modality::Gray, Modality::Srgb];

    /// Image channels as seen by the codec (the RAW mosaic is one plane).
    pub fn channels(self) -> usize {
        match self {
            Modality::Raw | Modality::Gray => 1,
            Modality::Srgb => 3,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Raw => "raw",
            Modality::Gray => "gray",
            Modality::Srgb => "srgb",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Modality::Raw),
            "gray" => Ok(Modality::Gray),
            "srgb" => Ok(Modality::Srgb),
            other => Err(Error::config(
                "modality",
                format!("unknown tag {other:?} (expected raw, gray or srgb)"),
            )),
        }
    }
}

/// A batch of latent features `(B, c, H/2^k, W/2^k)` tagged with the modality
/// it was encoded from.
#[derive(Debug, Clone)]
pub struct LatentFeature {
    values: Tensor,
    modality: Modality,
}

impl LatentFeature {
    pub fn new(values: Tensor, modality: Modality) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::Shape(format!(
                "latent feature must be (B, c, h, w), got {:?}",
                values.dims()
            )));
        }
        Ok(Self { values, modality })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    /// `(h, w)` of the latent grid.
    pub fn spatial(&self) -> (usize, usize) {
        let d = self.values.dims();
        (d[2], d[3])
    }

    pub fn detach(&self) -> Self {
        Self {
            values: self.values.detach(),
            modality: self.modality,
        }
    }
}

/// Fails with a [`Error::NonFinite`] naming `context` if `t` holds NaN or Inf.
pub fn ensure_finite(t: &Tensor, context: &str) -> Result<()> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: context.to_string(),
            detail: format!("element {i} is {x}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Number of stride-2 blocks `k`.
    pub scale: usize,
    /// Latent channels `c`.
    pub channels: usize,
    /// Feed the RAW head a half-resolution 4-plane RGGB packing.
    pub pack_raw: bool,
    pub groups: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            channels: 64,
            pack_raw: false,
            groups: 8,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.scale > 6 {
            return Err(Error::config("downsample", format!("{} must be in 1..=6", self.scale)));
        }
        if self.channels == 0 {
            return Err(Error::config("latent_channels", "must be positive"));
        }
        if self.groups == 0 {
            return Err(Error::config("norm_groups", "must be positive"));
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        1 << self.scale
    }
}

#[derive(Debug, Clone)]
struct ResDown {
    conv1: Conv2d,
    norm: GroupNorm,
    conv2: Conv2d,
}

impl ResDown {
    fn new(b: &mut ParamBuilder<'_>, c: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut b.pp("conv1"), c, c, 3, 2)?,
            norm: GroupNorm::new(&mut b.pp("norm"), c, groups)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), c, c, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?;
        let h = self.conv2.forward(&self.norm.forward_silu(&h)?)?;
        Ok((avg_pool2x(x)? + h)?)
    }
}

#[derive(Debug, Clone)]
struct ResUp {
    conv1: Conv2d,
    norm: GroupNorm,
    conv2: Conv2d,
}

impl ResUp {
    fn new(b: &mut ParamBuilder<'_>, c: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut b.pp("conv1"), c, c, 3, 1)?,
            norm: GroupNorm::new(&mut b.pp("norm"), c, groups)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), c, c, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let up = upsample2x(x)?;
        let h = self.conv1.forward(&up)?;
        let h = self.conv2.forward(&self.norm.forward_silu(&h)?)?;
        Ok((up + h)?)
    }
}

/// `(B, 1, H, W)` RGGB mosaic → `(B, 4, H/2, W/2)` planes `[R, G1, G2, B]`.
pub fn pack_mosaic(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c != 1 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot pack mosaic of shape {:?}", x.dims())));
    }
    Ok(x.reshape((n, h / 2, 2, w / 2, 2))?
        .permute((0, 2, 4, 1, 3))?
        .reshape((n, 4, h / 2, w / 2))?)
}

/// Inverse of [`pack_mosaic`].
pub fn unpack_mosaic(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c != 4 {
        return Err(Error::Shape(format!("cannot unpack {:?} into a mosaic", x.dims())));
    }
    Ok(x.reshape((n, 2, 2, h, w))?
        .permute((0, 3, 1, 4, 2))?
        .reshape((n, 1, 2 * h, 2 * w))?)
}

#[derive(Debug, Clone)]
struct Head {
    input: Conv2d,
    out_norm: GroupNorm,
    output: Conv2d,
}

/// Encoder/decoder pair with one residual backbone and a small input and
/// output head per modality.
#[derive(Debug, Clone)]
pub struct Codec {
    config: CodecConfig,
    params: ParamStore,
    heads: [Head; 3],
    down: Vec<ResDown>,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    dec_in: Conv2d,
    up: Vec<ResUp>,
}

fn head_index(m: Modality) -> usize {
    match m {
        Modality::Raw => 0,
        Modality::Gray => 1,
        Modality::Srgb => 2,
    }
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut stream = rng::stream(seed, &[0xC0DEC]);
        let mut b = ParamBuilder::new(&mut params, &mut stream);
        let c = config.channels;
        let g = config.groups;
        let mut heads = Vec::with_capacity(3);
        for m in Modality::ALL {
            let mut hb = b.pp(format!("head.{m}"));
            let c_in = if m == Modality::Raw && config.pack_raw {
                4
            } else {
                m.channels()
            };
            heads.push(Head {
                input: Conv2d::new(&mut hb.pp("in"), c_in, c, 3, 1)?,
                out_norm: GroupNorm::new(&mut hb.pp("out_norm"), c, g)?,
                output: if m == Modality::Raw && config.pack_raw {
                    Conv2d::new(&mut hb.pp("out"), c, 4, 3, 2)?
                } else {
                    Conv2d::new(&mut hb.pp("out"), c, m.channels(), 3, 1)?
                },
            });
        }
        let down = (0..config.scale)
            .map(|i| ResDown::new(&mut b.pp(format!("enc.down{i}")), c, g))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = GroupNorm::new(&mut b.pp("enc.norm"), c, g)?;
        let enc_out = Conv2d::new(&mut b.pp("enc.out"), c, c, 3, 1)?;
        let dec_in = Conv2d::new(&mut b.pp("dec.in"), c, c, 3, 1)?;
        let up = (0..config.scale)
            .map(|i| ResUp::new(&mut b.pp(format!("dec.up{i}")), c, g))
            .collect::<Result<Vec<_>>>()?;
        let heads: [Head; 3] = heads.try_into().expect("three heads");
        Ok(Self {
            config,
            params,
            heads,
            down,
            enc_norm,
            enc_out,
            dec_in,
            up,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Encodes `(B, ch, H, W)` images of one modality.
    pub fn encode(&self, img: &Tensor, modality: Modality) -> Result<LatentFeature> {
        let (_, ch, h, w) = img
            .dims4()
            .map_err(|_| Error::Shape(format!("{modality} image must be (B, ch, H, W), got {:?}", img.dims())))?;
        if ch != modality.channels() {
            return Err(Error::Shape(format!(
                "{modality} image needs {} channel(s), got {ch}",
                modality.channels()
            )));
        }
        let f = self.config.factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} input is not divisible by 2^{} = {f}",
                self.config.scale
            )));
        }
        let head = &self.heads[head_index(modality)];
        let x = img.to_dtype(self.dtype())?;
        let mut x = if modality == Modality::Raw && self.config.pack_raw {
            upsample2x(&head.input.forward(&pack_mosaic(&x)?)?)?
        } else {
            head.input.forward(&x)?
        };
        for block in &self.down {
            x = block.forward(&x)?;
        }
        let z = self.enc_out.forward(&self.enc_norm.forward_silu(&x)?)?;
        LatentFeature::new(z, modality)
    }

    /// Decodes latent features into `(B, ch, H, W)` images in `[0, 1]` for
    /// the requested modality.
    pub fn decode(&self, feat: &Tensor, modality: Modality) -> Result<Tensor> {
        let (_, c, _, _) = feat
            .dims4()
            .map_err(|_| Error::Shape(format!("latent must be (B, c, h, w), got {:?}", feat.dims())))?;
        if c != self.config.channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, codec expects {}",
                self.config.channels
            )));
        }
        let mut x = self.dec_in.forward(feat)?;
        for block in &self.up {
            x = block.forward(&x)?;
        }
        let head = &self.heads[head_index(modality)];
        let y = head.output.forward(&head.out_norm.forward_silu(&x)?)?;
        if modality == Modality::Raw && self.config.pack_raw {
            sigmoid(&unpack_mosaic(&y)?)
        } else {
            sigmoid(&y)
        }
    }

    /// [`Codec::decode`] with the modality given as a text tag.
    pub fn decode_tagged(&self, feat: &Tensor, tag: &str) -> Result<Tensor> {
        self.decode(feat, tag.parse()?)
    }

    pub fn reconstruct(&self, img: &Tensor, modality: Modality) -> Result<Tensor> {
        self.decode(self.encode(img, modality)?.values(), modality)
    }

    /// Mean per-image L2 reconstruction error over every image in `batch`.
    pub fn stage1_loss(&self, batch: &[(Tensor, Modality)]) -> Result<Stage1Loss> {
        let total_items: usize = batch.iter().map(|(t, _)| t.dims().first().copied().unwrap_or(0)).sum();
        if total_items == 0 {
            return Err(Error::Shape("stage-1 loss needs a nonempty batch".into()));
        }
        let mut total: Option<Tensor> = None;
        let mut parts = Vec::with_capacity(batch.len());
        for (img, m) in batch {
            let img = img.to_dtype(self.dtype())?;
            let rec = self.reconstruct(&img, *m)?;
            let l = mean_l2(&rec, &img)?;
            let n = img.dims()[0] as f64;
            parts.push((*m, l.to_dtype(DType::F64)?.to_scalar::<f64>()?));
            let weighted = (l * (n / total_items as f64))?;
            total = Some(match total {
                Some(t) => (t + weighted)?,
                None => weighted,
            });
        }
        Ok(Stage1Loss {
            total: total.expect("nonempty"),
            parts,
        })
    }
}

/// Stage-1 objective with the per-modality terms kept for logging.
#[derive(Debug)]
pub struct Stage1Loss {
    pub total: Tensor,
    pub parts: Vec<(Modality, f64)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn small(pack_raw: bool) -> Codec {
        Codec::new(
            CodecConfig {
                scale: 2,
                channels: 8,
                pack_raw,
                groups: 4,
            },
            1,
            DType::F32,
        )
        .unwrap()
    }

    fn image(ch: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let t = rng::gaussian(&mut rng::stream(seed, &[]), &[1, ch, h, w], DType::F32).unwrap();
        sigmoid(&t).unwrap()
    }

    #[test]
    fn shape_contract_all_modalities() {
        for pack in [false, true] {
            let codec = small(pack);
            for m in Modality::ALL {
                let x = image(m.channels(), 32, 48, 3);
                let z = codec.encode(&x, m).unwrap();
                assert_eq!(z.values().dims(), &[1, 8, 8, 12]);
                let y = codec.decode(z.values(), m).unwrap();
                assert_eq!(y.dims(), x.dims());
                let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn gray_256_gives_64() {
        let codec = small(false);
        let z = codec.encode(&image(1, 256, 256, 0), Modality::Gray).unwrap();
        assert_eq!(z.spatial(), (64, 64));
    }

    #[test]
    fn indivisible_input_names_divisibility() {
        let err = small(false).encode(&image(1, 30, 32, 0), Modality::Gray).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("divisible by 2^2 = 4"), "{err}");
    }

    #[test]
    fn unknown_tag_is_config_error() {
        let codec = small(false);
        let z = codec.encode(&image(1, 16, 16, 0), Modality::Gray).unwrap();
        assert!(matches!(
            codec.decode_tagged(z.values(), "lab"),
            Err(Error::Config { .. })
        ));
        assert_eq!(codec.decode_tagged(z.values(), "srgb").unwrap().dims(), &[1, 3, 16, 16]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let codec = small(false);
        let x = image(3, 16, 16, 9);
        let a = codec
            .encode(&x, Modality::Srgb)
            .unwrap()
            .into_values()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let b = codec
            .encode(&x, Modality::Srgb)
            .unwrap()
            .into_values()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(a, b);
        let other = small(false);
        assert_eq!(codec.params().snapshot().unwrap(), other.params().snapshot().unwrap());
    }

    #[test]
    fn packing_matches_plane_order() {
        let x = Tensor::arange(0f32, 16., &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 4, 4))
            .unwrap();
        let p = pack_mosaic(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        // R plane: (0,0),(2,0),(0,2),(2,2); G1 starts at (1,0).
        assert_eq!(&p[0..4], &[0., 2., 8., 10.]);
        assert_eq!(&p[4..8], &[1., 3., 9., 11.]);
        assert_eq!(&p[8..12], &[4., 6., 12., 14.]);
        let back = unpack_mosaic(&pack_mosaic(&x).unwrap()).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn stage1_loss_is_nonnegative_and_order_free() {
        let codec = small(false);
        let a = (image(1, 16, 16, 1), Modality::Gray);
        let b = (image(3, 16, 16, 2), Modality::Srgb);
        let l1 = codec.stage1_loss(&[a.clone(), b.clone()]).unwrap();
        let l2 = codec.stage1_loss(&[b, a]).unwrap();
        let v1 = l1.total.to_scalar::<f32>().unwrap();
        let v2 = l2.total.to_scalar::<f32>().unwrap();
        assert!(v1 > 0.0);
        assert!((v1 - v2).abs() < 1e-6);
        assert!(codec.stage1_loss(&[]).is_err());
    }
}
