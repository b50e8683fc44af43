//! Texture-aware conditional diffusion over grayscale latents.
//!
//! A small U-Net estimates the noise in a grayscale latent given the RAW
//! latent as a channel-concatenated condition. Training combines an L2
//! content term on the recovered clean latent with an L1 term on smoothed
//! gradient-magnitude maps.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::ensure_finite;
use crate::error::{Error, Result};
use crate::nn::layers::{upsample2x, Conv2d, GroupNorm, Linear};
use crate::nn::loss::{mean_l1, mean_l2, scalar};
use crate::nn::{ParamBuilder, ParamStore};
use crate::rng;
use crate::schedule::{
    ddim_step, estimate_x0_batch, q_sample_batch, NoiseSchedule, SamplerConfig, ScheduleFingerprint,
};

/// Anything that can estimate the noise in `x_t` given the RAW condition.
pub trait NoiseEstimator {
    /// `x_t` and `cond` are `(B, c, h, w)`; `ts` holds one timestep per item.
    fn predict_noise(&self, x_t: &Tensor, cond: &Tensor, ts: &[usize]) -> Result<Tensor>;
}

/// What the network output is trained to represent. Both are exposed to the
/// sampler as a noise estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionTarget {
    /// The network output is the noise itself.
    Noise,
    /// The network output is the clean latent; the noise estimate is the
    /// value implied by it at the given timestep.
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Latent channels `c` of both the noisy input and the condition.
    pub channels: usize,
    /// Feature width at the finest level.
    pub width: usize,
    /// Resolution levels; the latent grid must be divisible by `2^(levels-1)`.
    pub levels: usize,
    pub groups: usize,
    pub target: PredictionTarget,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            width: 64,
            levels: 2,
            groups: 8,
            target: PredictionTarget::Clean,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("latent_channels", "must be positive"));
        }
        if self.width < 2 || !self.width.is_multiple_of(2) {
            return Err(Error::config(
                "predictor_width",
                format!("{} must be even and at least 2", self.width),
            ));
        }
        if !(1..=4).contains(&self.levels) {
            return Err(Error::config(
                "predictor_levels",
                format!("{} must be in 1..=4", self.levels),
            ));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), 2 * half), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct TimeResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl TimeResBlock {
    fn new(b: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, t_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut b.pp("norm1"), c_in, groups)?,
            conv1: Conv2d::new(&mut b.pp("conv1"), c_in, c_out, 3, 1)?,
            time: Linear::new(&mut b.pp("time"), t_dim, c_out, true)?,
            norm2: GroupNorm::new(&mut b.pp("norm2"), c_out, groups)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&mut b.pp("skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward_silu(x)?)?;
        let t = self.time.forward(temb)?;
        let (b, c) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward_silu(&h)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Multi-scale encoder–decoder noise estimator with skip connections.
#[derive(Debug, Clone)]
pub struct NoisePredictor {
    config: PredictorConfig,
    params: ParamStore,
    alpha_bars: Vec<f64>,
    fingerprint: ScheduleFingerprint,
    time1: Linear,
    time2: Linear,
    input: Conv2d,
    down_blocks: Vec<TimeResBlock>,
    downsample: Vec<Conv2d>,
    mid: TimeResBlock,
    upsample: Vec<Conv2d>,
    up_blocks: Vec<TimeResBlock>,
    out_norm: GroupNorm,
    output: Conv2d,
}

impl NoisePredictor {
    pub fn new(config: PredictorConfig, schedule: &NoiseSchedule, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut stream = rng::stream(seed, &[0x7AD]);
        let mut b = ParamBuilder::new(&mut params, &mut stream);
        let (c, w, g) = (config.channels, config.width, config.groups);
        let t_dim = 2 * w;
        let width_at = |l: usize| w << l;
        let time1 = Linear::new(&mut b.pp("time.fc1"), w, t_dim, true)?;
        let time2 = Linear::new(&mut b.pp("time.fc2"), t_dim, t_dim, true)?;
        let input = Conv2d::new(&mut b.pp("input"), 2 * c, w, 3, 1)?;
        let mut down_blocks = Vec::new();
        let mut downsample = Vec::new();
        for l in 0..config.levels - 1 {
            down_blocks.push(TimeResBlock::new(
                &mut b.pp(format!("down{l}")),
                width_at(l),
                width_at(l),
                t_dim,
                g,
            )?);
            downsample.push(Conv2d::new(
                &mut b.pp(format!("down{l}.resample")),
                width_at(l),
                width_at(l + 1),
                3,
                2,
            )?);
        }
        let deepest = width_at(config.levels - 1);
        let mid = TimeResBlock::new(&mut b.pp("mid"), deepest, deepest, t_dim, g)?;
        let mut upsample = Vec::new();
        let mut up_blocks = Vec::new();
        for l in (0..config.levels - 1).rev() {
            upsample.push(Conv2d::new(
                &mut b.pp(format!("up{l}.resample")),
                width_at(l + 1),
                width_at(l),
                3,
                1,
            )?);
            up_blocks.push(TimeResBlock::new(
                &mut b.pp(format!("up{l}")),
                2 * width_at(l),
                width_at(l),
                t_dim,
                g,
            )?);
        }
        let out_norm = GroupNorm::new(&mut b.pp("out_norm"), w, g)?;
        let output = Conv2d::zeroed(&mut b.pp("output"), w, c, 3)?;
        Ok(Self {
            config,
            params,
            alpha_bars: schedule.alpha_bars().to_vec(),
            fingerprint: schedule.fingerprint(),
            time1,
            time2,
            input,
            down_blocks,
            downsample,
            mid,
            upsample,
            up_blocks,
            out_norm,
            output,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn schedule_fingerprint(&self) -> &ScheduleFingerprint {
        &self.fingerprint
    }

    fn check_inputs(&self, x_t: &Tensor, cond: &Tensor, ts: &[usize]) -> Result<()> {
        if x_t.dims() != cond.dims() {
            return Err(Error::Shape(format!(
                "noisy input {:?} and condition {:?} differ",
                x_t.dims(),
                cond.dims()
            )));
        }
        let (b, c, h, w) = x_t
            .dims4()
            .map_err(|_| Error::Shape(format!("latent must be (B, c, h, w), got {:?}", x_t.dims())))?;
        if c != self.config.channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, predictor expects {}",
                self.config.channels
            )));
        }
        if ts.len() != b {
            return Err(Error::Shape(format!("{} timesteps for a batch of {b}", ts.len())));
        }
        if let Some(&t) = ts.iter().find(|&&t| t >= self.alpha_bars.len()) {
            return Err(Error::Index {
                index: t,
                bound: self.alpha_bars.len(),
            });
        }
        let f = 1 << (self.config.levels - 1);
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("latent grid {h}x{w} is not divisible by {f}")));
        }
        Ok(())
    }

    /// Raw network output for the configured [`PredictionTarget`].
    pub fn network(&self, x_t: &Tensor, cond: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.check_inputs(x_t, cond, ts)?;
        let dtype = self.params.dtype();
        let temb = timestep_embedding(ts, self.config.width, dtype)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?.silu()?;
        let x = Tensor::cat(&[&x_t.to_dtype(dtype)?, &cond.to_dtype(dtype)?], 1)?;
        let mut h = self.input.forward(&x)?;
        let mut skips = Vec::new();
        for (block, down) in self.down_blocks.iter().zip(&self.downsample) {
            h = block.forward(&h, &temb)?;
            skips.push(h.clone());
            h = down.forward(&h)?;
        }
        h = self.mid.forward(&h, &temb)?;
        for (up, block) in self.upsample.iter().zip(&self.up_blocks) {
            h = up.forward(&upsample2x(&h)?)?;
            let skip = skips.pop().expect("one skip per level");
            h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
        }
        self.output.forward(&self.out_norm.forward_silu(&h)?)
    }
}

impl NoiseEstimator for NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, cond: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let out = self.network(x_t, cond, ts)?;
        match self.config.target {
            PredictionTarget::Noise => Ok(out),
            PredictionTarget::Clean => {
                let x_t = x_t.to_dtype(out.dtype())?;
                let a: Vec<f64> = ts.iter().map(|&t| self.alpha_bars[t].sqrt()).collect();
                let s: Vec<f64> = ts.iter().map(|&t| 1.0 / (1.0 - self.alpha_bars[t]).sqrt()).collect();
                let col = |v: Vec<f64>| -> Result<Tensor> {
                    Ok(Tensor::from_vec(v, (ts.len(), 1, 1, 1), &Device::Cpu)?.to_dtype(out.dtype())?)
                };
                let implied = (x_t - out.broadcast_mul(&col(a)?)?)?.broadcast_mul(&col(s)?)?;
                Ok(implied)
            }
        }
    }
}

const GAUSS_SIGMA: f64 = 1.0;
/// Smoothing term inside the gradient magnitude.
pub const MAGNITUDE_EPS: f64 = 1e-8;

/// Normalized 5-tap Gaussian with σ = 1.
pub fn gaussian_taps() -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-d * d / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Correlates `x` with `taps` along `dim` using edge replication.
fn filter_axis(x: &Tensor, dim: usize, taps: &[f64]) -> Result<Tensor> {
    let half = taps.len() / 2;
    let len = x.dims()[dim];
    let padded = x.pad_with_same(dim, half, half)?;
    let mut acc: Option<Tensor> = None;
    for (i, &w) in taps.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let term = padded.narrow(dim, i, len)?.affine(w, 0.0)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one nonzero tap"))
}

/// Smoothed gradient magnitude of each channel, averaged over channels:
/// `(B, c, h, w)` → `(B, 1, h, w)`.
///
/// Each channel is blurred with a 5×5 Gaussian (σ = 1), differentiated with
/// the 3×3 Sobel pair and reduced to `sqrt(gx² + gy² + eps²)`. Borders use
/// edge replication.
pub fn texture_map(feat: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = feat
        .dims4()
        .map_err(|_| Error::Shape(format!("texture map needs (B, c, h, w), got {:?}", feat.dims())))?;
    if h < 5 || w < 5 {
        return Err(Error::Shape(format!(
            "texture map needs at least 5x5 spatial extent, got {h}x{w}"
        )));
    }
    let g = gaussian_taps();
    let blurred = filter_axis(&filter_axis(feat, 3, &g)?, 2, &g)?;
    let gx = filter_axis(&filter_axis(&blurred, 3, &[-1.0, 0.0, 1.0])?, 2, &[1.0, 2.0, 1.0])?;
    let gy = filter_axis(&filter_axis(&blurred, 2, &[-1.0, 0.0, 1.0])?, 3, &[1.0, 2.0, 1.0])?;
    let mag = ((gx.sqr()? + gy.sqr()?)? + MAGNITUDE_EPS * MAGNITUDE_EPS)?.sqrt()?;
    Ok(mag.mean_keepdim(1)?)
}

/// Mean absolute difference between two texture maps.
pub fn texture_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    mean_l1(a, b)
}

/// L1 distance between the texture maps of two features.
pub fn tel_loss(f_hat: &Tensor, f_ref: &Tensor) -> Result<Tensor> {
    if f_hat.dims() != f_ref.dims() {
        return Err(Error::Shape(format!(
            "texture loss: {:?} vs {:?}",
            f_hat.dims(),
            f_ref.dims()
        )));
    }
    texture_l1(&texture_map(f_hat)?, &texture_map(f_ref)?)
}

/// Mean per-item L2 distance between the recovered and true clean latents.
pub fn con_loss(x0_hat: &Tensor, x0: &Tensor) -> Result<Tensor> {
    mean_l2(x0_hat, x0)
}

/// One stochastic evaluation of the diffusion objective.
#[derive(Debug)]
pub struct DiffusionLoss {
    pub total: Tensor,
    pub con: f64,
    pub tel: f64,
    pub timesteps: Vec<usize>,
    /// Clean-latent estimate, still attached to the predictor's graph.
    pub x0_hat: Tensor,
}

/// Draws `t` and `ε` per item, noises `f_g`, recovers `x̂0` through the
/// predicted noise and returns `L_con + λ1·L_tel`.
pub fn diffusion_loss(
    f_g: &Tensor,
    f_r: &Tensor,
    sched: &NoiseSchedule,
    predictor: &dyn NoiseEstimator,
    lambda_tel: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DiffusionLoss> {
    if lambda_tel < 0.0 || !lambda_tel.is_finite() {
        return Err(Error::config(
            "lambda_tel",
            format!("{lambda_tel} must be a finite value >= 0"),
        ));
    }
    let b = f_g.dims().first().copied().unwrap_or(0);
    let timesteps: Vec<usize> = (0..b).map(|_| rng.random_range(0..sched.steps())).collect();
    let eps = rng::gaussian(rng, f_g.dims(), f_g.dtype())?;
    let x_t = q_sample_batch(f_g, &timesteps, &eps, sched)?;
    let eps_hat = predictor.predict_noise(&x_t, f_r, &timesteps)?;
    let x0_hat = estimate_x0_batch(&x_t, &eps_hat.to_dtype(x_t.dtype())?, &timesteps, sched)?;
    let con_t = con_loss(&x0_hat, f_g)?;
    let tel_t = tel_loss(&x0_hat, f_g)?;
    let (con, tel) = (scalar(&con_t)?, scalar(&tel_t)?);
    if !con.is_finite() || !tel.is_finite() {
        return Err(Error::NonFinite {
            context: format!("diffusion loss at t={timesteps:?}"),
            detail: format!("con={con} tel={tel}"),
        });
    }
    let total = if lambda_tel == 0.0 {
        con_t
    } else {
        (con_t + (tel_t * lambda_tel)?)?
    };
    Ok(DiffusionLoss {
        total,
        con,
        tel,
        timesteps,
        x0_hat,
    })
}

/// [`diffusion_loss`] followed by backpropagation.
pub fn diffusion_train_step(
    f_g: &Tensor,
    f_r: &Tensor,
    sched: &NoiseSchedule,
    predictor: &dyn NoiseEstimator,
    lambda_tel: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(DiffusionLoss, GradStore)> {
    let loss = diffusion_loss(&f_g.detach(), &f_r.detach(), sched, predictor, lambda_tel, rng)?;
    let grads = loss.total.backward()?;
    Ok((loss, grads))
}

/// Runs the implicit sampler from seeded Gaussian noise shaped like `f_r`.
pub fn sample(
    f_r: &Tensor,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    predictor: &dyn NoiseEstimator,
    seed: u64,
) -> Result<Tensor> {
    if cfg.timesteps().last().copied() != Some(sched.steps() - 1) {
        return Err(Error::config(
            "sampling_steps",
            format!(
                "sampler covers {:?} but the schedule has {} steps",
                cfg.timesteps().last(),
                sched.steps()
            ),
        ));
    }
    let mut stream = rng::stream(seed, &[0x5A4D]);
    let cond = f_r.detach();
    let b = cond.dims().first().copied().unwrap_or(0);
    let mut x = rng::gaussian(&mut stream, cond.dims(), cond.dtype())?;
    for (i, (t, prev)) in cfg.transitions().into_iter().enumerate() {
        let eps = predictor
            .predict_noise(&x, &cond, &vec![t; b])?
            .to_dtype(x.dtype())?
            .detach();
        let noise = if cfg.eta() > 0.0 {
            Some(rng::gaussian(&mut stream, cond.dims(), cond.dtype())?)
        } else {
            None
        };
        x = ddim_step(&x, &eps, t, prev, sched, cfg, noise.as_ref())?.detach();
        ensure_finite(&x, &format!("sampler step {i} (t={t})"))?;
    }
    Ok(x)
}

/// Builds a predictor-free [`NoiseEstimator`] from a closure; handy for
/// plugging analytic estimators into the sampler.
pub struct FnEstimator<F>(pub F);

impl<F> NoiseEstimator for FnEstimator<F>
where
    F: Fn(&Tensor, &Tensor, &[usize]) -> Result<Tensor>,
{
    fn predict_noise(&self, x_t: &Tensor, cond: &Tensor, ts: &[usize]) -> Result<Tensor> {
        (self.0)(x_t, cond, ts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{estimate_x0, implied_noise};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap()
    }

    fn predictor(target: PredictionTarget) -> NoisePredictor {
        let cfg = PredictorConfig {
            channels: 4,
            width: 8,
            levels: 2,
            groups: 4,
            target,
        };
        NoisePredictor::new(cfg, &sched(), 3, DType::F32).unwrap()
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        rng::gaussian(&mut rng::stream(seed, &[]), shape, DType::F32).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    /// Gives the network non-trivial output weights so outputs depend on inputs.
    fn perturb(p: &NoisePredictor) {
        for (name, var) in p.params().iter() {
            if name.starts_with("output") {
                let noise = randn(var.dims(), 11).affine(0.1, 0.0).unwrap();
                var.set(&noise).unwrap();
            }
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        for target in [PredictionTarget::Noise, PredictionTarget::Clean] {
            let p = predictor(target);
            perturb(&p);
            let x = randn(&[2, 4, 8, 8], 1);
            let c = randn(&[2, 4, 8, 8], 2);
            let a = p.predict_noise(&x, &c, &[5, 700]).unwrap();
            let b = p.predict_noise(&x, &c, &[5, 700]).unwrap();
            assert_eq!(a.dims(), x.dims());
            assert_eq!(max_abs(&a, &b), 0.0);
        }
    }

    #[test]
    fn condition_is_wired() {
        let p = predictor(PredictionTarget::Noise);
        perturb(&p);
        let x = randn(&[1, 4, 8, 8], 1);
        let c = randn(&[1, 4, 8, 8], 2);
        let c2 = (&c + randn(&[1, 4, 8, 8], 3).affine(0.5, 0.0).unwrap()).unwrap();
        let a = p.predict_noise(&x, &c, &[10]).unwrap();
        let b = p.predict_noise(&x, &c2, &[10]).unwrap();
        assert!(max_abs(&a, &b) > 0.0);
    }

    #[test]
    fn input_errors() {
        let p = predictor(PredictionTarget::Noise);
        let x = randn(&[1, 4, 8, 8], 1);
        assert!(matches!(
            p.predict_noise(&x, &randn(&[1, 4, 8, 6], 1), &[0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(p.predict_noise(&x, &x, &[1000]), Err(Error::Index { .. })));
        assert!(matches!(p.predict_noise(&x, &x, &[0, 1]), Err(Error::Shape(_))));
        let odd = randn(&[1, 4, 7, 7], 1);
        assert!(matches!(p.predict_noise(&odd, &odd, &[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn clean_target_round_trips_through_x0() {
        let p = predictor(PredictionTarget::Clean);
        perturb(&p);
        let x = randn(&[1, 4, 8, 8], 1);
        let c = randn(&[1, 4, 8, 8], 2);
        let out = p.network(&x, &c, &[400]).unwrap();
        let eps = p.predict_noise(&x, &c, &[400]).unwrap();
        let x0 = estimate_x0(&x, &eps, 400, &sched()).unwrap();
        assert!(max_abs(&x0, &out) < 1e-4);
    }

    #[test]
    fn texture_of_constant_and_shift() {
        let flat = Tensor::full(0.3f64, (1, 2, 8, 8), &Device::Cpu).unwrap();
        let m = texture_map(&flat).unwrap();
        assert_eq!(m.dims(), &[1, 1, 8, 8]);
        let v = m.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| (*x - MAGNITUDE_EPS).abs() < 1e-15));
        let f = rng::gaussian(&mut rng::stream(1, &[]), &[1, 2, 8, 8], DType::F64).unwrap();
        let a = texture_map(&f).unwrap();
        let b = texture_map(&(&f + 4.0).unwrap()).unwrap();
        assert!(max_abs(&a, &b) < 1e-12);
        assert!(texture_map(&Tensor::zeros((1, 1, 4, 8), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn losses_examples() {
        let a = rng::gaussian(&mut rng::stream(1, &[]), &[2, 2, 8, 8], DType::F64).unwrap();
        let b = rng::gaussian(&mut rng::stream(2, &[]), &[2, 2, 8, 8], DType::F64).unwrap();
        assert_eq!(scalar(&tel_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let ab = scalar(&tel_loss(&a, &b).unwrap()).unwrap();
        let ba = scalar(&tel_loss(&b, &a).unwrap()).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        let ones = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!((scalar(&con_loss(&ones, &(&ones + 2.0).unwrap()).unwrap()).unwrap() - 2.0).abs() < 1e-12);
        let l = scalar(&con_loss(&a, &b).unwrap()).unwrap();
        let l3 = scalar(&con_loss(&(&a * -3.0).unwrap(), &(&b * -3.0).unwrap()).unwrap()).unwrap();
        assert!((l3 - 3.0 * l).abs() < 1e-12);
        assert!(matches!(tel_loss(&a, &ones), Err(Error::Shape(_))));
    }

    #[test]
    fn hand_built_texture_maps() {
        let base = Tensor::zeros((1, 1, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let mut v = vec![0.0; 256];
        for i in [3, 70, 140, 255] {
            v[i] = 0.5;
        }
        let other = Tensor::from_vec(v, (1, 1, 16, 16), &Device::Cpu).unwrap();
        let l = scalar(&texture_l1(&base, &other).unwrap()).unwrap();
        assert!((l - 0.0078125).abs() < 1e-15);
    }

    #[test]
    fn oracle_estimator_zero_loss_and_lambda_zero() {
        let s = sched();
        let f_g = randn(&[2, 4, 8, 8], 1).to_dtype(DType::F64).unwrap();
        let f_r = randn(&[2, 4, 8, 8], 2).to_dtype(DType::F64).unwrap();
        let target = f_g.clone();
        let sc = s.clone();
        let oracle = FnEstimator(move |x_t: &Tensor, _: &Tensor, ts: &[usize]| {
            let items = (0..ts.len())
                .map(|i| implied_noise(&x_t.get(i)?, &target.get(i)?, ts[i], &sc))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&items, 0)?)
        });
        let l = diffusion_loss(&f_g, &f_r, &s, &oracle, 0.01, &mut rng::stream(4, &[])).unwrap();
        assert!(l.con < 1e-10 && l.tel < 1e-10, "{} {}", l.con, l.tel);

        let p = predictor(PredictionTarget::Noise);
        let f_g = f_g.to_dtype(DType::F32).unwrap();
        let f_r = f_r.to_dtype(DType::F32).unwrap();
        let a = diffusion_loss(&f_g, &f_r, &s, &p, 0.0, &mut rng::stream(9, &[])).unwrap();
        assert_eq!(scalar(&a.total).unwrap(), a.con);
        let b = diffusion_loss(&f_g, &f_r, &s, &p, 0.0, &mut rng::stream(9, &[])).unwrap();
        assert_eq!(a.timesteps, b.timesteps);
        assert_eq!(a.con, b.con);
    }

    #[test]
    fn sampler_is_seeded_and_single_step_collapses() {
        let s = sched();
        let p = predictor(PredictionTarget::Noise);
        perturb(&p);
        let f_r = randn(&[1, 4, 8, 8], 2);
        let cfg = SamplerConfig::uniform(1000, 5, 0.0).unwrap();
        let a = sample(&f_r, &s, &cfg, &p, 7).unwrap();
        let b = sample(&f_r, &s, &cfg, &p, 7).unwrap();
        assert_eq!(max_abs(&a, &b), 0.0);
        assert!(max_abs(&a, &sample(&f_r, &s, &cfg, &p, 8).unwrap()) > 0.0);

        let one = SamplerConfig::uniform(1000, 1, 0.0).unwrap();
        let out = sample(&f_r, &s, &one, &p, 7).unwrap();
        let start = rng::gaussian(&mut rng::stream(7, &[0x5A4D]), f_r.dims(), DType::F32).unwrap();
        let eps = p.predict_noise(&start, &f_r, &[999]).unwrap();
        let expect = estimate_x0(&start, &eps, 999, &s).unwrap();
        assert!(max_abs(&out, &expect) < 1e-5);
    }
}
