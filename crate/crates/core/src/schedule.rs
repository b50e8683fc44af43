//! Closed-form diffusion arithmetic: the variance schedule, forward noising,
//! clean-signal recovery and the implicit (DDIM) update.
//!
//! Timesteps are 0-based, `t ∈ [0, T)`. The cumulative product before the
//! first step is defined as 1, i.e. the clean signal.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest `ᾱ_t` for which [`estimate_x0`] will divide by `√ᾱ_t`.
pub const ALPHA_BAR_FLOOR: f64 = 1e-8;

/// Identifies the schedule a predictor was trained against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFingerprint {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl std::fmt::Display for ScheduleFingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "T={} beta=[{:e}, {:e}]", self.steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed per-step variances and their cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` entries.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("timesteps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::config("beta_start", format!("{beta_start} not in (0, 1)")));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::config(
                "beta_end",
                format!("{beta_end} not in [beta_start={beta_start}, 1)"),
            ));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + span * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("betas", "schedule must have at least one step"));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config("betas", format!("beta[{i}] = {b} not in (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let posterior_vars = (0..betas.len())
            .map(|t| {
                let prev = if t == 0 { 1.0 } else { alpha_bars[t - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[t]) * betas[t]
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_vars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            Err(Error::Index {
                index: t,
                bound: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t])
    }

    /// `ᾱ` at `prev`, where [`Prev::Clean`] maps to 1.
    pub fn alpha_bar_at(&self, prev: Prev) -> Result<f64> {
        match prev {
            Prev::Clean => Ok(1.0),
            Prev::Step(t) => self.alpha_bar(t),
        }
    }

    pub fn fingerprint(&self) -> ScheduleFingerprint {
        ScheduleFingerprint {
            steps: self.steps(),
            beta_start: self.betas[0],
            beta_end: *self.betas.last().unwrap(),
        }
    }
}

/// `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`, with `ᾱ_{−1} = 1`.
pub fn posterior_variance(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check(t)?;
    Ok(sched.posterior_vars[t])
}

/// Target of an implicit update: an earlier timestep or the clean signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prev {
    Step(usize),
    Clean,
}

/// Per-item coefficient column `(B, 1, ..., 1)` broadcastable against `like`.
fn per_item(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank().saturating_sub(1)));
    Ok(Tensor::from_vec(values.to_vec(), shape, &Device::Cpu)?.to_dtype(like.dtype())?)
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε` for a single timestep.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x0, eps, "q_sample noise")?;
    let ab = sched.alpha_bar(t)?;
    Ok((x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// [`q_sample`] with one timestep per leading-axis item.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x0, eps, "q_sample noise")?;
    check_batch(x0, ts)?;
    let ab = ts.iter().map(|&t| sched.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
    let a = per_item(&ab.iter().map(|v| v.sqrt()).collect::<Vec<_>>(), x0)?;
    let s = per_item(&ab.iter().map(|v| (1.0 - v).sqrt()).collect::<Vec<_>>(), x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

fn check_batch(x: &Tensor, ts: &[usize]) -> Result<()> {
    let b = x.dims().first().copied().unwrap_or(0);
    if b != ts.len() {
        return Err(Error::Shape(format!("{} timesteps for a batch of {b}", ts.len())));
    }
    Ok(())
}

fn checked_alpha_bar(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    let ab = sched.alpha_bar(t)?;
    if ab < ALPHA_BAR_FLOOR {
        return Err(Error::Degenerate(format!(
            "alpha_bar[{t}] = {ab:e} is below the floor {ALPHA_BAR_FLOOR:e}"
        )));
    }
    Ok(ab)
}

/// `x̂0 = (x_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t`.
pub fn estimate_x0(x_t: &Tensor, eps_pred: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x_t, eps_pred, "estimate_x0 noise")?;
    let ab = checked_alpha_bar(t, sched)?;
    let inv = 1.0 / ab.sqrt();
    Ok((x_t.affine(inv, 0.0)? - eps_pred.affine((1.0 - ab).sqrt() * inv, 0.0)?)?)
}

/// [`estimate_x0`] with one timestep per leading-axis item.
pub fn estimate_x0_batch(x_t: &Tensor, eps_pred: &Tensor, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x_t, eps_pred, "estimate_x0 noise")?;
    check_batch(x_t, ts)?;
    let ab = ts
        .iter()
        .map(|&t| checked_alpha_bar(t, sched))
        .collect::<Result<Vec<_>>>()?;
    let inv = per_item(&ab.iter().map(|v| 1.0 / v.sqrt()).collect::<Vec<_>>(), x_t)?;
    let s = per_item(&ab.iter().map(|v| (1.0 - v).sqrt() / v.sqrt()).collect::<Vec<_>>(), x_t)?;
    Ok((x_t.broadcast_mul(&inv)? - eps_pred.broadcast_mul(&s)?)?)
}

/// The noise that makes `x_t` consistent with a given clean signal:
/// `ε = (x_t − √ᾱ_t · x0) / √(1 − ᾱ_t)`.
pub fn implied_noise(x_t: &Tensor, x0: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x_t, x0, "implied_noise target")?;
    let ab = sched.alpha_bar(t)?;
    let denom = (1.0 - ab).sqrt();
    if denom < ALPHA_BAR_FLOOR {
        return Err(Error::Degenerate(format!(
            "1 - alpha_bar[{t}] = {:e} is too small",
            1.0 - ab
        )));
    }
    Ok(((x_t - x0.affine(ab.sqrt(), 0.0)?)? / denom)?)
}

/// Timesteps visited by the implicit sampler, in increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    timesteps: Vec<usize>,
    eta: f64,
}

impl SamplerConfig {
    /// `steps` evenly spaced timesteps over `[0, total)`, always ending at `total − 1`.
    pub fn uniform(total: usize, steps: usize, eta: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("sampling_steps", "must be at least 1"));
        }
        if steps > total {
            return Err(Error::config(
                "sampling_steps",
                format!("{steps} exceeds the {total} training timesteps"),
            ));
        }
        let timesteps = (1..=steps).map(|i| i * total / steps - 1).collect();
        Self::with_timesteps(timesteps, total, eta)
    }

    pub fn with_timesteps(timesteps: Vec<usize>, total: usize, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::config("eta", format!("{eta} not in [0, 1]")));
        }
        if timesteps.is_empty() || timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("timesteps", "must be non-empty and strictly increasing"));
        }
        if *timesteps.last().unwrap() != total - 1 {
            return Err(Error::config(
                "timesteps",
                format!("must end at the final step {}", total - 1),
            ));
        }
        Ok(Self { timesteps, eta })
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// `(t, prev)` pairs from the noisiest step down to the clean signal.
    pub fn transitions(&self) -> Vec<(usize, Prev)> {
        let ts = &self.timesteps;
        (0..ts.len())
            .rev()
            .map(|i| (ts[i], if i == 0 { Prev::Clean } else { Prev::Step(ts[i - 1]) }))
            .collect()
    }
}

/// One implicit update from `t` to `prev`.
///
/// With `eta = 0` the result is `√ᾱ_prev · x̂0 + √(1 − ᾱ_prev) · ε̂` and is a pure
/// function of its inputs. With `eta > 0` a fresh standard-normal `noise` of
/// the same shape must be supplied.
pub fn ddim_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    prev: Prev,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if let Prev::Step(p) = prev {
        if p >= t {
            return Err(Error::Ordering { t, t_prev: p });
        }
    }
    let x0 = estimate_x0(x_t, eps_pred, t, sched)?;
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar_at(prev)?;
    let sigma = if cfg.eta > 0.0 {
        cfg.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = (x0.affine(ab_prev.sqrt(), 0.0)? + eps_pred.affine(dir, 0.0)?)?;
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| Error::config("eta", "stochastic update needs a noise sample"))?;
        check_same_shape(x_t, z, "ddim noise")?;
        out = (out + z.affine(sigma, 0.0)?)?;
    }
    Ok(out)
}
