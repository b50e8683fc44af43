use candle_core::Tensor;

use super::ops;
use super::params::{Init, ParamBuilder};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(b: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = b.get(
            "weight",
            &[c_out, c_in, kernel, kernel],
            Init::FanIn { fan_in, gain: 1.0 },
        )?;
        let bias = b.get("bias", &[c_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        })
    }

    /// Like [`Conv2d::new`] with all weights starting at zero.
    pub fn zeroed(b: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let weight = b.get("weight", &[c_out, c_in, kernel, kernel], Init::Zeros)?;
        let bias = b.get("bias", &[c_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            pad: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::conv2d_bias(x, &self.weight, &self.bias, self.stride, self.pad)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = b.get(
            "weight",
            &[d_out, d_in],
            Init::FanIn {
                fan_in: d_in,
                gain: 1.0,
            },
        )?;
        let bias = if bias {
            Some(b.get("bias", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Linear layer with explicit initial weight and bias values.
    pub fn with_init(b: &mut ParamBuilder<'_>, d_in: usize, d_out: usize, weight: Init, bias: Init) -> Result<Self> {
        let weight = b.get("weight", &[d_out, d_in], weight)?;
        let bias = Some(b.get("bias", &[d_out], bias)?);
        Ok(Self { weight, bias })
    }

    /// Applies the map along the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(b: &mut ParamBuilder<'_>, channels: usize, groups: usize) -> Result<Self> {
        let groups = largest_divisor_at_most(channels, groups);
        Ok(Self {
            gamma: b.get("gamma", &[channels], Init::Ones)?,
            beta: b.get("beta", &[channels], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::group_norm(x, &self.gamma, &self.beta, self.groups, false)?)
    }

    /// `silu(norm(x))` as one fused kernel.
    pub fn forward_silu(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::group_norm(x, &self.gamma, &self.beta, self.groups, true)?)
    }
}

/// 1-d convolution over `(B, C, L)` with zero "same" padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl Conv1d {
    pub fn new(b: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let fan_in = c_in * kernel;
        Ok(Self {
            weight: b.get("weight", &[c_out, c_in * kernel], Init::FanIn { fan_in, gain: 1.0 })?,
            bias: b.get("bias", &[c_out], Init::Zeros)?,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, len) = x.dims3()?;
        let half = self.kernel / 2;
        let padded = x.pad_with_zeros(2, half, self.kernel - 1 - half)?;
        // Rows ordered (channel, tap) to match the weight layout.
        let taps: Vec<Tensor> = (0..self.kernel)
            .map(|k| padded.narrow(2, k, len))
            .collect::<candle_core::Result<_>>()?;
        let (n, c, _) = x.dims3()?;
        let cols = Tensor::stack(&taps, 2)?.reshape((n, c * self.kernel, len))?;
        let y = self.weight.broadcast_matmul(&cols)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n).max(1))
        .rev()
        .find(|d| n.is_multiple_of(*d))
        .unwrap_or(1)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(ops::upsample2x(x)?)
}

pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    Ok(ops::avg_pool2x(x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    #[test]
    fn upsample_repeats_each_pixel() {
        let x = Tensor::new(&[[[[1f32, 2.], [3., 4.]]]], &Device::Cpu).unwrap();
        let y = upsample2x(&x).unwrap().squeeze(0).unwrap().squeeze(0).unwrap();
        let rows = y.to_vec2::<f32>().unwrap();
        assert_eq!(rows[0], vec![1., 1., 2., 2.]);
        assert_eq!(rows[3], vec![3., 3., 4., 4.]);
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let gn = GroupNorm::new(&mut b, 4, 2).unwrap();
        let x = Tensor::arange(0f64, 64., &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 4, 4))
            .unwrap();
        let y = gn.forward(&x).unwrap();
        let g = y.reshape((2, 32)).unwrap();
        let means = g.mean(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(means.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let conv = Conv1d::new(&mut b, 2, 3, 3).unwrap();
        let x = Tensor::arange(0f64, 10., &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 5))
            .unwrap();
        let y = conv.forward(&x).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let w = conv.weight.to_vec2::<f64>().unwrap();
        let xs = x.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for o in 0..3 {
            for p in 0..5 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for k in 0..3 {
                        let i = p as isize + k as isize - 1;
                        if (0..5).contains(&i) {
                            acc += w[o][c * 3 + k] * xs[c][i as usize];
                        }
                    }
                }
                assert!((acc - y[o][p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn divisor_helper() {
        assert_eq!(largest_divisor_at_most(12, 8), 6);
        assert_eq!(largest_divisor_at_most(7, 4), 1);
        assert_eq!(largest_divisor_at_most(16, 8), 8);
    }
}
