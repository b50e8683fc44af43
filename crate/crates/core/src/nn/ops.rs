//! Hand-written kernels registered as custom autograd ops.
//!
//! The stock CPU convolution in candle routes its backward pass through
//! transposed convolutions that are an order of magnitude slower than a plain
//! im2col + GEMM formulation on a single core, which dominates training time.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType};
use gemm::Parallelism;

fn contiguous_slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom kernels require contiguous inputs"),
    }
}

/// Row-major `dst (m×n) = [dst +] lhs (m×k) · rhs (k×n)` where each operand may
/// be a transposed view, described by its (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn matmul_into<T: 'static + WithDType>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    lhs: &[T],
    lhs_strides: (isize, isize),
    rhs: &[T],
    rhs_strides: (isize, isize),
) {
    debug_assert!(dst.len() >= m * n);
    // SAFETY: all slices are large enough for the given dimensions and strides,
    // and `dst` does not alias either input.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_strides.1,
            lhs_strides.0,
            rhs.as_ptr(),
            rhs_strides.1,
            rhs_strides.0,
            T::one(),
            T::one(),
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

/// `(rows, cols)` row-major → `(cols, rows)` row-major.
fn transpose<T: WithDType>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 16;
    assert!(src.len() >= rows * cols && dst.len() >= rows * cols);
    for r0 in (0..rows).step_by(B) {
        let r1 = (r0 + B).min(rows);
        for c0 in (0..cols).step_by(B) {
            let c1 = (c0 + B).min(cols);
            for r in r0..r1 {
                for c in c0..c1 {
                    // SAFETY: r < rows and c < cols, both buffers checked above.
                    unsafe { *dst.get_unchecked_mut(c * rows + r) = *src.get_unchecked(r * cols + c) };
                }
            }
        }
    }
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (&[batch, c_in, h, wd], &[c_out, wc_in, kh, kw]) = (x, w) else {
            candle_core::bail!("conv2d expects 4-d input and weight, got {x:?} and {w:?}")
        };
        if wc_in != c_in {
            candle_core::bail!("conv2d channel mismatch: input {c_in}, weight {wc_in}")
        }
        if stride == 0 {
            candle_core::bail!("conv2d stride must be positive")
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            candle_core::bail!("conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}")
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    /// Calls `f(row_offset, Some(pixel_offset))` for every in-bounds tap and
    /// `f(row_offset, None)` for taps in the zero padding. The im2row buffer is
    /// `(out positions) × (kh·kw·c_in)` and the image is channels-last, so each
    /// tap covers a contiguous run of `c_in` values.
    #[inline(always)]
    fn for_each_tap(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let k = self.patch_len();
        for oy in 0..self.h_out {
            for ki in 0..self.kh {
                let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                let row_ok = iy >= 0 && iy < self.h as isize;
                for ox in 0..self.w_out {
                    let base = (oy * self.w_out + ox) * k + ki * self.kw * self.c_in;
                    for kj in 0..self.kw {
                        let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                        let src = if row_ok && ix >= 0 && ix < self.w as isize {
                            Some((iy as usize * self.w + ix as usize) * self.c_in)
                        } else {
                            None
                        };
                        f(base + kj * self.c_in, src);
                    }
                }
            }
        }
    }

    fn im2row<T: WithDType>(&self, hwc: &[T], rows: &mut [T]) {
        let c = self.c_in;
        self.for_each_tap(|r, p| match p {
            Some(p) => rows[r..r + c].copy_from_slice(&hwc[p..p + c]),
            None => rows[r..r + c].fill(T::zero()),
        });
    }

    fn row2im<T: WithDType>(&self, rows: &[T], hwc: &mut [T]) {
        let c = self.c_in;
        self.for_each_tap(|r, p| {
            if let Some(p) = p {
                for (d, s) in hwc[p..p + c].iter_mut().zip(&rows[r..r + c]) {
                    *d += *s;
                }
            }
        });
    }

    /// OIHW weight → `(c_out, kh·kw·c_in)` in tap-major order.
    fn weight_rows<T: WithDType>(&self, w: &[T]) -> Vec<T> {
        let taps = self.kh * self.kw;
        let mut out = vec![T::zero(); w.len()];
        for o in 0..self.c_out {
            for c in 0..self.c_in {
                for t in 0..taps {
                    out[(o * taps + t) * self.c_in + c] = w[(o * self.c_in + c) * taps + t];
                }
            }
        }
        out
    }

    fn weight_from_rows<T: WithDType>(&self, rows: &[T]) -> Vec<T> {
        let taps = self.kh * self.kw;
        let mut out = vec![T::zero(); rows.len()];
        for o in 0..self.c_out {
            for c in 0..self.c_in {
                for t in 0..taps {
                    out[(o * self.c_in + c) * taps + t] = rows[(o * taps + t) * self.c_in + c];
                }
            }
        }
        out
    }

    fn forward<T: WithDType>(&self, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
        let (k, n, m) = (self.patch_len(), self.out_len(), self.c_out);
        let in_len = self.in_len();
        let wr = self.weight_rows(w);
        let mut hwc = vec![T::zero(); in_len];
        let mut rows = vec![T::zero(); n * k];
        let mut out_t = vec![T::zero(); n * m];
        let mut out = vec![T::zero(); self.batch * m * n];
        for b in 0..self.batch {
            transpose(&x[b * in_len..(b + 1) * in_len], self.c_in, self.h * self.w, &mut hwc);
            self.im2row(&hwc, &mut rows);
            for chunk in out_t.chunks_mut(m) {
                chunk.copy_from_slice(bias);
            }
            // out_t (n×m) += rows (n×k) · wrᵀ (k×m)
            matmul_into(n, m, k, &mut out_t, true, &rows, (k as isize, 1), &wr, (1, k as isize));
            transpose(&out_t, n, m, &mut out[b * m * n..(b + 1) * m * n]);
        }
        out
    }

    /// Returns `(dx, dw, dbias)`.
    fn backward<T: WithDType>(&self, x: &[T], w: &[T], grad: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (k, n, m) = (self.patch_len(), self.out_len(), self.c_out);
        let in_len = self.in_len();
        let wr = self.weight_rows(w);
        let mut hwc = vec![T::zero(); in_len];
        let mut rows = vec![T::zero(); n * k];
        let mut drows = vec![T::zero(); n * k];
        let mut g_t = vec![T::zero(); n * m];
        let mut dx = vec![T::zero(); x.len()];
        let mut dwr = vec![T::zero(); w.len()];
        let mut db = vec![T::zero(); m];
        for b in 0..self.batch {
            let g = &grad[b * m * n..(b + 1) * m * n];
            for (o, chunk) in g.chunks(n).enumerate() {
                let mut acc = T::zero();
                for v in chunk {
                    acc += *v;
                }
                db[o] += acc;
            }
            transpose(&x[b * in_len..(b + 1) * in_len], self.c_in, self.h * self.w, &mut hwc);
            self.im2row(&hwc, &mut rows);
            // dW (m×k) += G (m×n) · rows (n×k)
            matmul_into(m, k, n, &mut dwr, b > 0, g, (n as isize, 1), &rows, (k as isize, 1));
            // drows (n×k) = Gᵀ (n×m) · W (m×k)
            transpose(g, m, n, &mut g_t);
            matmul_into(n, k, m, &mut drows, false, &g_t, (m as isize, 1), &wr, (k as isize, 1));
            hwc.fill(T::zero());
            self.row2im(&drows, &mut hwc);
            transpose(&hwc, self.h * self.w, self.c_in, &mut dx[b * in_len..(b + 1) * in_len]);
        }
        (dx, self.weight_from_rows(&dwr), db)
    }
}

/// 2-d cross-correlation plus per-channel bias, zero padding, NCHW input and
/// OIHW weight.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dOp {
    pub stride: usize,
    pub pad: usize,
}

impl CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = ConvGeometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        if l3.dims() != [g.c_out] {
            candle_core::bail!(
                "conv2d bias shape {:?} does not match {} output channels",
                l3.dims(),
                g.c_out
            )
        }
        let shape = Shape::from((g.batch, g.c_out, g.h_out, g.w_out));
        let storage = match (s1, s2, s3) {
            (CpuStorage::F32(_), CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(g.forward(
                contiguous_slice::<f32>(s1, l1)?,
                contiguous_slice::<f32>(s2, l2)?,
                contiguous_slice::<f32>(s3, l3)?,
            )),
            (CpuStorage::F64(_), CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(g.forward(
                contiguous_slice::<f64>(s1, l1)?,
                contiguous_slice::<f64>(s2, l2)?,
                contiguous_slice::<f64>(s3, l3)?,
            )),
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands only"),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = ConvGeometry::new(x.dims(), w.dims(), self.stride, self.pad)?;
        fn run<T: WithDType>(
            g: &ConvGeometry,
            x: &Tensor,
            w: &Tensor,
            b: &Tensor,
            grad: &Tensor,
        ) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
            let xs = x.flatten_all()?.to_vec1::<T>()?;
            let ws = w.flatten_all()?.to_vec1::<T>()?;
            let gs = grad.flatten_all()?.to_vec1::<T>()?;
            let (dx, dw, db) = g.backward(&xs, &ws, &gs);
            Ok((
                Tensor::from_vec(dx, x.shape(), x.device())?,
                Tensor::from_vec(dw, w.shape(), w.device())?,
                Tensor::from_vec(db, b.shape(), b.device())?,
            ))
        }
        let (dx, dw, db) = match x.dtype() {
            DType::F32 => run::<f32>(&g, x, w, b, grad)?,
            DType::F64 => run::<f64>(&g, x, w, b, grad)?,
            dt => candle_core::bail!("conv2d backward unsupported for {dt:?}"),
        };
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

/// `conv2d(x, w) + bias` through [`Conv2dOp`].
pub fn conv2d_bias(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(&w.contiguous()?, &bias.contiguous()?, Conv2dOp { stride, pad })
}

/// Bias-free [`conv2d_bias`].
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let bias = Tensor::zeros(w.dims()[0], w.dtype(), w.device())?;
    conv2d_bias(x, w, &bias, stride, pad)
}

/// Group normalization with per-channel affine, optionally followed by SiLU,
/// as one fused kernel. Inputs `(x, gamma, beta)` with `x` in NCHW.
#[derive(Debug, Clone, Copy)]
pub struct GroupNormOp {
    pub groups: usize,
    pub eps: f64,
    pub silu: bool,
}

struct GnDims {
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
}

impl GnDims {
    fn new(x: &[usize], groups: usize) -> candle_core::Result<Self> {
        let &[n, c, h, w] = x else {
            candle_core::bail!("group norm expects a 4-d input, got {x:?}")
        };
        if groups == 0 || c % groups != 0 {
            candle_core::bail!("{c} channels cannot be split into {groups} groups")
        }
        Ok(Self {
            n,
            c,
            hw: h * w,
            groups,
        })
    }

    fn group_len(&self) -> usize {
        self.c / self.groups * self.hw
    }

    /// `(mean, 1/σ)` for group `g` of sample `b`.
    fn stats<T: WithDType>(&self, x: &[T], b: usize, g: usize, eps: f64) -> (f64, f64) {
        let len = self.group_len();
        let start = (b * self.c) * self.hw + g * len;
        let s = &x[start..start + len];
        let mean = s.iter().map(|v| v.to_f64()).sum::<f64>() / len as f64;
        let var = s.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / len as f64;
        (mean, 1.0 / (var + eps).sqrt())
    }
}

fn sigmoid64(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl GroupNormOp {
    fn forward<T: WithDType>(&self, d: &GnDims, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        let per = d.c / d.groups;
        for b in 0..d.n {
            for g in 0..d.groups {
                let (mean, inv) = d.stats(x, b, g, self.eps);
                for ch in g * per..(g + 1) * per {
                    let (ga, be) = (gamma[ch].to_f64(), beta[ch].to_f64());
                    let off = (b * d.c + ch) * d.hw;
                    for i in off..off + d.hw {
                        let z = (x[i].to_f64() - mean) * inv * ga + be;
                        out[i] = T::from_f64(if self.silu { z * sigmoid64(z) } else { z });
                    }
                }
            }
        }
        out
    }

    fn backward<T: WithDType>(
        &self,
        d: &GnDims,
        x: &[T],
        gamma: &[T],
        beta: &[T],
        grad: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let per = d.c / d.groups;
        let len = d.group_len() as f64;
        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![0.0f64; d.c];
        let mut dbeta = vec![0.0f64; d.c];
        let mut xhat = vec![0.0f64; d.group_len()];
        let mut dxhat = vec![0.0f64; d.group_len()];
        for b in 0..d.n {
            for g in 0..d.groups {
                let (mean, inv) = d.stats(x, b, g, self.eps);
                let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                for (k, ch) in (g * per..(g + 1) * per).enumerate() {
                    let (ga, be) = (gamma[ch].to_f64(), beta[ch].to_f64());
                    let off = (b * d.c + ch) * d.hw;
                    for i in 0..d.hw {
                        let xh = (x[off + i].to_f64() - mean) * inv;
                        let mut dz = grad[off + i].to_f64();
                        if self.silu {
                            let z = xh * ga + be;
                            let s = sigmoid64(z);
                            dz *= s * (1.0 + z * (1.0 - s));
                        }
                        dgamma[ch] += dz * xh;
                        dbeta[ch] += dz;
                        let dxh = dz * ga;
                        xhat[k * d.hw + i] = xh;
                        dxhat[k * d.hw + i] = dxh;
                        sum_d += dxh;
                        sum_dx += dxh * xh;
                    }
                }
                let (mean_d, mean_dx) = (sum_d / len, sum_dx / len);
                let start = (b * d.c) * d.hw + g * d.group_len();
                for j in 0..d.group_len() {
                    dx[start + j] = T::from_f64(inv * (dxhat[j] - mean_d - xhat[j] * mean_dx));
                }
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
        (dx, cast(dgamma), cast(dbeta))
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = GnDims::new(l1.dims(), self.groups)?;
        if l2.dims() != [d.c] || l3.dims() != [d.c] {
            candle_core::bail!("group norm affine parameters must have shape [{}]", d.c)
        }
        let storage = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.forward(
                &d,
                contiguous_slice::<f32>(s1, l1)?,
                contiguous_slice::<f32>(s2, l2)?,
                contiguous_slice::<f32>(s3, l3)?,
            )),
            CpuStorage::F64(_) => CpuStorage::F64(self.forward(
                &d,
                contiguous_slice::<f64>(s1, l1)?,
                contiguous_slice::<f64>(s2, l2)?,
                contiguous_slice::<f64>(s3, l3)?,
            )),
            _ => candle_core::bail!("group norm supports f32 or f64 only"),
        };
        Ok((storage, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = GnDims::new(x.dims(), self.groups)?;
        fn run<T: WithDType>(
            op: &GroupNormOp,
            d: &GnDims,
            x: &Tensor,
            gamma: &Tensor,
            beta: &Tensor,
            grad: &Tensor,
        ) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
            let (dx, dg, db) = op.backward(
                d,
                &x.flatten_all()?.to_vec1::<T>()?,
                &gamma.to_vec1::<T>()?,
                &beta.to_vec1::<T>()?,
                &grad.flatten_all()?.to_vec1::<T>()?,
            );
            Ok((
                Tensor::from_vec(dx, x.shape(), x.device())?,
                Tensor::from_vec(dg, gamma.shape(), x.device())?,
                Tensor::from_vec(db, beta.shape(), x.device())?,
            ))
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => run::<f32>(self, &d, x, gamma, beta, grad)?,
            DType::F64 => run::<f64>(self, &d, x, gamma, beta, grad)?,
            dt => candle_core::bail!("group norm backward unsupported for {dt:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, silu: bool) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(
        &gamma.contiguous()?,
        &beta.contiguous()?,
        GroupNormOp {
            groups,
            eps: 1e-5,
            silu,
        },
    )
}

/// Nearest-neighbour 2× upsampling (`up`) or its 2×2 average-pool adjoint
/// (`!up`) over the last two axes of an NCHW tensor.
#[derive(Debug, Clone, Copy)]
pub struct Resample2x {
    pub up: bool,
}

fn upsample_slice<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize, scale: T) -> Vec<T> {
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        for y in 0..h {
            let src = &x[(p * h + y) * w..(p * h + y + 1) * w];
            let r0 = (p * 2 * h + 2 * y) * 2 * w;
            for (i, v) in src.iter().enumerate() {
                let v = *v * scale;
                out[r0 + 2 * i] = v;
                out[r0 + 2 * i + 1] = v;
                out[r0 + 2 * w + 2 * i] = v;
                out[r0 + 2 * w + 2 * i + 1] = v;
            }
        }
    }
    out
}

/// Sums each 2×2 block of an `(planes, 2h, 2w)` buffer, times `scale`.
fn block_sum_slice<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize, scale: T) -> Vec<T> {
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            let r0 = (p * 2 * h + 2 * y) * 2 * w;
            for i in 0..w {
                let s = x[r0 + 2 * i] + x[r0 + 2 * i + 1] + x[r0 + 2 * w + 2 * i] + x[r0 + 2 * w + 2 * i + 1];
                out[(p * h + y) * w + i] = s * scale;
            }
        }
    }
    out
}

impl Resample2x {
    /// `(planes, h, w)` of the low-resolution side.
    fn low_dims(&self, dims: &[usize]) -> candle_core::Result<(usize, usize, usize, Vec<usize>)> {
        let &[n, c, h, w] = dims else {
            candle_core::bail!("resampling expects a 4-d input, got {dims:?}")
        };
        if self.up {
            Ok((n * c, h, w, vec![n, c, 2 * h, 2 * w]))
        } else {
            if h % 2 != 0 || w % 2 != 0 {
                candle_core::bail!("2x pooling needs even spatial dims, got {h}x{w}")
            }
            Ok((n * c, h / 2, w / 2, vec![n, c, h / 2, w / 2]))
        }
    }
}

impl CustomOp1 for Resample2x {
    fn name(&self) -> &'static str {
        if self.up {
            "upsample2x"
        } else {
            "avgpool2x"
        }
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (p, h, w, out) = self.low_dims(l.dims())?;
        let storage = match s {
            CpuStorage::F32(_) => {
                let x = contiguous_slice::<f32>(s, l)?;
                CpuStorage::F32(if self.up {
                    upsample_slice(x, p, h, w, 1.0)
                } else {
                    block_sum_slice(x, p, h, w, 0.25)
                })
            }
            CpuStorage::F64(_) => {
                let x = contiguous_slice::<f64>(s, l)?;
                CpuStorage::F64(if self.up {
                    upsample_slice(x, p, h, w, 1.0)
                } else {
                    block_sum_slice(x, p, h, w, 0.25)
                })
            }
            _ => candle_core::bail!("resampling supports f32 or f64 only"),
        };
        Ok((storage, Shape::from(out)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (p, h, w, _) = self.low_dims(arg.dims())?;
        let g = grad.contiguous()?;
        let out = match g.dtype() {
            DType::F32 => {
                let v = g.flatten_all()?.to_vec1::<f32>()?;
                let r = if self.up {
                    block_sum_slice(&v, p, h, w, 1.0)
                } else {
                    upsample_slice(&v, p, h, w, 0.25)
                };
                Tensor::from_vec(r, arg.shape(), arg.device())?
            }
            DType::F64 => {
                let v = g.flatten_all()?.to_vec1::<f64>()?;
                let r = if self.up {
                    block_sum_slice(&v, p, h, w, 1.0)
                } else {
                    upsample_slice(&v, p, h, w, 0.25)
                };
                Tensor::from_vec(r, arg.shape(), arg.device())?
            }
            dt => candle_core::bail!("resampling backward unsupported for {dt:?}"),
        };
        Ok(Some(out))
    }
}

pub fn upsample2x(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Resample2x { up: true })
}

pub fn avg_pool2x(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Resample2x { up: false })
}

/// Root-mean-square of all elements, `sqrt(mean(x²))`, as a scalar tensor.
///
/// The subgradient at an all-zero input is taken to be zero, so a perfectly
/// matched pair yields an exact zero loss with finite gradients.
#[derive(Debug, Clone, Copy)]
pub struct RootMeanSquare;

impl CustomOp1 for RootMeanSquare {
    fn name(&self) -> &'static str {
        "root-mean-square"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn rms<T: WithDType>(v: &[T]) -> T {
            let n = v.len().max(1) as f64;
            let ss: f64 = v.iter().map(|x| x.to_f64() * x.to_f64()).sum();
            T::from_f64((ss / n).sqrt())
        }
        let storage = match s {
            CpuStorage::F32(_) => CpuStorage::F32(vec![rms(contiguous_slice::<f32>(s, l)?)]),
            CpuStorage::F64(_) => CpuStorage::F64(vec![rms(contiguous_slice::<f64>(s, l)?)]),
            _ => candle_core::bail!("rms supports f32 or f64 only"),
        };
        Ok((storage, Shape::from(())))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let r = res.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if r == 0.0 {
            return Ok(Some(arg.zeros_like()?));
        }
        let n = arg.elem_count() as f64;
        let scaled = arg.affine(1.0 / (n * r), 0.0)?;
        Ok(Some(scaled.broadcast_mul(grad)?))
    }
}

/// `sqrt(mean(x²))` through [`RootMeanSquare`].
pub fn rms(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(RootMeanSquare)
}
