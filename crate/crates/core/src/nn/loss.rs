use candle_core::Tensor;

use super::ops;
use crate::error::{Error, Result};

fn check(a: &Tensor, b: &Tensor, what: &str) -> Result<usize> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    match a.dims().first() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(Error::Shape(format!("{what}: empty batch {:?}", a.dims()))),
    }
}

/// Per-item root-mean-square difference, averaged over the leading (batch) axis.
///
/// A constant difference `d` everywhere gives `|d|`; an exact match gives zero
/// with zero gradients.
pub fn mean_l2(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = check(a, b, "l2 operands")?;
    let diff = (a - b)?;
    let mut total: Option<Tensor> = None;
    for i in 0..n {
        let r = ops::rms(&diff.get(i)?)?;
        total = Some(match total {
            Some(t) => (t + r)?,
            None => r,
        });
    }
    Ok((total.expect("non-empty batch") / n as f64)?)
}

/// Mean absolute difference over all elements.
pub fn mean_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check(a, b, "l1 operands")?;
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
