use super::Logits;
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Mean binary cross-entropy of logits against a binary target, and its
/// gradient with respect to the logits.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if logits.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let count = logits.data.len().max(1) as f64;
    let inv = T::of(1.0 / count);
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(logits.c, logits.n, logits.h, logits.w);
    for ((g, &x), &t) in grad.data.iter_mut().zip(&logits.data).zip(&target.data) {
        if t != T::zero() && t != T::one() {
            return Err(Error::InvalidAnnotation(format!("target value {t:?} is not binary")));
        }
        let xf = x.f64();
        let tf = t.f64();
        sum += xf.max(0.0) - xf * tf + (-xf.abs()).exp().ln_1p();
        let sig = if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        };
        *g = (sig - t) * inv;
    }
    Ok((sum / count, grad))
}

/// Sum of the visible-head and amodal-head BCE terms.
pub fn loss<T: Real>(logits: &Logits<T>, visible: &Tensor<T>, amodal: &Tensor<T>) -> Result<(f64, Logits<T>)> {
    let (lv, gv) = bce_with_logits(&logits.visible, visible)?;
    let (la, ga) = bce_with_logits(&logits.amodal, amodal)?;
    Ok((
        lv + la,
        Logits {
            visible: gv,
            amodal: ga,
        },
    ))
}
