//! Pixel-wise softmax cross-entropy.

use super::{Real, Result, Tensor, TensorError};
use crate::labels::ClassMap;

#[derive(Clone, Debug)]
pub struct SoftmaxCe<F> {
    /// Summed over every scored pixel.
    pub loss: F,
    pub grad: Tensor<F>,
    /// Number of pixels that contributed.
    pub scored: usize,
}

/// Cross-entropy of per-pixel softmax over `logits` (`[C,H,W]`) against
/// `target`, summed over pixels. Pixels labelled `ignore` contribute neither
/// loss nor gradient.
pub fn softmax_ce<F: Real>(logits: &Tensor<F>, target: &ClassMap, ignore: Option<u8>) -> Result<SoftmaxCe<F>> {
    let (classes, h, w) = match *logits.shape() {
        [c, h, w] if h == target.height() && w == target.width() && c > 0 => (c, h, w),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_ce",
                expected: format!("[C, {}, {}]", target.height(), target.width()),
                got: logits.shape().to_vec(),
            })
        }
    };
    let plane = h * w;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = F::zero();
    let mut scored = 0;
    let z = logits.data();
    let mut probs = vec![F::zero(); classes];
    for (p, &label) in target.data().iter().enumerate() {
        if Some(label) == ignore {
            continue;
        }
        if label as usize >= classes {
            return Err(TensorError::ClassOutOfRange { class: label, classes });
        }
        let max = (0..classes).map(|c| z[c * plane + p]).fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for (c, pr) in probs.iter_mut().enumerate() {
            *pr = (z[c * plane + p] - max).exp();
            denom += *pr;
        }
        let target_logit = z[label as usize * plane + p] - max;
        loss += denom.ln() - target_logit;
        let g = grad.data_mut();
        for (c, pr) in probs.iter().enumerate() {
            g[c * plane + p] = *pr / denom;
        }
        g[label as usize * plane + p] -= F::one();
        scored += 1;
    }
    Ok(SoftmaxCe { loss, grad, scored })
}
