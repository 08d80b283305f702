//! Channel concatenation for skip connections.

use super::{Maps, Real, Result, Tensor, TensorError};

/// Channels of `a` followed by channels of `b`, per frame.
pub fn concat_channels<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let ma = Maps::of("concat", a.shape())?;
    let mb = Maps::of("concat", b.shape())?;
    if (ma.batch, ma.height, ma.width) != (mb.batch, mb.height, mb.width) {
        return Err(TensorError::ShapeMismatch {
            op: "concat",
            expected: format!("spatial shape matching {:?}", a.shape()),
            got: b.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..ma.frames() {
        data.extend_from_slice(&a.data()[n * ma.frame_len()..(n + 1) * ma.frame_len()]);
        data.extend_from_slice(&b.data()[n * mb.frame_len()..(n + 1) * mb.frame_len()]);
    }
    Tensor::new(ma.shape_with(ma.channels + mb.channels, ma.height, ma.width), data)
}

/// Inverse of [`concat_channels`]: the first `first` channels and the rest.
pub fn split_channels<F: Real>(t: &Tensor<F>, first: usize) -> Result<(Tensor<F>, Tensor<F>)> {
    let m = Maps::of("split", t.shape())?;
    if first > m.channels {
        return Err(TensorError::ShapeMismatch {
            op: "split",
            expected: format!("at least {first} channels"),
            got: t.shape().to_vec(),
        });
    }
    let cut = first * m.plane();
    let mut a = Vec::with_capacity(m.frames() * cut);
    let mut b = Vec::with_capacity(t.len() - m.frames() * cut);
    for frame in t.data().chunks_exact(m.frame_len()) {
        a.extend_from_slice(&frame[..cut]);
        b.extend_from_slice(&frame[cut..]);
    }
    Ok((
        Tensor::new(m.shape_with(first, m.height, m.width), a)?,
        Tensor::new(m.shape_with(m.channels - first, m.height, m.width), b)?,
    ))
}
