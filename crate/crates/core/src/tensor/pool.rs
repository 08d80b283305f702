//! 2x2 stride-2 max pooling.

use super::{expect_shape, Maps, Real, Result, Tensor, TensorError};

/// Argmax position (0..4, row-major within the window) of every pooled entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    shape: Vec<usize>,
    indices: Vec<u8>,
}

impl PoolIndices {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }
}

/// Ties resolve to the lowest window index.
pub fn maxpool2_forward<F: Real>(input: &Tensor<F>) -> Result<(Tensor<F>, PoolIndices)> {
    let maps = Maps::of("maxpool2", input.shape())?;
    let (h, w) = (maps.height, maps.width);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddSpatial {
            op: "maxpool2",
            height: h,
            width: w,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let planes = maps.frames() * maps.channels;
    let shape = maps.shape_with(maps.channels, oh, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut indices = Vec::with_capacity(planes * oh * ow);
    for plane in input.data().chunks_exact(h * w) {
        for y in 0..oh {
            for x in 0..ow {
                let base = 2 * y * w + 2 * x;
                let window = [plane[base], plane[base + 1], plane[base + w], plane[base + w + 1]];
                let mut best = 0u8;
                for i in 1..4u8 {
                    if window[i as usize] > window[best as usize] {
                        best = i;
                    }
                }
                out.push(window[best as usize]);
                indices.push(best);
            }
        }
    }
    Ok((
        Tensor::new(shape.clone(), out)?,
        PoolIndices { shape, indices },
    ))
}

/// Route each pooled cotangent back to the argmax of its window.
pub fn maxpool2_backward<F: Real>(grad_out: &Tensor<F>, indices: &PoolIndices) -> Result<Tensor<F>> {
    expect_shape("maxpool2 grad_out", grad_out, &indices.shape)?;
    let maps = Maps::of("maxpool2", &indices.shape)?;
    let (oh, ow) = (maps.height, maps.width);
    let w = 2 * ow;
    let mut grad = Tensor::zeros(&maps.shape_with(maps.channels, 2 * oh, w));
    let plane_in = 4 * oh * ow;
    for (p, (g, idx)) in grad_out
        .data()
        .chunks_exact(oh * ow)
        .zip(indices.indices.chunks_exact(oh * ow))
        .enumerate()
    {
        let dst = &mut grad.data_mut()[p * plane_in..(p + 1) * plane_in];
        for y in 0..oh {
            for x in 0..ow {
                let i = y * ow + x;
                let k = idx[i] as usize;
                dst[(2 * y + k / 2) * w + 2 * x + k % 2] += g[i];
            }
        }
    }
    Ok(grad)
}
