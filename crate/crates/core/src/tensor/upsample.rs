//! Spatial 2x upsampling: learnable 2x2 stride-2 transposed convolution and
//! parameter-free nearest-neighbour repetition.

use super::{expect_shape, Maps, Real, Result, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct TConv2Grads<F> {
    pub input: Tensor<F>,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

fn tconv_geometry<F: Real>(input: &Tensor<F>, weight: &Tensor<F>) -> Result<(Maps, usize)> {
    let maps = Maps::of("tconv2", input.shape())?;
    match *weight.shape() {
        [c, o, 2, 2] if c == maps.channels => Ok((maps, o)),
        _ => Err(TensorError::ShapeMismatch {
            op: "tconv2",
            expected: format!("weight [{}, C_out, 2, 2]", maps.channels),
            got: weight.shape().to_vec(),
        }),
    }
}

/// `out[o, 2y+dy, 2x+dx] = bias[o] + sum_c weight[c, o, dy, dx] * input[c, y, x]`.
pub fn tconv2_forward<F: Real>(input: &Tensor<F>, weight: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let (maps, c_out) = tconv_geometry(input, weight)?;
    expect_shape("tconv2 bias", bias, &[c_out])?;
    let (h, w, plane) = (maps.height, maps.width, maps.plane());
    let taps = 4 * c_out;
    let mut out = Tensor::zeros(&maps.shape_with(c_out, 2 * h, 2 * w));
    let mut cols = vec![F::zero(); taps * plane];
    let out_frame = c_out * 4 * plane;
    for n in 0..maps.frames() {
        let x = &input.data()[n * maps.frame_len()..(n + 1) * maps.frame_len()];
        F::gemm(
            taps,
            maps.channels,
            plane,
            F::one(),
            weight.data(),
            (1, taps),
            x,
            (plane, 1),
            F::zero(),
            &mut cols,
            (plane, 1),
        );
        let dst = &mut out.data_mut()[n * out_frame..(n + 1) * out_frame];
        for o in 0..c_out {
            let b = bias.data()[o];
            for k in 0..4 {
                let (dy, dx) = (k / 2, k % 2);
                let src = &cols[(o * 4 + k) * plane..][..plane];
                for y in 0..h {
                    for xx in 0..w {
                        dst[(o * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx] = b + src[y * w + xx];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn tconv2_backward<F: Real>(
    grad_out: &Tensor<F>,
    input: Option<&Tensor<F>>,
    weight: &Tensor<F>,
) -> Result<TConv2Grads<F>> {
    let input = input.ok_or(TensorError::MissingContext("tconv2"))?;
    let (maps, c_out) = tconv_geometry(input, weight)?;
    let (h, w, plane) = (maps.height, maps.width, maps.plane());
    expect_shape("tconv2 grad_out", grad_out, &maps.shape_with(c_out, 2 * h, 2 * w))?;
    let taps = 4 * c_out;
    let out_frame = taps * plane;
    let mut gathered = vec![F::zero(); taps * plane];
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weight = Tensor::zeros(weight.shape());
    let mut grad_bias = Tensor::zeros(&[c_out]);
    for n in 0..maps.frames() {
        let g = &grad_out.data()[n * out_frame..(n + 1) * out_frame];
        for o in 0..c_out {
            let mut bsum = F::zero();
            for k in 0..4 {
                let (dy, dx) = (k / 2, k % 2);
                let dst = &mut gathered[(o * 4 + k) * plane..][..plane];
                for y in 0..h {
                    for x in 0..w {
                        let v = g[(o * 2 * h + 2 * y + dy) * 2 * w + 2 * x + dx];
                        dst[y * w + x] = v;
                        bsum += v;
                    }
                }
            }
            grad_bias.data_mut()[o] += bsum;
        }
        let x = &input.data()[n * maps.frame_len()..(n + 1) * maps.frame_len()];
        F::gemm(
            maps.channels,
            taps,
            plane,
            F::one(),
            weight.data(),
            (taps, 1),
            &gathered,
            (plane, 1),
            F::zero(),
            &mut grad_input.data_mut()[n * maps.frame_len()..(n + 1) * maps.frame_len()],
            (plane, 1),
        );
        F::gemm(
            maps.channels,
            plane,
            taps,
            F::one(),
            x,
            (plane, 1),
            &gathered,
            (1, plane),
            F::one(),
            grad_weight.data_mut(),
            (taps, 1),
        );
    }
    Ok(TConv2Grads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

/// Repeat every pixel into a 2x2 block.
pub fn upsample_nearest2_forward<F: Real>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let maps = Maps::of("upsample2", input.shape())?;
    let (h, w) = (maps.height, maps.width);
    let mut out = Tensor::zeros(&maps.shape_with(maps.channels, 2 * h, 2 * w));
    for (src, dst) in input
        .data()
        .chunks_exact(h * w)
        .zip(out.data_mut().chunks_exact_mut(4 * h * w))
    {
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest2_forward`]: sum each 2x2 block.
pub fn upsample_nearest2_backward<F: Real>(grad_out: &Tensor<F>) -> Result<Tensor<F>> {
    let maps = Maps::of("upsample2", grad_out.shape())?;
    if maps.height % 2 != 0 || maps.width % 2 != 0 {
        return Err(TensorError::OddSpatial {
            op: "upsample2",
            height: maps.height,
            width: maps.width,
        });
    }
    let (h, w) = (maps.height / 2, maps.width / 2);
    let mut grad = Tensor::zeros(&maps.shape_with(maps.channels, h, w));
    for (src, dst) in grad_out
        .data()
        .chunks_exact(4 * h * w)
        .zip(grad.data_mut().chunks_exact_mut(h * w))
    {
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
            }
        }
    }
    Ok(grad)
}
