//! Same-padded, stride-1 2D convolution with odd square kernels.
//!
//! Two evaluation strategies share one contract. The dense path lowers the
//! convolution onto a GEMM through an im2col buffer. The sparse path walks only
//! the nonzero inputs and accumulates weight rows, which is much cheaper for
//! spike maps where most entries are zero. The backward pass picks a path per
//! frame: cotangents are often sparse too, because the surrogate vanishes for
//! membranes far from threshold, and all-zero cotangent frames are skipped.

use super::{expect_shape, Maps, Real, Result, Tensor, TensorError};

/// Input density at or below which [`ConvPath::Auto`] takes the sparse path.
const SPARSE_DENSITY: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvPath {
    #[default]
    Auto,
    Dense,
    Sparse,
}

impl ConvPath {
    fn use_sparse<F: Real>(self, input: &Tensor<F>) -> bool {
        match self {
            ConvPath::Dense => false,
            ConvPath::Sparse => true,
            ConvPath::Auto => {
                !input.is_empty()
                    && (input.count_nonzero() as f64) <= SPARSE_DENSITY * input.len() as f64
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<F> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor<F>>,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    maps: Maps,
    out_channels: usize,
    kernel: usize,
}

impl Geometry {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    fn patch(&self) -> usize {
        self.maps.channels * self.taps()
    }
}

fn geometry<F: Real>(input: &Tensor<F>, weight: &Tensor<F>, bias: Option<&Tensor<F>>) -> Result<Geometry> {
    let maps = Maps::of("conv2d", input.shape())?;
    let (out_channels, kernel) = match *weight.shape() {
        [o, c, k, k2] if c == maps.channels && k == k2 && k % 2 == 1 => (o, k),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: format!("weight [C_out, {}, k, k] with odd k", maps.channels),
                got: weight.shape().to_vec(),
            })
        }
    };
    if let Some(bias) = bias {
        expect_shape("conv2d bias", bias, &[out_channels])?;
    }
    Ok(Geometry {
        maps,
        out_channels,
        kernel,
    })
}

/// Convolve `input` (`[C_in,H,W]` or `[N,C_in,H,W]`) with `weight`
/// (`[C_out,C_in,k,k]`, `k` odd) using zero padding of `k/2`.
pub fn conv2d_forward<F: Real>(input: &Tensor<F>, weight: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    conv2d_forward_with(input, weight, bias, ConvPath::Auto)
}

pub fn conv2d_forward_with<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    path: ConvPath,
) -> Result<Tensor<F>> {
    let geo = geometry(input, weight, Some(bias))?;
    let maps = geo.maps;
    let plane = maps.plane();
    let mut out = Tensor::zeros(&maps.shape_with(geo.out_channels, maps.height, maps.width));

    if path.use_sparse(input) {
        let wt = transpose(weight.data(), geo.out_channels, geo.patch());
        let mut acc = vec![F::zero(); plane * geo.out_channels];
        for n in 0..maps.frames() {
            let frame = &input.data()[n * maps.frame_len()..(n + 1) * maps.frame_len()];
            let nz = Nonzeros::of(frame, maps);
            let dst = out.outer_mut_frames(n, maps.frames());
            if !nz.entries.is_empty() {
                acc.fill(F::zero());
                for_each_pair(&geo, &nz, |p, kidx, val| {
                    let row = &wt[kidx * geo.out_channels..(kidx + 1) * geo.out_channels];
                    let dst = &mut acc[p * geo.out_channels..(p + 1) * geo.out_channels];
                    axpy(val, row, dst);
                });
                transpose_into(&acc, plane, geo.out_channels, dst);
            }
            for (o, &b) in bias.data().iter().enumerate() {
                dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
            }
        }
        return Ok(out);
    }

    let rows = chunk_rows::<F>(&geo);
    let w = maps.width;
    let mut col = vec![F::zero(); geo.patch() * rows * w];
    for n in 0..maps.frames() {
        let frame = &input.data()[n * maps.frame_len()..(n + 1) * maps.frame_len()];
        let dst = out.outer_mut_frames(n, maps.frames());
        for o in 0..geo.out_channels {
            dst[o * plane..(o + 1) * plane].fill(bias.data()[o]);
        }
        for y0 in (0..maps.height).step_by(rows) {
            let y1 = (y0 + rows).min(maps.height);
            let span = (y1 - y0) * w;
            let (cols, strides): (&[F], _) = if geo.kernel == 1 {
                (&frame[y0 * w..], (plane, 1))
            } else {
                im2col(frame, &geo, y0, y1, &mut col);
                (&col, (span, 1))
            };
            F::gemm(
                geo.out_channels,
                geo.patch(),
                span,
                F::one(),
                weight.data(),
                (geo.patch(), 1),
                cols,
                strides,
                F::one(),
                &mut dst[y0 * w..],
                (plane, 1),
            );
        }
    }
    Ok(out)
}

/// Gradients of a convolution given the cotangent of its output.
///
/// `input` is the saved forward input; passing `None` is an error because the
/// weight gradient cannot be formed without it.
pub fn conv2d_backward<F: Real>(
    grad_out: &Tensor<F>,
    input: Option<&Tensor<F>>,
    weight: &Tensor<F>,
) -> Result<Conv2dGrads<F>> {
    let input = input.ok_or(TensorError::MissingContext("conv2d"))?;
    conv2d_backward_with(grad_out, input, weight, true, ConvPath::Auto)
}

pub fn conv2d_backward_with<F: Real>(
    grad_out: &Tensor<F>,
    input: &Tensor<F>,
    weight: &Tensor<F>,
    need_input_grad: bool,
    path: ConvPath,
) -> Result<Conv2dGrads<F>> {
    let geo = geometry(input, weight, None)?;
    let maps = geo.maps;
    let plane = maps.plane();
    expect_shape(
        "conv2d grad_out",
        grad_out,
        &maps.shape_with(geo.out_channels, maps.height, maps.width),
    )?;

    let mut grad_bias = Tensor::zeros(&[geo.out_channels]);
    for n in 0..maps.frames() {
        let g = &grad_out.data()[n * geo.out_channels * plane..(n + 1) * geo.out_channels * plane];
        for (o, gb) in grad_bias.data_mut().iter_mut().enumerate() {
            *gb += g[o * plane..(o + 1) * plane].iter().fold(F::zero(), |a, &v| a + v);
        }
    }

    let (c_in, c_out, taps) = (maps.channels, geo.out_channels, geo.taps());
    let gmaps = Maps {
        channels: c_out,
        ..maps
    };
    let rows = chunk_rows::<F>(&geo);
    let w = maps.width;
    let mut col = vec![F::zero(); geo.patch() * rows * w];
    let mut grad_weight = Tensor::zeros(weight.shape());
    let mut grad_input = need_input_grad.then(|| Tensor::zeros(input.shape()));
    // Sparse accumulators: `[patch, C_out]` when walking inputs, `[C_out, taps, C_in]`
    // when walking cotangents; both are folded into `grad_weight` at the end.
    let mut gw_by_input = Vec::new();
    let mut gw_by_grad = Vec::new();
    let mut gt = Vec::new();
    let mut xt = Vec::new();
    let mut acc = Vec::new();
    let w_rows = if need_input_grad && path != ConvPath::Dense {
        Some(weight_by_tap(weight.data(), &geo))
    } else {
        None
    };

    for n in 0..maps.frames() {
        let frame = &input.data()[n * maps.frame_len()..(n + 1) * maps.frame_len()];
        let g = &grad_out.data()[n * c_out * plane..(n + 1) * c_out * plane];
        let g_nnz = g.iter().filter(|&&v| v != F::zero()).count();
        if g_nnz == 0 {
            continue;
        }
        let x_nnz = frame.iter().filter(|&&v| v != F::zero()).count();
        let (x_sparse, g_sparse) = match path {
            ConvPath::Dense => (false, false),
            ConvPath::Sparse => (true, true),
            ConvPath::Auto => (
                x_nnz as f64 <= SPARSE_DENSITY * frame.len() as f64,
                g_nnz as f64 <= SPARSE_DENSITY * g.len() as f64,
            ),
        };
        let g_nz = g_sparse.then(|| Nonzeros::of(g, gmaps));

        // weight gradient: walk whichever operand has fewer nonzero products
        let walk_grad = g_sparse && (!x_sparse || (path == ConvPath::Auto && g_nnz * c_in < x_nnz * c_out));
        if walk_grad {
            gw_by_grad.resize(c_out * taps * c_in, F::zero());
            xt.resize(plane * c_in, F::zero());
            transpose_into(frame, c_in, plane, &mut xt);
            for_each_tap(&geo, g_nz.as_ref().expect("sparse cotangent"), |q, o, kidx, val| {
                let src = &xt[q * c_in..(q + 1) * c_in];
                axpy(val, src, &mut gw_by_grad[(o * taps + kidx) * c_in..][..c_in]);
            });
        } else if x_sparse {
            gw_by_input.resize(geo.patch() * c_out, F::zero());
            gt.resize(plane * c_out, F::zero());
            transpose_into(g, c_out, plane, &mut gt);
            for_each_pair(&geo, &Nonzeros::of(frame, maps), |p, kidx, val| {
                let src = &gt[p * c_out..(p + 1) * c_out];
                axpy(val, src, &mut gw_by_input[kidx * c_out..(kidx + 1) * c_out]);
            });
        } else {
            for y0 in (0..maps.height).step_by(rows) {
                let y1 = (y0 + rows).min(maps.height);
                let span = (y1 - y0) * w;
                let (cols, strides): (&[F], _) = if geo.kernel == 1 {
                    (&frame[y0 * w..], (1, plane))
                } else {
                    im2col(frame, &geo, y0, y1, &mut col);
                    (&col, (1, span))
                };
                // gradW[o, k] += sum_p g[o, p] * col[k, p]
                F::gemm(
                    c_out,
                    span,
                    geo.patch(),
                    F::one(),
                    &g[y0 * w..],
                    (plane, 1),
                    cols,
                    strides,
                    F::one(),
                    grad_weight.data_mut(),
                    (geo.patch(), 1),
                );
            }
        }

        let Some(gin) = grad_input.as_mut() else {
            continue;
        };
        let dst = gin.outer_mut_frames(n, maps.frames());
        if let (Some(nz), Some(w_rows)) = (&g_nz, &w_rows) {
            // gin[c, q] += g[o, p] * W[o, c, tap(q - p)]
            acc.clear();
            acc.resize(plane * c_in, F::zero());
            for_each_tap(&geo, nz, |q, o, kidx, val| {
                let src = &w_rows[(o * taps + kidx) * c_in..][..c_in];
                axpy(val, src, &mut acc[q * c_in..(q + 1) * c_in]);
            });
            transpose_into(&acc, plane, c_in, dst);
            continue;
        }
        for y0 in (0..maps.height).step_by(rows) {
            let y1 = (y0 + rows).min(maps.height);
            let span = (y1 - y0) * w;
            // gcol[k, p] = sum_o W[o, k] * g[o, p]
            if geo.kernel == 1 {
                F::gemm(
                    geo.patch(),
                    c_out,
                    span,
                    F::one(),
                    weight.data(),
                    (1, geo.patch()),
                    &g[y0 * w..],
                    (plane, 1),
                    F::zero(),
                    &mut dst[y0 * w..],
                    (plane, 1),
                );
            } else {
                F::gemm(
                    geo.patch(),
                    c_out,
                    span,
                    F::one(),
                    weight.data(),
                    (1, geo.patch()),
                    &g[y0 * w..],
                    (plane, 1),
                    F::zero(),
                    &mut col,
                    (span, 1),
                );
                col2im(&col, &geo, y0, y1, dst);
            }
        }
    }

    let gw = grad_weight.data_mut();
    if !gw_by_input.is_empty() {
        for kidx in 0..geo.patch() {
            for o in 0..c_out {
                gw[o * geo.patch() + kidx] += gw_by_input[kidx * c_out + o];
            }
        }
    }
    if !gw_by_grad.is_empty() {
        for o in 0..c_out {
            for kidx in 0..taps {
                for c in 0..c_in {
                    gw[(o * c_in + c) * taps + kidx] += gw_by_grad[(o * taps + kidx) * c_in + c];
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

impl<F: Real> Tensor<F> {
    /// Frame `n` of a tensor holding `frames` equally sized frames.
    fn outer_mut_frames(&mut self, n: usize, frames: usize) -> &mut [F] {
        let stride = self.len() / frames;
        &mut self.data_mut()[n * stride..(n + 1) * stride]
    }
}

/// Nonzero input entries grouped by spatial position, channels ascending.
struct Nonzeros<F> {
    offsets: Vec<usize>,
    entries: Vec<(usize, F)>,
}

impl<F: Real> Nonzeros<F> {
    fn of(frame: &[F], maps: Maps) -> Self {
        let plane = maps.plane();
        let mut offsets = vec![0usize; plane + 1];
        for c in 0..maps.channels {
            for (q, &v) in frame[c * plane..(c + 1) * plane].iter().enumerate() {
                if v != F::zero() {
                    offsets[q + 1] += 1;
                }
            }
        }
        for q in 0..plane {
            offsets[q + 1] += offsets[q];
        }
        let mut cursor = offsets.clone();
        let mut entries = vec![(0usize, F::zero()); offsets[plane]];
        for c in 0..maps.channels {
            for (q, &v) in frame[c * plane..(c + 1) * plane].iter().enumerate() {
                if v != F::zero() {
                    entries[cursor[q]] = (c, v);
                    cursor[q] += 1;
                }
            }
        }
        Self { offsets, entries }
    }

    fn at(&self, q: usize) -> &[(usize, F)] {
        &self.entries[self.offsets[q]..self.offsets[q + 1]]
    }
}

/// Visit every (output position, patch index, input value) triple with a
/// nonzero input value.
fn for_each_pair<F: Real>(geo: &Geometry, nz: &Nonzeros<F>, mut f: impl FnMut(usize, usize, F)) {
    let (h, w) = (geo.maps.height as isize, geo.maps.width as isize);
    let (k, pad) = (geo.kernel, geo.pad() as isize);
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) as usize;
            for dy in 0..k {
                let qy = y + dy as isize - pad;
                if qy < 0 || qy >= h {
                    continue;
                }
                for dx in 0..k {
                    let qx = x + dx as isize - pad;
                    if qx < 0 || qx >= w {
                        continue;
                    }
                    for &(c, val) in nz.at((qy * w + qx) as usize) {
                        f(p, (c * k + dy) * k + dx, val);
                    }
                }
            }
        }
    }
}

/// Visit every (input position, output channel, tap index, cotangent) with a
/// nonzero cotangent; `nz` holds cotangent entries by output position.
fn for_each_tap<F: Real>(geo: &Geometry, nz: &Nonzeros<F>, mut f: impl FnMut(usize, usize, usize, F)) {
    let (h, w) = (geo.maps.height as isize, geo.maps.width as isize);
    let (k, pad) = (geo.kernel, geo.pad() as isize);
    for y in 0..h {
        for x in 0..w {
            let entries = nz.at((y * w + x) as usize);
            if entries.is_empty() {
                continue;
            }
            for dy in 0..k {
                let qy = y + dy as isize - pad;
                if qy < 0 || qy >= h {
                    continue;
                }
                for dx in 0..k {
                    let qx = x + dx as isize - pad;
                    if qx < 0 || qx >= w {
                        continue;
                    }
                    let q = (qy * w + qx) as usize;
                    for &(o, val) in entries {
                        f(q, o, dy * k + dx, val);
                    }
                }
            }
        }
    }
}

/// Weights regrouped as `[C_out, taps, C_in]` so one tap's input-channel row is contiguous.
fn weight_by_tap<F: Real>(weight: &[F], geo: &Geometry) -> Vec<F> {
    let (c_in, taps) = (geo.maps.channels, geo.taps());
    let mut out = vec![F::zero(); weight.len()];
    for o in 0..geo.out_channels {
        for c in 0..c_in {
            for kidx in 0..taps {
                out[(o * taps + kidx) * c_in + c] = weight[(o * c_in + c) * taps + kidx];
            }
        }
    }
    out
}

fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    if alpha == F::one() {
        for (d, &s) in y.iter_mut().zip(x) {
            *d += s;
        }
    } else {
        for (d, &s) in y.iter_mut().zip(x) {
            *d += alpha * s;
        }
    }
}

fn transpose<F: Real>(src: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    transpose_into(src, rows, cols, &mut out);
    out
}

/// Cache-blocked transpose of a row-major `rows x cols` matrix.
fn transpose_into<F: Real>(src: &[F], rows: usize, cols: usize, dst: &mut [F]) {
    const B: usize = 16;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Output rows per im2col chunk, sized so a chunk stays cache resident.
fn chunk_rows<F>(geo: &Geometry) -> usize {
    const BUDGET: usize = 1 << 20;
    let row_bytes = geo.patch() * geo.maps.width * std::mem::size_of::<F>();
    (BUDGET / row_bytes.max(1)).clamp(1, geo.maps.height.max(1))
}

/// `col[(c*k+dy)*k+dx, (y-y0)*W+x] = frame[c, y+dy-pad, x+dx-pad]` for output
/// rows `y0..y1` (zero outside the frame).
fn im2col<F: Real>(frame: &[F], geo: &Geometry, y0: usize, y1: usize, col: &mut [F]) {
    let (h, w) = (geo.maps.height, geo.maps.width);
    let (k, pad) = (geo.kernel, geo.pad());
    let plane = h * w;
    let span = (y1 - y0) * w;
    for c in 0..geo.maps.channels {
        let src = &frame[c * plane..(c + 1) * plane];
        for dy in 0..k {
            for dx in 0..k {
                let row = &mut col[((c * k + dy) * k + dx) * span..][..span];
                for y in y0..y1 {
                    let dst = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    let sy = y + dy;
                    if sy < pad || sy - pad >= h {
                        dst.fill(F::zero());
                        continue;
                    }
                    let srow = &src[(sy - pad) * w..(sy - pad + 1) * w];
                    // valid x range: pad <= x + dx < w + pad
                    let lo = pad.saturating_sub(dx).min(w);
                    let hi = (w + pad).saturating_sub(dx).min(w);
                    dst[..lo].fill(F::zero());
                    if hi > lo {
                        dst[lo..hi].copy_from_slice(&srow[lo + dx - pad..hi + dx - pad]);
                    }
                    dst[hi.max(lo)..].fill(F::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch rows back onto the frame.
fn col2im<F: Real>(col: &[F], geo: &Geometry, y0: usize, y1: usize, frame: &mut [F]) {
    let (h, w) = (geo.maps.height, geo.maps.width);
    let (k, pad) = (geo.kernel, geo.pad());
    let plane = h * w;
    let span = (y1 - y0) * w;
    for c in 0..geo.maps.channels {
        let dst = &mut frame[c * plane..(c + 1) * plane];
        for dy in 0..k {
            for dx in 0..k {
                let row = &col[((c * k + dy) * k + dx) * span..][..span];
                for y in y0..y1 {
                    let sy = y + dy;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let drow = &mut dst[(sy - pad) * w..(sy - pad + 1) * w];
                    let lo = pad.saturating_sub(dx).min(w);
                    let hi = (w + pad).saturating_sub(dx).min(w);
                    if hi > lo {
                        let src = &row[(y - y0) * w + lo..(y - y0) * w + hi];
                        for (d, &v) in drow[lo + dx - pad..hi + dx - pad].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}
