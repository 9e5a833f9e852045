//! Raw NCHW kernels. All functions operate on flat row-major slices plus an
//! explicit shape and never touch the tape; the tape wraps them and so does
//! the detached error-gradient path of a PCoder.

use super::{matmul, shape_err, Real, Result, TensorError};

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::InvalidArgument { op: "conv2d", detail: "stride must be >= 1".into() });
    }
    if kernel > input + 2 * padding {
        return Err(shape_err(
            "conv2d",
            format!("kernel extent {kernel} exceeds padded input extent {}", input + 2 * padding),
        ));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv_transpose2d",
            detail: "stride must be >= 1".into(),
        });
    }
    let full = (input.max(1) - 1) * stride + kernel;
    if input == 0 || full <= 2 * padding {
        return Err(shape_err(
            "conv_transpose2d",
            format!("input extent {input} with kernel {kernel}, padding {padding} gives an empty output"),
        ));
    }
    Ok(full - 2 * padding)
}

#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Real>(img: &[T], g: &Geometry, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let seg = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into image layout (adjoint of `im2col`).
fn col2im<T: Real>(col: &[T], g: &Geometry, img: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_len<T>(op: &'static str, what: &str, data: &[T], shape: &[usize]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(shape_err(op, format!("{what} shape {shape:?} does not match {} elements", data.len())));
    }
    Ok(())
}

/// Cross-correlation of `x [n,ci,h,w]` with `weight [co,ci,kh,kw]`.
pub fn conv2d<T: Real>(
    x: &[T],
    xs: [usize; 4],
    weight: &[T],
    ws: [usize; 4],
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<(Vec<T>, [usize; 4])> {
    const OP: &str = "conv2d";
    check_len(OP, "input", x, &xs)?;
    check_len(OP, "weight", weight, &ws)?;
    let [n, ci, h, w] = xs;
    let [co, wci, kh, kw] = ws;
    if wci != ci {
        return Err(shape_err(OP, format!("input channels {ci} but weight expects {wci} (dim 1)")));
    }
    if let Some(b) = bias {
        if b.len() != co {
            return Err(shape_err(OP, format!("bias has {} entries for {co} output channels", b.len())));
        }
    }
    let out_h = conv_out_extent(h, kh, stride, padding)?;
    let out_w = conv_out_extent(w, kw, stride, padding)?;
    let g = Geometry { channels: ci, height: h, width: w, kh, kw, stride, padding, out_h, out_w };
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); n * co * cols];
    for s in 0..n {
        im2col(&x[s * ci * h * w..(s + 1) * ci * h * w], &g, &mut col);
        let dst = &mut out[s * co * cols..(s + 1) * co * cols];
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                dst[o * cols..(o + 1) * cols].iter_mut().for_each(|v| *v = bo);
            }
        }
        matmul(co, rows, cols, weight, false, &col, false, dst, bias.is_some());
    }
    Ok((out, [n, co, out_h, out_w]))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias; each is
/// only computed when requested.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    xs: [usize; 4],
    weight: &[T],
    ws: [usize; 4],
    grad_out: &[T],
    stride: usize,
    padding: usize,
    need: (bool, bool, bool),
) -> Result<(Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>)> {
    let [n, ci, h, w] = xs;
    let [co, _, kh, kw] = ws;
    let out_h = conv_out_extent(h, kh, stride, padding)?;
    let out_w = conv_out_extent(w, kw, stride, padding)?;
    check_len("conv2d_backward", "grad_out", grad_out, &[n, co, out_h, out_w])?;
    let g = Geometry { channels: ci, height: h, width: w, kh, kw, stride, padding, out_h, out_w };
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let (need_x, need_w, need_b) = need;
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); weight.len()]);
    let mut db = need_b.then(|| vec![T::zero(); co]);
    let mut col = vec![T::zero(); rows * cols];
    for s in 0..n {
        let go = &grad_out[s * co * cols..(s + 1) * co * cols];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * ci * h * w..(s + 1) * ci * h * w], &g, &mut col);
            matmul(co, cols, rows, go, false, &col, true, dw, true);
        }
        if let Some(db) = db.as_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += go[o * cols..(o + 1) * cols].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            matmul(rows, co, cols, weight, true, go, false, &mut col, false);
            col2im(&col, &g, &mut dx[s * ci * h * w..(s + 1) * ci * h * w]);
        }
    }
    Ok((dx, dw, db))
}

/// Transposed convolution of `y [n,ci,h,w]` with `weight [ci,co,kh,kw]`: the
/// linear adjoint of [`conv2d`] with the same weight, plus an optional bias.
pub fn conv_transpose2d<T: Real>(
    y: &[T],
    ys: [usize; 4],
    weight: &[T],
    ws: [usize; 4],
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<(Vec<T>, [usize; 4])> {
    const OP: &str = "conv_transpose2d";
    check_len(OP, "input", y, &ys)?;
    check_len(OP, "weight", weight, &ws)?;
    let [n, ci, h, w] = ys;
    let [wci, co, kh, kw] = ws;
    if wci != ci {
        return Err(shape_err(OP, format!("input channels {ci} but weight expects {wci} (dim 0)")));
    }
    if let Some(b) = bias {
        if b.len() != co {
            return Err(shape_err(OP, format!("bias has {} entries for {co} output channels", b.len())));
        }
    }
    let out_h = conv_transpose_out_extent(h, kh, stride, padding)?;
    let out_w = conv_transpose_out_extent(w, kw, stride, padding)?;
    // The geometry of the forward conv whose adjoint this is: (co, out) -> (ci, in).
    let g = Geometry { channels: co, height: out_h, width: out_w, kh, kw, stride, padding, out_h: h, out_w: w };
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let plane = out_h * out_w;
    let mut col = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); n * co * plane];
    for s in 0..n {
        let ys_ = &y[s * ci * cols..(s + 1) * ci * cols];
        matmul(rows, ci, cols, weight, true, ys_, false, &mut col, false);
        let dst = &mut out[s * co * plane..(s + 1) * co * plane];
        col2im(&col, &g, dst);
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    Ok((out, [n, co, out_h, out_w]))
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn conv_transpose2d_backward<T: Real>(
    y: &[T],
    ys: [usize; 4],
    weight: &[T],
    ws: [usize; 4],
    grad_out: &[T],
    stride: usize,
    padding: usize,
    need: (bool, bool, bool),
) -> Result<(Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>)> {
    let [n, ci, h, w] = ys;
    let [_, co, kh, kw] = ws;
    let out_h = conv_transpose_out_extent(h, kh, stride, padding)?;
    let out_w = conv_transpose_out_extent(w, kw, stride, padding)?;
    check_len("conv_transpose2d_backward", "grad_out", grad_out, &[n, co, out_h, out_w])?;
    let g = Geometry { channels: co, height: out_h, width: out_w, kh, kw, stride, padding, out_h: h, out_w: w };
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let plane = out_h * out_w;
    let (need_y, need_w, need_b) = need;
    let mut dy = need_y.then(|| vec![T::zero(); y.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); weight.len()]);
    let mut db = need_b.then(|| vec![T::zero(); co]);
    let mut col = vec![T::zero(); rows * cols];
    for s in 0..n {
        let go = &grad_out[s * co * plane..(s + 1) * co * plane];
        if let Some(db) = db.as_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += go[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if dy.is_none() && dw.is_none() {
            continue;
        }
        im2col(go, &g, &mut col);
        if let Some(dy) = dy.as_mut() {
            matmul(ci, rows, cols, weight, false, &col, false, &mut dy[s * ci * cols..(s + 1) * ci * cols], false);
        }
        if let Some(dw) = dw.as_mut() {
            matmul(ci, cols, rows, &y[s * ci * cols..(s + 1) * ci * cols], false, &col, true, dw, true);
        }
    }
    Ok((dy, dw, db))
}

/// Source taps for output index `o` of a 2x bilinear upsampling along an axis
/// of `len` input samples (half-pixel centres, edge clamped):
/// `(i0, i1, w0, w1)` with `out = w0 * in[i0] + w1 * in[i1]`.
pub fn upsample_source(o: usize, len: usize) -> (usize, usize, f64, f64) {
    let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    let frac = src - i0 as f64;
    (i0, i1, 1.0 - frac, frac)
}

fn upsample_taps<T: Real>(len: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * len)
        .map(|o| {
            let (i0, i1, w0, w1) = upsample_source(o, len);
            (i0, i1, T::lit(w0), T::lit(w1))
        })
        .collect()
}

pub fn upsample_bilinear2x<T: Real>(x: &[T], xs: [usize; 4]) -> Result<(Vec<T>, [usize; 4])> {
    check_len("upsample_bilinear2x", "input", x, &xs)?;
    let [n, c, h, w] = xs;
    if h == 0 || w == 0 {
        return Err(shape_err("upsample_bilinear2x", "spatial extents must be >= 1"));
    }
    let (ty, tx) = (upsample_taps::<T>(h), upsample_taps::<T>(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (plane_in, plane_out) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let r0 = &plane_in[y0 * w..(y0 + 1) * w];
            let r1 = &plane_in[y1 * w..(y1 + 1) * w];
            let dst = &mut plane_out[oy * ow..(oy + 1) * ow];
            for (v, &(x0, x1, wx0, wx1)) in dst.iter_mut().zip(&tx) {
                *v = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    Ok((out, [n, c, oh, ow]))
}

/// Adjoint of [`upsample_bilinear2x`]: splats each output gradient back onto
/// its four source pixels.
pub fn upsample_bilinear2x_backward<T: Real>(grad_out: &[T], xs: [usize; 4]) -> Result<Vec<T>> {
    let [n, c, h, w] = xs;
    let (oh, ow) = (2 * h, 2 * w);
    check_len("upsample_bilinear2x_backward", "grad_out", grad_out, &[n, c, oh, ow])?;
    let (ty, tx) = (upsample_taps::<T>(h), upsample_taps::<T>(w));
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane_g, plane_dx) in grad_out.chunks_exact(oh * ow).zip(dx.chunks_exact_mut(h * w)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let src = &plane_g[oy * ow..(oy + 1) * ow];
            for (&gv, &(x0, x1, wx0, wx1)) in src.iter().zip(&tx) {
                plane_dx[y0 * w + x0] += wy0 * wx0 * gv;
                plane_dx[y0 * w + x1] += wy0 * wx1 * gv;
                plane_dx[y1 * w + x0] += wy1 * wx0 * gv;
                plane_dx[y1 * w + x1] += wy1 * wx1 * gv;
            }
        }
    }
    Ok(dx)
}

/// 2x2 max-pooling with stride 2 (floor on odd extents). Also returns, for
/// every output, the flat input index it was taken from; ties resolve to the
/// first element in row-major scan order.
pub fn maxpool2x2<T: Real>(x: &[T], xs: [usize; 4]) -> Result<(Vec<T>, Vec<usize>, [usize; 4])> {
    check_len("maxpool2x2", "input", x, &xs)?;
    let [n, c, h, w] = xs;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(shape_err("maxpool2x2", format!("spatial extent {h}x{w} too small to pool")));
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((out, arg, [n, c, oh, ow]))
}

pub fn maxpool2x2_backward<T: Real>(grad_out: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}
