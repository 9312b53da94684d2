//! Numeric kernels behind the differentiable ops: convolution (direct and
//! im2col/GEMM), transposed convolution, batch normalization, bilinear
//! resampling and max pooling. Everything here works on raw `[N,C,H,W]`
//! buffers; gradient bookkeeping lives in [`super::tape`].

use crate::error::{shape_err, Result};

use super::Tensor;

/// `c = a · b + beta · c` for row-major operands, optionally transposed.
///
/// `a` is `[m,k]` (or `[k,m]` when `a_t`), `b` is `[k,n]` (or `[n,k]` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index touched by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided, zero-padded 2-D correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1"));
        }
        if kh > h + 2 * pad {
            return Err(shape_err(
                "conv2d",
                format!("kernel height {kh} exceeds padded input height {}", h + 2 * pad),
            ));
        }
        if kw > w + 2 * pad {
            return Err(shape_err(
                "conv2d",
                format!("kernel width {kw} exceeds padded input width {}", w + 2 * pad),
            ));
        }
        Ok(Self {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[C,H,W]` sample into `[C·kh·kw, out_h·out_w]` columns.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.col_cols();
    for c in 0..g.channels {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `x`.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let plane = g.col_cols();
    for c in 0..g.channels {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_operands(
    op: &'static str,
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    bias_len: usize,
    in_channels_axis: usize,
) -> Result<([usize; 4], [usize; 4])> {
    let x = input.dims4(op)?;
    let k = kernel.dims4(op)?;
    if k[in_channels_axis] != x[1] {
        return Err(shape_err(
            op,
            format!(
                "input has {} channels but kernel {:?} expects {} on axis {in_channels_axis}",
                x[1],
                kernel.dims(),
                k[in_channels_axis]
            ),
        ));
    }
    if let Some(b) = bias {
        if b.len() != bias_len {
            return Err(shape_err(
                op,
                format!("bias has {} entries, expected {bias_len} output channels", b.len()),
            ));
        }
    }
    Ok((x, k))
}

/// Cross-correlation `[N,C,H,W] ⋆ [O,C,kh,kw] → [N,O,H',W']` through im2col + GEMM.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvGeom)> {
    let out_ch = kernel.dims().first().copied().unwrap_or(0);
    let ([n, c, h, w], [o, _, kh, kw]) =
        check_conv_operands("conv2d", input, kernel, bias, out_ch, 1)?;
    let g = ConvGeom::new(c, (h, w), (kh, kw), stride, pad)?;
    let (rows, plane) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; n * o * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
    let in_per = c * h * w;
    for s in 0..n {
        let xs = &input.data()[s * in_per..(s + 1) * in_per];
        let b_mat: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let ys = &mut out[s * o * plane..(s + 1) * o * plane];
        gemm(o, rows, plane, kernel.data(), false, b_mat, false, 0.0, ys);
        if let Some(b) = bias {
            for (oc, &bv) in b.data().iter().enumerate() {
                ys[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, o, g.out_h, g.out_w], out), g))
}

/// Gradients of [`conv2d`] w.r.t. input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeom,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = input.dims4("conv2d_backward").expect("checked in forward");
    let o = kernel.dims()[0];
    let (rows, plane) = (g.col_rows(), g.col_cols());
    let mut dx = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; o];
    let mut cols = vec![0.0; rows * plane];
    let in_per = c * h * w;
    for s in 0..n {
        let xs = &input.data()[s * in_per..(s + 1) * in_per];
        let dys = &grad_out.data()[s * o * plane..(s + 1) * o * plane];
        for (oc, d) in db.iter_mut().enumerate() {
            *d += dys[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
        }
        let dxs = &mut dx[s * in_per..(s + 1) * in_per];
        if g.is_pointwise() {
            gemm(o, plane, rows, dys, false, xs, true, 1.0, &mut dk);
            gemm(rows, o, plane, kernel.data(), true, dys, false, 1.0, dxs);
        } else {
            im2col(xs, g, &mut cols);
            gemm(o, plane, rows, dys, false, &cols, true, 1.0, &mut dk);
            gemm(rows, o, plane, kernel.data(), true, dys, false, 0.0, &mut cols);
            col2im(&cols, g, dxs);
        }
    }
    (
        Tensor::from_parts(input.dims().to_vec(), dx),
        Tensor::from_parts(kernel.dims().to_vec(), dk),
        Tensor::from_parts(vec![o], db),
    )
}

/// Output side length of a transposed convolution.
pub fn conv_transpose_len(
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<usize> {
    let full = (len as isize - 1) * stride as isize + k as isize + output_padding as isize;
    let out = full - 2 * pad as isize;
    if out <= 0 {
        return Err(shape_err(
            "conv_transpose2d",
            format!("non-positive output size {out} (len {len}, kernel {k}, stride {stride}, pad {pad})"),
        ));
    }
    Ok(out as usize)
}

/// Transposed convolution `[N,Cin,H,W]`, kernel `[Cin,Cout,kh,kw]` → `[N,Cout,H',W']`.
///
/// This is the adjoint of [`conv2d`] with the same kernel: the kernel's
/// leading axis indexes the channels being contracted.
pub fn conv_transpose2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<(Tensor, ConvGeom)> {
    let out_ch = kernel.dims().get(1).copied().unwrap_or(0);
    let ([n, cin, h, w], [_, cout, kh, kw]) =
        check_conv_operands("conv_transpose2d", input, kernel, bias, out_ch, 0)?;
    if stride == 0 || output_padding >= stride {
        return Err(shape_err(
            "conv_transpose2d",
            format!("output_padding {output_padding} must be smaller than stride {stride}"),
        ));
    }
    let oh = conv_transpose_len(h, kh, stride, pad, output_padding)?;
    let ow = conv_transpose_len(w, kw, stride, pad, output_padding)?;
    let g = ConvGeom::new(cout, (oh, ow), (kh, kw), stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    let (rows, plane) = (g.col_rows(), g.col_cols());
    let out_per = cout * oh * ow;
    let mut out = vec![0.0; n * out_per];
    let mut cols = vec![0.0; rows * plane];
    for s in 0..n {
        let ys = &input.data()[s * cin * plane..(s + 1) * cin * plane];
        let xs = &mut out[s * out_per..(s + 1) * out_per];
        if g.is_pointwise() {
            gemm(rows, cin, plane, kernel.data(), true, ys, false, 0.0, xs);
        } else {
            gemm(rows, cin, plane, kernel.data(), true, ys, false, 0.0, &mut cols);
            col2im(&cols, &g, xs);
        }
        if let Some(b) = bias {
            for (oc, &bv) in b.data().iter().enumerate() {
                xs[oc * oh * ow..(oc + 1) * oh * ow].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, cout, oh, ow], out), g))
}

/// Gradients of [`conv_transpose2d`] w.r.t. input, kernel and bias.
pub fn conv_transpose2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeom,
) -> (Tensor, Tensor, Tensor) {
    let [n, cin, _, _] = input.dims4("conv_transpose2d_backward").expect("checked in forward");
    let cout = g.channels;
    let (rows, plane) = (g.col_rows(), g.col_cols());
    let out_per = cout * g.h * g.w;
    let mut dy = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; cout];
    let mut cols = vec![0.0; rows * plane];
    for s in 0..n {
        let dxs = &grad_out.data()[s * out_per..(s + 1) * out_per];
        for (oc, d) in db.iter_mut().enumerate() {
            *d += dxs[oc * g.h * g.w..(oc + 1) * g.h * g.w].iter().sum::<f64>();
        }
        let ys = &input.data()[s * cin * plane..(s + 1) * cin * plane];
        let dys = &mut dy[s * cin * plane..(s + 1) * cin * plane];
        let c_mat: &[f64] = if g.is_pointwise() {
            dxs
        } else {
            im2col(dxs, g, &mut cols);
            &cols
        };
        gemm(cin, rows, plane, kernel.data(), false, c_mat, false, 0.0, dys);
        gemm(cin, plane, rows, ys, false, c_mat, true, 1.0, &mut dk);
    }
    (
        Tensor::from_parts(input.dims().to_vec(), dy),
        Tensor::from_parts(kernel.dims().to_vec(), dk),
        Tensor::from_parts(vec![cout], db),
    )
}

/// Loop-nest reference for [`conv2d`].
pub fn conv2d_direct(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let out_ch = kernel.dims().first().copied().unwrap_or(0);
    let ([n, c, h, w], [o, _, kh, kw]) =
        check_conv_operands("conv2d", input, kernel, bias, out_ch, 1)?;
    let g = ConvGeom::new(c, (h, w), (kh, kw), stride, pad)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; n * o * g.out_h * g.out_w];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ki in 0..kh {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((s * c + ic) * h + iy as usize) * w + ix as usize]
                                    * k[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((s * o + oc) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, o, g.out_h, g.out_w], out))
}

/// Scatter-form reference for [`conv_transpose2d`].
pub fn conv_transpose2d_direct(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<Tensor> {
    let out_ch = kernel.dims().get(1).copied().unwrap_or(0);
    let ([n, cin, h, w], [_, cout, kh, kw]) =
        check_conv_operands("conv_transpose2d", input, kernel, bias, out_ch, 0)?;
    let oh = conv_transpose_len(h, kh, stride, pad, output_padding)?;
    let ow = conv_transpose_len(w, kw, stride, pad, output_padding)?;
    let y = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for oc in 0..cout {
            let b = bias.map_or(0.0, |b| b.data()[oc]);
            out[(s * cout + oc) * oh * ow..(s * cout + oc + 1) * oh * ow].fill(b);
        }
        for ic in 0..cin {
            for iy in 0..h {
                for ix in 0..w {
                    let v = y[((s * cin + ic) * h + iy) * w + ix];
                    for oc in 0..cout {
                        for ki in 0..kh {
                            let oy = (iy * stride + ki) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let ox = (ix * stride + kj) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out[((s * cout + oc) * oh + oy as usize) * ow + ox as usize] +=
                                    v * k[((ic * cout + oc) * kh + ki) * kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, cout, oh, ow], out))
}

/// Saved forward quantities of a batch-norm evaluation.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    /// Batch statistics (mean, biased variance); `None` in eval mode.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Per-channel normalization of `[N,C,H,W]`.
///
/// `stats` supplies the (mean, variance) pair used in eval mode; when it is
/// `None` the batch statistics are used.
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: Option<(&[f64], &[f64])>,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let [n, c, h, w] = input.dims4("batchnorm2d")?;
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err(
            "batchnorm2d",
            format!("input has {c} channels, gamma {} and beta {}", gamma.len(), beta.len()),
        ));
    }
    let plane = h * w;
    let m = (n * plane) as f64;
    let x = input.data();
    let (mean, var, batch_stats) = match stats {
        Some((mu, var)) => {
            if mu.len() != c || var.len() != c {
                return Err(shape_err("batchnorm2d", "running stats do not match channel count"));
            }
            (mu.to_vec(), var.to_vec(), None)
        }
        None => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += x[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut sq = 0.0;
                for b in 0..n {
                    sq += x[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = sq / m;
            }
            (mean.clone(), var.clone(), Some((mean, var)))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in base..base + plane {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok((
        Tensor::from_parts(input.dims().to_vec(), out),
        BatchNormCache {
            xhat: Tensor::from_parts(input.dims().to_vec(), xhat),
            inv_std,
            batch_stats,
        },
    ))
}

/// Gradients of [`batchnorm2d`] w.r.t. input, gamma and beta.
pub fn batchnorm2d_backward(
    gamma: &Tensor,
    cache: &BatchNormCache,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = grad_out.dims4("batchnorm2d_backward").expect("checked in forward");
    let plane = h * w;
    let m = (n * plane) as f64;
    let dy = grad_out.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                dgamma[ch] += dy[i] * xh[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let g = gamma.data()[ch];
            let inv = cache.inv_std[ch];
            for i in base..base + plane {
                dx[i] = if cache.batch_stats.is_some() {
                    g * inv * (dy[i] - dbeta[ch] / m - xh[i] * dgamma[ch] / m)
                } else {
                    g * inv * dy[i]
                };
            }
        }
    }
    (
        Tensor::from_parts(grad_out.dims().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// Interpolation taps for one axis under the half-pixel-center convention.
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for dst in 0..output {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            lo.push(i0);
            hi.push((i0 + 1).min(input - 1));
            frac.push(src - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resampling of `[N,C,h,w]` to `[N,C,out_h,out_w]`.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err("bilinear_resize", "output size must be positive"));
    }
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let x = input.data();
    let mut out = vec![0.0; n * c * out_h * out_w];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, out_h, out_w], out))
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward(in_dims: &[usize], grad_out: &Tensor) -> Tensor {
    let (n, c, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
    let [_, _, out_h, out_w] = grad_out.dims4("bilinear_resize_backward").expect("rank 4");
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let g = grad_out.data();
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let v = src[oy * out_w + ox];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::from_parts(in_dims.to_vec(), dx)
}

/// Max pooling with implicit `-inf` padding. Returns the flat input index
/// chosen for every output element.
pub fn max_pool2d(
    input: &Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = input.dims4("max_pool2d")?;
    let g = ConvGeom::new(c, (h, w), (kernel, kernel), stride, pad)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * g.out_h * g.out_w);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, g.out_h, g.out_w], out), arg))
}
