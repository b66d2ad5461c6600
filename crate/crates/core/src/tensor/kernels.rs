//! Forward and backward kernels on raw tensors.
//!
//! These are the tape-free building blocks. The [`Tape`](super::Tape) wraps
//! them; tests compare them against naive nested loops.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Plane {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

/// Output indices `o` with `0 <= o * stride + k - pad < len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Patch-matrix view of a convolution over `[C_in, T, H, W]` input with
/// kernel `[kT, kH, kW]`; 2D convolution is the `T = kT = 1` case. Rows are
/// ordered `(ci, dt, ky, kx)` to match the weight layout, columns
/// `(to, oy, ox)` to match the output layout.
#[derive(Clone, Copy, Debug)]
struct Patches {
    cin: usize,
    t: usize,
    kt: usize,
    ot: usize,
    plane: Plane,
}

impl Patches {
    fn rows(&self) -> usize {
        self.cin * self.kt * self.plane.kh * self.plane.kw
    }

    fn cols(&self) -> usize {
        self.ot * self.plane.oh * self.plane.ow
    }

    /// Visits every valid (patch row, input row, output row) triple as
    /// contiguous spans: `f(row, input_offset, output_offset, len)` for
    /// stride 1, or one element at a time otherwise.
    fn for_each_span(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let p = self.plane;
        let in_sz = p.h * p.w;
        let mut r = 0;
        for ci in 0..self.cin {
            for dt in 0..self.kt {
                for ky in 0..p.kh {
                    let (oy0, oy1) = valid_range(ky, p.pad, p.stride, p.h, p.oh);
                    for kx in 0..p.kw {
                        let (ox0, ox1) = valid_range(kx, p.pad, p.stride, p.w, p.ow);
                        for to in 0..self.ot {
                            let base = (ci * self.t + to + dt) * in_sz;
                            for oy in oy0..oy1 {
                                let irow = base + (oy * p.stride + ky - p.pad) * p.w;
                                let orow = (to * p.oh + oy) * p.ow;
                                if p.stride == 1 {
                                    if ox1 > ox0 {
                                        f(r, irow + ox0 + kx - p.pad, orow + ox0, ox1 - ox0);
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        f(r, irow + ox * p.stride + kx - p.pad, orow + ox, 1);
                                    }
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let n = self.cols();
        let mut m = vec![0.0; self.rows() * n];
        self.for_each_span(|r, i, o, len| m[r * n + o..][..len].copy_from_slice(&input[i..][..len]));
        m
    }

    fn col2im(&self, m: &[f64], grad_in: &mut [f64]) {
        let n = self.cols();
        self.for_each_span(|r, i, o, len| {
            for (g, v) in grad_in[i..][..len].iter_mut().zip(&m[r * n + o..][..len]) {
                *g += v;
            }
        });
    }

    /// Output `[C_out, cols]` from weights `[C_out, rows]`.
    fn forward(&self, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let (k, n, cout) = (self.rows(), self.cols(), bias.len());
        let cols = self.im2col(input);
        let mut out = vec![0.0; cout * n];
        for (row, &b) in out.chunks_mut(n).zip(bias) {
            row.fill(b);
        }
        gemm(cout, k, n, weight, (k, 1), &cols, (n, 1), &mut out);
        out
    }

    /// Gradients with respect to (input, weight, bias); the input gradient
    /// only when asked for.
    fn backward(
        &self,
        input: &[f64],
        weight: &[f64],
        grad_out: &[f64],
        cout: usize,
        with_input: bool,
    ) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let (k, n) = (self.rows(), self.cols());
        let cols = self.im2col(input);
        let g_b = grad_out.chunks(n).map(|r| r.iter().sum()).collect();
        let mut g_w = vec![0.0; cout * k];
        gemm(cout, n, k, grad_out, (n, 1), &cols, (1, n), &mut g_w);
        let g_in = with_input.then(|| {
            let mut g_cols = cols;
            g_cols.fill(0.0);
            gemm(k, cout, n, weight, (1, k), grad_out, (n, 1), &mut g_cols);
            let mut g_in = vec![0.0; input.len()];
            self.col2im(&g_cols, &mut g_in);
            g_in
        });
        (g_in, g_w, g_b)
    }
}

/// `c += a · b` for an `[m, k]` matrix `a` and a `[k, n]` matrix `b` given
/// by (row, column) strides; `c` is row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    assert!(c.len() >= m * n && (m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa));
    assert!(n == 0 || k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn out_extent(op: &'static str, dim: &str, len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            op,
            format!("{dim}: padded extent {padded} smaller than kernel {k}"),
        ));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::shape(
            op,
            format!("{dim}: (extent {len} + 2*pad {pad} - kernel {k}) not divisible by stride {stride}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn expect_rank(op: &'static str, name: &str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::shape(
            op,
            format!("{name} must have rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

struct Conv2dDims {
    cin: usize,
    cout: usize,
    plane: Plane,
}

fn conv2d_dims(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Conv2dDims> {
    const OP: &str = "conv2d";
    expect_rank(OP, "input", input, 3)?;
    expect_rank(OP, "weights", weight, 4)?;
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, wcin, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wcin != cin {
        return Err(Error::shape(
            OP,
            format!("C_in: input has {cin} channels, weights expect {wcin}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(OP, format!("kernel extents must be odd, got {kh}x{kw}")));
    }
    if bias.len() != cout {
        return Err(Error::shape(
            OP,
            format!("C_out: bias has {} entries, weights have {cout}", bias.len()),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(OP, "stride must be at least 1"));
    }
    let oh = out_extent(OP, "H", h, kh, stride, pad)?;
    let ow = out_extent(OP, "W", w, kw, stride, pad)?;
    Ok(Conv2dDims {
        cin,
        cout,
        plane: Plane {
            h,
            w,
            oh,
            ow,
            kh,
            kw,
            stride,
            pad,
        },
    })
}

/// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, kH, kW]` plus bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let d = conv2d_dims(input, weight, bias, stride, pad)?;
    let p = d.patches();
    Tensor::new(
        vec![d.cout, d.plane.oh, d.plane.ow],
        p.forward(input.data(), weight.data(), bias.data()),
    )
}

/// Returns gradients with respect to (input, weight, bias).
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (g_in, g_w, g_b) = conv2d_grads(input, weight, bias, stride, pad, grad_out, true)?;
    Ok((g_in.expect("input gradient requested"), g_w, g_b))
}

pub(crate) fn conv2d_grads(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    with_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let d = conv2d_dims(input, weight, bias, stride, pad)?;
    let (g_in, g_w, g_b) = d
        .patches()
        .backward(input.data(), weight.data(), grad_out.data(), d.cout, with_input);
    Ok((
        g_in.map(|g| Tensor::new(input.shape().to_vec(), g)).transpose()?,
        Tensor::new(weight.shape().to_vec(), g_w)?,
        Tensor::new(bias.shape().to_vec(), g_b)?,
    ))
}

impl Conv2dDims {
    fn patches(&self) -> Patches {
        Patches {
            cin: self.cin,
            t: 1,
            kt: 1,
            ot: 1,
            plane: self.plane,
        }
    }
}

struct Conv3dDims {
    cin: usize,
    cout: usize,
    t: usize,
    kt: usize,
    ot: usize,
    plane: Plane,
}

impl Conv3dDims {
    fn patches(&self) -> Patches {
        Patches {
            cin: self.cin,
            t: self.t,
            kt: self.kt,
            ot: self.ot,
            plane: self.plane,
        }
    }
}

fn conv3d_dims(input: &Tensor, weight: &Tensor, bias: &Tensor, pad: usize) -> Result<Conv3dDims> {
    const OP: &str = "conv3d";
    expect_rank(OP, "input", input, 4)?;
    expect_rank(OP, "weights", weight, 5)?;
    let s = input.shape();
    let (cin, t, h, w) = (s[0], s[1], s[2], s[3]);
    let ws = weight.shape();
    let (cout, wcin, kt, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    if wcin != cin {
        return Err(Error::shape(
            OP,
            format!("C_in: input has {cin} channels, weights expect {wcin}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            OP,
            format!("spatial kernel extents must be odd, got {kh}x{kw}"),
        ));
    }
    if bias.len() != cout {
        return Err(Error::shape(
            OP,
            format!("C_out: bias has {} entries, weights have {cout}", bias.len()),
        ));
    }
    if t < kt {
        return Err(Error::InsufficientTemporal {
            op: OP,
            got: t,
            kernel: kt,
        });
    }
    let oh = out_extent(OP, "H", h, kh, 1, pad)?;
    let ow = out_extent(OP, "W", w, kw, 1, pad)?;
    Ok(Conv3dDims {
        cin,
        cout,
        t,
        kt,
        ot: t - kt + 1,
        plane: Plane {
            h,
            w,
            oh,
            ow,
            kh,
            kw,
            stride: 1,
            pad,
        },
    })
}

/// Spatio-temporal correlation of `[C_in, T, H, W]` with `[C_out, C_in, kT, kH, kW]`.
/// Zero padding is applied to H and W only; T shrinks by `kT - 1`.
pub fn conv3d(input: &Tensor, weight: &Tensor, bias: &Tensor, spatial_pad: usize) -> Result<Tensor> {
    let d = conv3d_dims(input, weight, bias, spatial_pad)?;
    let out = d.patches().forward(input.data(), weight.data(), bias.data());
    Tensor::new(vec![d.cout, d.ot, d.plane.oh, d.plane.ow], out)
}

pub fn conv3d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    spatial_pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (g_in, g_w, g_b) = conv3d_grads(input, weight, bias, spatial_pad, grad_out, true)?;
    Ok((g_in.expect("input gradient requested"), g_w, g_b))
}

pub(crate) fn conv3d_grads(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    spatial_pad: usize,
    grad_out: &Tensor,
    with_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let d = conv3d_dims(input, weight, bias, spatial_pad)?;
    let (g_in, g_w, g_b) = d
        .patches()
        .backward(input.data(), weight.data(), grad_out.data(), d.cout, with_input);
    Ok((
        g_in.map(|g| Tensor::new(input.shape().to_vec(), g)).transpose()?,
        Tensor::new(weight.shape().to_vec(), g_w)?,
        Tensor::new(bias.shape().to_vec(), g_b)?,
    ))
}

fn temporal_dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    const OP: &str = "temporal_group_conv";
    if input.shape().len() < 2 {
        return Err(Error::shape(
            OP,
            format!("input must be [T, ...], got {:?}", input.shape()),
        ));
    }
    let t = input.shape()[0];
    if weights.len() != t {
        return Err(Error::shape(
            OP,
            format!("T: {} weights for {t} time steps", weights.len()),
        ));
    }
    Ok((t, input.len() / t))
}

/// Weighted sum over the leading time axis with one weight per step shared
/// by every feature map: `[T, C, H, W] -> [C, H, W]`.
pub fn temporal_group_conv(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (t, slice) = temporal_dims(input, weights)?;
    let mut out = vec![0.0; slice];
    for (ti, &wv) in weights.data().iter().enumerate().take(t) {
        for (o, i) in out.iter_mut().zip(&input.data()[ti * slice..][..slice]) {
            *o += wv * i;
        }
    }
    Tensor::new(input.shape()[1..].to_vec(), out)
}

pub fn temporal_group_conv_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (t, slice) = temporal_dims(input, weights)?;
    let mut g_in = Tensor::zeros(input.shape());
    let mut g_w = Tensor::zeros(weights.shape());
    for ti in 0..t {
        let wv = weights.data()[ti];
        let islice = &input.data()[ti * slice..][..slice];
        let gislice = &mut g_in.data_mut()[ti * slice..][..slice];
        let mut acc = 0.0;
        for ((g, i), gi) in grad_out.data().iter().zip(islice).zip(gislice) {
            acc += g * i;
            *gi = wv * g;
        }
        g_w.data_mut()[ti] = acc;
    }
    Ok((g_in, g_w))
}

/// Max-pooling over `[C, H, W]`. Output extents are `floor((H - k) / stride) + 1`;
/// trailing rows/columns that do not fill a window are dropped. Returns the
/// pooled tensor and, per output element, the flat input index of the winner
/// (ties go to the lowest flat index).
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    const OP: &str = "maxpool2d";
    expect_rank(OP, "input", input, 3)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if k == 0 || stride == 0 {
        return Err(Error::shape(OP, "window and stride must be positive"));
    }
    if h < k || w < k {
        return Err(Error::shape(OP, format!("H,W = {h},{w} smaller than window {k}")));
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let data = input.data();
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for dy in 0..k {
                    let row = (ci * h + oy * stride + dy) * w + ox * stride;
                    for dx in 0..k {
                        let v = data[row + dx];
                        if best == usize::MAX || v > best_v || (v == best_v && row + dx < best) {
                            best = row + dx;
                            best_v = v;
                        }
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
