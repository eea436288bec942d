//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Convolution weights are `[C_out, C_in, kH, kW]`; transposed-convolution
//! weights are `[C_in, C_out, kH, kW]`, so the same kernel tensor drives a
//! convolution and its adjoint.

use rand::Rng;

use super::param::{join, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

fn out_extent(n: usize, k: usize, stride: usize, padding: usize, dim: &'static str, op: &'static str) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Invalid(format!("{op}: stride must be >= 1")));
    }
    let padded = n + 2 * padding;
    if k > padded {
        return Err(Error::shape(
            op,
            dim,
            format!("kernel extent {k} exceeds padded input extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Unfolds `x` (`channels x height x width`) into a `col_rows x col_cols` matrix.
fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let n_out = g.col_cols();
    let (h, w, s, p) = (g.height as isize, g.width as isize, g.stride as isize, g.padding as isize);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + ky as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `x`.
fn col2im(cols: &[f64], g: &Geometry, x: &mut [f64]) {
    let n_out = g.col_cols();
    let (h, w, s, p) = (g.height as isize, g.width as isize, g.stride as isize, g.padding as isize);
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable through the strides.
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

/// Forward record of a convolution, enough to run its backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ConvTape {
    cols: Vec<f64>,
    geom: Geometry,
    c_out: usize,
}

fn conv_geometry(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<(Geometry, usize)> {
    let (c, h, w) = x.dims3("conv2d")?;
    let &[c_out, c_in, kh, kw] = weight.shape() else {
        return Err(Error::shape("conv2d", "weight rank", format!("expected 4-D kernel, got {:?}", weight.shape())));
    };
    if c_in != c {
        return Err(Error::shape("conv2d", "channels", format!("input has {c}, kernel expects {c_in}")));
    }
    let out_h = out_extent(h, kh, stride, padding, "height", "conv2d")?;
    let out_w = out_extent(w, kw, stride, padding, "width", "conv2d")?;
    Ok((
        Geometry { channels: c, height: h, width: w, kh, kw, stride, padding, out_h, out_w },
        c_out,
    ))
}

fn check_bias(bias: &Tensor, n: usize, op: &'static str) -> Result<()> {
    if bias.shape() != [n] {
        return Err(Error::shape(op, "bias", format!("expected [{n}], got {:?}", bias.shape())));
    }
    Ok(())
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, ConvTape)> {
    let (g, c_out) = conv_geometry(x, weight, stride, padding)?;
    check_bias(bias, c_out, "conv2d")?;
    x.check_finite("conv2d input")?;
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    im2col(x.data(), &g, &mut cols);
    let plane = g.col_cols();
    let mut out = Vec::with_capacity(c_out * plane);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, plane));
    }
    gemm(c_out, g.col_rows(), plane, weight.data(), false, &cols, false, 1.0, &mut out);
    let out = Tensor::new(vec![c_out, g.out_h, g.out_w], out)?;
    Ok((out, ConvTape { cols, geom: g, c_out }))
}

/// Accumulates kernel and bias gradients into `dw`/`db`; returns the input gradient.
pub(crate) fn conv2d_backward(
    tape: &ConvTape,
    grad_out: &Tensor,
    weight: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
) -> Result<Tensor> {
    let g = &tape.geom;
    if grad_out.shape() != [tape.c_out, g.out_h, g.out_w] {
        return Err(Error::shape(
            "conv2d backward",
            "grad_out",
            format!("expected {:?}, got {:?}", [tape.c_out, g.out_h, g.out_w], grad_out.shape()),
        ));
    }
    let plane = g.col_cols();
    let rows = g.col_rows();
    let go = grad_out.data();
    for (o, d) in db.iter_mut().enumerate() {
        *d += go[o * plane..(o + 1) * plane].iter().sum::<f64>();
    }
    gemm(tape.c_out, plane, rows, go, false, &tape.cols, true, 1.0, dw);
    let mut dcols = vec![0.0; rows * plane];
    gemm(rows, tape.c_out, plane, weight.data(), true, go, false, 0.0, &mut dcols);
    let mut dx = vec![0.0; g.channels * g.height * g.width];
    col2im(&dcols, g, &mut dx);
    Tensor::new(vec![g.channels, g.height, g.width], dx)
}

/// 2-D convolution of a `[C_in, H, W]` map.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_forward(x, weight, bias, stride, padding).map(|(y, _)| y)
}

#[derive(Clone, Debug)]
pub(crate) struct DeconvTape {
    input: Vec<f64>,
    c_in: usize,
    // geometry of the equivalent forward convolution (output map -> input grid)
    geom: Geometry,
}

fn deconv_geometry(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<(Geometry, usize)> {
    let (c, h, w) = x.dims3("deconv2d")?;
    let &[c_in, c_out, kh, kw] = weight.shape() else {
        return Err(Error::shape("deconv2d", "weight rank", format!("expected 4-D kernel, got {:?}", weight.shape())));
    };
    if c_in != c {
        return Err(Error::shape("deconv2d", "channels", format!("input has {c}, kernel expects {c_in}")));
    }
    if stride == 0 {
        return Err(Error::Invalid("deconv2d: stride must be >= 1".into()));
    }
    let grow = |n: usize, k: usize, dim: &'static str| -> Result<usize> {
        let full = (n - 1) * stride + k;
        full.checked_sub(2 * padding).filter(|&v| v > 0).ok_or_else(|| {
            Error::shape("deconv2d", dim, format!("padding {padding} consumes the whole output extent {full}"))
        })
    };
    let out_h = grow(h, kh, "height")?;
    let out_w = grow(w, kw, "width")?;
    Ok((
        Geometry { channels: c_out, height: out_h, width: out_w, kh, kw, stride, padding, out_h: h, out_w: w },
        c_in,
    ))
}

pub(crate) fn deconv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, DeconvTape)> {
    let (g, c_in) = deconv_geometry(x, weight, stride, padding)?;
    check_bias(bias, g.channels, "deconv2d")?;
    x.check_finite("deconv2d input")?;
    let grid = g.col_cols();
    let rows = g.col_rows();
    let mut cols = vec![0.0; rows * grid];
    gemm(rows, c_in, grid, weight.data(), true, x.data(), false, 0.0, &mut cols);
    let plane = g.height * g.width;
    let mut out = vec![0.0; g.channels * plane];
    col2im(&cols, &g, &mut out);
    for (c, &b) in bias.data().iter().enumerate() {
        out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
    let out = Tensor::new(vec![g.channels, g.height, g.width], out)?;
    Ok((out, DeconvTape { input: x.data().to_vec(), c_in, geom: g }))
}

pub(crate) fn deconv2d_backward(
    tape: &DeconvTape,
    grad_out: &Tensor,
    weight: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
) -> Result<Tensor> {
    let g = &tape.geom;
    if grad_out.shape() != [g.channels, g.height, g.width] {
        return Err(Error::shape(
            "deconv2d backward",
            "grad_out",
            format!("expected {:?}, got {:?}", [g.channels, g.height, g.width], grad_out.shape()),
        ));
    }
    let plane = g.height * g.width;
    let go = grad_out.data();
    for (c, d) in db.iter_mut().enumerate() {
        *d += go[c * plane..(c + 1) * plane].iter().sum::<f64>();
    }
    let grid = g.col_cols();
    let rows = g.col_rows();
    let mut dcols = vec![0.0; rows * grid];
    im2col(go, g, &mut dcols);
    gemm(tape.c_in, grid, rows, &tape.input, false, &dcols, true, 1.0, dw);
    let mut dx = vec![0.0; tape.c_in * grid];
    gemm(tape.c_in, rows, grid, weight.data(), false, &dcols, false, 0.0, &mut dx);
    Tensor::new(vec![tape.c_in, g.out_h, g.out_w], dx)
}

/// Transposed convolution: output extent `(H - 1) * stride - 2 * padding + kH`.
pub fn deconv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    deconv2d_forward(x, weight, bias, stride, padding).map(|(y, _)| y)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    tape: Option<ConvTape>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, rng: &mut R) -> Self {
        Conv2d {
            weight: Param::kaiming(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng),
            bias: Param::new(Tensor::zeros(&[c_out])),
            stride,
            padding,
            tape: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, tape) = conv2d_forward(x, &self.weight.value, &self.bias.value, self.stride, self.padding)?;
        self.tape = Some(tape);
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let tape = self.tape.as_ref().ok_or(Error::NoTape("conv2d"))?;
        conv2d_backward(tape, grad_out, &self.weight.value, &mut self.weight.grad, &mut self.bias.grad)
    }

    pub fn clear_tape(&mut self) {
        self.tape = None;
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    tape: Option<DeconvTape>,
}

impl Deconv2d {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, rng: &mut R) -> Self {
        Deconv2d {
            weight: Param::kaiming(&[c_in, c_out, kernel, kernel], c_in * kernel * kernel, rng),
            bias: Param::new(Tensor::zeros(&[c_out])),
            stride,
            padding,
            tape: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, tape) = deconv2d_forward(x, &self.weight.value, &self.bias.value, self.stride, self.padding)?;
        self.tape = Some(tape);
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let tape = self.tape.as_ref().ok_or(Error::NoTape("deconv2d"))?;
        deconv2d_backward(tape, grad_out, &self.weight.value, &mut self.weight.grad, &mut self.bias.grad)
    }

    pub fn clear_tape(&mut self) {
        self.tape = None;
    }
}

impl Module for Deconv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
