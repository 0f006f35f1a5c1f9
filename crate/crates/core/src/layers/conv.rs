//! Valid (unpadded) strided 1-D convolution and its transpose.
//!
//! Both are computed as a GEMM against an im2col frame matrix. `im2col` and
//! `col2im` are exact adjoints, which makes the transposed convolution the
//! adjoint of the forward one.

use super::params::{Bound, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{gemm, BackwardCtx, Tensor, Var};

pub fn conv_output_len(len: usize, kernel: usize, stride: usize) -> Result<usize> {
    if len < kernel {
        return Err(Error::InputTooShort { len, min: kernel });
    }
    Ok((len - kernel) / stride + 1)
}

pub fn conv_transpose_output_len(frames: usize, kernel: usize, stride: usize) -> usize {
    (frames - 1) * stride + kernel
}

/// `cols[t, c*k + j] = x[c, t*stride + j]` for `x: [ch, len]`.
fn im2col(x: &[f64], ch: usize, len: usize, k: usize, stride: usize, frames: usize) -> Vec<f64> {
    let width = ch * k;
    let mut cols = vec![0.0; frames * width];
    for t in 0..frames {
        for c in 0..ch {
            let src = c * len + t * stride;
            let dst = t * width + c * k;
            cols[dst..dst + k].copy_from_slice(&x[src..src + k]);
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds frames back onto `[ch, len]`.
fn col2im(cols: &[f64], ch: usize, len: usize, k: usize, stride: usize, frames: usize) -> Vec<f64> {
    let width = ch * k;
    let mut x = vec![0.0; ch * len];
    for t in 0..frames {
        for c in 0..ch {
            let dst = c * len + t * stride;
            let src = t * width + c * k;
            for (o, v) in x[dst..dst + k].iter_mut().zip(&cols[src..src + k]) {
                *o += v;
            }
        }
    }
    x
}

fn row_sums(g: &Tensor, rows: usize, cols: usize) -> Tensor {
    let sums = g.data().chunks_exact(cols).map(|r| r.iter().sum()).collect();
    Tensor::new_unchecked(vec![rows], sums)
}

/// `x: [in, T]`, `weight: [out, in, k]`, `bias: [out]` -> `[out, (T-k)/stride + 1]`.
pub fn conv1d<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>, stride: usize) -> Result<Var<'t>> {
    let (xv, wv, bv) = (x.value(), weight.value(), bias.value());
    let [cin, len] = xv.dims2("conv1d input")?;
    let [cout, win, k] = wv.dims3("conv1d kernel")?;
    if win != cin || bv.shape() != [cout] || stride == 0 {
        return Err(Error::shape(format!(
            "conv1d: input {:?}, kernel {:?}, bias {:?}, stride {stride}",
            xv.shape(),
            wv.shape(),
            bv.shape()
        )));
    }
    let frames = conv_output_len(len, k, stride)?;
    let width = cin * k;
    let cols = im2col(xv.data(), cin, len, k, stride, frames);
    let mut out = vec![0.0; cout * frames];
    // out[o, t] = sum_w W[o, w] * cols[t, w]
    gemm(cout, width, frames, 1.0, wv.data(), width, 1, &cols, 1, width, 0.0, &mut out, frames);
    for (o, row) in out.chunks_exact_mut(frames).enumerate() {
        let b = bv.data()[o];
        row.iter_mut().for_each(|v| *v += b);
    }
    let out = Tensor::new_unchecked(vec![cout, frames], out);
    x.tape().record("conv1d", out, &[x, weight, bias], move |ctx: &BackwardCtx<'_>| {
        let (g, w) = (ctx.grad.data(), ctx.inputs[1].data());
        let dx = ctx.needs(0).then(|| {
            let mut dcols = vec![0.0; frames * width];
            gemm(frames, cout, width, 1.0, g, 1, frames, w, width, 1, 0.0, &mut dcols, width);
            Tensor::new_unchecked(vec![cin, len], col2im(&dcols, cin, len, k, stride, frames))
        });
        let dw = ctx.needs(1).then(|| {
            let mut dw = vec![0.0; cout * width];
            gemm(cout, frames, width, 1.0, g, frames, 1, &cols, width, 1, 0.0, &mut dw, width);
            Tensor::new_unchecked(vec![cout, cin, k], dw)
        });
        let db = ctx.needs(2).then(|| row_sums(ctx.grad, cout, frames));
        vec![dx, dw, db]
    })
}

/// `x: [a, T']`, `weight: [a, b, k]`, `bias: [b]` -> `[b, (T'-1)*stride + k]`.
///
/// With a zero bias this is the adjoint of [`conv1d`] run with the same
/// `[a, b, k]` kernel (mapping `b` channels to `a`).
pub fn conv_transpose1d<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>, stride: usize) -> Result<Var<'t>> {
    let (xv, wv, bv) = (x.value(), weight.value(), bias.value());
    let [cin, frames] = xv.dims2("conv_transpose1d input")?;
    let [win, cout, k] = wv.dims3("conv_transpose1d kernel")?;
    if win != cin || bv.shape() != [cout] || stride == 0 {
        return Err(Error::shape(format!(
            "conv_transpose1d: input {:?}, kernel {:?}, bias {:?}, stride {stride}",
            xv.shape(),
            wv.shape(),
            bv.shape()
        )));
    }
    let len = conv_transpose_output_len(frames, k, stride);
    let width = cout * k;
    // cols[t, w] = sum_a x[a, t] * W[a, w]
    let mut cols = vec![0.0; frames * width];
    gemm(frames, cin, width, 1.0, xv.data(), 1, frames, wv.data(), width, 1, 0.0, &mut cols, width);
    let mut out = col2im(&cols, cout, len, k, stride, frames);
    for (o, row) in out.chunks_exact_mut(len).enumerate() {
        let b = bv.data()[o];
        row.iter_mut().for_each(|v| *v += b);
    }
    let out = Tensor::new_unchecked(vec![cout, len], out);
    x.tape().record("conv_transpose1d", out, &[x, weight, bias], move |ctx: &BackwardCtx<'_>| {
        let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let dcols = im2col(ctx.grad.data(), cout, len, k, stride, frames);
        let dx = ctx.needs(0).then(|| {
            let mut dx = vec![0.0; cin * frames];
            gemm(cin, width, frames, 1.0, w, width, 1, &dcols, 1, width, 0.0, &mut dx, frames);
            Tensor::new_unchecked(vec![cin, frames], dx)
        });
        let dw = ctx.needs(1).then(|| {
            let mut dw = vec![0.0; cin * width];
            gemm(cin, frames, width, 1.0, x, frames, 1, &dcols, width, 1, 0.0, &mut dw, width);
            Tensor::new_unchecked(vec![cin, cout, k], dw)
        });
        let db = ctx.needs(2).then(|| row_sums(ctx.grad, cout, len));
        vec![dx, dw, db]
    })
}

/// Kernel, bias and stride of a 1-D convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvParams {
    /// Forward convolution `in_ch -> out_ch`; kernel stored `[out, in, k]`.
    pub fn declare_conv(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        check_kernel(kernel, stride)?;
        Ok(Self {
            weight: store.declare(format!("{name}.weight"), &[out_ch, in_ch, kernel], Init::FanIn(in_ch * kernel))?,
            bias: store.declare(format!("{name}.bias"), &[out_ch], Init::Const(0.0))?,
            stride,
        })
    }

    /// Transposed convolution `in_ch -> out_ch`; kernel stored `[in, out, k]`.
    pub fn declare_transpose(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        check_kernel(kernel, stride)?;
        Ok(Self {
            weight: store.declare(format!("{name}.weight"), &[in_ch, out_ch, kernel], Init::FanIn(in_ch * kernel))?,
            bias: store.declare(format!("{name}.bias"), &[out_ch], Init::Const(0.0))?,
            stride,
        })
    }

    pub fn conv1d<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        conv1d(x, p[self.weight], p[self.bias], self.stride)
    }

    pub fn conv_transpose1d<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        conv_transpose1d(x, p[self.weight], p[self.bias], self.stride)
    }
}

fn check_kernel(kernel: usize, stride: usize) -> Result<()> {
    if stride == 0 || kernel < stride {
        return Err(Error::config(format!(
            "kernel size {kernel} must be >= stride {stride} > 0"
        )));
    }
    Ok(())
}
