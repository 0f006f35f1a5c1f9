use super::{gemm, sigmoid, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes differ {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Checks that `row` is a vector matching the last axis of `x`.
fn row_broadcast(op: &str, x: &Tensor, row: &Tensor) -> Result<usize> {
    let n = *x.shape().last().unwrap_or(&1);
    if row.shape() != [n] {
        return Err(Error::shape(format!(
            "{op}: expected [{n}] to broadcast over {:?}, got {:?}",
            x.shape(),
            row.shape()
        )));
    }
    Ok(n)
}

fn column_sums(g: &Tensor, n: usize) -> Tensor {
    let mut out = vec![0.0; n];
    for chunk in g.data().chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new_unchecked(vec![n], out)
}

impl<'t> Var<'t> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out = a.matmul(&b)?;
        let [m, k] = a.dims2("matmul")?;
        let n = b.shape()[1];
        self.tape().record("matmul", out, &[self, other], move |ctx: &super::BackwardCtx<'_>| {
            let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let da = ctx.needs(0).then(|| {
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, 1.0, g.data(), n, 1, b.data(), 1, n, 0.0, &mut da, k);
                Tensor::new_unchecked(vec![m, k], da)
            });
            let db = ctx.needs(1).then(|| {
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, 1.0, a.data(), 1, k, g.data(), n, 1, 0.0, &mut db, n);
                Tensor::new_unchecked(vec![k, n], db)
            });
            vec![da, db]
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x + y)?;
        self.tape().record("add", out, &[self, other], |ctx: &super::BackwardCtx<'_>| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x - y)?;
        self.tape().record("sub", out, &[self, other], |ctx: &super::BackwardCtx<'_>| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.scale(-1.0))]
        })
    }

    /// Elementwise product of equal shapes.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        self.tape().record("mul", out, &[self, other], |ctx: &super::BackwardCtx<'_>| {
            let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            vec![
                ctx.needs(0).then(|| g.zip_map(b, |g, b| g * b).unwrap()),
                ctx.needs(1).then(|| g.zip_map(a, |g, a| g * a).unwrap()),
            ]
        })
    }

    /// Adds a `[N]` vector to every row of a `[..., N]` tensor.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (x, r) = (self.value(), row.value());
        let n = row_broadcast("add_row", &x, &r)?;
        let mut out = x.data().to_vec();
        for chunk in out.chunks_exact_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let out = Tensor::new_unchecked(x.shape().to_vec(), out);
        self.tape().record("add_row", out, &[self, row], move |ctx: &super::BackwardCtx<'_>| {
            vec![
                Some(ctx.grad.clone()),
                ctx.needs(1).then(|| column_sums(ctx.grad, n)),
            ]
        })
    }

    /// Multiplies every row of a `[..., N]` tensor by a `[N]` vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (x, r) = (self.value(), row.value());
        let n = row_broadcast("mul_row", &x, &r)?;
        let mut out = x.data().to_vec();
        for chunk in out.chunks_exact_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o *= b;
            }
        }
        let out = Tensor::new_unchecked(x.shape().to_vec(), out);
        self.tape().record("mul_row", out, &[self, row], move |ctx: &super::BackwardCtx<'_>| {
            let (x, r, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let dx = ctx.needs(0).then(|| {
                let mut dx = g.data().to_vec();
                for chunk in dx.chunks_exact_mut(n) {
                    for (o, b) in chunk.iter_mut().zip(r.data()) {
                        *o *= b;
                    }
                }
                Tensor::new_unchecked(x.shape().to_vec(), dx)
            });
            let dr = ctx.needs(1).then(|| {
                let mut dr = vec![0.0; n];
                for (gc, xc) in g.data().chunks_exact(n).zip(x.data().chunks_exact(n)) {
                    for ((o, g), x) in dr.iter_mut().zip(gc).zip(xc) {
                        *o += g * x;
                    }
                }
                Tensor::new_unchecked(vec![n], dr)
            });
            vec![dx, dr]
        })
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let out = self.value().scale(c);
        self.tape().record("scale", out, &[self], move |ctx: &super::BackwardCtx<'_>| {
            vec![Some(ctx.grad.scale(c))]
        })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let out = self.value().map(|v| v.max(0.0));
        self.tape().record("relu", out, &[self], |ctx: &super::BackwardCtx<'_>| {
            vec![Some(
                ctx.grad
                    .zip_map(ctx.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })
                    .unwrap(),
            )]
        })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let out = self.value().map(sigmoid);
        self.tape().record("sigmoid", out, &[self], |ctx: &super::BackwardCtx<'_>| {
            vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * y * (1.0 - y)).unwrap())]
        })
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let out = self.value().map(f64::tanh);
        self.tape().record("tanh", out, &[self], |ctx: &super::BackwardCtx<'_>| {
            vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * (1.0 - y * y)).unwrap())]
        })
    }

    /// Parametric ReLU with a single shared slope.
    pub fn prelu(self, slope: Var<'t>) -> Result<Var<'t>> {
        let (x, a) = (self.value(), slope.value());
        if a.numel() != 1 {
            return Err(Error::shape(format!("prelu slope must have one element, got {:?}", a.shape())));
        }
        let alpha = a.item();
        let out = x.map(|v| if v > 0.0 { v } else { alpha * v });
        self.tape().record("prelu", out, &[self, slope], move |ctx: &super::BackwardCtx<'_>| {
            let (x, g) = (ctx.inputs[0], ctx.grad);
            let dx = ctx
                .needs(0)
                .then(|| g.zip_map(x, |g, x| if x > 0.0 { g } else { alpha * g }).unwrap());
            let da = ctx.needs(1).then(|| {
                let s: f64 = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x > 0.0 { 0.0 } else { g * x })
                    .sum();
                Tensor::new_unchecked(ctx.inputs[1].shape().to_vec(), vec![s])
            });
            vec![dx, da]
        })
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.softmax(axis)?;
        let len = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let outer: usize = x.shape()[..axis].iter().product();
        self.tape().record("softmax", out, &[self], move |ctx: &super::BackwardCtx<'_>| {
            let (y, g) = (ctx.output.data(), ctx.grad.data());
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        dx[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            vec![Some(Tensor::new_unchecked(ctx.output.shape().to_vec(), dx))]
        })
    }

    /// Layer normalization over the last axis with per-channel gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), gain.value(), bias.value());
        let n = row_broadcast("layer_norm", &x, &w)?;
        row_broadcast("layer_norm", &x, &b)?;
        let rows = x.numel() / n;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * w.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new_unchecked(x.shape().to_vec(), out);
        self.tape().record(
            "layer_norm",
            out,
            &[self, gain, bias],
            move |ctx: &super::BackwardCtx<'_>| {
                let (g, w) = (ctx.grad.data(), ctx.inputs[1].data());
                let mut dx = vec![0.0; g.len()];
                let mut dw = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * w[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dw[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                    mean_dh /= n as f64;
                    mean_dh_h /= n as f64;
                    for j in 0..n {
                        let dh = gr[j] * w[j];
                        dx[r * n + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    Some(Tensor::new_unchecked(ctx.inputs[0].shape().to_vec(), dx)),
                    Some(Tensor::new_unchecked(vec![n], dw)),
                    Some(Tensor::new_unchecked(vec![n], db)),
                ]
            },
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        let shape = x.shape().to_vec();
        self.tape().record("sum", out, &[self], move |ctx: &super::BackwardCtx<'_>| {
            vec![Some(Tensor::full(&shape, ctx.grad.item()))]
        })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// `max(x, lo)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(self, lo: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v.max(lo));
        self.tape().record("clamp_min", out, &[self], move |ctx: &super::BackwardCtx<'_>| {
            vec![Some(
                ctx.grad
                    .zip_map(ctx.inputs[0], |g, x| if x >= lo { g } else { 0.0 })
                    .unwrap(),
            )]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        self.tape().record("reshape", out, &[self], move |ctx: &super::BackwardCtx<'_>| {
            vec![Some(Tensor::new_unchecked(orig.clone(), ctx.grad.data().to_vec()))]
        })
    }

    /// Rank-2 transpose.
    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        self.tape().record("transpose", out, &[self], |ctx: &super::BackwardCtx<'_>| {
            vec![Some(ctx.grad.transpose().unwrap())]
        })
    }

    /// Swaps the first two axes of a rank-3 tensor: `[a, b, c] -> [b, a, c]`.
    pub fn swap01(self) -> Result<Var<'t>> {
        let x = self.value();
        let [a, b, c] = x.dims3("swap01")?;
        let out = swap01_data(x.data(), a, b, c);
        let out = Tensor::new_unchecked(vec![b, a, c], out);
        self.tape().record("swap01", out, &[self], move |ctx: &super::BackwardCtx<'_>| {
            vec![Some(Tensor::new_unchecked(
                vec![a, b, c],
                swap01_data(ctx.grad.data(), b, a, c),
            ))]
        })
    }

    /// Index `i` along the first axis; drops that axis.
    pub fn select(self, i: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 || i >= x.shape()[0] {
            return Err(Error::shape(format!("select {i} out of range for {:?}", x.shape())));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let out = Tensor::new_unchecked(
            x.shape()[1..].to_vec(),
            x.data()[i * inner..(i + 1) * inner].to_vec(),
        );
        let full = x.shape().to_vec();
        self.tape().record("select", out, &[self], move |ctx: &super::BackwardCtx<'_>| {
            let mut dx = Tensor::zeros(&full);
            dx.data_mut()[i * inner..(i + 1) * inner].copy_from_slice(ctx.grad.data());
            vec![Some(dx)]
        })
    }

    /// Rows `start .. start + len` along the first axis. Rows outside the
    /// input read as zero, so this both trims and zero-pads.
    pub fn window_rows(self, start: isize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 || len == 0 {
            return Err(Error::shape(format!("window_rows on {:?} with len {len}", x.shape())));
        }
        let rows = x.shape()[0] as isize;
        let inner: usize = x.shape()[1..].iter().product();
        let mut out = vec![0.0; len * inner];
        let valid = move |i: usize| {
            let src = start + i as isize;
            (0..rows).contains(&src).then_some(src as usize)
        };
        for i in 0..len {
            if let Some(src) = valid(i) {
                out[i * inner..(i + 1) * inner].copy_from_slice(&x.data()[src * inner..(src + 1) * inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        let full = shape.clone();
        shape[0] = len;
        let out = Tensor::new_unchecked(shape, out);
        self.tape().record("window_rows", out, &[self], move |ctx: &super::BackwardCtx<'_>| {
            let mut dx = Tensor::zeros(&full);
            for i in 0..len {
                if let Some(src) = valid(i) {
                    dx.data_mut()[src * inner..(src + 1) * inner]
                        .copy_from_slice(&ctx.grad.data()[i * inner..(i + 1) * inner]);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Columns `start .. start + len` of a rank-2 tensor.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [rows, cols] = x.dims2("slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::shape(format!("slice_cols {start}+{len} exceeds {cols} columns")));
        }
        let out: Vec<f64> = x
            .data()
            .chunks_exact(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new_unchecked(vec![rows, len], out);
        self.tape().record("slice_cols", out, &[self], move |ctx: &super::BackwardCtx<'_>| {
            let mut dx = vec![0.0; rows * cols];
            for (r, g) in ctx.grad.data().chunks_exact(len).enumerate() {
                dx[r * cols + start..r * cols + start + len].copy_from_slice(g);
            }
            vec![Some(Tensor::new_unchecked(vec![rows, cols], dx))]
        })
    }

    /// Mean over the first axis: `[S, ...] -> [...]`.
    pub fn mean_axis0(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(Error::shape("mean_axis0 on a scalar"));
        }
        let s = x.shape()[0];
        let inner: usize = x.shape()[1..].iter().product();
        let mut out = vec![0.0; inner];
        for chunk in x.data().chunks_exact(inner) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= s as f64;
        }
        let full = x.shape().to_vec();
        let out = Tensor::new_unchecked(full[1..].to_vec(), out);
        self.tape().record("mean_axis0", out, &[self], move |ctx: &super::BackwardCtx<'_>| {
            let g = ctx.grad.scale(1.0 / s as f64);
            let mut dx = Vec::with_capacity(s * inner);
            for _ in 0..s {
                dx.extend_from_slice(g.data());
            }
            vec![Some(Tensor::new_unchecked(full.clone(), dx))]
        })
    }

    /// Stacks equally shaped tensors along a new first axis.
    pub fn stack(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let inner_shape = values[0].shape().to_vec();
        for v in &values {
            if v.shape() != inner_shape.as_slice() {
                return Err(Error::shape(format!(
                    "stack: shapes differ {:?} vs {:?}",
                    inner_shape,
                    v.shape()
                )));
            }
        }
        let inner = values[0].numel();
        let mut data = Vec::with_capacity(inner * parts.len());
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner_shape);
        let out = Tensor::new_unchecked(shape, data);
        let count = parts.len();
        first.tape().record("stack", out, parts, move |ctx: &super::BackwardCtx<'_>| {
            (0..count)
                .map(|i| {
                    ctx.needs(i).then(|| {
                        Tensor::new_unchecked(
                            inner_shape.clone(),
                            ctx.grad.data()[i * inner..(i + 1) * inner].to_vec(),
                        )
                    })
                })
                .collect()
        })
    }
}

pub(crate) fn swap01_data(x: &[f64], a: usize, b: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * c;
            let dst = (j * a + i) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::{finite_diff_grad_check, Tape, Tensor, Var};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sum_of_leaves_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[3, 4], &mut rng(1)), true);
        let y = tape.leaf(Tensor::randn(&[3, 4], &mut rng(2)), true);
        let loss = x.add(y).unwrap().add(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(y).unwrap(), &Tensor::ones(&[3, 4]));
        assert_eq!(g.get(x).unwrap(), &Tensor::full(&[3, 4], 2.0));
    }

    #[test]
    fn power_rule() {
        let tape = Tape::new();
        let xv = Tensor::randn(&[5], &mut rng(3));
        let x = tape.leaf(xv.clone(), true);
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().max_abs_diff(&xv.scale(2.0)) < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn nan_is_a_hard_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], f64::MAX), true);
        assert!(matches!(x.scale(10.0), Err(crate::Error::NonFinite("scale"))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let c = tape.constant(Tensor::ones(&[2]));
        let loss = x.mul(c).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.len(), 1);
    }

    type UnaryOp = for<'t> fn(Var<'t>) -> crate::Result<Var<'t>>;

    fn check_unary(name: &str, shape: &[usize], op: UnaryOp) {
        for seed in 0..20 {
            let mut r = rng(seed);
            let x = Tensor::randn(shape, &mut r);
            let out_shape = {
                let t = Tape::new();
                op(t.constant(x.clone())).unwrap().shape()
            };
            let proj = Tensor::randn(&out_shape, &mut r);
            let err = finite_diff_grad_check(
                |tape, v| {
                    let p = tape.constant(proj.clone());
                    op(v)?.mul(p)?.sum()
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err.max_rel_error < 1e-4, "{name} seed {seed}: {err:?}");
        }
    }

    #[test]
    fn unary_gradients() {
        check_unary("sigmoid", &[3, 4], |v| v.sigmoid());
        check_unary("tanh", &[3, 4], |v| v.tanh());
        check_unary("relu", &[3, 4], |v| v.relu());
        check_unary("softmax0", &[4, 3], |v| v.softmax(0));
        check_unary("softmax1", &[4, 3], |v| v.softmax(1));
        check_unary("transpose", &[4, 3], |v| v.transpose());
        check_unary("swap01", &[2, 3, 4], |v| v.swap01());
        check_unary("mean_axis0", &[3, 5], |v| v.mean_axis0());
        check_unary("select", &[3, 5], |v| v.select(2));
        check_unary("window_pad", &[3, 2], |v| v.window_rows(-2, 6));
        check_unary("window_trim", &[6, 2], |v| v.window_rows(1, 3));
        check_unary("slice_cols", &[3, 6], |v| v.slice_cols(2, 3));
        check_unary("reshape", &[3, 4], |v| v.reshape(&[2, 6]));
        check_unary("mul_self", &[3, 4], |v| v.mul(v));
        check_unary("stack", &[3], |v| Var::stack(&[v, v.scale(2.0)?]));
    }

    #[test]
    fn binary_gradients() {
        for seed in 0..20 {
            let mut r = rng(100 + seed);
            let a = Tensor::randn(&[4, 3], &mut r);
            let b = Tensor::randn(&[3, 5], &mut r);
            let row = Tensor::randn(&[5], &mut r);
            let slope = Tensor::from_vec(&[1], vec![0.25]).unwrap();
            let proj = Tensor::randn(&[4, 5], &mut r);
            // Differentiate w.r.t. each operand in turn.
            let with_a = finite_diff_grad_check(
                |t, v| {
                    let y = v.matmul(t.leaf(b.clone(), true))?;
                    let y = y.add_row(t.leaf(row.clone(), true))?.mul_row(t.leaf(row.clone(), true))?;
                    y.prelu(t.leaf(slope.clone(), true))?.mul(t.constant(proj.clone()))?.sum()
                },
                &a,
                1e-5,
            )
            .unwrap();
            assert!(with_a.max_rel_error < 1e-4, "{with_a:?}");
            let with_b = finite_diff_grad_check(
                |t, v| t.leaf(a.clone(), true).matmul(v)?.mul(t.constant(proj.clone()))?.sum(),
                &b,
                1e-5,
            )
            .unwrap();
            assert!(with_b.max_rel_error < 1e-4, "{with_b:?}");
            let x = Tensor::randn(&[4, 5], &mut r);
            let with_row = finite_diff_grad_check(
                |t, v| {
                    let xv = t.constant(x.clone());
                    xv.mul_row(v)?.add_row(v)?.mul(t.constant(proj.clone()))?.sum()
                },
                &row,
                1e-5,
            )
            .unwrap();
            assert!(with_row.max_rel_error < 1e-4, "{with_row:?}");
            let with_slope = finite_diff_grad_check(
                |t, v| t.constant(x.clone()).prelu(v)?.mul(t.constant(proj.clone()))?.sum(),
                &slope,
                1e-5,
            )
            .unwrap();
            assert!(with_slope.max_rel_error < 1e-4, "{with_slope:?}");
        }
    }

    #[test]
    fn layer_norm_gradients() {
        for seed in 0..20 {
            let mut r = rng(200 + seed);
            let x = Tensor::randn(&[5, 6], &mut r);
            let w = Tensor::randn(&[6], &mut r);
            let b = Tensor::randn(&[6], &mut r);
            let proj = Tensor::randn(&[5, 6], &mut r);
            for (which, input) in [&x, &w, &b].into_iter().enumerate() {
                let err = finite_diff_grad_check(
                    |t, v| {
                        let pick = |i: usize, val: &Tensor| if which == i { v } else { t.constant(val.clone()) };
                        pick(0, &x)
                            .layer_norm(pick(1, &w), pick(2, &b), 1e-5)?
                            .mul(t.constant(proj.clone()))?
                            .sum()
                    },
                    input,
                    1e-5,
                )
                .unwrap();
                assert!(err.max_rel_error < 1e-4, "input {which} seed {seed}: {err:?}");
            }
        }
    }
}
