//! Fused scaled dot-product self-attention over groups of rows.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, BackwardCtx, Tensor, Var};

fn softmax_rows(s: &mut [f64], t: usize) {
    for row in s.chunks_exact_mut(t) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
}

/// Multi-head attention core on already-projected `q`, `k`, `v`.
///
/// All three are `[groups * len, n]`; rows `g*len .. (g+1)*len` form one
/// independent sequence (one chunk). Each of the `heads` heads attends over
/// a `n / heads` column slice with scale `1/sqrt(n / heads)`. No masking.
pub fn scaled_dot_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    groups: usize,
    heads: usize,
) -> Result<Var<'t>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let [rows, n] = qv.dims2("attention")?;
    if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
        return Err(Error::shape("attention: q, k, v shapes differ"));
    }
    if heads == 0 || n % heads != 0 {
        return Err(Error::config(format!("{n} channels not divisible by {heads} heads")));
    }
    if groups == 0 || rows % groups != 0 {
        return Err(Error::shape(format!("{rows} rows not divisible into {groups} groups")));
    }
    let len = rows / groups;
    let d = n / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let block = len * n;
    let pblock = heads * len * len;

    let mut out = vec![0.0; rows * n];
    let mut probs = vec![0.0; groups * pblock];
    out.par_chunks_mut(block)
        .zip(probs.par_chunks_mut(pblock))
        .enumerate()
        .for_each(|(g, (out_g, p_g))| {
            let base = g * block;
            for h in 0..heads {
                let off = base + h * d;
                let p = &mut p_g[h * len * len..(h + 1) * len * len];
                gemm(len, d, len, scale, &qv.data()[off..], n, 1, &kv.data()[off..], 1, n, 0.0, p, len);
                softmax_rows(p, len);
                gemm(len, len, d, 1.0, p, len, 1, &vv.data()[off..], n, 1, 0.0, &mut out_g[h * d..], n);
            }
        });
    let out = Tensor::new_unchecked(vec![rows, n], out);

    q.tape().record("attention", out, &[q, k, v], move |ctx: &BackwardCtx<'_>| {
        let (qd, kd, vd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
        let gd = ctx.grad.data();
        let mut dq = vec![0.0; rows * n];
        let mut dk = vec![0.0; rows * n];
        let mut dv = vec![0.0; rows * n];
        dq.par_chunks_mut(block)
            .zip(dk.par_chunks_mut(block))
            .zip(dv.par_chunks_mut(block))
            .enumerate()
            .for_each(|(g, ((dq_g, dk_g), dv_g))| {
                let base = g * block;
                let mut dp = vec![0.0; len * len];
                for h in 0..heads {
                    let off = base + h * d;
                    let p = &probs[g * pblock + h * len * len..g * pblock + (h + 1) * len * len];
                    // dV = Pᵀ dO
                    gemm(len, len, d, 1.0, p, 1, len, &gd[off..], n, 1, 0.0, &mut dv_g[h * d..], n);
                    // dP = dO Vᵀ
                    gemm(len, d, len, 1.0, &gd[off..], n, 1, &vd[off..], 1, n, 0.0, &mut dp, len);
                    for (dp_row, p_row) in dp.chunks_exact_mut(len).zip(p.chunks_exact(len)) {
                        let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                        for (x, &pv) in dp_row.iter_mut().zip(p_row) {
                            *x = pv * (*x - dot) * scale;
                        }
                    }
                    // dQ = dS K, dK = dSᵀ Q
                    gemm(len, len, d, 1.0, &dp, len, 1, &kd[off..], n, 1, 0.0, &mut dq_g[h * d..], n);
                    gemm(len, len, d, 1.0, &dp, 1, len, &qd[off..], n, 1, 0.0, &mut dk_g[h * d..], n);
                }
            });
        let shape = vec![rows, n];
        vec![
            Some(Tensor::new_unchecked(shape.clone(), dq)),
            Some(Tensor::new_unchecked(shape.clone(), dk)),
            Some(Tensor::new_unchecked(shape, dv)),
        ]
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{finite_diff_grad_check, Tape};

    #[test]
    fn gradients_for_each_operand() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Tensor::randn(&[6, 4], &mut rng);
            let k = Tensor::randn(&[6, 4], &mut rng);
            let v = Tensor::randn(&[6, 4], &mut rng);
            let proj = Tensor::randn(&[6, 4], &mut rng);
            for which in 0..3 {
                let check = finite_diff_grad_check(
                    |tape, x| {
                        let pick = |i: usize, val: &Tensor| if i == which { x } else { tape.constant(val.clone()) };
                        scaled_dot_attention(pick(0, &q), pick(1, &k), pick(2, &v), 2, 2)?
                            .mul(tape.constant(proj.clone()))?
                            .sum()
                    },
                    [&q, &k, &v][which],
                    1e-5,
                )
                .unwrap();
                assert!(check.max_rel_error < 1e-4, "operand {which} seed {seed}: {check:?}");
            }
        }
    }

    #[test]
    fn groups_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::randn(&[8, 4], &mut rng);
        let tape = Tape::new();
        let x = tape.constant(q.clone());
        let both = scaled_dot_attention(x, x, x, 2, 2).unwrap().value();
        let first = Tensor::from_vec(&[4, 4], q.data()[..16].to_vec()).unwrap();
        let f = tape.constant(first);
        let alone = scaled_dot_attention(f, f, f, 1, 2).unwrap().value();
        assert!(alone.data().iter().zip(&both.data()[..16]).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn head_divisibility_is_checked() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 6]));
        assert!(matches!(scaled_dot_attention(x, x, x, 1, 4), Err(Error::Config(_))));
    }
}
