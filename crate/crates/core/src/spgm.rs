//! Single-path global modulation: parameter-light global context for a
//! chunked feature tensor `x_f: [K, S, N]`.
//!
//! 1. Chunk pooling reduces every chunk to one `N`-vector, either by taking
//!    its last frame (LE) or by attentive pooling with a learned scoring
//!    vector (AP).
//! 2. Inter pooling averages the `S` chunk vectors into one global vector
//!    `e`.
//! 3. Modulation scales every frame by the time-independent gain
//!    `g = sigmoid(W_s e) + W_g e`, i.e. `x_o = g ⊙ x_f`.
//!
//! The block has no bias terms: `2 N^2` parameters for LE, `2 N^2 + N` for AP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{BackwardCtx, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingMethod {
    #[serde(rename = "le")]
    LastElement,
    #[serde(rename = "ap")]
    AttentivePooling,
}

impl std::str::FromStr for PoolingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "le" | "last" | "last_element" => Ok(Self::LastElement),
            "ap" | "attentive" | "attentive_pooling" => Ok(Self::AttentivePooling),
            _ => Err(Error::config(format!("unknown pooling method `{s}` (expected le|ap)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SpgmParams {
    pub method: PoolingMethod,
    /// `[N, N]`, sigmoid path.
    pub w_s: ParamId,
    /// `[N, N]`, linear path.
    pub w_g: ParamId,
    /// `[N]`, attentive-pooling scores; present iff `method` is AP.
    pub w_att: Option<ParamId>,
}

impl SpgmParams {
    pub fn declare(store: &mut ParamStore, name: &str, n: usize, method: PoolingMethod) -> Result<Self> {
        let w_s = store.declare(format!("{name}.W_s"), &[n, n], Init::FanIn(n))?;
        let w_g = store.declare(format!("{name}.W_g"), &[n, n], Init::FanIn(n))?;
        let w_att = match method {
            PoolingMethod::AttentivePooling => Some(store.declare(format!("{name}.w_att"), &[n], Init::FanIn(n))?),
            PoolingMethod::LastElement => None,
        };
        Ok(Self { method, w_s, w_g, w_att })
    }

    pub fn param_count(n: usize, method: PoolingMethod) -> usize {
        2 * n * n
            + match method {
                PoolingMethod::LastElement => 0,
                PoolingMethod::AttentivePooling => n,
            }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x_f: Var<'t>) -> Result<Var<'t>> {
        let w_att = self.w_att.map(|id| p[id]);
        spgm_block_forward(x_f, self.method, p[self.w_s], p[self.w_g], w_att)
    }
}

/// `out[s] = x[K-1, s, :]`.
pub fn chunk_pool_le(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("chunk pooling expects [K, S, N], got {shape:?}")));
    }
    x.select(shape[0] - 1)
}

/// Softmax-weighted average of each chunk's frames, scored by `w_att · x`.
pub fn chunk_pool_ap<'t>(x: Var<'t>, w_att: Var<'t>) -> Result<Var<'t>> {
    let (xv, wv) = (x.value(), w_att.value());
    let [k, s_count, n] = xv.dims3("attentive pooling")?;
    if wv.shape() != [n] {
        return Err(Error::shape(format!("attentive pooling vector {:?} != [{n}]", wv.shape())));
    }
    let xd = xv.data();
    let row = |kk: usize, s: usize| &xd[(kk * s_count + s) * n..(kk * s_count + s + 1) * n];
    // weights[s * k + kk]
    let mut weights = vec![0.0; s_count * k];
    let mut out = vec![0.0; s_count * n];
    for s in 0..s_count {
        let a = &mut weights[s * k..(s + 1) * k];
        for (kk, slot) in a.iter_mut().enumerate() {
            *slot = row(kk, s).iter().zip(wv.data()).map(|(x, w)| x * w).sum();
        }
        let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = a.iter_mut().map(|v| {
            *v = (*v - max).exp();
            *v
        }).sum();
        a.iter_mut().for_each(|v| *v /= total);
        let o = &mut out[s * n..(s + 1) * n];
        for (kk, &wk) in a.iter().enumerate() {
            for (ov, xv) in o.iter_mut().zip(row(kk, s)) {
                *ov += wk * xv;
            }
        }
    }
    let out = Tensor::new_unchecked(vec![s_count, n], out);
    x.tape().record("chunk_pool_ap", out, &[x, w_att], move |ctx: &BackwardCtx<'_>| {
        let (xd, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let row = |kk: usize, s: usize| (kk * s_count + s) * n;
        let mut dx = vec![0.0; k * s_count * n];
        let mut dw = vec![0.0; n];
        let mut de = vec![0.0; k];
        for s in 0..s_count {
            let a = &weights[s * k..(s + 1) * k];
            let gs = &g[s * n..(s + 1) * n];
            // dL/da_k = g_s · x_k
            for (kk, slot) in de.iter_mut().enumerate() {
                let r = row(kk, s);
                *slot = gs.iter().zip(&xd[r..r + n]).map(|(a, b)| a * b).sum();
            }
            let mean: f64 = a.iter().zip(&de).map(|(a, d)| a * d).sum();
            for kk in 0..k {
                let r = row(kk, s);
                let de_k = a[kk] * (de[kk] - mean);
                for j in 0..n {
                    dx[r + j] = a[kk] * gs[j] + de_k * w[j];
                    dw[j] += de_k * xd[r + j];
                }
            }
        }
        vec![
            Some(Tensor::new_unchecked(vec![k, s_count, n], dx)),
            Some(Tensor::new_unchecked(vec![n], dw)),
        ]
    })
}

/// Per-channel mean over chunks: `[S, N] -> [N]`.
pub fn inter_pool(c: Var<'_>) -> Result<Var<'_>> {
    if c.shape().len() != 2 {
        return Err(Error::shape(format!("inter pooling expects [S, N], got {:?}", c.shape())));
    }
    c.mean_axis0()
}

/// `g = sigmoid(W_s e) + W_g e`.
pub fn modulation_gain<'t>(x_emb: Var<'t>, w_s: Var<'t>, w_g: Var<'t>) -> Result<Var<'t>> {
    let shape = x_emb.shape();
    let [n] = shape[..] else {
        return Err(Error::shape(format!("global vector must be [N], got {shape:?}")));
    };
    let e = x_emb.reshape(&[n, 1])?;
    let sig = w_s.matmul(e)?.sigmoid()?;
    let lin = w_g.matmul(e)?;
    sig.add(lin)?.reshape(&[n])
}

/// `x_o[k, s, :] = (sigmoid(W_s e) + W_g e) ⊙ x_f[k, s, :]`.
pub fn modulate<'t>(x_f: Var<'t>, x_emb: Var<'t>, w_s: Var<'t>, w_g: Var<'t>) -> Result<Var<'t>> {
    x_f.mul_row(modulation_gain(x_emb, w_s, w_g)?)
}

pub fn chunk_pool<'t>(x: Var<'t>, method: PoolingMethod, w_att: Option<Var<'t>>) -> Result<Var<'t>> {
    match (method, w_att) {
        (PoolingMethod::LastElement, _) => chunk_pool_le(x),
        (PoolingMethod::AttentivePooling, Some(w)) => chunk_pool_ap(x, w),
        (PoolingMethod::AttentivePooling, None) => {
            Err(Error::config("attentive pooling needs a scoring vector"))
        }
    }
}

/// Global pooling followed by modulation; shape preserving.
pub fn spgm_block_forward<'t>(
    x_f: Var<'t>,
    method: PoolingMethod,
    w_s: Var<'t>,
    w_g: Var<'t>,
    w_att: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let pooled = chunk_pool(x_f, method, w_att)?;
    let x_emb = inter_pool(pooled)?;
    modulate(x_f, x_emb, w_s, w_g)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{finite_diff_grad_check, Tape};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn last_element_of_single_chunk() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = chunk_pool_le(tape.constant(x)).unwrap().value();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn last_element_equals_indexing() {
        let x = Tensor::randn(&[5, 3, 4], &mut rng(1));
        let tape = Tape::new();
        let y = chunk_pool_le(tape.constant(x.clone())).unwrap().value();
        for s in 0..3 {
            for n in 0..4 {
                assert_eq!(y.at2(s, n), x.at3(4, s, n));
            }
        }
    }

    #[test]
    fn attentive_pooling_zero_scores_is_mean() {
        let x = Tensor::randn(&[6, 2, 3], &mut rng(2));
        let tape = Tape::new();
        let y = chunk_pool_ap(tape.constant(x.clone()), tape.constant(Tensor::zeros(&[3])))
            .unwrap()
            .value();
        for s in 0..2 {
            for n in 0..3 {
                let mean = (0..6).map(|k| x.at3(k, s, n)).sum::<f64>() / 6.0;
                assert!((y.at2(s, n) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attentive_pooling_constant_chunk() {
        let c = [0.3, -1.5];
        let x = Tensor::from_vec(&[4, 1, 2], c.repeat(4)).unwrap();
        let tape = Tape::new();
        let w = tape.constant(Tensor::randn(&[2], &mut rng(3)));
        let y = chunk_pool_ap(tape.constant(x), w).unwrap().value();
        assert!((y.data()[0] - c[0]).abs() < 1e-14 && (y.data()[1] - c[1]).abs() < 1e-14);
    }

    #[test]
    fn attentive_pooling_saturates_on_dominant_frame() {
        // Frame 2 has the largest projection onto w; scaling w by 100 makes
        // the softmax one-hot.
        let frames = [[0.1, 0.2], [-0.3, 0.1], [0.9, 0.8], [0.2, -0.4]];
        let x = Tensor::from_vec(&[4, 1, 2], frames.concat()).unwrap();
        let tape = Tape::new();
        let w = tape.constant(Tensor::from_vec(&[2], vec![100.0, 100.0]).unwrap());
        let y = chunk_pool_ap(tape.constant(x), w).unwrap().value();
        let gap = y.data().iter().zip(frames[2]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-3, "{gap}");
    }

    #[test]
    fn inter_pool_cases() {
        let tape = Tape::new();
        let c = Tensor::from_vec(&[2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        assert_eq!(inter_pool(tape.constant(c)).unwrap().value().data(), &[2.0, 4.0]);
        let single = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(inter_pool(tape.constant(single)).unwrap().value().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn modulation_closed_forms() {
        let tape = Tape::new();
        let x = Tensor::randn(&[3, 2, 4], &mut rng(4));
        let xf = tape.constant(x.clone());
        let zeros = tape.constant(Tensor::zeros(&[4, 4]));
        let emb = tape.constant(Tensor::randn(&[4], &mut rng(5)));
        let y = modulate(xf, emb, zeros, zeros).unwrap().value();
        assert!(y.max_abs_diff(&x.scale(0.5)) == 0.0);

        let w = tape.constant(Tensor::randn(&[4, 4], &mut rng(6)));
        let y = modulate(xf, tape.constant(Tensor::zeros(&[4])), w, w).unwrap().value();
        assert!(y.max_abs_diff(&x.scale(0.5)) == 0.0);

        // N = 1: sigmoid(0) + 2 * 1 = 2.5
        let x1 = Tensor::from_vec(&[2, 1, 1], vec![1.5, -4.0]).unwrap();
        let y = modulate(
            tape.constant(x1.clone()),
            tape.constant(Tensor::ones(&[1])),
            tape.constant(Tensor::zeros(&[1, 1])),
            tape.constant(Tensor::full(&[1, 1], 2.0)),
        )
        .unwrap()
        .value();
        assert_eq!(y.data(), x1.scale(2.5).data());
    }

    #[test]
    fn block_matches_manual_composition() {
        for method in [PoolingMethod::LastElement, PoolingMethod::AttentivePooling] {
            let mut r = rng(7);
            let x = Tensor::randn(&[4, 3, 5], &mut r);
            let ws = Tensor::randn(&[5, 5], &mut r);
            let wg = Tensor::randn(&[5, 5], &mut r);
            let wa = Tensor::randn(&[5], &mut r);
            let tape = Tape::new();
            let (xf, ws, wg, wa) = (tape.constant(x.clone()), tape.constant(ws), tape.constant(wg), tape.constant(wa));
            let y = spgm_block_forward(xf, method, ws, wg, Some(wa)).unwrap().value();
            assert_eq!(y.shape(), x.shape());
            let pooled = match method {
                PoolingMethod::LastElement => chunk_pool_le(xf).unwrap(),
                PoolingMethod::AttentivePooling => chunk_pool_ap(xf, wa).unwrap(),
            };
            let manual = modulate(xf, inter_pool(pooled).unwrap(), ws, wg).unwrap().value();
            assert_eq!(*y, *manual);

            // Gain is shared by every (k, s) position.
            let gain = |k: usize, s: usize, n: usize| y.at3(k, s, n) / x.at3(k, s, n);
            for k in 0..4 {
                for s in 0..3 {
                    for n in 0..5 {
                        assert!((gain(k, s, n) - gain(0, 0, n)).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_and_zero_inputs() {
        let tape = Tape::new();
        let mut r = rng(8);
        let ws = tape.constant(Tensor::randn(&[3, 3], &mut r));
        let wg = tape.constant(Tensor::randn(&[3, 3], &mut r));
        let wa = tape.constant(Tensor::randn(&[3], &mut r));
        let row = [0.4, -0.2, 1.1];
        let x = Tensor::from_vec(&[4, 2, 3], row.repeat(8)).unwrap();
        for method in [PoolingMethod::LastElement, PoolingMethod::AttentivePooling] {
            let y = spgm_block_forward(tape.constant(x.clone()), method, ws, wg, Some(wa)).unwrap().value();
            for chunk in y.data().chunks_exact(3) {
                assert_eq!(chunk, &y.data()[..3]);
            }
            let z = spgm_block_forward(tape.constant(Tensor::zeros(&[4, 2, 3])), method, ws, wg, Some(wa))
                .unwrap()
                .value();
            assert!(z.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(SpgmParams::param_count(256, PoolingMethod::LastElement), 131_072);
        assert_eq!(SpgmParams::param_count(256, PoolingMethod::AttentivePooling), 131_328);
        for method in [PoolingMethod::LastElement, PoolingMethod::AttentivePooling] {
            let mut store = ParamStore::new();
            SpgmParams::declare(&mut store, "spgm", 16, method).unwrap();
            assert_eq!(store.numel(), SpgmParams::param_count(16, method));
        }
    }

    #[test]
    fn block_gradients() {
        for method in [PoolingMethod::LastElement, PoolingMethod::AttentivePooling] {
            for seed in 0..20 {
                let mut r = rng(100 + seed);
                let inputs = [
                    Tensor::randn(&[4, 3, 5], &mut r),
                    Tensor::randn(&[5, 5], &mut r).scale(0.5),
                    Tensor::randn(&[5, 5], &mut r).scale(0.5),
                    Tensor::randn(&[5], &mut r),
                ];
                let proj = Tensor::randn(&[4, 3, 5], &mut r);
                let count = if method == PoolingMethod::LastElement { 3 } else { 4 };
                for which in 0..count {
                    let check = finite_diff_grad_check(
                        |t, v| {
                            let pick = |i: usize| if i == which { v } else { t.constant(inputs[i].clone()) };
                            spgm_block_forward(pick(0), method, pick(1), pick(2), Some(pick(3)))?
                                .mul(t.constant(proj.clone()))?
                                .sum()
                        },
                        &inputs[which],
                        1e-5,
                    )
                    .unwrap();
                    assert!(check.max_rel_error < 1e-4, "{method:?} input {which} seed {seed}: {check:?}");
                }
            }
        }
    }
}
