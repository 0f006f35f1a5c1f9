//! Neural layers used by the separator.

mod attention;
mod conv;
mod params;

pub use attention::scaled_dot_attention;
pub use conv::{conv1d, conv_output_len, conv_transpose1d, conv_transpose_output_len, ConvParams};
pub use params::{Bound, Init, ParamId, ParamSpec, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn declare(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = store.declare(format!("{name}.weight"), &[input, output], Init::FanIn(input))?;
        let bias = if bias {
            Some(store.declare(format!("{name}.bias"), &[output], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p[self.weight])?;
        match self.bias {
            Some(b) => y.add_row(p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn declare(store: &mut ParamStore, name: &str, n: usize) -> Result<Self> {
        Ok(Self {
            gain: store.declare(format!("{name}.gain"), &[n], Init::Const(1.0))?,
            bias: store.declare(format!("{name}.bias"), &[n], Init::Const(0.0))?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p[self.gain], p[self.bias], LAYER_NORM_EPS)
    }
}

/// One pre-norm transformer encoder layer: `x + MHA(LN(x))`, then
/// `+ FFN(LN(.))` with a ReLU feed-forward network.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayerParams {
    pub heads: usize,
    pub norm_attn: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl TransformerLayerParams {
    pub fn declare(store: &mut ParamStore, name: &str, n: usize, ffn: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !n.is_multiple_of(heads) {
            return Err(Error::config(format!("{n} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            norm_attn: LayerNorm::declare(store, &format!("{name}.norm_attn"), n)?,
            q: Linear::declare(store, &format!("{name}.attn.q"), n, n, true)?,
            k: Linear::declare(store, &format!("{name}.attn.k"), n, n, true)?,
            v: Linear::declare(store, &format!("{name}.attn.v"), n, n, true)?,
            out: Linear::declare(store, &format!("{name}.attn.out"), n, n, true)?,
            norm_ffn: LayerNorm::declare(store, &format!("{name}.norm_ffn"), n)?,
            ffn_in: Linear::declare(store, &format!("{name}.ffn.0"), n, ffn, true)?,
            ffn_out: Linear::declare(store, &format!("{name}.ffn.1"), ffn, n, true)?,
        })
    }

    /// Parameters of one layer: `4(N^2+N) + NF + F + FN + N + 4N`.
    pub fn param_count(n: usize, ffn: usize) -> usize {
        4 * (n * n + n) + n * ffn + ffn + ffn * n + n + 4 * n
    }
}

/// Self-attention of `x: [groups * len, n]`, each group attending only
/// within itself, followed by the output projection.
pub fn multi_head_attention<'t>(
    p: &Bound<'t>,
    layer: &TransformerLayerParams,
    x: Var<'t>,
    groups: usize,
) -> Result<Var<'t>> {
    let q = layer.q.forward(p, x)?;
    let k = layer.k.forward(p, x)?;
    let v = layer.v.forward(p, x)?;
    let a = scaled_dot_attention(q, k, v, groups, layer.heads)?;
    layer.out.forward(p, a)
}

pub fn transformer_layer_forward<'t>(
    p: &Bound<'t>,
    layer: &TransformerLayerParams,
    x: Var<'t>,
    groups: usize,
) -> Result<Var<'t>> {
    let attn = multi_head_attention(p, layer, layer.norm_attn.forward(p, x)?, groups)?;
    let h = x.add(attn)?;
    let f = layer.ffn_in.forward(p, layer.norm_ffn.forward(p, h)?)?.relu()?;
    h.add(layer.ffn_out.forward(p, f)?)
}

/// `pe[t, 2i] = sin(t / 10000^(2i/n))`, `pe[t, 2i+1] = cos(...)`.
pub fn sinusoidal_pe(len: usize, n: usize) -> Result<Tensor> {
    if !n.is_multiple_of(2) || n == 0 || len == 0 {
        return Err(Error::config(format!(
            "positional encoding needs an even channel count, got {n} (len {len})"
        )));
    }
    let data = (0..len)
        .flat_map(|t| (0..n).map(move |c| pe_entry(t as f64, c, n)))
        .collect();
    Tensor::from_vec(&[len, n], data)
}

/// Channel `c` of the encoding at (possibly fractional) position `t`.
pub fn pe_entry(t: f64, c: usize, n: usize) -> f64 {
    let angle = t / 10000f64.powf(2.0 * (c / 2) as f64 / n as f64);
    if c.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}
