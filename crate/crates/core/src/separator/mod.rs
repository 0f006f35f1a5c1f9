//! The full separator: learned encoder, masking network of chunked intra
//! transformer stacks with global modulation blocks, and learned decoder.

mod checkpoint;
mod profile;

pub use checkpoint::{read_container, write_container, Dtype, FORMAT_VERSION};
pub use profile::{count_macs, count_params, dual_path_params, module_of, ModuleCounts};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunking::{overlap_add, segment};
use crate::error::{Error, Result};
use crate::layers::{
    conv_output_len, sinusoidal_pe, transformer_layer_forward, ConvParams, Init, LayerNorm, Linear, ParamId,
    ParamStore, TransformerLayerParams,
};
use crate::spgm::{PoolingMethod, SpgmParams};
use crate::tensor::{Tape, Tensor, Var};
use crate::layers::Bound;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub ffn: usize,
    pub heads: usize,
    pub enc_kernel: usize,
    pub enc_stride: usize,
    pub chunk_size: usize,
    pub num_blocks: usize,
    pub intra_layers: usize,
    pub pooling: PoolingMethod,
    /// `false` drops the modulation blocks (intra-only baseline).
    pub use_spgm: bool,
    pub num_sources: usize,
    pub sample_rate: u32,
    /// Zero-pad the bottleneck output by `K/2` frames at both ends before
    /// chunking, so boundary frames also sit in the middle of a chunk.
    pub edge_padding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// N=256, F=1024, H=8, B=4 blocks of L=8 layers, LE pooling.
    pub fn full() -> Self {
        Self {
            channels: 256,
            ffn: 1024,
            heads: 8,
            enc_kernel: 16,
            enc_stride: 8,
            chunk_size: 250,
            num_blocks: 4,
            intra_layers: 8,
            pooling: PoolingMethod::LastElement,
            use_spgm: true,
            num_sources: 2,
            sample_rate: 8000,
            edge_padding: true,
        }
    }

    /// The 16-layer variant: B=2 blocks of L=8.
    pub fn small() -> Self {
        Self {
            num_blocks: 2,
            ..Self::full()
        }
    }

    /// Desk-scale model used for the learning check.
    pub fn toy() -> Self {
        Self {
            channels: 32,
            ffn: 64,
            heads: 4,
            chunk_size: 50,
            num_blocks: 2,
            intra_layers: 2,
            ..Self::full()
        }
    }

    /// Smallest meaningful model, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            ffn: 16,
            heads: 2,
            chunk_size: 4,
            num_blocks: 1,
            intra_layers: 1,
            ..Self::full()
        }
    }

    pub fn without_spgm(&self) -> Self {
        Self {
            use_spgm: false,
            ..self.clone()
        }
    }

    pub fn total_intra_layers(&self) -> usize {
        self.num_blocks * self.intra_layers
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return fail(format!("channels must be even and positive, got {}", self.channels));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!("{} channels not divisible by {} heads", self.channels, self.heads));
        }
        if self.enc_stride == 0 || self.enc_kernel < self.enc_stride {
            return fail(format!("encoder kernel {} must be >= stride {} > 0", self.enc_kernel, self.enc_stride));
        }
        if self.chunk_size < 2 || !self.chunk_size.is_multiple_of(2) {
            return fail(format!("chunk size must be even and >= 2, got {}", self.chunk_size));
        }
        if self.ffn == 0 || self.num_blocks == 0 || self.intra_layers == 0 {
            return fail("ffn, num_blocks and intra_layers must be positive".into());
        }
        if !(1..=3).contains(&self.num_sources) {
            return fail(format!("num_sources must be 1..=3, got {}", self.num_sources));
        }
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Frames produced by the encoder for `samples` input samples.
    pub fn encoded_frames(&self, samples: usize) -> Result<usize> {
        conv_output_len(samples, self.enc_kernel, self.enc_stride)
    }

    fn edge_pad(&self) -> usize {
        if self.edge_padding {
            self.chunk_size / 2
        } else {
            0
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaskingBlock {
    pub layers: Vec<TransformerLayerParams>,
    pub spgm: Option<SpgmParams>,
}

/// Named parameters of a separator plus handles into them.
#[derive(Debug, Clone)]
pub struct SeparatorModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: ConvParams,
    input_norm: LayerNorm,
    bottleneck: Linear,
    blocks: Vec<MaskingBlock>,
    prelu: ParamId,
    expand: Linear,
    output: Linear,
    output_gate: Linear,
    decoder: ConvParams,
}

/// Result of one forward pass.
pub struct Separated<'t> {
    /// `[C, T]` waveform estimates.
    pub estimates: Var<'t>,
    /// Per-source `[T', N]` masks, all nonnegative.
    pub masks: Vec<Var<'t>>,
}

impl SeparatorModel {
    /// Declares every parameter without allocating values.
    pub fn layout(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.channels;
        let mut store = ParamStore::new();
        let s = &mut store;
        let encoder = ConvParams::declare_conv(s, "encoder", 1, n, config.enc_kernel, config.enc_stride)?;
        let input_norm = LayerNorm::declare(s, "input_norm", n)?;
        let bottleneck = Linear::declare(s, "bottleneck", n, n, true)?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let layers = (0..config.intra_layers)
                .map(|l| TransformerLayerParams::declare(s, &format!("blocks.{b}.intra.{l}"), n, config.ffn, config.heads))
                .collect::<Result<Vec<_>>>()?;
            let spgm = if config.use_spgm {
                Some(SpgmParams::declare(s, &format!("blocks.{b}.spgm"), n, config.pooling)?)
            } else {
                None
            };
            blocks.push(MaskingBlock { layers, spgm });
        }
        let prelu = s.declare("prelu.slope", &[1], Init::Const(0.25))?;
        let expand = Linear::declare(s, "expand", n, n * config.num_sources, true)?;
        let output = Linear::declare(s, "output", n, n, true)?;
        let output_gate = Linear::declare(s, "output_gate", n, n, true)?;
        let decoder = ConvParams::declare_transpose(s, "decoder", n, 1, config.enc_kernel, config.enc_stride)?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            input_norm,
            bottleneck,
            blocks,
            prelu,
            expand,
            output,
            output_gate,
            decoder,
        })
    }

    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::layout(config)?;
        model.store.materialize(seed);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[MaskingBlock] {
        &self.blocks
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// Separates `mixture: [T]` into `[C, T]` estimates.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, mixture: Var<'t>) -> Result<Separated<'t>> {
        let cfg = &self.config;
        let (n, k, c) = (cfg.channels, cfg.chunk_size, cfg.num_sources);
        let shape = mixture.shape();
        let [samples] = shape[..] else {
            return Err(Error::shape(format!("mixture must be [T], got {shape:?}")));
        };
        if samples < cfg.enc_kernel {
            return Err(Error::InputTooShort { len: samples, min: cfg.enc_kernel });
        }

        let enc = self.encoder.conv1d(p, mixture.reshape(&[1, samples])?)?.relu()?.transpose()?;
        let frames = enc.shape()[0];
        let mut h = self.bottleneck.forward(p, self.input_norm.forward(p, enc)?)?;
        let pad = cfg.edge_pad();
        if pad > 0 {
            h = h.window_rows(-(pad as isize), frames + 2 * pad)?;
        }

        let (chunks, spec) = segment(h, k)?;
        let s = spec.chunks;
        // Rows grouped per chunk: [S*K, N], chunk s occupying rows s*K..(s+1)*K.
        let mut x = chunks.swap01()?.reshape(&[s * k, n])?;
        let pe = sinusoidal_pe(k, n)?;
        let pe = tape.constant(Tensor::from_vec(&[s * k, n], pe.data().repeat(s))?);
        for block in &self.blocks {
            x = x.add(pe)?;
            for layer in &block.layers {
                x = transformer_layer_forward(p, layer, x, s)?;
            }
            if let Some(spgm) = &block.spgm {
                let x_f = x.reshape(&[s, k, n])?.swap01()?;
                x = spgm.forward(p, x_f)?.swap01()?.reshape(&[s * k, n])?;
            }
        }

        let x = self.expand.forward(p, x.prelu(p[self.prelu])?)?;
        let x = x.reshape(&[s, k, c * n])?.swap01()?;
        let mut x = overlap_add(x, &spec)?;
        if pad > 0 {
            x = x.window_rows(pad as isize, frames)?;
        }

        let mut masks = Vec::with_capacity(c);
        let mut estimates = Vec::with_capacity(c);
        for src in 0..c {
            let part = x.slice_cols(src * n, n)?;
            let gated = self.output.forward(p, part)?.tanh()?;
            let gate = self.output_gate.forward(p, part)?.sigmoid()?;
            let mask = gated.mul(gate)?.relu()?;
            let decoded = self.decoder.conv_transpose1d(p, mask.mul(enc)?.transpose()?)?;
            let len = decoded.shape()[1];
            estimates.push(decoded.reshape(&[len])?.window_rows(0, samples)?);
            masks.push(mask);
        }
        Ok(Separated {
            estimates: Var::stack(&estimates)?,
            masks,
        })
    }

    /// Inference without gradient tracking: `[T]` samples to `[C, T]`.
    pub fn separate(&self, mixture: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let x = tape.constant(Tensor::from_vec(&[mixture.len()], mixture.to_vec())?);
        let out = self.forward(&tape, &p, x)?;
        Ok((*out.estimates.value()).clone())
    }

    /// Writes the model as a checkpoint container.
    pub fn save(&self, path: &Path, dtype: Dtype, meta: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "kind": "separator",
            "config": self.config,
            "meta": meta,
        });
        let tensors: Vec<_> = self
            .store
            .specs()
            .iter()
            .zip(self.store.values())
            .map(|(spec, value)| (spec.name.as_str(), value))
            .collect();
        write_container(path, &header, &tensors, dtype)
    }

    /// Loads a checkpoint written by [`SeparatorModel::save`], returning the
    /// model and its metadata.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (header, tensors) = read_container(path)?;
        let bad = |msg: String| Error::format(path, msg);
        if header.get("kind").and_then(|k| k.as_str()) != Some("separator") {
            return Err(bad("not a separator checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(header["config"].clone())?;
        let mut model = Self::layout(&config)?;
        model.store.materialize(0);
        let mut seen = vec![false; model.store.len()];
        for (name, value) in tensors {
            let id = model.store.id(&name).ok_or_else(|| bad(format!("unexpected tensor `{name}`")))?;
            model.store.set(id, value).map_err(|e| bad(e.to_string()))?;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(bad(format!("missing tensor `{}`", model.store.specs()[i].name)));
        }
        let meta = header.get("meta").cloned().unwrap_or(serde_json::Value::Null);
        Ok((model, meta))
    }

    /// Rounds every parameter to 32-bit precision in place.
    pub fn round_to_f32(&mut self) -> Result<()> {
        for i in 0..self.store.len() {
            let id = ParamId(i);
            let rounded = self.store.get(id).round_f32();
            self.store.set(id, rounded)?;
        }
        Ok(())
    }
}
