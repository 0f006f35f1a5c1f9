//! Parameter and multiply-accumulate accounting.
//!
//! MAC convention: one MAC per multiply-accumulate in convolutions, linear
//! maps and the two attention products (scores `QK^T` and weighted values),
//! plus the gain projections and the two modulation products of every
//! global modulation block. Normalization, activations, softmax, residual
//! additions, mask products and positional encodings are not counted.

use std::fmt;

use serde::Serialize;

use super::{ModelConfig, SeparatorModel};
use crate::chunking::ChunkSpec;
use crate::error::{Error, Result};
use crate::layers::TransformerLayerParams;
use crate::spgm::PoolingMethod;

/// Counts in a fixed module order, with their sum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModuleCounts {
    pub modules: Vec<(String, u64)>,
    pub total: u64,
}

impl ModuleCounts {
    fn from_pairs(modules: Vec<(String, u64)>) -> Self {
        let total = modules.iter().map(|(_, c)| c).sum();
        Self { modules, total }
    }

    pub fn get(&self, module: &str) -> Option<u64> {
        self.modules.iter().find(|(m, _)| m == module).map(|&(_, c)| c)
    }

    pub fn to_csv(&self, unit: &str) -> String {
        let mut out = format!("module,{unit}\n");
        for (m, c) in &self.modules {
            out.push_str(&format!("{m},{c}\n"));
        }
        out.push_str(&format!("total,{}\n", self.total));
        out
    }
}

impl fmt::Display for ModuleCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.modules.iter().map(|(m, _)| m.len()).max().unwrap_or(5).max(5);
        for (m, c) in &self.modules {
            writeln!(f, "{m:<width$} {c}")?;
        }
        write!(f, "{:<width$} {}", "total", self.total)
    }
}

/// Profiler group of a dotted parameter name.
pub fn module_of(name: &str) -> &str {
    let mut parts = name.split('.');
    match (parts.next(), parts.next(), parts.next()) {
        (Some("blocks"), Some(_), Some("intra")) => "intra_transformers",
        (Some("blocks"), Some(_), Some("spgm")) => "spgm_blocks",
        (Some(first), _, _) => first,
        _ => name,
    }
}

/// Parameter count per module, by enumerating the tensors the model would
/// allocate for `config`.
pub fn count_params(config: &ModelConfig) -> Result<ModuleCounts> {
    let layout = SeparatorModel::layout(config)?;
    let mut modules: Vec<(String, u64)> = Vec::new();
    for spec in layout.params().specs() {
        let module = module_of(&spec.name);
        match modules.iter_mut().find(|(m, _)| m == module) {
            Some(entry) => entry.1 += spec.numel() as u64,
            None => modules.push((module.to_string(), spec.numel() as u64)),
        }
    }
    Ok(ModuleCounts::from_pairs(modules))
}

/// Parameter total of the dual-path baseline with the same intra stacks,
/// where every modulation block is replaced by an inter-chunk transformer
/// stack of `intra_layers` layers.
pub fn dual_path_params(config: &ModelConfig) -> Result<u64> {
    let base = count_params(&config.without_spgm())?.total;
    let inter = config.total_intra_layers() * TransformerLayerParams::param_count(config.channels, config.ffn);
    Ok(base + inter as u64)
}

/// Analytic MAC count for separating `duration_s` seconds of audio.
pub fn count_macs(config: &ModelConfig, duration_s: f64) -> Result<ModuleCounts> {
    config.validate()?;
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::config(format!("duration must be positive, got {duration_s}")));
    }
    let samples = (duration_s * config.sample_rate as f64).round() as usize;
    let frames = config.encoded_frames(samples)?;
    let (n, f, k, c) = (config.channels, config.ffn, config.chunk_size, config.num_sources);
    let spec = ChunkSpec::new(frames + 2 * config.edge_pad(), k)?;
    let s = spec.chunks;
    let tokens = s * k;
    let (n, f, k, s, c, t, tokens) = (n as u64, f as u64, k as u64, s as u64, c as u64, frames as u64, tokens as u64);
    let kernel = config.enc_kernel as u64;
    let layers = config.total_intra_layers() as u64;

    let per_layer = tokens * (4 * n * n + 2 * n * f) + s * 2 * k * k * n;
    let mut modules = vec![
        ("encoder".to_string(), t * n * kernel),
        ("bottleneck".to_string(), t * n * n),
        ("intra_transformers".to_string(), layers * per_layer),
    ];
    if config.use_spgm {
        let per_block = spgm_block_macs(config.channels, config.chunk_size, spec.chunks, config.pooling);
        modules.push(("spgm_blocks".to_string(), config.num_blocks as u64 * per_block));
    }
    modules.extend([
        ("expand".to_string(), tokens * n * c * n),
        ("output".to_string(), c * t * n * n),
        ("output_gate".to_string(), c * t * n * n),
        ("decoder".to_string(), c * t * n * kernel),
    ]);
    Ok(ModuleCounts::from_pairs(modules))
}

/// `2N^2` for the two gain projections, `2KSN` for the two modulation
/// products, `KSN` more for attentive-pooling scores.
pub fn spgm_block_macs(n: usize, k: usize, s: usize, pooling: PoolingMethod) -> u64 {
    let (n, ksn) = (n as u64, (k * s * n) as u64);
    2 * n * n
        + 2 * ksn
        + match pooling {
            PoolingMethod::LastElement => 0,
            PoolingMethod::AttentivePooling => ksn,
        }
}
