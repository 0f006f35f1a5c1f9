#![allow(dead_code)]

use spgm::data::{synth_mixture, SynthSpec};
use spgm::training::Example;

/// `count` in-memory synthetic mixtures.
pub fn synth_examples(spec: &SynthSpec, count: u64) -> Vec<Example> {
    (0..count)
        .map(|i| {
            let (mixture, [a, b], _) = synth_mixture(spec, i).unwrap();
            Example {
                name: format!("{}_{i}", spec.seed),
                mixture,
                sources: vec![a, b],
            }
        })
        .collect()
}

/// Short mixtures sized for the tiny model.
pub fn tiny_examples(seed: u64, count: u64) -> Vec<Example> {
    let spec = SynthSpec {
        duration_s: 0.02,
        seed,
        ..SynthSpec::default()
    };
    synth_examples(&spec, count)
}
