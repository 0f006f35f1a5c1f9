//! Two-"speaker" synthetic mixtures: amplitude-modulated harmonic complexes
//! from disjoint fundamental-frequency families.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Fundamental range of source 1, Hz.
    pub family_a: [f64; 2],
    /// Fundamental range of source 2, Hz.
    pub family_b: [f64; 2],
    pub harmonics: usize,
    /// Amplitude-envelope rate range, Hz.
    pub am_rate: [f64; 2],
    /// Level of source 1 relative to source 2, dB.
    pub snr_db: [f64; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            duration_s: 1.0,
            sample_rate: 8000,
            family_a: [100.0, 150.0],
            family_b: [220.0, 320.0],
            harmonics: 5,
            am_rate: [1.0, 4.0],
            snr_db: [-5.0, 5.0],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) || self.sample_rate == 0 {
            return Err(Error::config("duration and sample rate must be positive"));
        }
        if !range_ok(self.family_a) || !range_ok(self.family_b) || !range_ok(self.am_rate) || !range_ok(self.snr_db) {
            return Err(Error::config("synth ranges must be finite with lo <= hi"));
        }
        if self.family_a[0] <= 0.0 || self.am_rate[0] < 0.0 {
            return Err(Error::config("frequencies must be positive"));
        }
        if self.family_a[1] >= self.family_b[0] && self.family_b[1] >= self.family_a[0] {
            return Err(Error::config("fundamental families overlap"));
        }
        if self.harmonics == 0 {
            return Err(Error::config("need at least one harmonic"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.family_a[1].max(self.family_b[1]) * self.harmonics as f64 >= nyquist {
            return Err(Error::config("highest harmonic exceeds Nyquist"));
        }
        Ok(())
    }

    pub fn len_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Unit-RMS harmonic complex with a slow positive amplitude envelope.
fn harmonic_source(rng: &mut ChaCha8Rng, spec: &SynthSpec, family: [f64; 2]) -> Vec<f64> {
    let f0 = uniform(rng, family);
    let partials: Vec<(f64, f64)> = (1..=spec.harmonics)
        .map(|h| (rng.gen_range(0.5..1.0) / h as f64, rng.gen_range(0.0..TAU)))
        .collect();
    let rate = uniform(rng, spec.am_rate);
    let am_phase = rng.gen_range(0.0..TAU);
    let depth = rng.gen_range(0.2..0.6);
    let sr = spec.sample_rate as f64;
    let mut x: Vec<f64> = (0..spec.len_samples())
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = partials
                .iter()
                .enumerate()
                .map(|(h, (a, phi))| a * (TAU * (h + 1) as f64 * f0 * t + phi).sin())
                .sum();
            tone * (1.0 - depth * (0.5 + 0.5 * (TAU * rate * t + am_phase).sin()))
        })
        .collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

/// One mixture and its two sources, fully determined by `(spec.seed, index)`.
/// Returns `(mix, [s1, s2], snr_db)` with `mix == s1 + s2` exactly.
pub fn synth_mixture(spec: &SynthSpec, index: u64) -> Result<(AudioBuffer, [AudioBuffer; 2], f64)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let a = harmonic_source(&mut rng, spec, spec.family_a);
    let b = harmonic_source(&mut rng, spec, spec.family_b);
    let snr = uniform(&mut rng, spec.snr_db);
    let base = 0.1;
    let gain_a = base * 10f64.powf(snr / 20.0);
    let mut s1: Vec<f64> = a.iter().map(|v| v * gain_a).collect();
    let mut s2: Vec<f64> = b.iter().map(|v| v * base).collect();
    let peak = s1
        .iter()
        .zip(&s2)
        .flat_map(|(x, y)| [x.abs(), y.abs(), (x + y).abs()])
        .fold(0.0, f64::max);
    if peak > 1.0 {
        s1.iter_mut().for_each(|v| *v /= peak);
        s2.iter_mut().for_each(|v| *v /= peak);
    }
    let mix = s1.iter().zip(&s2).map(|(x, y)| x + y).collect();
    let sr = spec.sample_rate;
    Ok((AudioBuffer::new(mix, sr)?, [AudioBuffer::new(s1, sr)?, AudioBuffer::new(s2, sr)?], snr))
}
