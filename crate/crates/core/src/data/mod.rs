//! Audio buffers, WAV files, synthetic datasets and manifests.

mod synth;
mod wav;

pub use synth::{synth_mixture, SynthSpec};
pub use wav::{decode_wav, encode_wav, quantize, read_wav, write_wav, PCM_SCALE};

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("audio holds non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Random contiguous crop of `seconds`, or the input unchanged if it is not
/// longer than that.
pub fn crop_or_skip<R: Rng + ?Sized>(x: &AudioBuffer, seconds: f64, rng: &mut R) -> Result<AudioBuffer> {
    Ok(crop_group(std::slice::from_ref(x), seconds, rng)?.remove(0))
}

/// Crops every buffer at one shared random offset. All buffers must have
/// the same length and sample rate.
pub fn crop_group<R: Rng + ?Sized>(group: &[AudioBuffer], seconds: f64, rng: &mut R) -> Result<Vec<AudioBuffer>> {
    if !(seconds > 0.0 && seconds.is_finite()) {
        return Err(Error::config(format!("crop length must be positive, got {seconds}")));
    }
    let first = group.first().ok_or_else(|| Error::Data("nothing to crop".into()))?;
    if group.iter().any(|b| b.len() != first.len() || b.sample_rate != first.sample_rate) {
        return Err(Error::Data("crop group differs in length or sample rate".into()));
    }
    let want = (seconds * first.sample_rate as f64).round() as usize;
    if first.len() <= want {
        return Ok(group.to_vec());
    }
    let start = rng.gen_range(0..=first.len() - want);
    Ok(group.iter().map(|b| b.slice(start, want)).collect())
}

/// One manifest row. Paths are resolved against the manifest's directory
/// when read, and written relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub mixture_path: PathBuf,
    pub source1_path: PathBuf,
    pub source2_path: PathBuf,
    pub length_samples: usize,
    pub mix_snr_db: f64,
}

impl MixtureRecord {
    pub fn source_paths(&self) -> [&Path; 2] {
        [&self.source1_path, &self.source2_path]
    }

    /// Reads the mixture and sources, checking rates and lengths agree.
    pub fn load(&self) -> Result<(AudioBuffer, Vec<AudioBuffer>)> {
        let mix = read_wav(&self.mixture_path)?;
        let sources = self
            .source_paths()
            .iter()
            .map(|p| read_wav(p))
            .collect::<Result<Vec<_>>>()?;
        for (p, s) in self.source_paths().iter().zip(&sources) {
            if s.sample_rate != mix.sample_rate || s.len() != mix.len() {
                return Err(Error::Data(format!(
                    "{} does not match its mixture {} in rate or length",
                    p.display(),
                    self.mixture_path.display()
                )));
            }
        }
        Ok((mix, sources))
    }
}

pub fn write_manifest(path: &Path, records: &[MixtureRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_path_buf();
        w.serialize(MixtureRecord {
            mixture_path: rel(&r.mixture_path),
            source1_path: rel(&r.source1_path),
            source2_path: rel(&r.source2_path),
            ..r.clone()
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a manifest, resolving relative paths against its directory.
/// Accepts either the CSV file or a dataset directory containing one.
pub fn read_manifest(path: &Path) -> Result<Vec<MixtureRecord>> {
    let path = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut r = csv::Reader::from_path(&path)?;
    let mut records = Vec::new();
    for row in r.deserialize() {
        let mut rec: MixtureRecord = row?;
        for p in [&mut rec.mixture_path, &mut rec.source1_path, &mut rec.source2_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        records.push(rec);
    }
    Ok(records)
}

/// Generates `count` mixtures under `root` as `{mix,s1,s2}/<i>.wav` plus
/// `manifest.csv`. Records are independent, so generation runs in parallel;
/// the output does not depend on thread count.
pub fn write_dataset(root: &Path, spec: &SynthSpec, count: usize) -> Result<Vec<MixtureRecord>> {
    spec.validate()?;
    for dir in ["mix", "s1", "s2"] {
        fs::create_dir_all(root.join(dir))?;
    }
    let records = (0..count)
        .into_par_iter()
        .map(|i| {
            let (mix, [s1, s2], snr) = synth_mixture(spec, i as u64)?;
            let name = format!("{i}.wav");
            let paths = [root.join("mix").join(&name), root.join("s1").join(&name), root.join("s2").join(&name)];
            for (p, b) in paths.iter().zip([&mix, &s1, &s2]) {
                write_wav(p, b)?;
            }
            let [m, a, b] = paths;
            Ok(MixtureRecord {
                mixture_path: m,
                source1_path: a,
                source2_path: b,
                length_samples: mix.len(),
                mix_snr_db: snr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&root.join(MANIFEST_NAME), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(len: usize) -> AudioBuffer {
        AudioBuffer::new((0..len).map(|i| i as f64 / len as f64).collect(), 8000).unwrap()
    }

    #[test]
    fn crop_ten_seconds_from_twelve() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = crop_or_skip(&ramp(96_000), 10.0, &mut rng).unwrap();
        assert_eq!(y.len(), 80_000);
    }

    #[test]
    fn short_input_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = ramp(1000);
        assert_eq!(crop_or_skip(&x, 5.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn group_crop_keeps_alignment() {
        let (mix, [a, b], _) = synth_mixture(&SynthSpec { duration_s: 2.0, ..SynthSpec::default() }, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = crop_group(&[mix, a, b], 0.5, &mut rng).unwrap();
        assert_eq!(out[0].len(), 4000);
        for i in 0..4000 {
            assert_eq!(out[0].samples[i], out[1].samples[i] + out[2].samples[i]);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { duration_s: 0.25, seed: 5, ..SynthSpec::default() };
        let written = write_dataset(dir.path(), &spec, 4).unwrap();
        let records = read_manifest(dir.path()).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(records, written);
        let text = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert!(text.starts_with("mixture_path,source1_path,source2_path,length_samples,mix_snr_db\n"));
        assert!(text.contains("mix/0.wav,s1/0.wav,s2/0.wav,2000,"));
        for r in &records {
            let (mix, src) = r.load().unwrap();
            assert_eq!(mix.len(), 2000);
            for i in 0..mix.len() {
                assert!((mix.samples[i] - src[0].samples[i] - src[1].samples[i]).abs() <= 2.0 / PCM_SCALE);
            }
        }
    }
}
