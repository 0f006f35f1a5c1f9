//! Speed perturbation by windowed-sinc resampling.

use std::f64::consts::PI;

use crate::data::AudioBuffer;
use crate::error::{Error, Result};

/// Taps per output sample (8 on each side of the read position).
pub const SINC_TAPS: usize = 16;
pub const SPEED_FACTOR_GUARD: [f64; 2] = [0.9, 1.1];

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Plays `x` back `factor` times faster: output length `round(T / factor)`,
/// a tone at `f` Hz comes out at `f * factor` Hz. Output sample `j` reads
/// position `j * factor` through a Hann-windowed sinc low-passed at
/// `min(1, 1/factor)` of the input Nyquist rate.
pub fn speed_perturb_samples(x: &[f64], factor: f64) -> Result<Vec<f64>> {
    if !(SPEED_FACTOR_GUARD[0]..=SPEED_FACTOR_GUARD[1]).contains(&factor) {
        return Err(Error::config(format!(
            "speed factor {factor} outside [{}, {}]",
            SPEED_FACTOR_GUARD[0], SPEED_FACTOR_GUARD[1]
        )));
    }
    let len = (x.len() as f64 / factor).round() as usize;
    let cutoff = (1.0 / factor).min(1.0);
    let half = (SINC_TAPS / 2) as isize;
    let out = (0..len)
        .map(|j| {
            let t = j as f64 * factor;
            let base = t.floor() as isize;
            let mut acc = 0.0;
            for i in base - half + 1..=base + half {
                if i < 0 || i as usize >= x.len() {
                    continue;
                }
                let d = t - i as f64;
                let window = 0.5 * (1.0 + (PI * d / half as f64).cos());
                acc += x[i as usize] * cutoff * sinc(cutoff * d) * window;
            }
            acc
        })
        .collect();
    Ok(out)
}

pub fn speed_perturb(x: &AudioBuffer, factor: f64) -> Result<AudioBuffer> {
    AudioBuffer::new(speed_perturb_samples(&x.samples, factor)?, x.sample_rate)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::TAU;

    use super::*;

    fn tone(hz: f64, len: usize) -> Vec<f64> {
        (0..len).map(|i| (TAU * hz * i as f64 / 8000.0).sin()).collect()
    }

    #[test]
    fn unit_factor_is_identity() {
        let x = tone(440.0, 500);
        let y = speed_perturb_samples(&x, 1.0).unwrap();
        assert_eq!(y.len(), 500);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn output_length() {
        assert_eq!(speed_perturb_samples(&vec![0.0; 80_000], 1.05).unwrap().len(), 76_190);
        assert_eq!(speed_perturb_samples(&vec![0.0; 80_000], 0.95).unwrap().len(), 84_211);
    }

    #[test]
    fn slowed_tone_moves_down() {
        let y = speed_perturb_samples(&tone(440.0, 8000), 0.95).unwrap();
        let n = y.len();
        // Naive DFT magnitude over bins near the expected peak; bin width
        // is 8000 / n Hz.
        let mag = |k: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in y.iter().enumerate() {
                let w = TAU * (k * i % n) as f64 / n as f64;
                re += v * w.cos();
                im -= v * w.sin();
            }
            re * re + im * im
        };
        let bin_hz = 8000.0 / n as f64;
        let peak = (1..n / 2).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
        assert!((peak as f64 * bin_hz - 418.0).abs() <= bin_hz + 1e-9, "{}", peak as f64 * bin_hz);
    }

    #[test]
    fn guard_range() {
        assert!(matches!(speed_perturb_samples(&[0.0; 10], 1.2), Err(Error::Config(_))));
        assert!(matches!(speed_perturb_samples(&[0.0; 10], 0.85), Err(Error::Config(_))));
    }
}
