//! Command-line frontend. Exit codes: 0 success, 1 usage error, 2 data or
//! model error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::data::{read_manifest, read_wav, write_dataset, write_wav, AudioBuffer, SynthSpec};
use crate::error::{Error, Result};
use crate::objective::{si_sdr_improvement, PIT_CLAMP_DB};
use crate::separator::{count_macs, count_params, dual_path_params, ModelConfig, SeparatorModel};
use crate::training::{fit, load_examples, load_latest, utterance_metrics, Example, TrainConfig};
use crate::verify::gradient_suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SPGM_NUM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "spgm", version, about = "Single-path speech separation with global modulation")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with optional [model], [train] and [synth] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Emit tables as CSV.
    #[arg(long, global = true)]
    pub csv: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-source dataset with a manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Seconds per mixture.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        sample_rate: Option<u32>,
    },
    /// Train a separator.
    Train {
        /// Training dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset directory or manifest.
        #[arg(long)]
        valid: PathBuf,
        /// Output directory for checkpoints and history.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from latest.ckpt / latest.state in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Separate one mixture WAV into s1.wav, s2.wav, ...
    Separate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Mean/median SI-SDRi over a manifest.
    Evaluate {
        #[arg(long, required_unless_present = "oracle")]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Score the reference sources themselves instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Parameter and MAC tables.
    Profile {
        /// Seconds of audio for the MAC count.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` and runs the command, writing to `out`; diagnostics go to
/// standard error.
pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match run(&cli, out) {
        Ok(code) => code,
        Err(Error::Config(msg)) => {
            eprintln!("error: invalid configuration: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_cli_with(argv, &mut std::io::stdout().lock())
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if a pool already exists, e.g. a second call in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::SynthData {
            out: dir,
            count,
            duration,
            sample_rate,
        } => {
            let spec = SynthSpec {
                duration_s: duration.unwrap_or(cfg.synth.duration_s),
                sample_rate: sample_rate.unwrap_or(cfg.synth.sample_rate),
                seed: cli.seed.unwrap_or(cfg.synth.seed),
                ..cfg.synth
            };
            let records = write_dataset(dir, &spec, *count)?;
            writeln!(out, "wrote {} mixtures to {}", records.len(), dir.display())?;
        }
        Command::Train {
            data,
            valid,
            out: dir,
            epochs,
            resume,
        } => {
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = *e;
            }
            cfg.train.validate()?;
            let train = load_examples(&read_manifest(data)?)?;
            let valid = load_examples(&read_manifest(valid)?)?;
            let (mut model, state) = if *resume {
                let (model, state) = load_latest(dir)?;
                (model, Some(state))
            } else {
                (SeparatorModel::new(&cfg.model, cfg.train.seed)?, None)
            };
            check_rate(model.config(), &train[0].mixture)?;
            let state = fit(&mut model, &train, &valid, &cfg.train, Some(dir), state)?;
            for r in &state.history {
                writeln!(
                    out,
                    "epoch {:>3}  train {:>8.3}  valid {:>8.3}  valid_sisdri {:>7.3} dB  lr {:.3e}",
                    r.epoch, r.train_loss, r.valid_loss, r.valid_sisdri, r.lr
                )?;
            }
        }
        Command::Separate { model, input, out_dir } => {
            let (model, _) = SeparatorModel::load(model)?;
            let mix = read_wav(input)?;
            check_rate(model.config(), &mix)?;
            let est = model.separate(&mix.samples)?;
            std::fs::create_dir_all(out_dir)?;
            let len = mix.len();
            for c in 0..model.config().num_sources {
                let buf = AudioBuffer::new(est.data()[c * len..(c + 1) * len].to_vec(), mix.sample_rate)?;
                let path = out_dir.join(format!("s{}.wav", c + 1));
                write_wav(&path, &buf)?;
                writeln!(out, "wrote {}", path.display())?;
            }
        }
        Command::Evaluate { model, manifest, oracle } => {
            let examples = load_examples(&read_manifest(manifest)?)?;
            let scores = if *oracle {
                oracle_scores(&examples)?
            } else {
                let path = model.as_ref().expect("clap enforces --model without --oracle");
                let (model, _) = SeparatorModel::load(path)?;
                examples
                    .iter()
                    .map(|ex| {
                        check_rate(model.config(), &ex.mixture)?;
                        Ok(utterance_metrics(&model, ex, Some(PIT_CLAMP_DB))?.1)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            report_scores(out, &examples, &scores, cli.csv)?;
        }
        Command::Profile { duration } => {
            let config = &cfg.model;
            let params = count_params(config)?;
            let macs = count_macs(config, *duration)?;
            if cli.csv {
                write!(out, "{}", params.to_csv("params"))?;
                write!(out, "{}", macs.to_csv("macs"))?;
            } else {
                writeln!(out, "parameters")?;
                writeln!(out, "{params}")?;
                writeln!(out, "intra-only baseline (no spgm_blocks) {}", count_params(&config.without_spgm())?.total)?;
                writeln!(out, "dual-path baseline (inter stacks instead) {}", dual_path_params(config)?)?;
                writeln!(out)?;
                writeln!(out, "MACs for {duration} s at {} Hz", config.sample_rate)?;
                writeln!(out, "{macs}")?;
                writeln!(out, "total GMAC {:.3}", macs.total as f64 / 1e9)?;
                writeln!(
                    out,
                    "convention: one MAC per multiply-accumulate in convolutions, linear maps, attention scores and \
                     weighted values, gain projections and modulation products; normalization, activations, softmax, \
                     residuals and mask products excluded"
                )?;
            }
        }
        Command::Gradcheck { seeds } => {
            let reports = gradient_suite(*seeds)?;
            let mut ok = true;
            if cli.csv {
                writeln!(out, "case,seeds,worst_rel_error,tolerance,passed")?;
            }
            for r in &reports {
                ok &= r.passed();
                if cli.csv {
                    writeln!(out, "{},{},{:e},{:e},{}", r.name, r.seeds, r.worst, r.tolerance, r.passed())?;
                } else {
                    let verdict = if r.passed() { "ok" } else { "FAIL" };
                    writeln!(out, "{:<26} seeds {:>3}  worst {:.3e}  tol {:.0e}  {verdict}", r.name, r.seeds, r.worst, r.tolerance)?;
                }
            }
            if !ok {
                return Ok(EXIT_FAILURE);
            }
        }
    }
    Ok(EXIT_OK)
}

fn check_rate(config: &ModelConfig, audio: &AudioBuffer) -> Result<()> {
    if audio.sample_rate != config.sample_rate {
        return Err(Error::Data(format!(
            "audio is {} Hz but the model expects {} Hz",
            audio.sample_rate, config.sample_rate
        )));
    }
    Ok(())
}

/// SI-SDRi of each utterance when the references themselves are the
/// estimates.
fn oracle_scores(examples: &[Example]) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|ex| {
            let total = ex
                .sources
                .iter()
                .map(|s| si_sdr_improvement(&s.samples, &s.samples, &ex.mixture.samples))
                .sum::<Result<f64>>()?;
            Ok(total / ex.sources.len() as f64)
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn report_scores(out: &mut dyn Write, examples: &[Example], scores: &[f64], csv: bool) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Data("empty manifest".into()));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let med = median(scores);
    writeln!(out, "utterance,sisdri_db")?;
    for (ex, s) in examples.iter().zip(scores) {
        writeln!(out, "{},{s}", ex.name)?;
    }
    if csv {
        writeln!(out, "mean,{mean}")?;
        writeln!(out, "median,{med}")?;
    } else {
        writeln!(out, "mean SI-SDRi   {mean:.3} dB")?;
        writeln!(out, "median SI-SDRi {med:.3} dB")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn usage_errors_exit_one() {
        let mut sink = Vec::new();
        assert_eq!(run_cli_with(["spgm", "profile", "--bogus"], &mut sink), EXIT_USAGE);
        assert_eq!(run_cli_with(["spgm", "nope"], &mut sink), EXIT_USAGE);
        assert_eq!(run_cli_with(["spgm", "separate", "--model", "x"], &mut sink), EXIT_USAGE);
    }

    #[test]
    fn missing_files_exit_two() {
        let mut sink = Vec::new();
        let code = run_cli_with(
            ["spgm", "separate", "--model", "/nonexistent.ckpt", "--in", "/nonexistent.wav", "--out-dir", "/tmp"],
            &mut sink,
        );
        assert_eq!(code, EXIT_FAILURE);
    }
}
