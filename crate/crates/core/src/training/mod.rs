//! Training recipe: shuffled epochs of crop, speed perturbation, uPIT loss,
//! clipped Adam; plateau-halving schedule on the validation loss;
//! checkpoints of the best model and of the full resumable state.

mod augment;
mod optim;

pub use augment::{speed_perturb, speed_perturb_samples, SINC_TAPS, SPEED_FACTOR_GUARD};
pub use optim::{
    adam_step, clip_grad_norm, global_norm, AdamState, Plateau, PlateauDecision, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
    IMPROVEMENT_THRESHOLD,
};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_group, AudioBuffer, MixtureRecord};
use crate::error::{Error, Result};
use crate::objective::{si_sdr_improvement, upit_loss_var, PIT_CLAMP_DB};
use crate::separator::{read_container, write_container, Dtype, SeparatorModel};
use crate::tensor::{Tape, Tensor};

pub const BEST_MODEL: &str = "best.ckpt";
pub const LATEST_MODEL: &str = "latest.ckpt";
pub const LATEST_STATE: &str = "latest.state";
pub const HISTORY: &str = "history.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr0: f64,
    pub plateau_patience: usize,
    pub lr_floor: f64,
    pub lr_factor: f64,
    /// Speed factor range; `[1.0, 1.0]` disables perturbation.
    pub speed_perturb: [f64; 2],
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub pit_clamp: bool,
    /// Training utterances longer than this are randomly cropped.
    pub crop_seconds: f64,
    /// Stop once mean validation SI-SDRi (dB) exceeds this.
    pub target_valid_sisdri: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            lr0: 1.5e-4,
            plateau_patience: 3,
            lr_floor: 1.0e-8,
            lr_factor: 0.5,
            speed_perturb: [0.95, 1.05],
            batch_size: 1,
            grad_clip_norm: 5.0,
            seed: 0,
            pit_clamp: true,
            crop_seconds: 10.0,
            target_valid_sisdri: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if !(0.0 < self.lr_floor && self.lr_floor < self.lr0) {
            return fail("need 0 < lr_floor < lr0");
        }
        if !(0.0 < self.lr_factor && self.lr_factor < 1.0) {
            return fail("need 0 < lr_factor < 1");
        }
        let [lo, hi] = self.speed_perturb;
        if !(SPEED_FACTOR_GUARD[0] <= lo && lo <= hi && hi <= SPEED_FACTOR_GUARD[1]) {
            return fail("speed_perturb range must lie within [0.9, 1.1]");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be positive");
        }
        if !(self.grad_clip_norm > 0.0 && self.crop_seconds > 0.0) {
            return fail("grad_clip_norm and crop_seconds must be positive");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn clamp(&self) -> Option<f64> {
        self.pit_clamp.then_some(PIT_CLAMP_DB)
    }
}

/// One utterance held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub name: String,
    pub mixture: AudioBuffer,
    pub sources: Vec<AudioBuffer>,
}

impl Example {
    pub fn refs(&self) -> Result<Tensor> {
        let len = self.mixture.len();
        let data: Vec<f64> = self.sources.iter().flat_map(|s| s.samples.iter().copied()).collect();
        Tensor::from_vec(&[self.sources.len(), len], data)
    }
}

pub fn load_examples(records: &[MixtureRecord]) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let (mixture, sources) = r.load()?;
            Ok(Example {
                name: r.mixture_path.display().to_string(),
                mixture,
                sources,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_sisdri: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

/// Everything besides the model weights needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub plateau: Plateau,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
    pub stopped: bool,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    kind: String,
    epoch: usize,
    plateau: Plateau,
    step: u64,
    history: Vec<EpochRecord>,
    stopped: bool,
    /// Per-epoch randomness is re-derived from (seed, epoch).
    seed: u64,
}

impl TrainState {
    pub fn new(model: &SeparatorModel, cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            plateau: Plateau::new(cfg.lr0, cfg.plateau_patience, cfg.lr_factor, cfg.lr_floor),
            adam: AdamState::new(model.params()),
            history: Vec::new(),
            stopped: false,
        }
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let header = serde_json::to_value(StateHeader {
            kind: "train_state".into(),
            epoch: self.epoch,
            plateau: self.plateau,
            step: self.adam.step,
            history: self.history.clone(),
            stopped: self.stopped,
            seed,
        })?;
        let names: Vec<String> = (0..self.adam.m.len()).flat_map(|i| [format!("m.{i}"), format!("v.{i}")]).collect();
        let tensors: Vec<(&str, &Tensor)> = names
            .iter()
            .zip(self.adam.m.iter().zip(&self.adam.v).flat_map(|(m, v)| [m, v]))
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        write_container(path, &header, &tensors, Dtype::F64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = read_container(path)?;
        let h: StateHeader = serde_json::from_value(header)?;
        if h.kind != "train_state" {
            return Err(Error::format(path, "not a training state file"));
        }
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            let expect = if i % 2 == 0 { format!("m.{}", i / 2) } else { format!("v.{}", i / 2) };
            if name != expect {
                return Err(Error::format(path, format!("expected tensor `{expect}`, found `{name}`")));
            }
            if i % 2 == 0 { m.push(t) } else { v.push(t) }
        }
        Ok(Self {
            epoch: h.epoch,
            plateau: h.plateau,
            adam: AdamState { m, v, step: h.step },
            history: h.history,
            stopped: h.stopped,
        })
    }
}

/// Loads `latest.ckpt` and `latest.state` from a training directory.
pub fn load_latest(dir: &Path) -> Result<(SeparatorModel, TrainState)> {
    let (model, _) = SeparatorModel::load(&dir.join(LATEST_MODEL))?;
    let state = TrainState::load(&dir.join(LATEST_STATE))?;
    if state.adam.m.len() != model.params().len() {
        return Err(Error::format(dir.join(LATEST_STATE), "optimizer state does not match the model"));
    }
    Ok((model, state))
}

/// Stable per-epoch random stream.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Mean loss and SI-SDRi over `examples` without augmentation.
pub fn evaluate(model: &SeparatorModel, examples: &[Example], clamp: Option<f64>) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let (mut loss, mut sisdri) = (0.0, 0.0);
    for ex in examples {
        let (l, i) = utterance_metrics(model, ex, clamp)
            .map_err(|e| Error::Data(format!("evaluating {}: {e}", ex.name)))?;
        loss += l;
        sisdri += i;
    }
    let n = examples.len() as f64;
    Ok((loss / n, sisdri / n))
}

/// `(pit loss, mean SI-SDRi over sources)` of one utterance.
pub fn utterance_metrics(model: &SeparatorModel, ex: &Example, clamp: Option<f64>) -> Result<(f64, f64)> {
    let est = model.separate(&ex.mixture.samples)?;
    let refs = ex.refs()?;
    let pit = crate::objective::upit_loss(&est, &refs, clamp)?;
    let len = ex.mixture.len();
    let mut improvement = 0.0;
    for (i, &j) in pit.permutation.iter().enumerate() {
        improvement += si_sdr_improvement(&est.data()[i * len..(i + 1) * len], &ex.sources[j].samples, &ex.mixture.samples)?;
    }
    Ok((pit.loss, improvement / pit.permutation.len() as f64))
}

fn augment(ex: &Example, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Tensor)> {
    let mut group = vec![ex.mixture.clone()];
    group.extend(ex.sources.iter().cloned());
    let mut group = crop_group(&group, cfg.crop_seconds, rng)?;
    let [lo, hi] = cfg.speed_perturb;
    let factor = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    if factor != 1.0 {
        group = group.iter().map(|b| speed_perturb(b, factor)).collect::<Result<_>>()?;
    }
    let len = group[0].len();
    let refs = Tensor::from_vec(&[group.len() - 1, len], group[1..].iter().flat_map(|b| b.samples.clone()).collect())?;
    Ok((group.swap_remove(0).samples, refs))
}

/// Loss and parameter gradients of one utterance.
fn utterance_step(model: &SeparatorModel, mix: Vec<f64>, refs: &Tensor, clamp: Option<f64>) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = model.params().bind(&tape, true);
    let x = tape.constant(Tensor::from_vec(&[mix.len()], mix)?);
    let out = model.forward(&tape, &p, x)?;
    let (loss, pit) = upit_loss_var(out.estimates, refs, clamp)?;
    if !pit.loss.is_finite() {
        return Err(Error::NonFinite("upit_loss"));
    }
    let mut grads = tape.backward(loss)?;
    let g = p
        .vars()
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    Ok((pit.loss, g))
}

/// Runs epochs `state.epoch + 1 ..= cfg.max_epochs`, updating `model` in
/// place. With `out_dir`, writes `best.ckpt` (32-bit) whenever validation
/// improves, plus `latest.ckpt` (64-bit), `latest.state` and `history.csv`
/// after every epoch.
pub fn fit(
    model: &mut SeparatorModel,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    state: Option<TrainState>,
) -> Result<TrainState> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut state = state.unwrap_or_else(|| TrainState::new(model, cfg));
    if state.adam.m.len() != model.params().len() {
        return Err(Error::contract("training state does not match the model"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let clamp = cfg.clamp();
    while !state.stopped && state.epoch < cfg.max_epochs {
        let epoch = state.epoch + 1;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let lr = state.plateau.lr;

        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let ex = &train[i];
                let diag = |e: Error| Error::Data(format!("epoch {epoch}, utterance {}: {e}", ex.name));
                let (mix, refs) = augment(ex, cfg, &mut rng).map_err(diag)?;
                let (loss, grads) = utterance_step(model, mix, &refs, clamp).map_err(diag)?;
                total += loss;
                match &mut acc {
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                    None => acc = Some(grads),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            if batch.len() > 1 {
                let s = 1.0 / batch.len() as f64;
                grads.iter_mut().for_each(|g| *g = g.scale(s));
            }
            clip_grad_norm(&mut grads, cfg.grad_clip_norm);
            adam_step(model.params_mut(), &grads, &mut state.adam, lr)?;
        }
        let train_loss = total / train.len() as f64;

        let (valid_loss, valid_sisdri) = evaluate(model, valid, clamp)?;
        let improved = valid_loss < state.plateau.best - IMPROVEMENT_THRESHOLD;
        let decision = state.plateau.step(valid_loss)?;
        state.epoch = epoch;
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            valid_sisdri,
            lr,
        });
        let reached = cfg.target_valid_sisdri.is_some_and(|t| valid_sisdri > t);
        state.stopped = decision == PlateauDecision::Stop || reached;

        if let Some(dir) = out_dir {
            let meta = serde_json::json!({"epoch": epoch, "valid_loss": valid_loss, "valid_sisdri": valid_sisdri});
            if improved {
                model.save(&dir.join(BEST_MODEL), Dtype::F32, meta.clone())?;
            }
            model.save(&dir.join(LATEST_MODEL), Dtype::F64, meta)?;
            state.save(&dir.join(LATEST_STATE), cfg.seed)?;
            write_history(&dir.join(HISTORY), &state.history)?;
        }
    }
    Ok(state)
}

/// `epoch,train_loss,valid_loss,lr` CSV.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "valid_loss", "lr"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.valid_loss.to_string(), r.lr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Paths of the artifacts `fit` writes into `dir`.
pub fn artifacts(dir: &Path) -> [PathBuf; 4] {
    [BEST_MODEL, LATEST_MODEL, LATEST_STATE, HISTORY].map(|f| dir.join(f))
}
