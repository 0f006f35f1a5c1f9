//! SI-SDR, its improvement over the mixture, and the utterance-level
//! permutation-invariant loss.

use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, Tensor, Var};

/// Relative regularizer: `SI_SDR_EPS * ||est||^2` is added to both
/// energies, which keeps exact matches finite (capped at 80 dB) without
/// breaking scale invariance.
pub const SI_SDR_EPS: f64 = 1e-8;
/// Default lower clamp on the per-utterance loss, in dB.
pub const PIT_CLAMP_DB: f64 = -30.0;
/// Largest source count for exhaustive permutation search.
pub const MAX_PIT_SOURCES: usize = 4;

fn centered(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Target projection `s` and residual `e` of zero-mean `est` on `ref`.
struct Projection {
    s: Vec<f64>,
    e: Vec<f64>,
    target_energy: f64,
    error_energy: f64,
    /// `SI_SDR_EPS * ||e0||^2`
    eps: f64,
}

impl Projection {
    fn new(est: &[f64], reference: &[f64]) -> Result<Self> {
        if est.len() != reference.len() || est.is_empty() {
            return Err(Error::shape(format!(
                "si_sdr needs equal non-empty lengths, got {} and {}",
                est.len(),
                reference.len()
            )));
        }
        let (e0, r0) = (centered(est), centered(reference));
        let ref_energy = dot(&r0, &r0);
        if ref_energy == 0.0 {
            return Err(Error::contract("si_sdr reference is silent (zero energy after mean removal)"));
        }
        let alpha = dot(&e0, &r0) / ref_energy;
        let s: Vec<f64> = r0.iter().map(|r| alpha * r).collect();
        let e: Vec<f64> = e0.iter().zip(&s).map(|(x, t)| x - t).collect();
        Ok(Self {
            target_energy: dot(&s, &s),
            error_energy: dot(&e, &e),
            eps: SI_SDR_EPS * dot(&e0, &e0),
            s,
            e,
        })
    }

    /// A silent estimate scores 0 dB.
    fn db(&self) -> f64 {
        if self.eps == 0.0 {
            return 0.0;
        }
        10.0 * ((self.target_energy + self.eps) / (self.error_energy + self.eps)).log10()
    }
}

/// Scale-invariant SDR in dB.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(Projection::new(est, reference)?.db())
}

/// `si_sdr(est, ref) - si_sdr(mix, ref)`.
pub fn si_sdr_improvement(est: &[f64], reference: &[f64], mix: &[f64]) -> Result<f64> {
    Ok(si_sdr(est, reference)? - si_sdr(mix, reference)?)
}

/// Differentiable SI-SDR of `est: [T]` against a fixed reference.
pub fn si_sdr_var<'t>(est: Var<'t>, reference: &[f64]) -> Result<Var<'t>> {
    let value = est.value();
    if value.rank() != 1 {
        return Err(Error::shape(format!("si_sdr expects [T], got {:?}", value.shape())));
    }
    let proj = Projection::new(value.data(), reference)?;
    let out = Tensor::scalar(proj.db());
    est.tape().record("si_sdr", out, &[est], move |ctx: &BackwardCtx<'_>| {
        if proj.eps == 0.0 {
            return vec![Some(Tensor::zeros(&[proj.s.len()]))];
        }
        let k = 10.0 / std::f64::consts::LN_10 * ctx.grad.item();
        let (a, b) = (proj.target_energy + proj.eps, proj.error_energy + proj.eps);
        // s + e = e0; d||s||^2 = 2s, d||e||^2 = 2e, d eps = 2 SI_SDR_EPS e0.
        let raw: Vec<f64> = proj
            .s
            .iter()
            .zip(&proj.e)
            .map(|(s, e)| {
                let de = 2.0 * SI_SDR_EPS * (s + e);
                k * ((2.0 * s + de) / a - (2.0 * e + de) / b)
            })
            .collect();
        // d(center(x))/dx is the (symmetric) centering projector.
        let g = centered(&raw);
        vec![Some(Tensor::new_unchecked(vec![g.len()], g))]
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitResult {
    /// Negative mean SI-SDR of the chosen assignment, after the optional clamp.
    pub loss: f64,
    /// `permutation[i]` is the reference assigned to estimate `i`.
    pub permutation: Vec<usize>,
    /// `per_pair_sisdr[i][j]` = si_sdr(estimate i, reference j).
    pub per_pair_sisdr: Vec<Vec<f64>>,
    /// Whether the clamp changed the loss.
    pub clamped: bool,
}

impl PitResult {
    /// Mean SI-SDR (dB) of the chosen assignment, before clamping.
    pub fn mean_sisdr(&self) -> f64 {
        let c = self.permutation.len() as f64;
        self.permutation.iter().enumerate().map(|(i, &j)| self.per_pair_sisdr[i][j]).sum::<f64>() / c
    }
}

/// All permutations of `0..c` in lexicographic order.
pub fn permutations(c: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..c).collect();
    let mut all = vec![current.clone()];
    // Standard next-permutation step.
    loop {
        let Some(i) = (1..c).rev().find(|&i| current[i - 1] < current[i]) else {
            return all;
        };
        let j = (i..c).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
        all.push(current.clone());
    }
}

fn rows(t: &Tensor, what: &str) -> Result<Vec<Vec<f64>>> {
    let [c, len] = t.dims2(what)?;
    Ok((0..c).map(|i| t.data()[i * len..(i + 1) * len].to_vec()).collect())
}

/// Exhaustive uPIT over `C!` assignments; ties keep the lexicographically
/// smallest permutation. `clamp` lower-bounds the loss (e.g. `Some(-30.0)`).
pub fn upit_loss(ests: &Tensor, refs: &Tensor, clamp: Option<f64>) -> Result<PitResult> {
    let (e, r) = (rows(ests, "upit estimates")?, rows(refs, "upit references")?);
    if e.len() != r.len() {
        return Err(Error::contract(format!("{} estimates for {} references", e.len(), r.len())));
    }
    let c = e.len();
    if c > MAX_PIT_SOURCES {
        return Err(Error::contract(format!("upit supports at most {MAX_PIT_SOURCES} sources, got {c}")));
    }
    let per_pair = e
        .iter()
        .map(|est| r.iter().map(|rf| si_sdr(est, rf)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(c) {
        let score = perm.iter().enumerate().map(|(i, &j)| per_pair[i][j]).sum::<f64>() / c as f64;
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, perm));
        }
    }
    let (score, permutation) = best.expect("at least one permutation");
    let raw = -score;
    let loss = clamp.map_or(raw, |lo| raw.max(lo));
    Ok(PitResult {
        loss,
        permutation,
        per_pair_sisdr: per_pair,
        clamped: loss != raw,
    })
}

/// Differentiable uPIT loss for `ests: [C, T]`: picks the assignment with
/// [`upit_loss`], then builds `-mean_i si_sdr(est_i, ref_perm(i))` on the
/// tape, clamped below at `clamp`.
pub fn upit_loss_var<'t>(ests: Var<'t>, refs: &Tensor, clamp: Option<f64>) -> Result<(Var<'t>, PitResult)> {
    let result = upit_loss(&ests.value(), refs, clamp)?;
    let r = rows(refs, "upit references")?;
    let c = result.permutation.len();
    let mut total: Option<Var<'t>> = None;
    for (i, &j) in result.permutation.iter().enumerate() {
        let term = si_sdr_var(ests.select(i)?, &r[j])?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let mut loss = total.expect("at least one source").scale(-1.0 / c as f64)?;
    if let Some(lo) = clamp {
        loss = loss.clamp_min(lo)?;
    }
    Ok((loss, result))
}
