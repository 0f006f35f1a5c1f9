//! Finite-difference gradient suite over every differentiable piece of the
//! model, from single ops up to the full separator loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chunking::{overlap_add, segment, ChunkSpec};
use crate::error::Result;
use crate::layers::{
    conv1d, conv_transpose1d, scaled_dot_attention, transformer_layer_forward, ParamId, ParamStore,
    TransformerLayerParams, LAYER_NORM_EPS,
};
use crate::objective::{si_sdr_var, upit_loss, upit_loss_var};
use crate::separator::{ModelConfig, SeparatorModel};
use crate::spgm::{spgm_block_forward, PoolingMethod};
use crate::tensor::{finite_diff_grad_check, GRAD_FLOOR, Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Parameter entries sampled per seed in the end-to-end check.
pub const END_TO_END_PARAMS: usize = 10;
/// Samples in the end-to-end mixture.
pub const END_TO_END_SAMPLES: usize = 64;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub seeds: u64,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces any output to a scalar through a fixed random projection, so
/// every output element contributes to the checked gradient.
fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = Tensor::randn(&y.shape(), &mut rng(seed ^ 0x5eed));
    y.mul(tape.constant(w))?.sum()
}

/// Checks `f` with respect to each of `inputs` in turn; returns the worst
/// relative error.
fn check_inputs<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut worst: f64 = 0.0;
    for which in 0..inputs.len() {
        let check = finite_diff_grad_check(
            |t, v| {
                let vars: Vec<_> = (0..inputs.len())
                    .map(|i| if i == which { v } else { t.constant(inputs[i].clone()) })
                    .collect();
                project(t, f(t, &vars)?, seed)
            },
            &inputs[which],
            FD_EPS,
        )?;
        worst = worst.max(check.max_rel_error);
    }
    Ok(worst)
}

type Case = fn(u64) -> Result<f64>;

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, r)
}

fn case_matmul(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    check_inputs(&[randn(&[3, 4], r), randn(&[4, 2], r)], seed, |_, v| v[0].matmul(v[1]))
}

fn case_elementwise(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let inputs = [randn(&[3, 4], r), randn(&[3, 4], r), randn(&[4], r), randn(&[1], r)];
    check_inputs(&inputs, seed, |_, v| {
        let a = v[0].add(v[1])?.mul(v[0])?.sub(v[1].scale(0.7)?)?;
        let b = a.add_row(v[2])?.mul_row(v[2])?.sigmoid()?;
        let c = v[1].tanh()?.add(v[0].relu()?)?.prelu(v[3])?;
        b.add(c)
    })
}

fn case_softmax(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    check_inputs(&[randn(&[3, 5], r)], seed, |_, v| v[0].softmax(0)?.add(v[0].softmax(1)?))
}

fn case_layer_norm(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let inputs = [randn(&[4, 6], r), randn(&[6], r), randn(&[6], r)];
    check_inputs(&inputs, seed, |_, v| v[0].layer_norm(v[1], v[2], LAYER_NORM_EPS))
}

fn case_reshaping(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    check_inputs(&[randn(&[3, 2, 4], r)], seed, |_, v| {
        let x = v[0].swap01()?.reshape(&[6, 4])?;
        let padded = x.transpose()?.window_rows(-2, 9)?;
        let cols = x.slice_cols(1, 2)?.mul(x.slice_cols(0, 2)?)?;
        let pooled = v[0].select(1)?.mean_axis0()?;
        let stacked = Var::stack(&[pooled, pooled.scale(2.0)?])?;
        let a = padded.window_rows(1, 3)?.reshape(&[18])?.sum()?;
        a.add(cols.mul(cols)?.sum()?)?.add(stacked.mul(stacked)?.sum()?)
    })
}

fn case_conv(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let inputs = [randn(&[2, 11], r), randn(&[3, 2, 4], r), randn(&[3], r)];
    let fwd = check_inputs(&inputs, seed, |_, v| conv1d(v[0], v[1], v[2], 2))?;
    let inputs = [randn(&[3, 5], r), randn(&[3, 2, 4], r), randn(&[2], r)];
    let bwd = check_inputs(&inputs, seed, |_, v| conv_transpose1d(v[0], v[1], v[2], 2))?;
    Ok(fwd.max(bwd))
}

fn case_attention(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let inputs = [randn(&[6, 4], r), randn(&[6, 4], r), randn(&[6, 4], r)];
    check_inputs(&inputs, seed, |_, v| scaled_dot_attention(v[0], v[1], v[2], 2, 2))
}

fn case_transformer_layer(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let layer = TransformerLayerParams::declare(&mut store, "l", 8, 12, 2)?;
    store.materialize(seed);
    let r = &mut rng(seed + 1);
    // Perturb norms and biases away from their constant inits.
    for i in 0..store.len() {
        let id = ParamId(i);
        let v = store.get(id).zip_map(&Tensor::randn(&store.spec(id).shape, r), |a, b| a + 0.1 * b)?;
        store.set(id, v)?;
    }
    let x = randn(&[6, 8], r);
    let mut worst = check_inputs(std::slice::from_ref(&x), seed, |t, v| {
        transformer_layer_forward(&store.bind(t, false), &layer, v[0], 2)
    })?;
    // Every parameter tensor of the layer, one at a time.
    for i in 0..store.len() {
        let id = ParamId(i);
        let check = finite_diff_grad_check(
            |t, v| {
                let mut p = store.bind(t, false);
                p.substitute(id, v);
                project(t, transformer_layer_forward(&p, &layer, t.constant(x.clone()), 2)?, seed)
            },
            store.get(id),
            FD_EPS,
        )?;
        worst = worst.max(check.max_rel_error);
    }
    Ok(worst)
}

fn case_chunking(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let x = randn(&[9, 3], r);
    let a = check_inputs(&[x], seed, |_, v| Ok(segment(v[0], 4)?.0))?;
    let spec = ChunkSpec::new(9, 4)?;
    let c = randn(&[4, spec.chunks, 3], r);
    let b = check_inputs(&[c], seed, |_, v| overlap_add(v[0], &spec))?;
    Ok(a.max(b))
}

fn spgm_case(seed: u64, method: PoolingMethod) -> Result<f64> {
    let r = &mut rng(seed);
    let inputs = [
        randn(&[4, 3, 5], r),
        randn(&[5, 5], r).scale(0.5),
        randn(&[5, 5], r).scale(0.5),
        randn(&[5], r),
    ];
    let n = if method == PoolingMethod::LastElement { 3 } else { 4 };
    check_inputs(&inputs[..n], seed, |_, v| spgm_block_forward(v[0], method, v[1], v[2], v.get(3).copied()))
}

fn case_spgm_le(seed: u64) -> Result<f64> {
    spgm_case(seed, PoolingMethod::LastElement)
}

fn case_spgm_ap(seed: u64) -> Result<f64> {
    spgm_case(seed, PoolingMethod::AttentivePooling)
}

fn case_objective(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let reference = randn(&[16], r);
    let a = check_inputs(&[randn(&[16], r)], seed, |_, v| si_sdr_var(v[0], reference.data()))?;
    let refs = randn(&[2, 16], r);
    let ests = randn(&[2, 16], r);
    let check = finite_diff_grad_check(|_, v| Ok(upit_loss_var(v, &refs, None)?.0), &ests, FD_EPS)?;
    Ok(a.max(check.max_rel_error))
}

/// Plain (untaped) uPIT loss of the model on one mixture.
fn model_loss(model: &SeparatorModel, mix: &[f64], refs: &Tensor) -> Result<f64> {
    Ok(upit_loss(&model.separate(mix)?, refs, None)?.loss)
}

/// Spot-checks the full-model loss gradient at randomly chosen parameter
/// entries (a random tensor, then a random entry in it).
pub fn end_to_end_check(config: &ModelConfig, seed: u64, samples: usize, entries: usize) -> Result<f64> {
    let mut model = SeparatorModel::new(config, seed)?;
    let r = &mut rng(seed + 7);
    // Move norm gains/biases and the slope off their constant inits.
    for i in 0..model.params().len() {
        let id = ParamId(i);
        let v = model.params().get(id);
        let noisy = v.zip_map(&Tensor::randn(v.shape(), r), |a, b| a + 0.05 * b)?;
        model.params_mut().set(id, noisy)?;
    }
    let mix = randn(&[samples], r).scale(0.5).into_data();
    let refs = randn(&[config.num_sources, samples], r);

    let tape = Tape::new();
    let p = model.params().bind(&tape, true);
    let out = model.forward(&tape, &p, tape.constant(Tensor::from_vec(&[samples], mix.clone())?))?;
    let (loss, _) = upit_loss_var(out.estimates, &refs, None)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for _ in 0..entries {
        let id = ParamId(r.gen_range(0..model.params().len()));
        let original = model.params().get(id).clone();
        let k = r.gen_range(0..original.numel());
        let analytic = grads.get(p[id]).map_or(0.0, |g| g.data()[k]);
        let mut eval = |delta: f64| -> Result<f64> {
            let mut probe = original.clone();
            probe.data_mut()[k] += delta;
            model.params_mut().set(id, probe)?;
            model_loss(&model, &mix, &refs)
        };
        let numeric = (eval(FD_EPS)? - eval(-FD_EPS)?) / (2.0 * FD_EPS);
        model.params_mut().set(id, original)?;
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn case_end_to_end(seed: u64) -> Result<f64> {
    end_to_end_check(&ModelConfig::tiny(), seed, END_TO_END_SAMPLES, END_TO_END_PARAMS)
}

fn case_end_to_end_ap(seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        pooling: PoolingMethod::AttentivePooling,
        ..ModelConfig::tiny()
    };
    end_to_end_check(&cfg, seed, END_TO_END_SAMPLES, END_TO_END_PARAMS)
}

/// Named cases with their tolerances.
pub fn cases() -> Vec<(&'static str, Case, f64)> {
    vec![
        ("matmul", case_matmul as Case, OP_TOLERANCE),
        ("elementwise", case_elementwise, OP_TOLERANCE),
        ("softmax", case_softmax, OP_TOLERANCE),
        ("layer_norm", case_layer_norm, OP_TOLERANCE),
        ("reshaping", case_reshaping, OP_TOLERANCE),
        ("conv1d+conv_transpose1d", case_conv, OP_TOLERANCE),
        ("attention", case_attention, OP_TOLERANCE),
        ("transformer_layer", case_transformer_layer, OP_TOLERANCE),
        ("segment+overlap_add", case_chunking, OP_TOLERANCE),
        ("spgm_block_le", case_spgm_le, OP_TOLERANCE),
        ("spgm_block_ap", case_spgm_ap, OP_TOLERANCE),
        ("si_sdr+upit", case_objective, OP_TOLERANCE),
        ("end_to_end_upit_le", case_end_to_end, END_TO_END_TOLERANCE),
        ("end_to_end_upit_ap", case_end_to_end_ap, END_TO_END_TOLERANCE),
    ]
}

/// Runs every case over seeds `0..seeds`.
pub fn gradient_suite(seeds: u64) -> Result<Vec<CheckReport>> {
    cases()
        .into_iter()
        .map(|(name, case, tolerance)| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                worst = worst.max(case(seed)?);
            }
            Ok(CheckReport {
                name: name.to_string(),
                seeds,
                worst,
                tolerance,
            })
        })
        .collect()
}
