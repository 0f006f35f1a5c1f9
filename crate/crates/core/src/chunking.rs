//! 50%-overlap chunking of a `[T, N]` frame sequence into `[K, S, N]` and
//! its inverse by coverage-normalized overlap-add.

use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSpec {
    pub chunk_size: usize,
    pub hop: usize,
    /// Zero frames appended on the right so the last chunk is full.
    pub pad_len: usize,
    /// Unpadded sequence length.
    pub frames: usize,
    pub chunks: usize,
}

impl ChunkSpec {
    pub fn new(frames: usize, chunk_size: usize) -> Result<Self> {
        if chunk_size < 2 || !chunk_size.is_multiple_of(2) {
            return Err(Error::config(format!("chunk size must be even and >= 2, got {chunk_size}")));
        }
        if frames == 0 {
            return Err(Error::shape("cannot chunk an empty sequence"));
        }
        let hop = chunk_size / 2;
        let chunks = frames.saturating_sub(chunk_size).div_ceil(hop) + 1;
        let padded = chunk_size + (chunks - 1) * hop;
        Ok(Self {
            chunk_size,
            hop,
            pad_len: padded - frames,
            frames,
            chunks,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.frames + self.pad_len
    }

    /// Number of chunks covering each unpadded frame.
    fn coverage(&self) -> Vec<f64> {
        let mut count = vec![0.0; self.padded_len()];
        for s in 0..self.chunks {
            for c in &mut count[s * self.hop..s * self.hop + self.chunk_size] {
                *c += 1.0;
            }
        }
        count.truncate(self.frames);
        count
    }
}

/// Splits `x: [T, N]` into `[K, S, N]` chunks; chunk `s` covers frames
/// `s*K/2 .. s*K/2 + K` of the zero right-padded input.
pub fn segment(x: Var<'_>, chunk_size: usize) -> Result<(Var<'_>, ChunkSpec)> {
    let xv = x.value();
    let [frames, n] = xv.dims2("segment")?;
    let spec = ChunkSpec::new(frames, chunk_size)?;
    let (k, hop, s_count) = (spec.chunk_size, spec.hop, spec.chunks);
    let mut out = vec![0.0; k * s_count * n];
    for kk in 0..k {
        for s in 0..s_count {
            let t = s * hop + kk;
            if t < frames {
                let dst = (kk * s_count + s) * n;
                out[dst..dst + n].copy_from_slice(&xv.data()[t * n..(t + 1) * n]);
            }
        }
    }
    let out = Tensor::from_vec(&[k, s_count, n], out)?;
    let var = x.tape().record("segment", out, &[x], move |ctx: &BackwardCtx<'_>| {
        let g = ctx.grad.data();
        let mut dx = vec![0.0; frames * n];
        for kk in 0..k {
            for s in 0..s_count {
                let t = s * hop + kk;
                if t < frames {
                    let src = (kk * s_count + s) * n;
                    for (d, v) in dx[t * n..(t + 1) * n].iter_mut().zip(&g[src..src + n]) {
                        *d += v;
                    }
                }
            }
        }
        vec![Some(Tensor::new_unchecked(vec![frames, n], dx))]
    })?;
    Ok((var, spec))
}

/// Inverse of [`segment`]: sums chunks at their offsets, divides each frame
/// by the number of chunks covering it and drops the right padding.
pub fn overlap_add<'t>(chunks: Var<'t>, spec: &ChunkSpec) -> Result<Var<'t>> {
    let cv = chunks.value();
    let [k, s_count, n] = cv.dims3("overlap_add")?;
    if k != spec.chunk_size || s_count != spec.chunks {
        return Err(Error::contract(format!(
            "overlap_add: chunk tensor {:?} does not match spec K={} S={}",
            cv.shape(),
            spec.chunk_size,
            spec.chunks
        )));
    }
    let (hop, frames) = (spec.hop, spec.frames);
    let coverage = spec.coverage();
    let mut out = vec![0.0; frames * n];
    for kk in 0..k {
        for s in 0..s_count {
            let t = s * hop + kk;
            if t < frames {
                let src = (kk * s_count + s) * n;
                for (o, v) in out[t * n..(t + 1) * n].iter_mut().zip(&cv.data()[src..src + n]) {
                    *o += v;
                }
            }
        }
    }
    for (t, row) in out.chunks_exact_mut(n).enumerate() {
        row.iter_mut().for_each(|v| *v /= coverage[t]);
    }
    let out = Tensor::new_unchecked(vec![frames, n], out);
    chunks.tape().record("overlap_add", out, &[chunks], move |ctx: &BackwardCtx<'_>| {
        let g = ctx.grad.data();
        let mut dc = vec![0.0; k * s_count * n];
        for kk in 0..k {
            for s in 0..s_count {
                let t = s * hop + kk;
                if t < frames {
                    let dst = (kk * s_count + s) * n;
                    for (d, v) in dc[dst..dst + n].iter_mut().zip(&g[t * n..(t + 1) * n]) {
                        *d = v / coverage[t];
                    }
                }
            }
        }
        vec![Some(Tensor::new_unchecked(vec![k, s_count, n], dc))]
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{finite_diff_grad_check, Tape};

    fn seq(values: &[f64]) -> Tensor {
        Tensor::from_vec(&[values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn six_frames_chunk_four() {
        let tape = Tape::new();
        let x = tape.constant(seq(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let (c, spec) = segment(x, 4).unwrap();
        assert_eq!((spec.chunks, spec.pad_len), (2, 0));
        let c = c.value();
        assert_eq!(c.shape(), &[4, 2, 1]);
        let chunk = |s: usize| (0..4).map(|k| c.at3(k, s, 0)).collect::<Vec<_>>();
        assert_eq!(chunk(0), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(chunk(1), [3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn five_frames_are_padded() {
        let spec = ChunkSpec::new(5, 4).unwrap();
        assert_eq!((spec.chunks, spec.pad_len, spec.padded_len()), (2, 1, 6));
    }

    #[test]
    fn sequence_of_one_chunk() {
        let tape = Tape::new();
        let x = seq(&[0.5, -1.0, 2.0, 7.0]);
        let (c, spec) = segment(tape.constant(x.clone()), 4).unwrap();
        assert_eq!(spec.chunks, 1);
        assert_eq!(c.value().data(), x.data());
    }

    #[test]
    fn odd_chunk_size_is_rejected() {
        assert!(matches!(ChunkSpec::new(10, 5), Err(Error::Config(_))));
    }

    #[test]
    fn hand_overlap_add() {
        let tape = Tape::new();
        // [K=4, S=2, N=1] holding chunks [1,2,3,4] and [3,4,5,6]
        let c = Tensor::from_vec(&[4, 2, 1], vec![1.0, 3.0, 2.0, 4.0, 3.0, 5.0, 4.0, 6.0]).unwrap();
        let spec = ChunkSpec::new(6, 4).unwrap();
        let y = overlap_add(tape.constant(c), &spec).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn ones_stay_ones() {
        let tape = Tape::new();
        let spec = ChunkSpec::new(11, 4).unwrap();
        let c = tape.constant(Tensor::ones(&[4, spec.chunks, 3]));
        let y = overlap_add(c, &spec).unwrap().value();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn mismatched_spec_is_a_contract_error() {
        let tape = Tape::new();
        let spec = ChunkSpec::new(11, 4).unwrap();
        let c = tape.constant(Tensor::ones(&[4, spec.chunks + 1, 3]));
        assert!(matches!(overlap_add(c, &spec), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[9, 2], &mut rng);
            let spec = ChunkSpec::new(9, 4).unwrap();
            let proj = Tensor::randn(&[4, spec.chunks, 2], &mut rng);
            let check = finite_diff_grad_check(
                |t, v| segment(v, 4)?.0.mul(t.constant(proj.clone()))?.sum(),
                &x,
                1e-5,
            )
            .unwrap();
            assert!(check.max_rel_error < 1e-4);
            let proj2 = Tensor::randn(&[9, 2], &mut rng);
            let check = finite_diff_grad_check(
                |t, v| overlap_add(v, &spec)?.mul(t.constant(proj2.clone()))?.sum(),
                &proj,
                1e-5,
            )
            .unwrap();
            assert!(check.max_rel_error < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn round_trip_identity(frames in 1usize..80, half in 1usize..12, n in 1usize..4, seed in any::<u64>()) {
            let k = 2 * half;
            let x = Tensor::randn(&[frames, n], &mut ChaCha8Rng::seed_from_u64(seed));
            let tape = Tape::new();
            let (c, spec) = segment(tape.constant(x.clone()), k).unwrap();
            prop_assert!(k * spec.chunks >= frames);
            let y = overlap_add(c, &spec).unwrap().value();
            prop_assert!(y.max_abs_diff(&x) < 1e-10);
        }
    }
}
