//! Multi-head scaled-dot-product attention on the tape.
//!
//! Callers own the input/output projections; this module splits heads,
//! scales, masks, and recombines, so the same routine serves causal
//! self-attention, cross-attention over compressed blocks, and the
//! Perceiver's latent queries.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive mask value for disallowed positions; large enough that the
/// shifted softmax underflows to exactly zero.
pub const MASK_OFF: f64 = -1e30;

/// Attention over projected inputs: `q` is [n×di], `k`/`v` are [m×di],
/// `mask` (if any) is an [n×m] additive bias shared by every head.
/// Returns [n×di].
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let di = *tape
        .value(q)
        .shape
        .last()
        .ok_or_else(|| Error::Shape("attention on rank-0 query".into()))?;
    if n_heads == 0 || di % n_heads != 0 {
        return Err(Error::Shape(format!(
            "attention width {di} not divisible into {n_heads} heads"
        )));
    }
    if tape.value(k).shape.last() != Some(&di) || tape.value(v).shape.last() != Some(&di) {
        return Err(Error::Shape(format!(
            "attention q/k/v widths differ: {:?}/{:?}/{:?}",
            tape.value(q).shape,
            tape.value(k).shape,
            tape.value(v).shape
        )));
    }
    let dh = di / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let mut scores = tape.matmul(qh, kt)?;
        scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let p = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(p, vh)?);
    }
    tape.concat(&heads, 1)
}

/// Additive causal mask: position i may attend to positions j ≤ i.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = MASK_OFF;
        }
    }
    Tensor::new(vec![n, n], data).expect("mask shape is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn output_shape_matches_queries() {
        let mut rng = Rng::new(5);
        let mut t = Tape::new();
        let q = t.constant(Tensor::randn(&mut rng, &[3, 8], 1.0));
        let k = t.constant(Tensor::randn(&mut rng, &[7, 8], 1.0));
        let v = t.constant(Tensor::randn(&mut rng, &[7, 8], 1.0));
        let o = multi_head_attention(&mut t, q, k, v, 2, None).unwrap();
        assert_eq!(t.value(o).shape, vec![3, 8]);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut rng = Rng::new(6);
        let x = Tensor::randn(&mut rng, &[4, 8], 1.0);
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let q = t.constant(x.clone());
            let k = t.constant(x.clone());
            let v = t.constant(x.clone());
            let m = t.constant(causal_mask(4));
            let o = multi_head_attention(&mut t, q, k, v, 2, Some(m)).unwrap();
            t.value(o).clone()
        };
        let base = run(&x);
        // perturb the last row: rows before it must not move
        let mut x2 = x.clone();
        for j in 0..8 {
            x2.data[3 * 8 + j] += 1.0;
        }
        let moved = run(&x2);
        for i in 0..3 {
            for j in 0..8 {
                assert_eq!(base.data[i * 8 + j], moved.data[i * 8 + j]);
            }
        }
    }

    #[test]
    fn single_key_attends_fully() {
        // with one key, softmax weight is 1 and output equals that value row
        let mut t = Tape::new();
        let q = t.constant(Tensor::new(vec![2, 4], vec![0.3; 8]).unwrap());
        let k = t.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = t.constant(Tensor::new(vec![1, 4], vec![9.0, 8.0, 7.0, 6.0]).unwrap());
        let o = multi_head_attention(&mut t, q, k, v, 1, None).unwrap();
        assert_eq!(t.value(o).data, vec![9.0, 8.0, 7.0, 6.0, 9.0, 8.0, 7.0, 6.0]);
    }

    #[test]
    fn grad_flows_through_attention() {
        let mut rng = Rng::new(7);
        let x = Tensor::randn(&mut rng, &[3, 4], 0.9);
        let kv = Tensor::randn(&mut rng, &[5, 4], 0.9);
        let rel = crate::tape::grad_check(
            |t, xv| {
                let k = t.constant(kv.clone());
                let v = t.constant(kv.clone());
                let o = multi_head_attention(t, xv, k, v, 2, None)?;
                Ok(t.mean(o))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "attention grad check rel err {rel}");
    }
}
