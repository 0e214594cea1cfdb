//! Gated cross-attention (GCA) blocks.
//!
//! A GCA block lets window embeddings attend over compressed context and
//! adds the result through tanh gates that start at zero, so a freshly
//! attached block is an exact identity and the surrounding model's
//! behavior is untouched until training moves the gates.
//!
//! The same block form serves two places: injection into the base model
//! (queries are d-wide window embeddings, keys/values come from d_c-wide
//! compressed blocks) and the query-dependent transform (queries are
//! d_c-wide recurrent features, keys/values come from d-wide query
//! embeddings). Widths are fixed by the stored parameter shapes.

use crate::attn::multi_head_attention;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Params, TrainMask};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn linear(rng: &mut Rng, d_in: usize, d_out: usize) -> Tensor {
    Tensor::randn(rng, &[d_in, d_out], 1.0 / (d_in as f64).sqrt())
}

/// Parameters of one GCA block under `prefix`: cross-attention with
/// queries `d_q` wide and keys/values projected from `d_kv`, a two-layer
/// MLP of width `d_hidden`, and two zero-initialized gate scalars.
pub fn init_gca_block(
    params: &mut Params,
    rng: &mut Rng,
    prefix: &str,
    d_q: usize,
    d_kv: usize,
    d_hidden: usize,
) {
    params.insert(&format!("{prefix}.attn.wq"), linear(rng, d_q, d_q));
    params.insert(&format!("{prefix}.attn.wk"), linear(rng, d_kv, d_q));
    params.insert(&format!("{prefix}.attn.wv"), linear(rng, d_kv, d_q));
    params.insert(&format!("{prefix}.attn.wo"), linear(rng, d_q, d_q));
    params.insert(&format!("{prefix}.mlp.w1"), linear(rng, d_q, d_hidden));
    params.insert(&format!("{prefix}.mlp.b1"), Tensor::zeros(&[d_hidden]));
    params.insert(&format!("{prefix}.mlp.w2"), linear(rng, d_hidden, d_q));
    params.insert(&format!("{prefix}.mlp.b2"), Tensor::zeros(&[d_q]));
    params.insert(&format!("{prefix}.gate_attn"), Tensor::zeros(&[1]));
    params.insert(&format!("{prefix}.gate_mlp"), Tensor::zeros(&[1]));
}

/// Injection blocks for every decoder layer selected by `gca_every`.
pub fn init_injector_params(cfg: &ModelConfig, rng: &mut Rng) -> Params {
    let mut params = Params::new();
    for l in 0..cfg.n_layers {
        if l % cfg.gca_every == 0 {
            init_gca_block(
                &mut params,
                rng,
                &format!("gca.{l}"),
                cfg.d_model,
                cfg.d_c,
                cfg.d_ff,
            );
        }
    }
    params
}

/// One gated cross-attention block:
/// `e1 = tanh(gate_attn)·CA(e, h) + e`, `e2 = tanh(gate_mlp)·MLP(e1) + e1`.
/// With `h` empty the CA term is zero and only the MLP branch applies.
pub fn gca_forward(
    tape: &mut Tape,
    params: &Params,
    mask: &TrainMask,
    prefix: &str,
    e: Var,
    h: Option<Var>,
    n_heads: usize,
) -> Result<Var> {
    let e1 = match h {
        Some(h) if tape.value(h).shape[0] > 0 => {
            let d_kv = *tape.value(h).shape.last().unwrap();
            let wk_shape = &params.get(&format!("{prefix}.attn.wk"))?.shape;
            if wk_shape[0] != d_kv {
                return Err(Error::Shape(format!(
                    "GCA `{prefix}` keys expect width {}, compressed blocks are {d_kv} wide",
                    wk_shape[0]
                )));
            }
            let wk = params.bind(tape, &format!("{prefix}.attn.wk"), mask)?;
            let wq = params.bind(tape, &format!("{prefix}.attn.wq"), mask)?;
            let wv = params.bind(tape, &format!("{prefix}.attn.wv"), mask)?;
            let wo = params.bind(tape, &format!("{prefix}.attn.wo"), mask)?;
            let q = tape.matmul(e, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let ca = multi_head_attention(tape, q, k, v, n_heads, None)?;
            let ca = tape.matmul(ca, wo)?;
            let gate_a = params.bind(tape, &format!("{prefix}.gate_attn"), mask)?;
            let alpha = tape.tanh(gate_a);
            let gated = tape.scale_by(ca, alpha)?;
            tape.add(gated, e)?
        }
        _ => e,
    };
    let w1 = params.bind(tape, &format!("{prefix}.mlp.w1"), mask)?;
    let b1 = params.bind(tape, &format!("{prefix}.mlp.b1"), mask)?;
    let w2 = params.bind(tape, &format!("{prefix}.mlp.w2"), mask)?;
    let b2 = params.bind(tape, &format!("{prefix}.mlp.b2"), mask)?;
    let m = tape.matmul(e1, w1)?;
    let m = tape.add(m, b1)?;
    let m = tape.gelu(m);
    let m = tape.matmul(m, w2)?;
    let m = tape.add(m, b2)?;
    let gate_b = params.bind(tape, &format!("{prefix}.gate_mlp"), mask)?;
    let beta = tape.tanh(gate_b);
    let gated = tape.scale_by(m, beta)?;
    tape.add(gated, e1)
}

/// Check that exactly the injection blocks demanded by the config exist.
pub fn validate_attached(params: &Params, cfg: &ModelConfig) -> Result<()> {
    for l in 0..cfg.n_layers {
        let expected = l % cfg.gca_every == 0;
        let present = params.contains(&format!("gca.{l}.gate_attn"));
        if expected && !present {
            return Err(Error::Config(format!(
                "decoder layer {l} requires an injection block and none is attached"
            )));
        }
        if !expected && present {
            return Err(Error::Config(format!(
                "injection block attached at layer {l}, but gca_every = {} excludes it",
                cfg.gca_every
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_params(d_q: usize, d_kv: usize) -> Params {
        let mut rng = Rng::new(11);
        let mut params = Params::new();
        init_gca_block(&mut params, &mut rng, "blk", d_q, d_kv, 2 * d_q);
        params
    }

    #[test]
    fn zero_gates_make_identity() {
        let params = block_params(8, 6);
        let mut rng = Rng::new(12);
        let e = Tensor::randn(&mut rng, &[5, 8], 1.0);
        let h = Tensor::randn(&mut rng, &[9, 6], 1.0);
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let hv = tape.constant(h);
        let out = gca_forward(
            &mut tape,
            &params,
            &TrainMask::None,
            "blk",
            ev,
            Some(hv),
            2,
        )
        .unwrap();
        assert!(tape.value(out).bit_eq(&e));
    }

    #[test]
    fn empty_h_applies_only_mlp_branch() {
        let mut params = block_params(8, 6);
        *params.get_mut("blk.gate_attn").unwrap() = Tensor::new(vec![1], vec![0.7]).unwrap();
        *params.get_mut("blk.gate_mlp").unwrap() = Tensor::new(vec![1], vec![0.3]).unwrap();
        let mut rng = Rng::new(13);
        let e = Tensor::randn(&mut rng, &[4, 8], 1.0);
        let empty = Tensor::zeros(&[0, 6]);
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let hv = tape.constant(empty);
        let out = gca_forward(
            &mut tape,
            &params,
            &TrainMask::None,
            "blk",
            ev,
            Some(hv),
            2,
        )
        .unwrap();
        // oracle: e + tanh(0.3)·MLP(e), computed on a fresh tape
        let beta = 0.3f64.tanh();
        let mut t2 = Tape::new();
        let e2 = t2.constant(e.clone());
        let w1 = t2.constant(params.get("blk.mlp.w1").unwrap().clone());
        let b1 = t2.constant(params.get("blk.mlp.b1").unwrap().clone());
        let w2 = t2.constant(params.get("blk.mlp.w2").unwrap().clone());
        let b2 = t2.constant(params.get("blk.mlp.b2").unwrap().clone());
        let m = t2.matmul(e2, w1).unwrap();
        let m = t2.add(m, b1).unwrap();
        let m = t2.gelu(m);
        let m = t2.matmul(m, w2).unwrap();
        let m = t2.add(m, b2).unwrap();
        let m = t2.scale(m, beta);
        let want = t2.add(m, e2).unwrap();
        assert!(tape.value(out).max_abs_diff(t2.value(want)) < 1e-12);
    }

    #[test]
    fn hand_evaluated_single_token_case() {
        // d_q = d_kv = 1, one head, one token, one block row: every matrix
        // is a scalar, so the block reduces to arithmetic we can do by hand.
        let mut params = Params::new();
        let mut ins = |name: &str, v: f64| {
            params.insert(name, Tensor::new(vec![1, 1], vec![v]).unwrap())
        };
        ins("blk.attn.wq", 2.0);
        ins("blk.attn.wk", 3.0);
        ins("blk.attn.wv", 5.0);
        ins("blk.attn.wo", 7.0);
        ins("blk.mlp.w1", 0.5);
        ins("blk.mlp.w2", 4.0);
        params.insert("blk.mlp.b1", Tensor::zeros(&[1]));
        params.insert("blk.mlp.b2", Tensor::zeros(&[1]));
        params.insert("blk.gate_attn", Tensor::new(vec![1], vec![0.25]).unwrap());
        params.insert("blk.gate_mlp", Tensor::new(vec![1], vec![-0.5]).unwrap());

        let e = 1.5f64;
        let h = -0.75f64;
        // single key row: attention output is exactly v = h·wv, then ·wo
        let ca = h * 5.0 * 7.0;
        let e1 = 0.25f64.tanh() * ca + e;
        let mlp = crate::tensor::gelu_val(e1 * 0.5) * 4.0;
        let want = (-0.5f64).tanh() * mlp + e1;

        let mut tape = Tape::new();
        let ev = tape.constant(Tensor::new(vec![1, 1], vec![e]).unwrap());
        let hv = tape.constant(Tensor::new(vec![1, 1], vec![h]).unwrap());
        let out = gca_forward(
            &mut tape,
            &params,
            &TrainMask::None,
            "blk",
            ev,
            Some(hv),
            1,
        )
        .unwrap();
        let got = tape.value(out).data[0];
        assert!(
            (got - want).abs() < 1e-12,
            "hand oracle {want}, block computed {got}"
        );
    }

    #[test]
    fn grad_check_through_block() {
        let params = {
            let mut rng = Rng::new(21);
            let mut p = Params::new();
            init_gca_block(&mut p, &mut rng, "blk", 6, 4, 12);
            // move gates off zero so both branches carry gradient
            *p.get_mut("blk.gate_attn").unwrap() = Tensor::new(vec![1], vec![0.4]).unwrap();
            *p.get_mut("blk.gate_mlp").unwrap() = Tensor::new(vec![1], vec![-0.3]).unwrap();
            p
        };
        let mut rng = Rng::new(22);
        let h = Tensor::randn(&mut rng, &[5, 4], 0.8);
        let e = Tensor::randn(&mut rng, &[3, 6], 0.8);
        let rel = crate::tape::grad_check(
            |t, ev| {
                let hv = t.constant(h.clone());
                let out = gca_forward(t, &params, &TrainMask::None, "blk", ev, Some(hv), 2)?;
                Ok(t.mean(out))
            },
            &e,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "GCA grad check rel err {rel}");
    }

    #[test]
    fn validate_attached_matches_spacing() {
        let mut cfg = ModelConfig::default();
        cfg.n_layers = 4;
        cfg.gca_every = 2;
        let mut rng = Rng::new(3);
        let full = init_injector_params(&cfg, &mut rng);
        validate_attached(&full, &cfg).unwrap();
        // missing block
        let mut cfg_all = cfg.clone();
        cfg_all.gca_every = 1;
        assert!(validate_attached(&full, &cfg_all).is_err());
        // spurious block
        let mut spurious = full.clone();
        spurious.insert("gca.1.gate_attn", Tensor::zeros(&[1]));
        assert!(validate_attached(&spurious, &cfg).is_err());
    }
}
