//! Incremental decoding under a hard positional window.
//!
//! Three regimes, chosen from prompt length N, generation budget P, and
//! window size M:
//!
//! * direct — N+P ≤ M: plain decoding, the compressor is never touched;
//! * compressed — N+P > M, P ≤ M: the prompt's head is compressed into
//!   feature blocks and the window keeps the last max(M−P, M/2) prompt
//!   tokens, reserving room for the output;
//! * rolling — P > M: as above, and whenever the window fills, its oldest
//!   M/2 tokens are compressed and evicted to make room.
//!
//! The engine keeps per-layer key/value caches and recomputes each new
//! token's row with the same row-level primitives the batched forward pass
//! uses, so its logits are bit-identical to a full forward over the live
//! window. Evictions shift the surviving tokens to new positions, so the
//! caches are rebuilt from scratch after each one; that costs one half-
//! window forward per M/2 generated tokens, a constant per token.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::compressor::{embed_context, compress_step_on_tape, CompressorState, Segmentation};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::injector::validate_attached;
use crate::lm::argmax_slice;
use crate::params::{Params, TrainMask};
use crate::qd::{qd_compress_step_on_tape, QueryContext};
use crate::tape::Tape;
use crate::tensor::{gelu_val, layer_norm_row, matmul_raw, softmax_row, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Direct,
    Compressed,
    Rolling,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Direct => "direct",
            Regime::Compressed => "compressed",
            Regime::Rolling => "rolling",
        }
    }
}

/// One per-token log record emitted by `infer` under `--trace`.
#[derive(Debug, Clone, Serialize)]
pub struct TraceEvent {
    pub step: usize,
    pub regime: &'static str,
    pub window_occupancy: usize,
    pub h_blocks: usize,
}

/// Compress `tokens` onto `state` in fixed segments of `seg_len_max`,
/// returning the advanced state and the matmul MACs spent.
fn compress_tokens(
    params: &Params,
    cfg: &ModelConfig,
    state: CompressorState,
    tokens: &[usize],
    qc: Option<&QueryContext>,
) -> Result<(CompressorState, u64)> {
    if tokens.is_empty() {
        return Ok((state, 0));
    }
    let e = embed_context(params, tokens)?;
    let seg = Segmentation::fixed(tokens.len(), cfg.seg_len_max)?;
    let mut st = state;
    let mut macs = 0u64;
    for r in seg.iter() {
        let mut tape = Tape::new();
        let hp = tape.constant(st.h_current.clone());
        let x = tape.constant(e.rows_slice(r.start, r.end));
        let h_new = match qc {
            Some(q) => {
                qd_compress_step_on_tape(&mut tape, params, &TrainMask::None, cfg, hp, x, q)?
            }
            None => compress_step_on_tape(&mut tape, params, &TrainMask::None, cfg, hp, x)?,
        };
        macs += tape.macs_total();
        st = st.advanced(tape.value(h_new).clone(), false);
    }
    Ok((st, macs))
}

/// Evict the oldest M/2 tokens of a full window into the compression
/// stream. Returns the advanced state, the shortened window, and the
/// matmul MACs spent compressing.
pub fn rolling_compress(
    params: &Params,
    cfg: &ModelConfig,
    state: &CompressorState,
    window: &[usize],
    qc: Option<&QueryContext>,
) -> Result<(CompressorState, Vec<usize>, u64)> {
    let m = cfg.max_positions;
    if window.len() != m {
        return Err(Error::Contract(format!(
            "rolling compression needs a full window of {m} tokens, got {}",
            window.len()
        )));
    }
    let half = m / 2;
    let (st, macs) = compress_tokens(params, cfg, state.clone(), &window[..half], qc)?;
    Ok((st, window[half..].to_vec(), macs))
}

struct GcaWeights<'a> {
    wq: &'a Tensor,
    wk: &'a Tensor,
    wv: &'a Tensor,
    wo: &'a Tensor,
    w1: &'a Tensor,
    b1: &'a Tensor,
    w2: &'a Tensor,
    b2: &'a Tensor,
    alpha: f64,
    beta: f64,
    /// h·wk and h·wv, rebuilt whenever the block stack changes.
    k: Vec<f64>,
    v: Vec<f64>,
}

struct LayerWeights<'a> {
    ln1g: &'a Tensor,
    ln1b: &'a Tensor,
    wq: &'a Tensor,
    wk: &'a Tensor,
    wv: &'a Tensor,
    wo: &'a Tensor,
    ln2g: &'a Tensor,
    ln2b: &'a Tensor,
    w1: &'a Tensor,
    b1: &'a Tensor,
    w2: &'a Tensor,
    b2: &'a Tensor,
    gca: Option<GcaWeights<'a>>,
}

pub struct DecodeEngine<'a> {
    params: &'a Params,
    cfg: &'a ModelConfig,
    regime: Regime,
    qc: Option<QueryContext>,
    state: CompressorState,
    h: Tensor,
    window: Vec<usize>,
    layers: Vec<LayerWeights<'a>>,
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    cur_logits: Vec<f64>,
    macs: BTreeMap<&'static str, u64>,
    evictions: usize,
    generated: usize,
}

impl<'a> DecodeEngine<'a> {
    pub fn new(
        params: &'a Params,
        cfg: &'a ModelConfig,
        prompt: &[usize],
        max_new: usize,
        query: Option<&[usize]>,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::Contract("decoding needs a nonempty prompt".into()));
        }
        if max_new == 0 {
            return Err(Error::Contract("generation budget must be positive".into()));
        }
        for &t in prompt {
            if t >= cfg.vocab_size {
                return Err(Error::Index(format!(
                    "prompt token id {t} out of range for vocab {}",
                    cfg.vocab_size
                )));
            }
        }
        let (n, p, m) = (prompt.len(), max_new, cfg.max_positions);
        let regime = if n + p <= m {
            Regime::Direct
        } else if p <= m {
            Regime::Compressed
        } else {
            Regime::Rolling
        };

        let mut macs: BTreeMap<&'static str, u64> = BTreeMap::new();
        let (state, window, qc) = if regime == Regime::Direct {
            (
                CompressorState {
                    h_current: Tensor::zeros(&[0, cfg.d_c]),
                    step: 0,
                    h_all: Vec::new(),
                    grad_enabled: Vec::new(),
                },
                prompt.to_vec(),
                None,
            )
        } else {
            validate_attached(params, cfg)?;
            let qc = match (query, params.contains("qd.gate_attn")) {
                (Some(q), true) => Some(QueryContext::new(params, q)?),
                _ => None,
            };
            let keep = n.min(m.saturating_sub(p).max(m / 2));
            let (state, cmacs) = compress_tokens(
                params,
                cfg,
                CompressorState::init(params)?,
                &prompt[..n - keep],
                qc.as_ref(),
            )?;
            *macs.entry("compress").or_default() += cmacs;
            (state, prompt[n - keep..].to_vec(), qc)
        };

        let inject = regime != Regime::Direct;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let pre = format!("base.layer{l}");
            let gca = if inject && l % cfg.gca_every == 0 {
                let g = format!("gca.{l}");
                Some(GcaWeights {
                    wq: params.get(&format!("{g}.attn.wq"))?,
                    wk: params.get(&format!("{g}.attn.wk"))?,
                    wv: params.get(&format!("{g}.attn.wv"))?,
                    wo: params.get(&format!("{g}.attn.wo"))?,
                    w1: params.get(&format!("{g}.mlp.w1"))?,
                    b1: params.get(&format!("{g}.mlp.b1"))?,
                    w2: params.get(&format!("{g}.mlp.w2"))?,
                    b2: params.get(&format!("{g}.mlp.b2"))?,
                    alpha: params.get(&format!("{g}.gate_attn"))?.data[0].tanh(),
                    beta: params.get(&format!("{g}.gate_mlp"))?.data[0].tanh(),
                    k: Vec::new(),
                    v: Vec::new(),
                })
            } else {
                None
            };
            layers.push(LayerWeights {
                ln1g: params.get(&format!("{pre}.ln1.gain"))?,
                ln1b: params.get(&format!("{pre}.ln1.bias"))?,
                wq: params.get(&format!("{pre}.attn.wq"))?,
                wk: params.get(&format!("{pre}.attn.wk"))?,
                wv: params.get(&format!("{pre}.attn.wv"))?,
                wo: params.get(&format!("{pre}.attn.wo"))?,
                ln2g: params.get(&format!("{pre}.ln2.gain"))?,
                ln2b: params.get(&format!("{pre}.ln2.bias"))?,
                w1: params.get(&format!("{pre}.mlp.w1"))?,
                b1: params.get(&format!("{pre}.mlp.b1"))?,
                w2: params.get(&format!("{pre}.mlp.w2"))?,
                b2: params.get(&format!("{pre}.mlp.b2"))?,
                gca,
            });
        }

        let mut engine = DecodeEngine {
            params,
            cfg,
            regime,
            qc,
            state,
            h: Tensor::zeros(&[0, cfg.d_c]),
            window,
            layers,
            k_cache: vec![Vec::new(); cfg.n_layers],
            v_cache: vec![Vec::new(); cfg.n_layers],
            cur_logits: Vec::new(),
            macs,
            evictions: 0,
            generated: 0,
        };
        engine.refresh_block_caches();
        engine.refill_window_rows()?;
        Ok(engine)
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn window_occupancy(&self) -> usize {
        self.window.len()
    }

    pub fn window_tokens(&self) -> &[usize] {
        &self.window
    }

    pub fn h_blocks(&self) -> usize {
        self.state.h_all.len()
    }

    /// The injected block stack the engine currently decodes against.
    pub fn context_blocks(&self) -> &Tensor {
        &self.h
    }

    /// Logits for the next token, i.e. of the last row in the window.
    pub fn current_logits(&self) -> &[f64] {
        &self.cur_logits
    }

    pub fn macs(&self) -> &BTreeMap<&'static str, u64> {
        &self.macs
    }

    pub fn macs_total(&self) -> u64 {
        self.macs.values().sum()
    }

    pub fn evictions(&self) -> usize {
        self.evictions
    }

    /// Greedy-pick the next token from the current logits, evict if the
    /// window is full, append the token, and return it with a trace event.
    pub fn generate_next(&mut self) -> Result<(usize, TraceEvent)> {
        let t = argmax_slice(&self.cur_logits);
        if self.window.len() == self.cfg.max_positions {
            if self.regime == Regime::Direct {
                return Err(Error::Contract(
                    "direct decoding overran the window; the budget check is broken".into(),
                ));
            }
            let (state, window, cmacs) = rolling_compress(
                self.params,
                self.cfg,
                &self.state,
                &self.window,
                self.qc.as_ref(),
            )?;
            self.state = state;
            self.window = window;
            *self.macs.entry("compress").or_default() += cmacs;
            self.evictions += 1;
            self.refresh_block_caches();
            self.refill_window_rows()?;
        }
        self.window.push(t);
        let logits = self.append_row(self.window.len() - 1, true)?;
        self.cur_logits = logits.expect("logits requested");
        self.generated += 1;
        assert!(
            self.window.len() <= self.cfg.max_positions,
            "window occupancy exceeded the positional limit"
        );
        Ok((
            t,
            TraceEvent {
                step: self.generated,
                regime: self.regime.as_str(),
                window_occupancy: self.window.len(),
                h_blocks: self.state.h_all.len(),
            },
        ))
    }

    /// Recompute h·wk / h·wv for every injection layer from the current
    /// block stack.
    fn refresh_block_caches(&mut self) {
        self.h = self.state.concat_h();
        let rows = self.h.shape[0];
        let (d_c, d) = (self.cfg.d_c, self.cfg.d_model);
        let mut gca_macs = 0u64;
        for lw in &mut self.layers {
            if let Some(g) = &mut lw.gca {
                g.k = matmul_raw(&self.h.data, &g.wk.data, rows, d_c, d);
                g.v = matmul_raw(&self.h.data, &g.wv.data, rows, d_c, d);
                gca_macs += 2 * (rows * d_c * d) as u64;
            }
        }
        *self.macs.entry("gca").or_default() += gca_macs;
    }

    /// Drop and recompute every cached row for the current window.
    fn refill_window_rows(&mut self) -> Result<()> {
        for c in &mut self.k_cache {
            c.clear();
        }
        for c in &mut self.v_cache {
            c.clear();
        }
        let last = self.window.len() - 1;
        for i in 0..=last {
            let logits = self.append_row(i, i == last)?;
            if let Some(l) = logits {
                self.cur_logits = l;
            }
        }
        Ok(())
    }

    /// Run window row `pos` (token already in `self.window`) through the
    /// stack, push its keys/values, and optionally project logits. The row
    /// arithmetic mirrors the batched forward pass operation for operation,
    /// so results agree bit-for-bit.
    fn append_row(&mut self, pos: usize, want_logits: bool) -> Result<Option<Vec<f64>>> {
        let cfg = self.cfg;
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = self.window[pos];
        let tok_emb = self.params.get("base.tok_emb")?;
        let pos_emb = self.params.get("base.pos_emb")?;
        let h_rows = self.h.shape[0];
        let mut base_macs = 0u64;
        let mut gca_macs = 0u64;

        let mut x: Vec<f64> = (0..d)
            .map(|j| tok_emb.data[t * d + j] + pos_emb.data[pos * d + j])
            .collect();

        for l in 0..self.layers.len() {
            if let Some(g) = &self.layers[l].gca {
                if h_rows > 0 {
                    let q = matmul_raw(&x, &g.wq.data, 1, d, d);
                    let mut ca = vec![0.0; d];
                    for head in 0..heads {
                        let lo = head * dh;
                        let mut s = vec![0.0; h_rows];
                        for p in 0..dh {
                            let qv = q[lo + p];
                            if qv == 0.0 {
                                continue;
                            }
                            for (r, sr) in s.iter_mut().enumerate() {
                                *sr += qv * g.k[r * d + lo + p];
                            }
                        }
                        for sr in s.iter_mut() {
                            *sr *= scale;
                        }
                        softmax_row(&mut s);
                        for (r, &pr) in s.iter().enumerate() {
                            if pr == 0.0 {
                                continue;
                            }
                            for j in 0..dh {
                                ca[lo + j] += pr * g.v[r * d + lo + j];
                            }
                        }
                    }
                    let cao = matmul_raw(&ca, &g.wo.data, 1, d, d);
                    for j in 0..d {
                        x[j] = cao[j] * g.alpha + x[j];
                    }
                    gca_macs += (2 * d * d + 2 * d * h_rows) as u64;
                }
                let ff = g.w1.shape[1];
                let mut mh = matmul_raw(&x, &g.w1.data, 1, d, ff);
                for (j, v) in mh.iter_mut().enumerate() {
                    *v += g.b1.data[j];
                    *v = gelu_val(*v);
                }
                let mut mo = matmul_raw(&mh, &g.w2.data, 1, ff, d);
                for (j, v) in mo.iter_mut().enumerate() {
                    *v += g.b2.data[j];
                }
                for j in 0..d {
                    x[j] = mo[j] * g.beta + x[j];
                }
                gca_macs += (2 * d * ff) as u64;
            }

            let lw = &self.layers[l];
            let mut xn = vec![0.0; d];
            layer_norm_row(&x, &lw.ln1g.data, &lw.ln1b.data, cfg.layer_norm_eps, &mut xn);
            let q = matmul_raw(&xn, &lw.wq.data, 1, d, d);
            let k = matmul_raw(&xn, &lw.wk.data, 1, d, d);
            let v = matmul_raw(&xn, &lw.wv.data, 1, d, d);
            self.k_cache[l].extend_from_slice(&k);
            self.v_cache[l].extend_from_slice(&v);
            let occ = pos + 1;
            let mut a = vec![0.0; d];
            for head in 0..heads {
                let lo = head * dh;
                let mut s = vec![0.0; occ];
                for p in 0..dh {
                    let qv = q[lo + p];
                    if qv == 0.0 {
                        continue;
                    }
                    let kc = &self.k_cache[l];
                    for (r, sr) in s.iter_mut().enumerate() {
                        *sr += qv * kc[r * d + lo + p];
                    }
                }
                for sr in s.iter_mut() {
                    *sr *= scale;
                }
                softmax_row(&mut s);
                let vc = &self.v_cache[l];
                for (r, &pr) in s.iter().enumerate() {
                    if pr == 0.0 {
                        continue;
                    }
                    for j in 0..dh {
                        a[lo + j] += pr * vc[r * d + lo + j];
                    }
                }
            }
            let ao = matmul_raw(&a, &lw.wo.data, 1, d, d);
            for j in 0..d {
                x[j] += ao[j];
            }
            base_macs += (4 * d * d + 2 * d * occ) as u64;

            let mut xn2 = vec![0.0; d];
            layer_norm_row(&x, &lw.ln2g.data, &lw.ln2b.data, cfg.layer_norm_eps, &mut xn2);
            let ff = lw.w1.shape[1];
            let mut mh = matmul_raw(&xn2, &lw.w1.data, 1, d, ff);
            for (j, v) in mh.iter_mut().enumerate() {
                *v += lw.b1.data[j];
                *v = gelu_val(*v);
            }
            let mut mo = matmul_raw(&mh, &lw.w2.data, 1, ff, d);
            for (j, v) in mo.iter_mut().enumerate() {
                *v += lw.b2.data[j];
            }
            for j in 0..d {
                x[j] += mo[j];
            }
            base_macs += (2 * d * ff) as u64;
        }

        let out = if want_logits {
            let gf = self.params.get("base.ln_f.gain")?;
            let bf = self.params.get("base.ln_f.bias")?;
            let head = self.params.get("base.head")?;
            let mut xf = vec![0.0; d];
            layer_norm_row(&x, &gf.data, &bf.data, cfg.layer_norm_eps, &mut xf);
            let v = head.shape[1];
            base_macs += (d * v) as u64;
            Some(matmul_raw(&xf, &head.data, 1, d, v))
        } else {
            None
        };
        *self.macs.entry("base").or_default() += base_macs;
        if gca_macs > 0 {
            *self.macs.entry("gca").or_default() += gca_macs;
        }
        Ok(out)
    }
}

/// Everything `infer` produces besides the tokens themselves.
#[derive(Debug)]
pub struct InferOutcome {
    pub tokens: Vec<usize>,
    pub trace: Vec<TraceEvent>,
    pub regime: Regime,
    pub evictions: usize,
    pub macs: BTreeMap<&'static str, u64>,
}

/// Greedy generation of `max_new` tokens under the window regimes.
pub fn infer(
    params: &Params,
    cfg: &ModelConfig,
    prompt: &[usize],
    max_new: usize,
    query: Option<&[usize]>,
) -> Result<InferOutcome> {
    let mut engine = DecodeEngine::new(params, cfg, prompt, max_new, query)?;
    let mut tokens = Vec::with_capacity(max_new);
    let mut trace = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let (t, ev) = engine.generate_next()?;
        tokens.push(t);
        trace.push(ev);
    }
    Ok(InferOutcome {
        tokens,
        trace,
        regime: engine.regime(),
        evictions: engine.evictions(),
        macs: engine.macs().clone(),
    })
}
