//! Optimization of the compressor and injector stacks: NLL over randomly
//! segmented long inputs, truncated backpropagation through time with
//! cached early blocks, and selective splicing of individual early steps
//! so gradient can reach arbitrarily old segments at constant memory.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::compressor::{
    compress_all, compress_step_on_tape, embed_context, Segmentation,
};
use crate::config::{ModelConfig, SegPolicy};
use crate::error::{Error, Result};
use crate::lm::{lm_loss, lm_loss_tail};
use crate::params::{Params, TrainMask};
use crate::qd::{qd_compress_step_on_tape, QueryContext};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Split `n` tokens into segments with lengths drawn uniformly from
/// [r/2, r]; every segment (including the last) respects the bounds, except
/// that a context no longer than `r` is kept as a single segment.
pub fn random_segmentation(n: usize, r: usize, rng: &mut Rng) -> Result<Segmentation> {
    if n == 0 {
        return Err(Error::Segmentation("cannot segment an empty context".into()));
    }
    if r < 2 {
        return Err(Error::Segmentation(format!(
            "maximum segment length must be at least 2, got {r}"
        )));
    }
    let lo = r / 2;
    let mut bounds = vec![0usize];
    let mut remaining = n;
    // Keep the running remainder at least `lo` so the final segment is never
    // shorter than the lower bound.
    while remaining > r {
        let hi = r.min(remaining - lo);
        let len = rng.index(lo, hi);
        bounds.push(bounds.last().unwrap() + len);
        remaining -= len;
    }
    bounds.push(bounds.last().unwrap() + remaining);
    Segmentation::from_bounds(bounds)
}

/// Segment a context of `n` tokens according to the configured policy.
pub fn segment_by_policy(cfg: &ModelConfig, n: usize, rng: &mut Rng) -> Result<Segmentation> {
    match cfg.seg_policy {
        SegPolicy::Fixed => Segmentation::fixed(n, cfg.seg_len_max),
        SegPolicy::UniformHalfToMax => random_segmentation(n, cfg.seg_len_max, rng),
    }
}

/// One training example: a compressed context, the direct-input window and
/// its teacher-forcing targets, and (for query-dependent training) the query.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Tokens that enter only through the compressor (may be empty).
    pub context: Vec<usize>,
    /// How the context is carved into compression steps; `None` iff empty.
    pub context_seg: Option<Segmentation>,
    /// Tokens fed directly to the decoder window.
    pub window_input: Vec<usize>,
    /// Target ids, aligned position-for-position with `window_input`.
    pub window_targets: Vec<usize>,
    /// Loss is taken over the last `loss_span` targets.
    pub loss_span: usize,
    /// Query tokens conditioning the compression, when training query-aware.
    pub query: Option<Vec<usize>>,
}

impl TrainBatch {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.window_input.len();
        if n == 0 {
            return Err(Error::Contract("batch has an empty window".into()));
        }
        if n > cfg.max_positions {
            return Err(Error::WindowExceeded {
                n,
                m: cfg.max_positions,
            });
        }
        if self.window_targets.len() != n {
            return Err(Error::Contract(format!(
                "window has {n} inputs but {} targets",
                self.window_targets.len()
            )));
        }
        if self.loss_span == 0 || self.loss_span > n {
            return Err(Error::Contract(format!(
                "loss span {} invalid for a window of {n}",
                self.loss_span
            )));
        }
        match (&self.context_seg, self.context.is_empty()) {
            (Some(seg), false) => seg.validate(self.context.len(), cfg.max_positions)?,
            (None, true) => {}
            _ => {
                return Err(Error::Contract(
                    "context and its segmentation disagree about emptiness".into(),
                ))
            }
        }
        if let Some(q) = &self.query {
            if q.is_empty() {
                return Err(Error::Contract("query present but empty".into()));
            }
        }
        Ok(())
    }

    /// Language-model batch: the last segment of a randomly segmented
    /// document is scored in full, with everything before it compressed.
    /// `bos` seeds the window when the document has no preceding token.
    pub fn from_doc(doc: &[usize], cfg: &ModelConfig, bos: usize, rng: &mut Rng) -> Result<Self> {
        if doc.is_empty() {
            return Err(Error::Contract("cannot build a batch from an empty document".into()));
        }
        let seg = segment_by_policy(cfg, doc.len(), rng)?;
        let s_total = seg.n_segments();
        let cur = seg.segment(s_total - 1);
        let k = cur.start;
        let (window_input, context, context_seg) = if k == 0 {
            let mut input = Vec::with_capacity(doc.len());
            input.push(bos);
            input.extend_from_slice(&doc[..doc.len() - 1]);
            (input, Vec::new(), None)
        } else {
            let bounds: Vec<usize> = (0..s_total).map(|i| seg.segment(i).start).collect();
            let ctx_seg = Segmentation::from_bounds(bounds)?;
            (doc[k - 1..doc.len() - 1].to_vec(), doc[..k].to_vec(), Some(ctx_seg))
        };
        let window_targets = doc[k..].to_vec();
        let loss_span = window_targets.len();
        let batch = TrainBatch {
            context,
            context_seg,
            window_input,
            window_targets,
            loss_span,
            query: None,
        };
        batch.validate(cfg)?;
        Ok(batch)
    }

    /// Question-answering batch: the context is compressed, the window holds
    /// the query followed by the answer, and only answer tokens are scored.
    pub fn from_query_answer(
        context: &[usize],
        query: &[usize],
        answer: &[usize],
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if query.is_empty() || answer.is_empty() {
            return Err(Error::Contract("query and answer must be nonempty".into()));
        }
        let mut w = query.to_vec();
        w.extend_from_slice(answer);
        let window_input = w[..w.len() - 1].to_vec();
        let window_targets = w[1..].to_vec();
        let context_seg = if context.is_empty() {
            None
        } else {
            Some(segment_by_policy(cfg, context.len(), rng)?)
        };
        let batch = TrainBatch {
            context: context.to_vec(),
            context_seg,
            window_input,
            window_targets,
            loss_span: answer.len(),
            query: Some(query.to_vec()),
        };
        batch.validate(cfg)?;
        Ok(batch)
    }

    pub fn n_segments(&self) -> usize {
        self.context_seg.as_ref().map_or(0, |s| s.n_segments())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpttMode {
    Truncated,
    Selective,
}

/// Which compression steps carry gradient: the live window of the last
/// `t_window` steps, plus (in selective mode) individually spliced earlier
/// steps whose recurrent input is held constant.
#[derive(Debug, Clone)]
pub struct BpttPlan {
    pub mode: BpttMode,
    pub t_window: usize,
    /// Earlier step indices to splice, each `< S - t_window`, sorted.
    pub selected: Vec<usize>,
}

impl BpttPlan {
    pub fn truncated(t_window: usize) -> Self {
        BpttPlan {
            mode: BpttMode::Truncated,
            t_window,
            selected: Vec::new(),
        }
    }

    /// Pick `n_select` distinct pre-window steps at random; asking for more
    /// than exist clamps to all of them and reports a warning.
    pub fn selective(
        s_total: usize,
        t_window: usize,
        n_select: usize,
        rng: &mut Rng,
    ) -> (Self, Option<String>) {
        let early = s_total.saturating_sub(t_window);
        let take = n_select.min(early);
        let warning = (n_select > early).then(|| {
            format!(
                "requested {n_select} spliced steps but only {early} precede the \
                 gradient window; clamping to {early}"
            )
        });
        let mut idx: Vec<usize> = (0..early).collect();
        rng.shuffle(&mut idx);
        let mut selected: Vec<usize> = idx.into_iter().take(take).collect();
        selected.sort_unstable();
        (
            BpttPlan {
                mode: BpttMode::Selective,
                t_window,
                selected,
            },
            warning,
        )
    }
}

/// Loss node plus a few facts about how the graph was built.
#[derive(Debug, Clone, Copy)]
pub struct BuiltLoss {
    pub loss: Var,
    pub n_segments: usize,
    pub n_live: usize,
    pub n_spliced: usize,
}

fn rows_of(t: &Tensor, range: std::ops::Range<usize>) -> Tensor {
    let (_, d) = t.rows_cols();
    Tensor::new(
        vec![range.len(), d],
        t.data[range.start * d..range.end * d].to_vec(),
    )
    .unwrap()
}

/// Build the mean NLL of the batch's target span on `tape`, compressing the
/// context according to `plan`: steps before the live window enter as cached
/// constants, the live window is chained on the tape, and spliced steps are
/// recomputed from a constant recurrent input so gradient reaches their
/// parameters only through the block injected into the window.
pub fn build_nll(
    tape: &mut Tape,
    params: &Params,
    mask: &TrainMask,
    cfg: &ModelConfig,
    batch: &TrainBatch,
    plan: &BpttPlan,
) -> Result<BuiltLoss> {
    batch.validate(cfg)?;
    let inject = params.contains("gca.0.gate_attn");
    let s = batch.n_segments();
    if s > 0 && !inject {
        return Err(Error::Contract(
            "batch carries compressed context but no injector is attached".into(),
        ));
    }
    if plan.mode == BpttMode::Truncated && !plan.selected.is_empty() {
        return Err(Error::Contract("truncated plan must not select splice steps".into()));
    }
    let live_from = s.saturating_sub(plan.t_window);
    if plan.selected.iter().any(|&j| j >= live_from) {
        return Err(Error::Contract(format!(
            "spliced steps must precede the live window (first live step {live_from})"
        )));
    }

    let qc = match (&batch.query, params.contains("qd.gate_attn")) {
        (Some(q), true) => Some(QueryContext::new(params, q)?),
        _ => None,
    };

    let injection = if inject {
        let mut blocks: Vec<Var> = Vec::with_capacity(s);
        if s > 0 {
            let seg = batch.context_seg.as_ref().unwrap();
            let e_c = embed_context(params, &batch.context)?;
            let state = compress_all(params, cfg, &e_c, seg, qc.as_ref())?;

            for h in &state.h_all[..live_from] {
                blocks.push(tape.constant(h.clone()));
            }
            let mut h_prev = if live_from == 0 {
                params.bind(tape, "comp.h0", mask)?
            } else {
                tape.constant(state.h_all[live_from - 1].clone())
            };
            for i in live_from..s {
                let x = tape.constant(rows_of(&e_c, seg.segment(i)));
                h_prev = match &qc {
                    Some(q) => qd_compress_step_on_tape(tape, params, mask, cfg, h_prev, x, q)?,
                    None => compress_step_on_tape(tape, params, mask, cfg, h_prev, x)?,
                };
                blocks.push(h_prev);
            }
            for &j in &plan.selected {
                let h_in = if j == 0 {
                    params.get("comp.h0")?.clone()
                } else {
                    state.h_all[j - 1].clone()
                };
                let h_in = tape.constant(h_in);
                let x = tape.constant(rows_of(&e_c, seg.segment(j)));
                blocks[j] = match &qc {
                    Some(q) => qd_compress_step_on_tape(tape, params, mask, cfg, h_in, x, q)?,
                    None => compress_step_on_tape(tape, params, mask, cfg, h_in, x)?,
                };
            }
        }
        let h_cat = if blocks.is_empty() {
            tape.constant(Tensor::new(vec![0, cfg.d_c], Vec::new())?)
        } else {
            tape.concat(&blocks, 0)?
        };
        Some(h_cat)
    } else {
        None
    };

    let loss = lm_loss_tail(
        tape,
        params,
        mask,
        cfg,
        &batch.window_input,
        &batch.window_targets,
        batch.loss_span,
        injection,
    )?;
    Ok(BuiltLoss {
        loss,
        n_segments: s,
        n_live: s - live_from,
        n_spliced: plan.selected.len(),
    })
}

/// Loss value, parameter gradients, and any warnings raised while planning.
#[derive(Debug)]
pub struct GradOutcome {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub warnings: Vec<String>,
}

fn run_backward(
    params: &Params,
    mask: &TrainMask,
    cfg: &ModelConfig,
    batch: &TrainBatch,
    plan: &BpttPlan,
    warnings: Vec<String>,
) -> Result<GradOutcome> {
    let mut tape = Tape::new();
    let built = build_nll(&mut tape, params, mask, cfg, batch, plan)?;
    tape.backward(built.loss)?;
    Ok(GradOutcome {
        loss: tape.value(built.loss).data[0],
        grads: tape.param_grads(),
        warnings,
    })
}

/// Gradients with the recurrence unrolled only over the last `t` steps;
/// older blocks are compressed once and enter as constants.
pub fn backward_truncated(
    params: &Params,
    mask: &TrainMask,
    cfg: &ModelConfig,
    batch: &TrainBatch,
    t: usize,
) -> Result<GradOutcome> {
    run_backward(params, mask, cfg, batch, &BpttPlan::truncated(t), Vec::new())
}

/// Truncated gradients plus `n_select` randomly chosen pre-window steps,
/// each recomputed from a constant recurrent input and spliced into the
/// injected stack. The loss value is identical to the truncated build;
/// only gradients change.
pub fn backward_selective(
    params: &Params,
    mask: &TrainMask,
    cfg: &ModelConfig,
    batch: &TrainBatch,
    t: usize,
    n_select: usize,
    rng: &mut Rng,
) -> Result<GradOutcome> {
    let (plan, warning) = BpttPlan::selective(batch.n_segments(), t, n_select, rng);
    run_backward(params, mask, cfg, batch, &plan, warning.into_iter().collect())
}

/// One metrics-log record, serialized as a JSON line per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub seed: u64,
}

fn log_record(log: &mut Option<&mut dyn Write>, rec: &StepRecord) -> Result<()> {
    if let Some(w) = log {
        serde_json::to_writer(&mut **w, rec)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Supervised pretraining of the decoder windows: random slices of corpus
/// documents, full cross-entropy, every parameter trainable.
pub fn pretrain_base(
    params: &mut Params,
    cfg: &ModelConfig,
    corpus: &[Vec<usize>],
    steps: usize,
    rng: &mut Rng,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepRecord>> {
    if corpus.is_empty() || corpus.iter().any(|d| d.len() < 2) {
        return Err(Error::Contract(
            "pretraining corpus must hold documents of at least two tokens".into(),
        ));
    }
    let mask = TrainMask::All;
    let mut opt = crate::params::Adam::new(cfg);
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let seed = rng.next_u64();
        let mut srng = Rng::new(seed);
        let doc = &corpus[srng.index(0, corpus.len() - 1)];
        let w = cfg.max_positions.min(doc.len() - 1);
        let start = srng.index(0, doc.len() - 1 - w);
        let inputs = &doc[start..start + w];
        let targets = &doc[start + 1..start + 1 + w];

        let mut tape = Tape::new();
        let loss = lm_loss(&mut tape, params, &mask, cfg, inputs, targets, None)?;
        tape.backward(loss)
            .map_err(|e| Error::Numeric(format!("step {step} (batch seed {seed}): {e}")))?;
        let loss_val = tape.value(loss).data[0];
        let grads = tape.param_grads();
        let (lr, grad_norm) = opt.step(params, &grads)?;
        let rec = StepRecord {
            step,
            loss: loss_val,
            lr,
            grad_norm,
            seed,
        };
        log_record(&mut log, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Train the compressor/injector (and, when present, the query-aware
/// transform) with the base frozen. `sampler` draws one batch per step from
/// the per-step RNG so every step is reproducible from its logged seed.
pub fn train_compressor(
    params: &mut Params,
    cfg: &ModelConfig,
    sampler: &mut dyn FnMut(&mut Rng) -> Result<TrainBatch>,
    mode: BpttMode,
    steps: usize,
    rng: &mut Rng,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepRecord>> {
    let mask = TrainMask::freeze_base();
    let mut opt = crate::params::Adam::new(cfg);
    let mut records = Vec::with_capacity(steps);
    let mut warned = false;
    for step in 0..steps {
        let seed = rng.next_u64();
        let mut srng = Rng::new(seed);
        let batch = sampler(&mut srng)?;
        let plan = match mode {
            BpttMode::Truncated => BpttPlan::truncated(cfg.bptt_segments),
            BpttMode::Selective => {
                let (plan, warning) = BpttPlan::selective(
                    batch.n_segments(),
                    cfg.bptt_segments,
                    cfg.n_select,
                    &mut srng,
                );
                if let (Some(w), false) = (warning, warned) {
                    eprintln!("warning: {w}");
                    warned = true;
                }
                plan
            }
        };
        let mut tape = Tape::new();
        let built = build_nll(&mut tape, params, &mask, cfg, &batch, &plan)?;
        tape.backward(built.loss)
            .map_err(|e| Error::Numeric(format!("step {step} (batch seed {seed}): {e}")))?;
        let loss_val = tape.value(built.loss).data[0];
        let grads = tape.param_grads();
        let (lr, grad_norm) = opt.step(params, &grads)?;
        let rec = StepRecord {
            step,
            loss: loss_val,
            lr,
            grad_norm,
            seed,
        };
        log_record(&mut log, &rec)?;
        records.push(rec);
    }
    Ok(records)
}
