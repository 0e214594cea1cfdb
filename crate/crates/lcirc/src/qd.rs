//! Query-dependent compression.
//!
//! Before each recurrence step, the running feature block cross-attends
//! over the embedded user query through a gated block of the same form as
//! the injector's. At zero gates the transform is an exact identity, so a
//! freshly extended model reproduces the query-agnostic one bit for bit;
//! training moves the gates and the compressor starts keeping what the
//! query asks for.

use crate::compressor::{compress_step_on_tape, CompressorState};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::injector::{gca_forward, init_gca_block};
use crate::params::{Params, TrainMask};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Frozen embeddings of the user query, shared by every recurrence step
/// of one stream.
#[derive(Debug, Clone)]
pub struct QueryContext {
    pub e_query: Tensor,
}

impl QueryContext {
    /// Embed query tokens with the frozen base table (no positions).
    pub fn new(params: &Params, query_ids: &[usize]) -> Result<Self> {
        if query_ids.is_empty() {
            return Err(Error::Contract(
                "query-dependent compression requires a nonempty query".into(),
            ));
        }
        Ok(QueryContext {
            e_query: crate::compressor::embed_context(params, query_ids)?,
        })
    }
}

/// The query block under the `qd.` prefix: queries are d_c-wide recurrent
/// features, keys/values come from d-wide query embeddings.
pub fn init_qd_params(cfg: &ModelConfig, rng: &mut Rng) -> Params {
    let mut p = Params::new();
    init_gca_block(&mut p, rng, "qd", cfg.d_c, cfg.d_model, 4 * cfg.d_c);
    p
}

/// `ḧ = GCA(h_prev, e_query)`: the gated transform applied to the
/// recurrent block before a compression step.
pub fn qd_transform(
    tape: &mut Tape,
    params: &Params,
    mask: &TrainMask,
    cfg: &ModelConfig,
    h_prev: Var,
    qc: &QueryContext,
) -> Result<Var> {
    if qc.e_query.shape[0] == 0 {
        return Err(Error::Contract(
            "query-dependent transform over an empty query".into(),
        ));
    }
    let outer_tag = tape.current_tag();
    tape.set_tag("compress");
    let eq = tape.constant(qc.e_query.clone());
    let out = gca_forward(tape, params, mask, "qd", h_prev, Some(eq), cfg.n_heads)?;
    tape.set_tag(outer_tag);
    Ok(out)
}

/// One query-dependent recurrence step on an existing tape.
pub fn qd_compress_step_on_tape(
    tape: &mut Tape,
    params: &Params,
    mask: &TrainMask,
    cfg: &ModelConfig,
    h_prev: Var,
    seg: Var,
    qc: &QueryContext,
) -> Result<Var> {
    let transformed = qd_transform(tape, params, mask, cfg, h_prev, qc)?;
    compress_step_on_tape(tape, params, mask, cfg, transformed, seg)
}

/// One query-dependent recurrence step at the value level.
pub fn qd_compress_step(
    params: &Params,
    cfg: &ModelConfig,
    state: &CompressorState,
    seg_emb: &Tensor,
    qc: &QueryContext,
) -> Result<CompressorState> {
    let mut tape = Tape::new();
    let h_prev = tape.constant(state.h_current.clone());
    let x = tape.constant(seg_emb.clone());
    let h = qd_compress_step_on_tape(&mut tape, params, &TrainMask::None, cfg, h_prev, x, qc)?;
    Ok(state.advanced(tape.value(h).clone(), true))
}
