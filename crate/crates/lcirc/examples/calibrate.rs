//! Scratch harness for tuning the long-context training recipe; not part
//! of the library surface.

use std::time::Instant;

use lcirc::compressor::{compress_all, embed_context, init_compressor_params, Segmentation};
use lcirc::config::ModelConfig;
use lcirc::data::{gen_lm_corpus, CorpusSpec, LmDoc, BOS};
use lcirc::eval::{eval_ppl, paired_deltas};
use lcirc::injector::init_injector_params;
use lcirc::lm::{init_base_params, lm_forward};
use lcirc::params::{Params, TrainMask};
use lcirc::rng::Rng;
use lcirc::tape::Tape;
use lcirc::train::{pretrain_base, train_compressor, BpttMode, TrainBatch};

fn tail_mean(xs: &[f64], n: usize) -> f64 {
    let t = &xs[xs.len().saturating_sub(n)..];
    t.iter().sum::<f64>() / t.len().max(1) as f64
}

/// Mean NLL over tail-emission target bytes vs the other tail targets,
/// scoring the last `target_len` predictions with history `n`.
fn split_tail_nll(
    params: &Params,
    cfg: &ModelConfig,
    doc: &LmDoc,
    n: usize,
    target_len: usize,
) -> (f64, f64) {
    let toks = &doc.tokens;
    let kept = &toks[toks.len() - n.min(toks.len())..];
    let w = cfg.max_positions.min(kept.len());
    let (ctx, window) = kept.split_at(kept.len() - w);
    let mut tape = Tape::new();
    let injection = if params.contains("gca.0.gate_attn") {
        let h = if ctx.is_empty() {
            lcirc::tensor::Tensor::zeros(&[0, cfg.d_c])
        } else {
            let e = embed_context(params, ctx).unwrap();
            let seg = Segmentation::fixed(ctx.len(), cfg.seg_len_max).unwrap();
            compress_all(params, cfg, &e, &seg, None).unwrap().concat_h()
        };
        Some(tape.constant(h))
    } else {
        None
    };
    let inputs = &window[..w - 1];
    let targets = &window[1..];
    let logits = lm_forward(&mut tape, params, &TrainMask::None, cfg, inputs, injection).unwrap();
    let lt = tape.value(logits);
    let (rows, v) = (lt.shape[0], lt.shape[1]);
    let em_start = *doc.emission_starts.last().unwrap();
    let em_end = em_start + 33;
    let (mut me, mut ne, mut mo, mut no) = (0.0, 0usize, 0.0, 0usize);
    for i in rows - target_len..rows {
        let row = &lt.data[i * v..(i + 1) * v];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
        let nll = lse - row[targets[i]];
        // target position in document coordinates
        let pos = toks.len() - rows + i + 1;
        if pos >= em_start && pos < em_end {
            me += nll;
            ne += 1;
        } else {
            mo += nll;
            no += 1;
        }
    }
    (me / ne.max(1) as f64, mo / no.max(1) as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pre_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let comp_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let n_eval: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);

    let mut cfg = ModelConfig::default();
    cfg.d_c = 64;
    cfg.k_slots = 8;
    cfg.perceiver_blocks = 1;
    cfg.bptt_segments = 3;
    cfg.lr = 3e-3;
    cfg.warmup_steps = 100;
    let m = cfg.max_positions;

    let train_spec = CorpusSpec {
        n_docs: 384,
        len_lo: 640,
        len_hi: 2048,
        motif_len: 32,
        body_emissions: 5,
        keep_out: m + 40,
    };
    let eval_spec = CorpusSpec {
        n_docs: n_eval,
        len_lo: 8 * m,
        len_hi: 8 * m,
        ..train_spec.clone()
    };

    let t0 = Instant::now();
    let train_docs = gen_lm_corpus(&mut Rng::new(7), &train_spec).unwrap();
    let eval_docs = gen_lm_corpus(&mut Rng::new(8), &eval_spec).unwrap();
    let tok_train: Vec<Vec<usize>> = train_docs.iter().map(|d| d.tokens.clone()).collect();
    let tok_eval: Vec<Vec<usize>> = eval_docs.iter().map(|d| d.tokens.clone()).collect();
    println!(
        "corpora: {} train docs ({}..{} tokens), {} eval docs ({:.1?})",
        tok_train.len(),
        train_spec.len_lo,
        train_spec.len_hi,
        tok_eval.len(),
        t0.elapsed()
    );

    let cache = std::path::PathBuf::from(format!("/tmp/cal_base_{pre_steps}.ckpt"));
    let mut params = match lcirc::checkpoint::load(&cache) {
        Ok(ck) if ck.config == cfg => {
            println!("pretrain: reusing {}", cache.display());
            ck.params
        }
        _ => {
            let mut p = init_base_params(&cfg, &mut Rng::new(11));
            let tp = Instant::now();
            let recs =
                pretrain_base(&mut p, &cfg, &tok_train, pre_steps, &mut Rng::new(9), None)
                    .unwrap();
            let losses: Vec<f64> = recs.iter().map(|r| r.loss).collect();
            println!(
                "pretrain {pre_steps} steps in {:.1?}: loss {:.4} -> tail50 {:.4}",
                tp.elapsed(),
                losses.first().copied().unwrap_or(f64::NAN),
                tail_mean(&losses, 50)
            );
            lcirc::checkpoint::save(&cache, &cfg, &p).unwrap();
            p
        }
    };

    let (rep0, _) = eval_ppl(&params, &cfg, &tok_eval, &[m], m / 2, 99).unwrap();
    println!("base-only tail ppl at N={m}: {:.4}", rep0.rows[0].value);

    params
        .absorb(init_compressor_params(&cfg, &mut Rng::new(12)))
        .unwrap();
    params
        .absorb(init_injector_params(&cfg, &mut Rng::new(13)))
        .unwrap();

    let mut comp_cfg = cfg.clone();
    comp_cfg.lr = 1.5e-2;
    comp_cfg.warmup_steps = 100;

    let mut trng = Rng::new(10);
    let tc = Instant::now();
    let chunk = 500;
    let mut done = 0usize;
    while done < comp_steps {
        let n = chunk.min(comp_steps - done);
        let mut sampler = |r: &mut Rng| {
            let doc = &tok_train[r.index(0, tok_train.len() - 1)];
            TrainBatch::from_doc(doc, &comp_cfg, BOS, r)
        };
        let recs = train_compressor(
            &mut params,
            &comp_cfg,
            &mut sampler,
            BpttMode::Selective,
            n,
            &mut trng,
            None,
        )
        .unwrap();
        done += n;
        comp_cfg.warmup_steps = 0;
        let losses: Vec<f64> = recs.iter().map(|r| r.loss).collect();
        let gnorms: Vec<f64> = recs.iter().map(|r| r.grad_norm).collect();
        print!(
            "comp {done:>5}: loss {:.4} gnorm {:.3} | gates",
            tail_mean(&losses, 50),
            tail_mean(&gnorms, 50)
        );
        for l in 0..cfg.n_layers {
            let a = params
                .get(&format!("gca.{l}.gate_attn"))
                .unwrap()
                .data[0]
                .tanh();
            let b = params.get(&format!("gca.{l}.gate_mlp")).unwrap().data[0].tanh();
            print!(" {l}:{a:+.3}/{b:+.3}");
        }
        println!(" ({:.1?})", tc.elapsed());
    }

    let te = Instant::now();
    let grid = [m, 2 * m, 8 * m];
    let (rep, detail) = eval_ppl(&params, &cfg, &tok_eval, &grid, m / 2, 99).unwrap();
    for row in &rep.rows {
        println!("N={:>5}: tail ppl {:.4}", row.n, row.value);
    }
    let deltas = paired_deltas(&detail, m, 8 * m).unwrap();
    let mean_d = deltas.iter().sum::<f64>() / deltas.len().max(1) as f64;
    let p_m = rep.rows[0].value;
    let p_8m = rep.rows[2].value;
    println!(
        "paired mean delta nll (8M vs M): {mean_d:+.4}; relative ppl gap {:.2}% (eval {:.1?}, total {:.1?})",
        100.0 * (p_m - p_8m) / p_m,
        te.elapsed(),
        t0.elapsed()
    );

    for &n in &[m, 8 * m] {
        let (mut se, mut so) = (0.0, 0.0);
        for d in &eval_docs {
            let (e, o) = split_tail_nll(&params, &cfg, d, n, m / 2);
            se += e;
            so += o;
        }
        let k = eval_docs.len() as f64;
        println!(
            "N={n:>5}: emission-byte nll {:.4}, other tail nll {:.4}",
            se / k,
            so / k
        );
    }
}
