//! Command-line harness: data generation, training, evaluation, decoding,
//! and cost profiling for the compressed-context language model.
//!
//! Exit codes: 0 success, 2 configuration error (bad config file, bad
//! flags, incompatible data), 3 numeric failure during training or
//! evaluation, 1 anything else.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lcirc::checkpoint;
use lcirc::config::ModelConfig;
use lcirc::data::{
    decode_to_string, encode_str, gen_lm_corpus, gen_needle_qa, CorpusSpec, LmDoc, QASample,
    QaSpec, BOS,
};
use lcirc::eval::{eval_ppl, eval_qa, QaMode};
use lcirc::flops::{cost_report, CostModel};
use lcirc::infer::infer;
use lcirc::injector::init_injector_params;
use lcirc::lm::init_base_params;
use lcirc::params::Params;
use lcirc::qd::init_qd_params;
use lcirc::rng::Rng;
use lcirc::train::{pretrain_base, train_compressor, BpttMode, TrainBatch};
use lcirc::Error;

#[derive(Parser)]
#[command(name = "lcirc", version, about = "compressed-context language model harness")]
struct Cli {
    /// JSON file mirroring the model configuration field-for-field;
    /// unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to start from or evaluate.
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Output path (checkpoint, report, or dataset depending on command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the base model alone (everything trainable) on LM documents.
    PretrainBase(TrainArgs),
    /// Attach compressor + injection blocks and train them on a frozen base.
    TrainLcirc(TrainLcircArgs),
    /// Attach the query-dependent transform and fine-tune on QA data.
    TrainQd(TrainLcircArgs),
    /// Tail perplexity across a history grid.
    EvalPpl(EvalPplArgs),
    /// Needle-lookup exact match.
    EvalQa(EvalQaArgs),
    /// Greedy generation with automatic regime dispatch.
    Generate(GenerateArgs),
    /// Analytic cost table.
    Flops(FlopsArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Lm,
    Qa,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    len_lo: Option<usize>,
    #[arg(long)]
    len_hi: Option<usize>,
    #[arg(long)]
    motif_len: Option<usize>,
    #[arg(long)]
    body_emissions: Option<usize>,
    #[arg(long)]
    keep_out: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    n_decoys: Option<usize>,
    /// Restrict needle starts to [offset-lo, offset-hi].
    #[arg(long)]
    offset_lo: Option<usize>,
    #[arg(long)]
    offset_hi: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// LM dataset written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Append per-step records as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskKind {
    Lm,
    Qa,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BpttArg {
    Truncated,
    Selective,
}

#[derive(Args)]
struct TrainLcircArgs {
    #[arg(long)]
    data: PathBuf,
    /// Whether `data` holds LM documents or QA samples.
    #[arg(long, value_enum, default_value = "lm")]
    task: TaskKind,
    #[arg(long, value_enum, default_value = "selective")]
    mode: BpttArg,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalPplArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated history lengths, e.g. 256,512,2048.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    target_len: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum QaModeArg {
    Base,
    Lcirc,
    Qd,
}

#[derive(Args)]
struct EvalQaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "lcirc")]
    mode: QaModeArg,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    /// Query text steering compression (needs the query-dependent stack).
    #[arg(long)]
    query: Option<String>,
    /// Write one JSON trace event per generated token.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    #[value(name = "llama2-7b")]
    Llama27b,
    Desk,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, value_enum, default_value = "llama2-7b")]
    preset: PresetArg,
    /// Comma-separated context lengths.
    #[arg(long, default_value = "4096,8192,65536,131072")]
    n: String,
}

#[derive(Serialize, Deserialize)]
struct LmFile {
    spec: CorpusSpec,
    docs: Vec<LmDoc>,
}

#[derive(Serialize, Deserialize)]
struct QaFile {
    spec: QaSpec,
    samples: Vec<QASample>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn read_config(cli: &Cli) -> Result<ModelConfig, Error> {
    let cfg = match (&cli.config, &cli.ckpt) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<ModelConfig>(&text)
                .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?
        }
        (None, Some(ckpt)) => checkpoint::load(ckpt)?.config,
        (None, None) => ModelConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_ckpt(cli: &Cli) -> Result<(ModelConfig, Params), Error> {
    let path = cli
        .ckpt
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --ckpt".into()))?;
    let ck = checkpoint::load(path)?;
    ck.config.validate()?;
    if let Some(cfg_path) = &cli.config {
        let text = fs::read_to_string(cfg_path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", cfg_path.display())))?;
        let cfg: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", cfg_path.display())))?;
        if cfg != ck.config {
            return Err(Error::Config(
                "--config disagrees with the checkpoint's embedded config".into(),
            ));
        }
    }
    Ok((ck.config, ck.params))
}

fn out_path(cli: &Cli) -> Result<&Path, Error> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out".into()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad data file {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string(value)?;
    fs::write(path, text)?;
    Ok(())
}

fn open_log(path: &Option<PathBuf>) -> Result<Option<fs::File>, Error> {
    match path {
        Some(p) => Ok(Some(fs::File::create(p)?)),
        None => Ok(None),
    }
}

fn parse_grid(s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad grid entry `{t}`")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.cmd {
        Cmd::GenData(a) => gen_data(&cli, a),
        Cmd::PretrainBase(a) => cmd_pretrain(&cli, a),
        Cmd::TrainLcirc(a) => cmd_train_lcirc(&cli, a, false),
        Cmd::TrainQd(a) => cmd_train_lcirc(&cli, a, true),
        Cmd::EvalPpl(a) => cmd_eval_ppl(&cli, a),
        Cmd::EvalQa(a) => cmd_eval_qa(&cli, a),
        Cmd::Generate(a) => cmd_generate(&cli, a),
        Cmd::Flops(a) => cmd_flops(&cli, a),
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<(), Error> {
    let cfg = read_config(cli)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let out = out_path(cli)?;
    let mut rng = Rng::new(seed).derive("gen-data");
    match a.kind {
        DataKind::Lm => {
            let mut spec = CorpusSpec::default();
            spec.keep_out = cfg.max_positions + 40;
            if let Some(v) = a.n_docs {
                spec.n_docs = v;
            }
            if let Some(v) = a.len_lo {
                spec.len_lo = v;
            }
            if let Some(v) = a.len_hi {
                spec.len_hi = v;
            }
            if let Some(v) = a.motif_len {
                spec.motif_len = v;
            }
            if let Some(v) = a.body_emissions {
                spec.body_emissions = v;
            }
            if let Some(v) = a.keep_out {
                spec.keep_out = v;
            }
            let docs = gen_lm_corpus(&mut rng, &spec)?;
            write_json(out, &LmFile { spec, docs })?;
        }
        DataKind::Qa => {
            let mut spec = QaSpec::default();
            if let Some(v) = a.n_samples {
                spec.n_samples = v;
            }
            if let Some(v) = a.context_len {
                spec.context_len = v;
            }
            if let Some(v) = a.n_decoys {
                spec.n_decoys = v;
            }
            spec.offset_range = match (a.offset_lo, a.offset_hi) {
                (None, None) => None,
                (lo, hi) => Some((lo.unwrap_or(0), hi.unwrap_or(spec.context_len - 16))),
            };
            let samples = gen_needle_qa(&mut rng, &spec)?;
            write_json(out, &QaFile { spec, samples })?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_pretrain(cli: &Cli, a: &TrainArgs) -> Result<(), Error> {
    let cfg = read_config(cli)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let out = out_path(cli)?;
    let lm: LmFile = read_json(&a.data)?;
    let corpus: Vec<Vec<usize>> = lm.docs.into_iter().map(|d| d.tokens).collect();

    let root = Rng::new(seed);
    let mut params = match &cli.ckpt {
        Some(p) => checkpoint::load(p)?.params,
        None => init_base_params(&cfg, &mut root.derive("init-base")),
    };
    let mut log = open_log(&a.log)?;
    let recs = pretrain_base(
        &mut params,
        &cfg,
        &corpus,
        a.steps,
        &mut root.derive("pretrain"),
        log.as_mut().map(|f| f as &mut dyn Write),
    )?;
    checkpoint::save(out, &cfg, &params)?;
    if let (Some(first), Some(last)) = (recs.first(), recs.last()) {
        println!(
            "pretrained {} steps: loss {:.4} -> {:.4}, saved {}",
            a.steps,
            first.loss,
            last.loss,
            out.display()
        );
    }
    Ok(())
}

fn cmd_train_lcirc(cli: &Cli, a: &TrainLcircArgs, qd: bool) -> Result<(), Error> {
    let (cfg, mut params) = load_ckpt(cli)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let out = out_path(cli)?;
    let root = Rng::new(seed);

    if !params.contains("comp.h0") {
        params.absorb(lcirc::compressor::init_compressor_params(
            &cfg,
            &mut root.derive("init-comp"),
        ))?;
    }
    if !params.contains("gca.0.gate_attn") {
        params.absorb(init_injector_params(&cfg, &mut root.derive("init-gca")))?;
    }
    if qd && !params.contains("qd.gate_attn") {
        params.absorb(init_qd_params(&cfg, &mut root.derive("init-qd")))?;
    }
    if qd && a.task != TaskKind::Qa {
        return Err(Error::Config(
            "query-dependent training needs QA data (--task qa)".into(),
        ));
    }

    let mode = match a.mode {
        BpttArg::Truncated => BpttMode::Truncated,
        BpttArg::Selective => BpttMode::Selective,
    };
    let mut log = open_log(&a.log)?;
    let bcfg = cfg.clone();
    let recs = match a.task {
        TaskKind::Lm => {
            let lm: LmFile = read_json(&a.data)?;
            let docs: Vec<Vec<usize>> = lm.docs.into_iter().map(|d| d.tokens).collect();
            if docs.is_empty() {
                return Err(Error::Config("dataset holds no documents".into()));
            }
            let mut sampler = move |r: &mut Rng| {
                let d = &docs[r.index(0, docs.len() - 1)];
                TrainBatch::from_doc(d, &bcfg, BOS, r)
            };
            train_compressor(
                &mut params,
                &cfg,
                &mut sampler,
                mode,
                a.steps,
                &mut root.derive("train"),
                log.as_mut().map(|f| f as &mut dyn Write),
            )?
        }
        TaskKind::Qa => {
            let qa: QaFile = read_json(&a.data)?;
            if qa.samples.is_empty() {
                return Err(Error::Config("dataset holds no samples".into()));
            }
            let samples = qa.samples;
            let mut sampler = move |r: &mut Rng| {
                let s = &samples[r.index(0, samples.len() - 1)];
                TrainBatch::from_query_answer(&s.context, &s.query, &s.answer, &bcfg, r)
            };
            train_compressor(
                &mut params,
                &cfg,
                &mut sampler,
                mode,
                a.steps,
                &mut root.derive("train"),
                log.as_mut().map(|f| f as &mut dyn Write),
            )?
        }
    };
    checkpoint::save(out, &cfg, &params)?;
    if let (Some(first), Some(last)) = (recs.first(), recs.last()) {
        println!(
            "trained {} steps: loss {:.4} -> {:.4}, saved {}",
            a.steps,
            first.loss,
            last.loss,
            out.display()
        );
    }
    Ok(())
}

fn cmd_eval_ppl(cli: &Cli, a: &EvalPplArgs) -> Result<(), Error> {
    let (cfg, params) = load_ckpt(cli)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let lm: LmFile = read_json(&a.data)?;
    let docs: Vec<Vec<usize>> = lm.docs.into_iter().map(|d| d.tokens).collect();
    let grid = parse_grid(&a.grid)?;
    let (report, _) = eval_ppl(&params, &cfg, &docs, &grid, a.target_len, seed)?;
    for r in &report.rows {
        println!("N={:<8} ppl {:.6}", r.n, r.value);
    }
    if let Some(out) = cli.out.as_deref() {
        write_json(out, &report)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_eval_qa(cli: &Cli, a: &EvalQaArgs) -> Result<(), Error> {
    let (cfg, params) = load_ckpt(cli)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let qa: QaFile = read_json(&a.data)?;
    let mode = match a.mode {
        QaModeArg::Base => QaMode::Base,
        QaModeArg::Lcirc => QaMode::Lcirc,
        QaModeArg::Qd => QaMode::Qd,
    };
    let (report, _) = eval_qa(&params, &cfg, &qa.samples, mode, seed)?;
    println!(
        "{} exact-match {:.4} over {} samples",
        report.task, report.rows[0].value, report.n_items
    );
    if let Some(out) = cli.out.as_deref() {
        write_json(out, &report)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> Result<(), Error> {
    let (cfg, params) = load_ckpt(cli)?;
    let prompt = encode_str(&a.prompt);
    let query = a.query.as_ref().map(|q| encode_str(q));
    let outcome = infer(&params, &cfg, &prompt, a.max_new, query.as_deref())?;
    if let Some(path) = &a.trace {
        let mut f = fs::File::create(path)?;
        for ev in &outcome.trace {
            let line = serde_json::to_string(ev)?;
            writeln!(f, "{line}")?;
        }
    }
    eprintln!(
        "regime {} | evictions {} | macs {:?}",
        outcome.regime.as_str(),
        outcome.evictions,
        outcome.macs
    );
    println!("{}", decode_to_string(&outcome.tokens));
    Ok(())
}

fn cmd_flops(cli: &Cli, a: &FlopsArgs) -> Result<(), Error> {
    let cm = match a.preset {
        PresetArg::Llama27b => CostModel::llama2_7b(),
        PresetArg::Desk => {
            let cfg = read_config(cli)?;
            CostModel::from_config("desk", &cfg)
        }
    };
    let grid = parse_grid(&a.n)?;
    let report = cost_report(&cm, &grid);
    print!("{}{}", report.header, report.text);
    if let Some(out) = cli.out.as_deref() {
        fs::write(out, format!("{}{}", report.header, report.csv))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
