//! Command-line surface: argument definitions and one function per
//! subcommand.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bytelift_core::boundary_supervision::{
    attained_compression, supervision_mask, AuxLm, MergeKind,
};
use bytelift_core::inference::Generator;
use bytelift_core::merge_tools::{spectrum_report, task_arithmetic_merge};
use bytelift_core::model::{
    boundary_scores, init_byte_lm, init_teacher, predicted_mask, Bound, ByteLm, ModelConfig,
    ParamStore, SubwordLm,
};
use bytelift_core::numerics::Graph;
use bytelift_core::tokenization::{subword_boundary_mask, train_bpe, BoundaryMask, SuffixIndex};
use bytelift_core::training::{
    evaluate, prepare_docs, teacher_bpb, StepMetrics, TeacherTrainer, Trainer, TrainingError,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointError, Kind};
use crate::config::{parse_kv, ConfigError, RunConfig};
use crate::corpus::{write_jsonl, Corpus, Record, Split};
use crate::metrics::{MetricsLog, MetricsRecord};
use crate::synth::{generate, Style};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_CHECKPOINT: i32 = 3;
pub const EXIT_INVALID_CONFIG: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "bytelift",
    version,
    about = "Turn a subword language model into a byte-level one"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Key-value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run seed; overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single configuration override, applied after `--config`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads for data-parallel work (1 = single-threaded).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    HeldOut,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::HeldOut => Split::HeldOut,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StyleArg {
    Base,
    Shifted,
}

#[derive(Debug, Clone, Args)]
pub struct TrainOpts {
    /// Corpus directory or file.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Optimizer steps; overrides the config.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Append one JSON record per step to this file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Progress line on stderr every this many steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus of short compound-word sentences as JSON lines.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20000)]
        docs: usize,
        #[arg(long, default_value_t = 200)]
        held_out: usize,
        #[arg(long, default_value_t = 3)]
        sentences: usize,
        #[arg(long, value_enum, default_value_t = StyleArg::Base)]
        style: StyleArg,
    },
    /// Fit a subword vocabulary and train the subword teacher.
    TrainTeacher {
        #[command(flatten)]
        train: TrainOpts,
        /// Continue from (fine-tune) this teacher checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Distill a byte model from a teacher with the global model frozen.
    Stage1 {
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long)]
        teacher: PathBuf,
        /// Continue from this byte checkpoint instead of a fresh init.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Start the subword-suffix embeddings at zero instead of copying them.
        #[arg(long)]
        fresh: bool,
    },
    /// Train every parameter of a byte model, optionally towards coarser patches.
    Stage2 {
        #[command(flatten)]
        train: TrainOpts,
        /// Byte checkpoint to continue from.
        #[arg(long)]
        init: PathBuf,
        /// Teacher checkpoint (needed by the entropy and xent strategies).
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_name = "subword|bpe|entropy|xent")]
        merge_strategy: Option<String>,
        #[arg(long, value_name = "T")]
        target_compression: Option<f64>,
    },
    /// Sample a continuation of a prompt.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        max_bytes: Option<usize>,
        /// Write the generated bytes here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bits per byte, boundary accuracy and compression on a corpus split.
    EvalBpb {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::HeldOut)]
        split: SplitArg,
        /// Evaluate at most this many documents.
        #[arg(long)]
        limit: Option<usize>,
        /// Truncate documents to this many bytes (default: the stage 1 setting).
        #[arg(long)]
        max_bytes: Option<usize>,
    },
    /// Add `posttrained - base` to the global model of a byte checkpoint.
    Merge {
        #[arg(long)]
        byte: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        posttrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Singular value spectrum of an embedding matrix.
    Spectrum {
        #[arg(long)]
        model: PathBuf,
        /// Tensor name (default: the subword embedding table).
        #[arg(long)]
        tensor: Option<String>,
    },
    /// Print subword, supervision and predicted boundaries as JSON lines.
    BoundaryDump {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::HeldOut)]
        split: SplitArg,
        #[arg(long, default_value_t = 20)]
        limit: usize,
        /// Teacher checkpoint, for the entropy and xent supervision masks.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

/// Exit status for an error: missing checkpoints and invalid configuration
/// get their own codes.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(CheckpointError::NotFound(_)) = cause.downcast_ref::<CheckpointError>() {
            return EXIT_MISSING_CHECKPOINT;
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_INVALID_CONFIG;
        }
    }
    EXIT_FAILURE
}

/// Configuration layers: `base` (defaults or a checkpoint header), the
/// config file, `--set`, subcommand flags, then `--seed`.
pub fn resolve_config(
    base: Option<&RunConfig>,
    g: &GlobalOpts,
    flags: &[(String, String)],
) -> Result<RunConfig> {
    let mut cfg = base.cloned().unwrap_or_default();
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply(&parse_kv(&text)?)?;
    }
    for s in &g.set {
        let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            msg: format!("--set expects KEY=VALUE, got {s:?}"),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.apply(flags)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn flag<T: ToString>(key: &str, v: Option<T>) -> Option<(String, String)> {
    v.map(|v| (key.to_string(), v.to_string()))
}

fn load_kind(path: &Path, kind: Kind) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if ck.kind != kind {
        bail!(
            "{} holds a {:?} checkpoint, expected {:?}",
            path.display(),
            ck.kind,
            kind
        );
    }
    Ok(ck)
}

fn load_corpus(path: &Path, cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load(path, cfg.data.held_out_fraction, cfg.seed)
        .with_context(|| format!("loading corpus {}", path.display()))
}

fn train_loop(
    phase: &str,
    steps: usize,
    opts: &TrainOpts,
    mut step: impl FnMut() -> std::result::Result<StepMetrics, TrainingError>,
) -> Result<()> {
    let mut log = opts
        .metrics
        .as_deref()
        .map(MetricsLog::open)
        .transpose()
        .context("opening metrics log")?;
    for _ in 0..steps {
        let m = step()?;
        if let Some(log) = log.as_mut() {
            log.write(&MetricsRecord::new(phase, &m))?;
        }
        if !m.loss.total.is_finite() {
            bail!("{phase}: non-finite loss at step {}", m.step);
        }
        if opts.log_every > 0 && m.step % opts.log_every == 0 {
            if phase == "teacher" {
                eprintln!("{phase} step {} loss {:.4}", m.step, m.loss.total);
            } else {
                eprintln!(
                    "{phase} step {} loss {:.4} acc {:.4} c {:.2}",
                    m.step, m.loss.total, m.boundary_acc, m.compression
                );
            }
        }
    }
    if let Some(log) = log {
        log.finish()?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        set_threads(n)?;
    }
    let g = &cli.global;
    match cli.command {
        Command::SynthCorpus {
            out,
            docs,
            held_out,
            sentences,
            style,
        } => synth_corpus(g, &out, docs, held_out, sentences, style),
        Command::TrainTeacher { train, init } => train_teacher(g, &train, init.as_deref()),
        Command::Stage1 {
            train,
            teacher,
            init,
            fresh,
        } => stage1(g, &train, &teacher, init.as_deref(), fresh),
        Command::Stage2 {
            train,
            init,
            teacher,
            merge_strategy,
            target_compression,
        } => stage2(
            g,
            &train,
            &init,
            &teacher,
            merge_strategy,
            target_compression,
        ),
        Command::Generate {
            model,
            prompt,
            temperature,
            top_p,
            max_bytes,
            out,
        } => {
            let flags: Vec<_> = [
                flag("sample.temperature", temperature),
                flag("sample.top_p", top_p),
                flag("sample.max_bytes", max_bytes),
            ]
            .into_iter()
            .flatten()
            .collect();
            generate_cmd(g, &model, &prompt, &flags, out.as_deref())
        }
        Command::EvalBpb {
            model,
            corpus,
            split,
            limit,
            max_bytes,
        } => eval_bpb(g, &model, &corpus, split.into(), limit, max_bytes),
        Command::Merge {
            byte,
            base,
            posttrained,
            out,
        } => merge(g, &byte, &base, &posttrained, &out),
        Command::Spectrum { model, tensor } => spectrum(g, &model, tensor.as_deref()),
        Command::BoundaryDump {
            model,
            corpus,
            split,
            limit,
            teacher,
        } => boundary_dump(g, &model, &corpus, split.into(), limit, teacher.as_deref()),
    }
}

#[cfg(feature = "parallel")]
fn set_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

#[cfg(not(feature = "parallel"))]
fn set_threads(_: usize) -> Result<()> {
    Ok(())
}

fn synth_corpus(
    g: &GlobalOpts,
    out: &Path,
    docs: usize,
    held_out: usize,
    sentences: usize,
    style: StyleArg,
) -> Result<()> {
    let cfg = resolve_config(None, g, &[])?;
    let style = match style {
        StyleArg::Base => Style::Base,
        StyleArg::Shifted => Style::Shifted,
    };
    let records = |texts: Vec<String>, split| {
        texts.into_iter().map(move |text| Record {
            text,
            split: Some(split),
        })
    };
    let train = generate(docs, sentences, cfg.seed, style);
    let held = generate(
        held_out,
        sentences,
        cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        style,
    );
    let all: Vec<Record> = records(train, Split::Train)
        .chain(records(held, Split::HeldOut))
        .collect();
    write_jsonl(out, &all)?;
    eprintln!("wrote {} training and {held_out} held-out documents", docs);
    Ok(())
}

fn train_teacher(g: &GlobalOpts, opts: &TrainOpts, init: Option<&Path>) -> Result<()> {
    let init = init.map(|p| load_kind(p, Kind::Teacher)).transpose()?;
    let flags: Vec<_> = flag("teacher.steps", opts.steps).into_iter().collect();
    let mut cfg = resolve_config(init.as_ref().map(|c| &c.config), g, &flags)?;
    let corpus = load_corpus(&opts.corpus, &cfg)?;
    let (vocab, params, start) = match init {
        Some(ck) => (ck.vocab, ck.params, ck.step),
        None => {
            let n = cfg.data.bpe_docs.min(corpus.train.len());
            let vocab = train_bpe(&corpus.train[..n], cfg.data.vocab_size).vocab;
            cfg.model.subword_vocab = vocab.len();
            let params = init_teacher(&cfg.model, cfg.seed)?;
            (vocab, params, 0)
        }
    };
    if cfg.model.subword_vocab != vocab.len() {
        return Err(ConfigError::Invalid(format!(
            "model.subword_vocab = {} but the vocabulary has {} entries",
            cfg.model.subword_vocab,
            vocab.len()
        ))
        .into());
    }
    let mut train = cfg.teacher.clone();
    train.seed = cfg.seed;
    let model_cfg = cfg.model.clone();
    let mut t = TeacherTrainer::new(&model_cfg, train, params, &vocab, &corpus.train)?;
    train_loop("teacher", cfg.teacher.steps, opts, || t.step())?;
    let held_bpb = if corpus.held_out.is_empty() {
        None
    } else {
        Some(teacher_bpb(
            &model_cfg,
            &t.params,
            &vocab,
            &corpus.held_out,
            cfg.teacher.max_bytes,
        )?)
    };
    let ck = Checkpoint {
        kind: Kind::Teacher,
        step: start + cfg.teacher.steps,
        config: cfg,
        vocab,
        params: t.params,
    };
    ck.save(&opts.out)?;
    if let Some(b) = held_bpb {
        eprintln!("teacher held-out bits/byte {b:.4}");
    }
    Ok(())
}

fn stage1(
    g: &GlobalOpts,
    opts: &TrainOpts,
    teacher: &Path,
    init: Option<&Path>,
    fresh: bool,
) -> Result<()> {
    let teacher = load_kind(teacher, Kind::Teacher)?;
    let init = init.map(|p| load_kind(p, Kind::Byte)).transpose()?;
    let base = init.as_ref().map_or(&teacher.config, |c| &c.config);
    let flags: Vec<_> = flag("stage1.steps", opts.steps).into_iter().collect();
    let cfg = resolve_config(Some(base), g, &flags)?;
    let corpus = load_corpus(&opts.corpus, &cfg)?;
    let (params, start) = match init {
        Some(ck) => (ck.params, ck.step),
        None => (
            init_byte_lm(&cfg.model, &teacher.params, fresh, cfg.seed)?,
            0,
        ),
    };
    let mut train = cfg.stage1.clone();
    train.seed = cfg.seed;
    let model_cfg = cfg.model.clone();
    let mut t = Trainer::new(
        &model_cfg,
        train,
        params,
        &teacher.params,
        &teacher.vocab,
        &corpus.train,
    )?;
    train_loop("stage1", cfg.stage1.steps, opts, || t.step())?;
    let ck = Checkpoint {
        kind: Kind::Byte,
        step: start + cfg.stage1.steps,
        config: cfg,
        vocab: teacher.vocab.clone(),
        params: t.params,
    };
    ck.save(&opts.out)?;
    Ok(())
}

fn stage2(
    g: &GlobalOpts,
    opts: &TrainOpts,
    init: &Path,
    teacher: &Path,
    merge_strategy: Option<String>,
    target: Option<f64>,
) -> Result<()> {
    let init = load_kind(init, Kind::Byte)?;
    let teacher = load_kind(teacher, Kind::Teacher)?;
    let flags: Vec<_> = [
        flag("stage2.steps", opts.steps),
        flag("stage2.merge_strategy", merge_strategy),
        flag("stage2.target_compression", target),
    ]
    .into_iter()
    .flatten()
    .collect();
    let cfg = resolve_config(Some(&init.config), g, &flags)?;
    if teacher.vocab != init.vocab {
        bail!("teacher vocabulary differs from the byte model's");
    }
    let corpus = load_corpus(&opts.corpus, &cfg)?;
    let mut train = cfg.stage2.clone();
    train.seed = cfg.seed;
    let model_cfg = cfg.model.clone();
    let vocab = init.vocab;
    let mut t = Trainer::new(
        &model_cfg,
        train,
        init.params,
        &teacher.params,
        &vocab,
        &corpus.train,
    )?;
    if let Ok(c) = attained_compression(t.supervision()) {
        eprintln!("stage2 supervision compression {c:.3}");
    }
    train_loop("stage2", cfg.stage2.steps, opts, || t.step())?;
    let ck = Checkpoint {
        kind: Kind::Byte,
        step: init.step + cfg.stage2.steps,
        config: cfg,
        vocab: vocab.clone(),
        params: t.params,
    };
    ck.save(&opts.out)?;
    Ok(())
}

fn generate_cmd(
    g: &GlobalOpts,
    model: &Path,
    prompt: &str,
    flags: &[(String, String)],
    out: Option<&Path>,
) -> Result<()> {
    let ck = load_kind(model, Kind::Byte)?;
    let cfg = resolve_config(Some(&ck.config), g, flags)?;
    let suffix = SuffixIndex::new(&ck.vocab);
    let lm = ByteLm::new(&cfg.model, &suffix, ck.vocab.bos());
    let gen_cfg = bytelift_core::inference::GenerateConfig {
        sampler: cfg.sampler(),
        ..cfg.sample
    };
    let bytes = Generator::new(lm, &ck.params).generate(prompt.as_bytes(), &gen_cfg)?;
    match out {
        Some(p) => std::fs::write(p, &bytes).with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(&bytes)?;
            stdout.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    kind: &'static str,
    docs: usize,
    bytes: usize,
    bits_per_byte: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    boundary_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    compression: Option<f64>,
}

fn eval_bpb(
    g: &GlobalOpts,
    model: &Path,
    corpus: &Path,
    split: Split,
    limit: Option<usize>,
    max_bytes: Option<usize>,
) -> Result<()> {
    let ck = Checkpoint::load(model).with_context(|| format!("loading {}", model.display()))?;
    let cfg = resolve_config(Some(&ck.config), g, &[])?;
    let corpus = load_corpus(corpus, &cfg)?;
    let docs = corpus.docs(split);
    let docs = &docs[..limit.unwrap_or(docs.len()).min(docs.len())];
    if docs.is_empty() {
        bail!("the {split:?} split is empty");
    }
    let max_bytes = max_bytes.unwrap_or(cfg.stage1.max_bytes);
    let out = match ck.kind {
        Kind::Byte => {
            let r = evaluate(
                &cfg.model,
                &ck.params,
                &ck.vocab,
                docs,
                max_bytes,
                cfg.stage1.boundary_mode,
            )?;
            EvalOutput {
                kind: "byte",
                docs: r.docs,
                bytes: r.bytes,
                bits_per_byte: r.bits_per_byte(),
                boundary_accuracy: Some(1.0 - r.boundary_error_rate()),
                compression: Some(r.compression()),
            }
        }
        Kind::Teacher => {
            let prepared = prepare_docs(docs, max_bytes);
            EvalOutput {
                kind: "teacher",
                docs: prepared.len(),
                bytes: prepared.iter().map(Vec::len).sum(),
                bits_per_byte: teacher_bpb(&cfg.model, &ck.params, &ck.vocab, docs, max_bytes)?,
                boundary_accuracy: None,
                compression: None,
            }
        }
    };
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn merge(g: &GlobalOpts, byte: &Path, base: &Path, posttrained: &Path, out: &Path) -> Result<()> {
    let byte = load_kind(byte, Kind::Byte)?;
    let base = load_kind(base, Kind::Teacher)?;
    let post = load_kind(posttrained, Kind::Teacher)?;
    resolve_config(Some(&byte.config), g, &[])?;
    if base.vocab != byte.vocab || post.vocab != byte.vocab {
        bail!("the teachers and the byte model must share one vocabulary");
    }
    let params = task_arithmetic_merge(&byte.params, &base.params, &post.params)?;
    Checkpoint { params, ..byte }.save(out)?;
    Ok(())
}

fn spectrum(g: &GlobalOpts, model: &Path, tensor: Option<&str>) -> Result<()> {
    let ck = Checkpoint::load(model).with_context(|| format!("loading {}", model.display()))?;
    resolve_config(Some(&ck.config), g, &[])?;
    let name = tensor.unwrap_or(match ck.kind {
        Kind::Teacher => "embed",
        Kind::Byte => "subword_embed",
    });
    let report = spectrum_report(ck.params.get(name)?)?;
    print!("{}", report.to_table());
    for share in [0.5, 0.9, 0.99] {
        eprintln!(
            "{name}: {} singular values explain {share} of the variance",
            report.rank_for(share)
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DumpRecord {
    doc: usize,
    text: String,
    subword: String,
    supervision: Option<String>,
    predicted: String,
    /// The text with `|` after every predicted boundary.
    segmented: String,
}

fn segmented(x: &[u8], m: &BoundaryMask) -> String {
    let mut out = Vec::with_capacity(x.len() * 2);
    for (&b, &f) in x.iter().zip(&m.flags) {
        out.push(b);
        if f {
            out.push(b'|');
        }
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn predicted(cfg: &RunConfig, lm: &ByteLm, params: &ParamStore, x: &[u8]) -> Result<BoundaryMask> {
    let mut graph = Graph::no_grad();
    let b = Bound::bind(&mut graph, params, |_| false);
    let e = lm.embed(&mut graph, &b, x, 0)?;
    let e_hat = lm.encode(&mut graph, &b, e, None)?;
    let s = boundary_scores(&mut graph, &b, e_hat, cfg.stage1.boundary_mode)?;
    let s = s
        .map(|s| graph.value(s).data().to_vec())
        .unwrap_or_default();
    Ok(predicted_mask(&s, x.len(), cfg.model.boundary_threshold))
}

fn boundary_dump(
    g: &GlobalOpts,
    model: &Path,
    corpus: &Path,
    split: Split,
    limit: usize,
    teacher: Option<&Path>,
) -> Result<()> {
    let ck = load_kind(model, Kind::Byte)?;
    let cfg = resolve_config(Some(&ck.config), g, &[])?;
    let teacher = teacher.map(|p| load_kind(p, Kind::Teacher)).transpose()?;
    let corpus = load_corpus(corpus, &cfg)?;
    let docs = corpus.docs(split);
    let docs = prepare_docs(&docs[..limit.min(docs.len())], cfg.stage1.max_bytes);
    let model_cfg: &ModelConfig = &cfg.model;
    let suffix = SuffixIndex::new(&ck.vocab);
    let lm = ByteLm::new(model_cfg, &suffix, ck.vocab.bos());
    let aux = teacher
        .as_ref()
        .map(|t| SubwordLm::new(model_cfg, &t.params, &t.vocab))
        .transpose()?;
    let strategy = cfg.stage2.merge;
    let needs_aux = matches!(strategy.kind, MergeKind::Entropy | MergeKind::CrossEntropy);
    let mut stdout = std::io::stdout().lock();
    for (i, x) in docs.iter().enumerate() {
        let sub = subword_boundary_mask(&ck.vocab, x);
        let supervision = if needs_aux && aux.is_none() {
            None
        } else {
            let aux = aux.as_ref().map(|a| a as &dyn AuxLm);
            Some(supervision_mask(&strategy, &sub, x, aux)?.to_rle())
        };
        let pred = predicted(&cfg, &lm, &ck.params, x)?;
        let rec = DumpRecord {
            doc: i,
            text: String::from_utf8_lossy(x).into_owned(),
            subword: sub.to_rle(),
            supervision,
            predicted: pred.to_rle(),
            segmented: segmented(x, &pred),
        };
        serde_json::to_writer(&mut stdout, &rec)?;
        stdout.write_all(b"\n")?;
    }
    Ok(())
}
