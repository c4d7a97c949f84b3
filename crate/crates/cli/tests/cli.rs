use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use bytelift_cli::app::{EXIT_INVALID_CONFIG, EXIT_MISSING_CHECKPOINT, EXIT_USAGE};
use bytelift_cli::checkpoint::{Checkpoint, Kind};
use bytelift_cli::corpus::{Corpus, Split};
use bytelift_core::model::{
    fused_targets, init_byte_lm, Bound, BoundaryMode, ByteLm, GlobalSource,
};
use bytelift_core::numerics::Graph;
use bytelift_core::tokenization::SuffixIndex;
use bytelift_core::training::{loss_ce, prepare_docs};

const TINY: &str = "\
[model]
d = 32
decoder_layers = 1
mlstm_heads = 2
mlstm_qk_dim = 8
mlstm_v_dim = 16
global_heads = 2
global_head_dim = 16
[data]
vocab_size = 300
bpe_docs = 200
[teacher]
warmup_steps = 5
max_bytes = 96
[stage1]
warmup_steps = 5
max_bytes = 96
[stage2]
warmup_steps = 5
max_bytes = 96
";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn bytelift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bytelift"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bytelift(args);
    assert!(
        out.status.success(),
        "bytelift {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A corpus, a config and a briefly trained teacher shared by every test.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        std::fs::write(f.path("tiny.cfg"), TINY).unwrap();
        let (corpus, cfg, teacher) = (f.path("c.jsonl"), f.path("tiny.cfg"), f.path("t.ckpt"));
        ok(&[
            "synth-corpus",
            "--out",
            s(&corpus),
            "--docs",
            "400",
            "--held-out",
            "20",
            "--seed",
            "3",
        ]);
        ok(&[
            "train-teacher",
            "--config",
            s(&cfg),
            "--corpus",
            s(&corpus),
            "--out",
            s(&teacher),
            "--steps",
            "20",
            "--log-every",
            "0",
        ]);
        f
    })
}

fn stage1(f: &Fixture, out: &Path, extra: &[&str]) {
    let (corpus, cfg, teacher) = (f.path("c.jsonl"), f.path("tiny.cfg"), f.path("t.ckpt"));
    let mut args = vec![
        "stage1",
        "--config",
        s(&cfg),
        "--teacher",
        s(&teacher),
        "--corpus",
        s(&corpus),
        "--out",
        s(out),
        "--log-every",
        "0",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn stage1_with_zero_steps_saves_the_initialization() {
    let f = fixture();
    let out = f.path("s0.ckpt");
    stage1(f, &out, &["--steps", "0", "--seed", "11"]);
    let ck = Checkpoint::load(&out).unwrap();
    let teacher = Checkpoint::load(&f.path("t.ckpt")).unwrap();
    assert_eq!(ck.kind, Kind::Byte);
    assert_eq!(ck.step, 0);
    assert_eq!(ck.config.seed, 11);
    let init = init_byte_lm(&ck.config.model, &teacher.params, false, 11).unwrap();
    assert_eq!(ck.params, init);
}

#[test]
fn untrained_model_scores_about_nine_bits_per_byte() {
    let f = fixture();
    let out = f.path("init.ckpt");
    stage1(f, &out, &["--steps", "0"]);
    let o = ok(&[
        "eval-bpb",
        "--model",
        s(&out),
        "--corpus",
        s(&f.path("c.jsonl")),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let bpb = v["bits_per_byte"].as_f64().unwrap();
    assert!((bpb - 9.0).abs() < 0.2, "bits per byte at init {bpb}");
    assert!(v["boundary_accuracy"].as_f64().is_some());
    assert!(v["compression"].as_f64().unwrap() >= 1.0);
}

#[test]
fn eval_bpb_equals_the_training_cross_entropy() {
    let f = fixture();
    let model = f.path("e.ckpt");
    stage1(f, &model, &["--steps", "3"]);
    let corpus_path = f.path("c.jsonl");
    let o = ok(&[
        "eval-bpb",
        "--model",
        s(&model),
        "--corpus",
        s(&corpus_path),
        "--limit",
        "8",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let reported = v["bits_per_byte"].as_f64().unwrap();

    let ck = Checkpoint::load(&model).unwrap();
    let corpus = Corpus::load(
        &corpus_path,
        ck.config.data.held_out_fraction,
        ck.config.seed,
    )
    .unwrap();
    let docs = prepare_docs(
        &corpus.docs(Split::HeldOut)[..8],
        ck.config.stage1.max_bytes,
    );
    let suffix = SuffixIndex::new(&ck.vocab);
    let lm = ByteLm::new(&ck.config.model, &suffix, ck.vocab.bos());
    let (mut nll, mut bytes) = (0.0, 0usize);
    for x in &docs {
        let mut g = Graph::no_grad();
        let b = Bound::bind(&mut g, &ck.params, |_| false);
        let out = lm
            .forward(
                &mut g,
                &b,
                x,
                None,
                BoundaryMode::NonCausal,
                GlobalSource::Pooled,
            )
            .unwrap();
        let ce = loss_ce(&mut g, out.logp, &fused_targets(x, &out.mask)).unwrap();
        nll += g.value(ce).item() * x.len() as f64;
        bytes += x.len();
    }
    let expected = nll / bytes as f64 / std::f64::consts::LN_2;
    assert!(
        (reported - expected).abs() <= 1e-12 * expected,
        "{reported} vs {expected}"
    );
    assert_eq!(v["bytes"].as_u64().unwrap() as usize, bytes);
}

#[test]
fn greedy_generation_is_repeatable() {
    let f = fixture();
    let model = f.path("g.ckpt");
    stage1(f, &model, &["--steps", "2"]);
    let (a, b) = (f.path("gen_a.txt"), f.path("gen_b.txt"));
    for out in [&a, &b] {
        ok(&[
            "generate",
            "--model",
            s(&model),
            "--prompt",
            "the sun",
            "--temperature",
            "0",
            "--max-bytes",
            "24",
            "--out",
            s(out),
        ]);
    }
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert_eq!(a, b);
    assert!(a.len() <= 24);
}

#[test]
fn single_threaded_runs_log_identical_metrics() {
    let f = fixture();
    let mut logs = Vec::new();
    for run in 0..2 {
        let (out, metrics) = (
            f.path(&format!("d{run}.ckpt")),
            f.path(&format!("d{run}.jsonl")),
        );
        stage1(
            f,
            &out,
            &[
                "--steps",
                "4",
                "--seed",
                "7",
                "--threads",
                "1",
                "--metrics",
                s(&metrics),
            ],
        );
        logs.push(std::fs::read(metrics).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    let records = bytelift_cli::metrics::read_log(std::str::from_utf8(&logs[0]).unwrap()).unwrap();
    assert_eq!(
        records.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![1, 2, 3, 4]
    );
}

#[test]
fn config_file_and_overrides_reach_the_checkpoint_header() {
    let f = fixture();
    let out = f.path("h.ckpt");
    stage1(
        f,
        &out,
        &[
            "--steps",
            "0",
            "--set",
            "stage1.lr=0.0005",
            "--set",
            "sample.top_p=0.9",
        ],
    );
    let ck = Checkpoint::load(&out).unwrap();
    assert_eq!(ck.config.stage1.lr, 0.0005);
    assert_eq!(ck.config.sample.sampler.top_p, 0.9);
    assert_eq!(ck.config.model.d, 32);
}

#[test]
fn merging_identical_teachers_changes_nothing() {
    let f = fixture();
    let byte = f.path("m_in.ckpt");
    stage1(f, &byte, &["--steps", "0"]);
    let (teacher, out) = (f.path("t.ckpt"), f.path("m_out.ckpt"));
    ok(&[
        "merge",
        "--byte",
        s(&byte),
        "--base",
        s(&teacher),
        "--posttrained",
        s(&teacher),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        Checkpoint::load(&out).unwrap(),
        Checkpoint::load(&byte).unwrap()
    );
}

#[test]
fn stage2_with_bpe_supervision_runs() {
    let f = fixture();
    let init = f.path("s2_in.ckpt");
    stage1(f, &init, &["--steps", "2"]);
    let out = f.path("s2_out.ckpt");
    ok(&[
        "stage2",
        "--config",
        s(&f.path("tiny.cfg")),
        "--init",
        s(&init),
        "--teacher",
        s(&f.path("t.ckpt")),
        "--corpus",
        s(&f.path("c.jsonl")),
        "--out",
        s(&out),
        "--steps",
        "2",
        "--merge-strategy",
        "bpe",
        "--target-compression",
        "6",
        "--log-every",
        "0",
    ]);
    let ck = Checkpoint::load(&out).unwrap();
    assert_eq!(ck.step, 4);
    assert_eq!(ck.config.stage2.merge.target, 6.0);
}

#[test]
fn inspection_commands_print_reports() {
    let f = fixture();
    let model = f.path("i.ckpt");
    stage1(f, &model, &["--steps", "1"]);
    let o = ok(&["spectrum", "--model", s(&model)]);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("index\tsingular_value"));
    assert_eq!(table.lines().count(), 1 + 32);

    let o = ok(&[
        "boundary-dump",
        "--model",
        s(&model),
        "--corpus",
        s(&f.path("c.jsonl")),
        "--limit",
        "3",
    ]);
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0]["subword"].is_string() && lines[0]["predicted"].is_string());
}

#[test]
fn failures_have_distinct_exit_codes() {
    let f = fixture();
    let corpus = f.path("c.jsonl");
    let unknown = bytelift(&["eval-bpb", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(EXIT_USAGE));

    let missing = bytelift(&[
        "eval-bpb",
        "--model",
        s(&f.path("absent.ckpt")),
        "--corpus",
        s(&corpus),
    ]);
    assert_eq!(missing.status.code(), Some(EXIT_MISSING_CHECKPOINT));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.ckpt"));

    let teacher = f.path("t.ckpt");
    let bad_value = bytelift(&[
        "eval-bpb",
        "--model",
        s(&teacher),
        "--corpus",
        s(&corpus),
        "--set",
        "model.d=wide",
    ]);
    assert_eq!(bad_value.status.code(), Some(EXIT_INVALID_CONFIG));

    let cfg = f.path("bad.cfg");
    std::fs::write(&cfg, "[stage1]\nlearning_rate = 1\n").unwrap();
    let bad_key = bytelift(&[
        "eval-bpb",
        "--config",
        s(&cfg),
        "--model",
        s(&teacher),
        "--corpus",
        s(&corpus),
    ]);
    assert_eq!(bad_key.status.code(), Some(EXIT_INVALID_CONFIG));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("stage1.learning_rate"));

    let codes = [EXIT_USAGE, EXIT_MISSING_CHECKPOINT, EXIT_INVALID_CONFIG];
    assert!(codes.iter().all(|&c| c != 0 && c != 1));
}
