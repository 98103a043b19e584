use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cats_core::data::parse_jsonl;
use cats_core::pipeline::SegmentationResult;
use tempfile::TempDir;

fn cats(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cats")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        let out = cats(&[
            "synth",
            "--out-corpus",
            &ws.p("corpus.jsonl"),
            "--out-embeddings",
            &ws.p("emb.txt"),
            "--docs",
            "8",
            "--seed",
            "2",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::write(
            ws.path("run.conf"),
            "# small\nk = 4\nt = 8\nd_p = 4\nn_tt = 1\nn_ts = 1\nheads = 2\nff_dim = 16\nepochs = 1\nbatch_size = 8\n",
        )
        .unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "train",
            "--corpus",
            &self.p("corpus.jsonl"),
            "--embeddings",
            &self.p("emb.txt"),
            "--config",
            &self.p("run.conf"),
            "--out",
            &self.p(out),
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        args.extend(extra.iter().map(|s| s.to_string()));
        cats(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

fn read_results(path: &Path) -> Vec<SegmentationResult> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&cats(&[])), 2);
    assert_eq!(code(&cats(&["segment", "--input", "x"])), 2);
    assert_eq!(code(&cats(&["--help"])), 0);

    let ws = Workspace::new();
    let both = cats(&[
        "evaluate",
        "--reference",
        &ws.p("corpus.jsonl"),
        "--hypothesis",
        &ws.p("corpus.jsonl"),
        "--baseline",
        "random",
    ]);
    assert_eq!(code(&both), 2);
    assert_eq!(code(&cats(&["evaluate", "--reference", &ws.p("corpus.jsonl")])), 2);

    fs::write(ws.path("run.conf"), "epochz = 3\n").unwrap();
    let bad = ws.train("out", &[]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("epochz"));
}

#[test]
fn runtime_errors_exit_one() {
    let ws = Workspace::new();
    let missing = cats(&[
        "segment",
        "--checkpoint",
        &ws.p("nope.ckpt"),
        "--input",
        &ws.p("corpus.jsonl"),
        "--out",
        &ws.p("seg.jsonl"),
    ]);
    assert_eq!(code(&missing), 1);

    assert_eq!(code(&ws.train("model", &[])), 0);
    let other = cats(&["synth", "--out-corpus", &ws.p("c8.jsonl"), "--out-embeddings", &ws.p("e8.txt"), "--dim", "8"]);
    assert_eq!(code(&other), 0);
    let conflict = cats(&[
        "segment",
        "--checkpoint",
        &ws.p("model/model.ckpt"),
        "--input",
        &ws.p("corpus.jsonl"),
        "--embeddings",
        &ws.p("e8.txt"),
        "--out",
        &ws.p("seg.jsonl"),
    ]);
    assert_eq!(code(&conflict), 1);
    let msg = stderr(&conflict);
    assert!(msg.contains('8') && msg.contains("16"), "{msg}");
}

#[test]
fn train_outputs_and_segment() {
    let ws = Workspace::new();
    let out = ws.train("model", &["--epochs", "2", "--checkpoint-every", "1", "--variant", "tlt-ts"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["model.ckpt", "train.log", "manifest.txt", "checkpoint-epoch-1.ckpt", "checkpoint-epoch-2.ckpt"] {
        assert!(ws.path("model").join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(ws.path("model/manifest.txt")).unwrap();
    assert!(manifest.contains("variant = tlt-ts\n"));
    assert!(manifest.contains("epochs = 2\n"));
    assert!(manifest.contains("k = 4\n"));
    assert!(manifest.lines().any(|l| l.starts_with("corpus_sha256 = ") && l.len() == "corpus_sha256 = ".len() + 64));
    let log = fs::read_to_string(ws.path("model/train.log")).unwrap();
    assert!(log.lines().all(|l| l.split('\t').nth(1) == Some("J_seg")));

    let seg = cats(&[
        "segment",
        "--checkpoint",
        &ws.p("model/model.ckpt"),
        "--input",
        &ws.p("corpus.jsonl"),
        "--out",
        &ws.p("seg.jsonl"),
    ]);
    assert_eq!(code(&seg), 0, "{}", stderr(&seg));
    let docs = parse_jsonl(ws.path("corpus.jsonl")).unwrap().documents;
    let results = read_results(&ws.path("seg.jsonl"));
    assert_eq!(results.len(), docs.len());
    for (r, d) in results.iter().zip(&docs) {
        assert_eq!(r.doc_id, d.id);
        assert_eq!(r.boundaries.len(), d.len());
        assert_eq!(r.boundaries[0], 1);
    }

    let eval = cats(&[
        "evaluate",
        "--reference",
        &ws.p("corpus.jsonl"),
        "--hypothesis",
        &ws.p("seg.jsonl"),
        "--out",
        &ws.p("report.json"),
    ]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    assert_eq!(report["documents"], 8);
    let pk = report["macro_pk"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pk));
}

#[test]
fn lower_tau_marks_more_boundaries() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.train("model", &[])), 0);
    let mut counts = Vec::new();
    for tau in ["0.1", "0.5", "0.9"] {
        let out = ws.p(&format!("seg-{tau}.jsonl"));
        let seg = cats(&[
            "segment",
            "--checkpoint",
            &ws.p("model/model.ckpt"),
            "--input",
            &ws.p("corpus.jsonl"),
            "--tau",
            tau,
            "--out",
            &out,
        ]);
        assert_eq!(code(&seg), 0, "{}", stderr(&seg));
        let results = read_results(Path::new(&out));
        let per_doc: Vec<Vec<u8>> = results.into_iter().map(|r| r.boundaries).collect();
        counts.push(per_doc);
    }
    for pair in counts.windows(2) {
        for (lo, hi) in pair[0].iter().zip(&pair[1]) {
            assert!(lo.iter().zip(hi).all(|(a, b)| a >= b));
        }
    }
}

#[test]
fn choi_round_trip() {
    let ws = Workspace::new();
    let to_choi = cats(&["convert", "--input", &ws.p("corpus.jsonl"), "--output", &ws.p("choi"), "--to", "choi"]);
    assert_eq!(code(&to_choi), 0, "{}", stderr(&to_choi));
    assert_eq!(fs::read_dir(ws.path("choi")).unwrap().count(), 8);
    let back = cats(&["convert", "--input", &ws.p("choi"), "--output", &ws.p("back.jsonl"), "--to", "jsonl"]);
    assert_eq!(code(&back), 0, "{}", stderr(&back));
    let mut a = parse_jsonl(ws.path("corpus.jsonl")).unwrap().documents;
    let b = parse_jsonl(ws.path("back.jsonl")).unwrap().documents;
    a.sort_by(|x, y| x.id.cmp(&y.id));
    assert_eq!(a, b);
}

#[test]
fn random_baseline_report() {
    let ws = Workspace::new();
    let run = |seed: &str| {
        let out = cats(&["evaluate", "--reference", &ws.p("corpus.jsonl"), "--baseline", "random", "--seed", seed]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap()
    };
    let a = run("3");
    assert_eq!(a, run("3"));
    assert_eq!(a["seed"], 3);
    assert_eq!(a["model"], "random-baseline");
    assert!(a["k"].as_u64().unwrap() >= 1);
}

#[test]
fn align_recovers_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    // Target vectors are the source vectors with their two coordinates swapped.
    let words = [("a", [1.0, 0.2]), ("b", [-0.3, 0.8]), ("c", [0.5, -0.7]), ("d", [0.1, 0.4])];
    let table = |swap: bool| {
        let mut s = format!("{} 2\n", words.len());
        for (w, v) in words {
            let (x, y) = if swap { (v[1], v[0]) } else { (v[0], v[1]) };
            s.push_str(&format!("{w} {x} {y}\n"));
        }
        s
    };
    fs::write(p("src.txt"), table(false)).unwrap();
    fs::write(p("tgt.txt"), table(true)).unwrap();
    fs::write(p("dict.tsv"), "a\ta\nb\tb\nc\tc\nmissing\ta\n").unwrap();
    let out = cats(&[
        "align",
        "--source-emb",
        &p("src.txt"),
        "--target-emb",
        &p("tgt.txt"),
        "--dict",
        &p("dict.tsv"),
        "--out",
        &p("projected.txt"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("pairs_used = 3\n"), "{text}");
    let value = |key: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(key)).unwrap();
        line.split(" = ").nth(1).unwrap().parse().unwrap()
    };
    assert!(value("residual") < 1e-6);
    assert!(value("identity_residual") > 0.5);
    assert!(value("orthogonality_error") < 1e-6);
    let projected = fs::read_to_string(p("projected.txt")).unwrap();
    let d_line = projected.lines().find(|l| l.starts_with("d ")).unwrap();
    let v: Vec<f64> = d_line.split(' ').skip(1).map(|x| x.parse().unwrap()).collect();
    assert!((v[0] - 0.1).abs() < 1e-5 && (v[1] - 0.4).abs() < 1e-5, "{v:?}");
}

#[test]
fn reference_as_hypothesis_scores_zero() {
    let ws = Workspace::new();
    let out = cats(&[
        "evaluate",
        "--reference",
        &ws.p("corpus.jsonl"),
        "--hypothesis",
        &ws.p("corpus.jsonl"),
        "--k",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["macro_pk"], 0.0);
    assert_eq!(report["k"], 1);
    assert_eq!(report["k_overridden"], true);
    assert_eq!(report["skipped"], 0);
}

#[test]
fn self_alignment_and_too_few_pairs() {
    let ws = Workspace::new();
    let emb = cats_core::embeddings::load_embeddings_text(ws.path("emb.txt")).unwrap();
    let dict: String = emb.words().iter().map(|w| format!("{w}\t{w}\n")).collect();
    fs::write(ws.path("dict.tsv"), dict).unwrap();
    let args = |dict: &str| {
        cats(&[
            "align",
            "--source-emb",
            &ws.p("emb.txt"),
            "--target-emb",
            &ws.p("emb.txt"),
            "--dict",
            &ws.p(dict),
            "--out",
            &ws.p("self.txt"),
        ])
    };
    let out = args("dict.tsv");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let projected = cats_core::embeddings::load_embeddings_text(ws.path("self.txt")).unwrap();
    assert_eq!(projected.words(), emb.words());
    for id in 0..emb.loaded_len() {
        let diff = emb.row(id).iter().zip(projected.row(id)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-4, "{} {diff}", emb.word(id));
    }

    fs::write(ws.path("short.tsv"), "t0w0\tt0w0\nt1w0\tt1w0\n").unwrap();
    let short = args("short.tsv");
    assert_eq!(code(&short), 1);
    assert!(stderr(&short).contains("found 2"), "{}", stderr(&short));
}
