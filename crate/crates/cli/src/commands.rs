use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cats_core::data::{parse_choi, parse_jsonl, write_choi, write_jsonl, Document};
use cats_core::embeddings::{load_dictionary, load_embeddings_text, procrustes_align, EmbeddingTable};
use cats_core::model::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Network};
use cats_core::pipeline::{
    evaluate, infer_with, random_baseline, synth_corpus, train_with, SynthSpec,
};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::settings::{echo, Overrides};
use crate::UsageError;

#[derive(Parser, Debug)]
#[command(name = "cats", version, about = "Coherence-aware text segmentation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a JSONL corpus
    Train(TrainArgs),
    /// Segment documents with a trained checkpoint
    Segment(SegmentArgs),
    /// Score a segmentation (or the random baseline) with Pk
    Evaluate(EvaluateArgs),
    /// Project target-language embeddings into the source space
    Align(AlignArgs),
    /// Generate a synthetic topic corpus and matching embeddings
    Synth(SynthArgs),
    /// Convert between Choi-format files and JSONL
    Convert(ConvertArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Output directory for checkpoint, log and manifest
    #[arg(long)]
    out: PathBuf,
    /// Flat key = value file; flags take precedence over it
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Jsonl,
    Choi,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL corpus, or a Choi file or directory of Choi files
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: Format,
    /// Overrides the threshold stored in the checkpoint
    #[arg(long)]
    tau: Option<f64>,
    /// Defaults to the embeddings recorded in the checkpoint
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Random,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["hypothesis", "baseline"])))]
struct EvaluateArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: Format,
    /// JSONL lines with doc_id (or id) and boundaries
    #[arg(long)]
    hypothesis: Option<PathBuf>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the dataset-level k
    #[arg(long)]
    k: Option<usize>,
    /// Report path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[arg(long)]
    source_emb: PathBuf,
    #[arg(long)]
    target_emb: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_corpus: PathBuf,
    #[arg(long)]
    out_embeddings: PathBuf,
    #[arg(long, default_value_t = 50)]
    docs: usize,
    #[arg(long, default_value_t = 4)]
    topics: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    /// A JSONL file, or a directory receiving one Choi file per document
    #[arg(long)]
    output: PathBuf,
    /// Format to write
    #[arg(long, value_enum)]
    to: Format,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Segment(a) => segment(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Align(a) => align(a),
        Command::Synth(a) => synth(a),
        Command::Convert(a) => convert(a),
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn load_table(path: &Path) -> Result<EmbeddingTable> {
    load_embeddings_text(path).with_context(|| format!("loading embeddings {}", path.display()))
}

fn load_documents(path: &Path, format: Format) -> Result<Vec<Document>> {
    match format {
        Format::Jsonl => {
            let corpus = parse_jsonl(path)?;
            if corpus.coerced > 0 {
                log::warn!("{}: first boundary set to 1 in {} documents", path.display(), corpus.coerced);
            }
            Ok(corpus.documents)
        }
        Format::Choi if path.is_dir() => {
            let mut files: Vec<PathBuf> = fs::read_dir(path)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|p| p.is_file());
            files.sort();
            files.iter().map(|f| Ok(parse_choi(f)?)).collect()
        }
        Format::Choi => Ok(vec![parse_choi(path)?]),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => Overrides::parse_file(p)?,
        None => Overrides::default(),
    };
    let table = load_table(&a.embeddings)?;
    let (config, settings) = a.overrides.over(&file).resolve(table.dim())?;
    let corpus = load_documents(&a.corpus, Format::Jsonl)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let embeddings_path = fs::canonicalize(&a.embeddings)?;
    let embeddings_digest = sha256_file(&a.embeddings)?;
    let mut meta = CheckpointMeta::new();
    meta.insert("embeddings".into(), embeddings_path.display().to_string());
    meta.insert("embeddings_sha256".into(), embeddings_digest.clone());
    let checkpoint = |params: &cats_core::model::ModelParams<f32>| Checkpoint {
        config: config.clone(),
        seed: settings.seed,
        params: params.clone(),
        meta: meta.clone(),
    };

    let mut manifest = String::new();
    manifest.push_str(&format!("corpus = {}\n", a.corpus.display()));
    manifest.push_str(&format!("corpus_sha256 = {}\n", sha256_file(&a.corpus)?));
    manifest.push_str(&format!("embeddings = {}\n", embeddings_path.display()));
    manifest.push_str(&format!("embeddings_sha256 = {embeddings_digest}\n"));
    if let Some(p) = &a.config {
        manifest.push_str(&format!("config_file = {}\n", p.display()));
    }
    manifest.push_str(&echo(&config, &settings));
    fs::write(a.out.join("manifest.txt"), &manifest)?;

    let out_dir = a.out.clone();
    let output = train_with(&corpus, &table, &config, &settings, |epoch, params| {
        save_checkpoint(&out_dir.join(format!("checkpoint-epoch-{epoch}.ckpt")), &checkpoint(params))
    })?;
    save_checkpoint(&a.out.join("model.ckpt"), &checkpoint(&output.params))?;
    fs::write(a.out.join("train.log"), output.log.to_string())?;
    Ok(())
}

fn segment(a: SegmentArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let embeddings = match (&a.embeddings, ck.meta.get("embeddings")) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => {
            return Err(UsageError("checkpoint records no embeddings; pass --embeddings".into()).into())
        }
    };
    let table = load_table(&embeddings)?;
    if table.dim() != ck.config.d_e {
        bail!(
            "embedding dimension {} ({}) conflicts with checkpoint d_e {}",
            table.dim(),
            embeddings.display(),
            ck.config.d_e
        );
    }
    let mut config = ck.config.clone();
    if let Some(tau) = a.tau {
        config.tau = tau;
    }
    let net = Network::new(&config, &ck.params, &table)?;
    let docs = load_documents(&a.input, a.format)?;
    let mut out = String::new();
    for doc in &docs {
        let result = infer_with(&net, doc).with_context(|| format!("segmenting {}", doc.id))?;
        out.push_str(&serde_json::to_string(&result)?);
        out.push('\n');
    }
    fs::write(&a.out, out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn read_hypotheses(path: &Path) -> Result<HashMap<String, Vec<u8>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        let id = v
            .get("doc_id")
            .or_else(|| v.get("id"))
            .and_then(|x| x.as_str())
            .ok_or_else(|| anyhow!("{}:{}: missing doc_id", path.display(), n + 1))?;
        let boundaries: Vec<u8> = serde_json::from_value(
            v.get("boundaries")
                .cloned()
                .ok_or_else(|| anyhow!("{}:{}: missing boundaries", path.display(), n + 1))?,
        )
        .with_context(|| format!("{}:{}: boundaries", path.display(), n + 1))?;
        out.insert(id.to_string(), boundaries);
    }
    Ok(out)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let docs = load_documents(&a.reference, a.format)?;
    let dataset = a
        .reference
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (hyps, model, seed) = match (&a.hypothesis, a.baseline) {
        (Some(p), None) => (read_hypotheses(p)?, p.display().to_string(), None),
        (None, Some(Baseline::Random)) => {
            let h = random_baseline(&docs, a.seed);
            let hyps = docs.iter().map(|d| d.id.clone()).zip(h).collect();
            (hyps, "random-baseline".to_string(), Some(a.seed))
        }
        _ => return Err(UsageError("pass exactly one of --hypothesis or --baseline".into()).into()),
    };
    let mut report = evaluate(&dataset, &docs, &hyps, a.k)?;
    report.model = Some(model);
    report.seed = seed;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn align(a: AlignArgs) -> Result<()> {
    let source = load_table(&a.source_emb)?;
    let target = load_table(&a.target_emb)?;
    let dict = load_dictionary(&a.dict)?;
    let w = procrustes_align(&source, &target, &dict)?;
    w.project_table(&target)?.write_text(&a.out)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "pairs_used = {}", w.pairs_used)?;
    writeln!(stdout, "residual = {:e}", w.residual)?;
    writeln!(stdout, "identity_residual = {:e}", w.identity_residual)?;
    writeln!(stdout, "orthogonality_error = {:e}", w.orthogonality_error())?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_docs: a.docs,
        topics: a.topics,
        dim: a.dim,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let (docs, table) = synth_corpus(&spec)?;
    write_jsonl(&a.out_corpus, &docs)?;
    table.write_text(&a.out_embeddings)?;
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    match a.to {
        Format::Jsonl => {
            let docs = load_documents(&a.input, Format::Choi)?;
            write_jsonl(&a.output, &docs)?;
        }
        Format::Choi => {
            let docs = load_documents(&a.input, Format::Jsonl)?;
            fs::create_dir_all(&a.output)?;
            for doc in &docs {
                if doc.id.is_empty() || doc.id.contains(['/', '\\']) || doc.id.starts_with('.') {
                    bail!("document id {:?} is not usable as a file name", doc.id);
                }
                fs::write(a.output.join(format!("{}.txt", doc.id)), write_choi(doc))?;
            }
        }
    }
    Ok(())
}
