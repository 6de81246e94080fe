use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use satlm::data::{read_corpus, read_labeled, synth_corpus};
use satlm::metrics::{accuracy, alignment_table, evaluate, masked_perplexity};
use satlm::objectives::StructureMode;
use satlm::syntax::format_induction;
use satlm::training::{finetune, load_checkpoint, log_csv, pretrain, save_checkpoint, TrainConfig};
use satlm::treebank::{load_aligned, AlignedCorpus};
use satlm::{Error, Model, Result};

#[derive(Parser, Debug)]
#[command(name = "satlm", version, about = "Structure-aware Transformer language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train a model on a sentence corpus (masked LM plus structure loss).
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint on `label<TAB>sentence` data.
    Finetune(FinetuneArgs),
    /// Print induced distances and phrases for every sentence.
    Induce(InduceArgs),
    /// Evaluate perplexity and induced structure against gold annotation.
    Eval(EvalArgs),
    /// Dependency-alignment score of every layer and head.
    ProbeDep(ProbeArgs),
    /// Generate a synthetic treebank.
    Synth(SynthArgs),
}

/// Training settings shared by `pretrain` and `finetune`. Flags override
/// `--config`, which overrides the built-in defaults (or, when fine-tuning,
/// the checkpoint's settings).
#[derive(Args, Debug)]
struct TrainFlags {
    /// Configuration file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Structure supervision: unsupervised or supervised [default: unsupervised]
    #[arg(long)]
    mode: Option<StructureMode>,
    /// Segmentation threshold for the active mode [default: 0.5 unsupervised, 0.7 supervised]
    #[arg(long)]
    lambda: Option<f64>,
    /// Structure loss weight during pre-training [default: 0.5]
    #[arg(long)]
    gamma_pre: Option<f64>,
    /// Structure loss weight during fine-tuning [default: 0.23]
    #[arg(long)]
    gamma_fine: Option<f64>,
    /// Middle layer feeding the structure module [default: n_layers / 2]
    #[arg(long)]
    layer: Option<usize>,
    /// Initial context mixing weights, comma separated [default: 0.35,0.40,0.25]
    #[arg(long)]
    alpha_init: Option<String>,
    /// Decoupled weight decay [default: 0.01]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Learning rate [default: 3e-5]
    #[arg(long)]
    lr: Option<f64>,
    /// Extra `key=value` setting; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    overrides: Vec<(String, String)>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// Sentence corpus, one sentence per line
    #[arg(long = "in")]
    input: PathBuf,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
    /// Bracketed constituency trees aligned with the corpus
    #[arg(long)]
    trees: Option<PathBuf>,
    /// CoNLL-X dependencies for the sentences that have trees
    #[arg(long, requires = "trees")]
    deps: Option<PathBuf>,
    /// Held-out corpus whose masked perplexity is reported after every epoch
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Per-step loss log (CSV)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// Pre-trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled data, `label<TAB>sentence` per line
    #[arg(long = "in")]
    input: PathBuf,
    /// Fine-tuned checkpoint to write
    #[arg(long)]
    out: PathBuf,
    /// Labeled held-out data whose accuracy is reported after every epoch
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Per-step loss log (CSV)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InduceArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Sentences, one per line
    #[arg(long = "in")]
    input: PathBuf,
    /// Segmentation threshold [default: the checkpoint's, 0.5 unsupervised or 0.7 supervised]
    #[arg(long)]
    lambda: Option<f64>,
    /// Output file [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Sentences, one per line
    #[arg(long = "in")]
    input: PathBuf,
    /// Bracketed constituency trees aligned with the sentences
    #[arg(long)]
    trees: Option<PathBuf>,
    /// CoNLL-X dependencies for the sentences that have trees
    #[arg(long, requires = "trees")]
    deps: Option<PathBuf>,
    /// Segmentation threshold [default: the checkpoint's, 0.5 unsupervised or 0.7 supervised]
    #[arg(long)]
    lambda: Option<f64>,
    /// Seed of the evaluation masks [default: 0]
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Count only head-to-dependent attention in the alignment score [default: both directions]
    #[arg(long)]
    head_only: bool,
    /// CSV report file; the key=value summary goes to standard output [default: both to standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Sentences, one per line
    #[arg(long = "in")]
    input: PathBuf,
    /// Bracketed constituency trees aligned with the sentences
    #[arg(long)]
    trees: PathBuf,
    /// CoNLL-X dependencies for the sentences that have trees
    #[arg(long)]
    deps: PathBuf,
    /// Count only head-to-dependent attention [default: both directions]
    #[arg(long)]
    head_only: bool,
    /// Output CSV [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Grammar sampling seed [default: 0]
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of sentences [default: 2000]
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// File name stem [default: synth]
    #[arg(long, default_value = "synth")]
    stem: String,
    /// Also write `label<TAB>sentence` data for the verb-phrase PP task
    #[arg(long)]
    with_labels: bool,
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

impl TrainFlags {
    /// Layers config file and flags over `base`.
    fn resolve(&self, mut cfg: TrainConfig) -> Result<TrainConfig> {
        if let Some(path) = &self.config {
            cfg.apply_text(&fs::read_to_string(path).map_err(|e| io_error(path, e))?)?;
        }
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(g) = self.gamma_pre {
            cfg.gamma_pre = g;
        }
        if let Some(g) = self.gamma_fine {
            cfg.gamma_fine = g;
        }
        if let Some(l) = self.layer {
            cfg.structure_layer = Some(l);
        }
        if let Some(a) = &self.alpha_init {
            cfg.set("alpha_init", a)?;
        }
        if let Some(w) = self.weight_decay {
            cfg.weight_decay = w;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(l) = self.lambda {
            match cfg.mode {
                StructureMode::Unsupervised => cfg.lambda_unsup = l,
                StructureMode::Supervised => cfg.lambda_sup = l,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| io_error(path, e))
}

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn load_corpus(input: &Path, trees: Option<&Path>, deps: Option<&Path>, cfg: &TrainConfig) -> Result<AlignedCorpus> {
    load_aligned(input, trees, deps, cfg.gold_mode)
}

fn run_pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = args.train.resolve(TrainConfig::default())?;
    let corpus = load_corpus(&args.input, args.trees.as_deref(), args.deps.as_deref(), &cfg)?;
    let gold = args.trees.as_ref().map(|_| corpus.gold.as_slice());
    let heldout = args.heldout.as_deref().map(read_corpus).transpose()?;
    let (model, report) = pretrain::<f64>(&corpus.sentences, gold, &cfg, &mut |epoch, m| {
        if let Some(h) = &heldout {
            info!("epoch {epoch}: held-out masked perplexity {}", masked_perplexity(m, h, cfg.seed)?);
        }
        save_checkpoint(m, &args.out)
    })?;
    save_checkpoint(&model, &args.out)?;
    if let Some(p) = &args.log {
        write_file(p, &log_csv(&report.log))?;
    }
    info!(
        "{} steps; skipped {} empty, {} without trees; {} truncated; {} steps without structure loss",
        report.log.len(),
        report.skipped_empty,
        report.skipped_missing_tree,
        report.truncated,
        report.structure_skipped
    );
    Ok(())
}

fn run_finetune(args: &FinetuneArgs) -> Result<()> {
    let mut model: Model = load_checkpoint(&args.ckpt)?;
    let mut base = model.config.clone();
    base.mode = StructureMode::Unsupervised;
    let cfg = args.train.resolve(base)?;
    if cfg.encoder_config(model.vocab().len()) != *model.encoder_config() {
        return Err(Error::Config("fine-tuning cannot change the encoder architecture".into()));
    }
    model.config = cfg;
    let data = read_labeled(&args.input)?;
    let heldout = args.heldout.as_deref().map(read_labeled).transpose()?;
    let report = finetune(&mut model, &data, false, &mut |epoch, m| {
        if let Some(h) = &heldout {
            info!("fine-tune epoch {epoch}: held-out accuracy {}", accuracy(m, h)?);
        }
        save_checkpoint(m, &args.out)
    })?;
    save_checkpoint(&model, &args.out)?;
    if let Some(p) = &args.log {
        write_file(p, &log_csv(&report.log))?;
    }
    Ok(())
}

fn run_induce(args: &InduceArgs) -> Result<()> {
    let model: Model = load_checkpoint(&args.ckpt)?;
    let lambda = args.lambda.unwrap_or_else(|| model.config.lambda());
    let mut out = String::new();
    for tokens in read_corpus(&args.input)? {
        if tokens.is_empty() {
            out.push('\n');
            continue;
        }
        let (d, seg) = model.induce(&tokens, lambda)?;
        let shown = &tokens[..d.len()];
        let _ = writeln!(out, "{}", format_induction(shown, &d, &seg.spans));
    }
    emit(args.out.as_deref(), &out)
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let model: Model = load_checkpoint(&args.ckpt)?;
    let lambda = args.lambda.unwrap_or_else(|| model.config.lambda());
    let corpus = load_corpus(&args.input, args.trees.as_deref(), args.deps.as_deref(), &model.config)?;
    let report = evaluate(&model, &corpus, lambda, args.seed, !args.head_only)?;
    match &args.out {
        Some(p) => {
            write_file(p, &report.to_csv())?;
            print!("{}", report.summary());
        }
        None => print!("{}\n# summary\n{}", report.to_csv(), report.summary()),
    }
    Ok(())
}

fn run_probe(args: &ProbeArgs) -> Result<()> {
    let model: Model = load_checkpoint(&args.ckpt)?;
    let corpus = load_corpus(&args.input, Some(&args.trees), Some(&args.deps), &model.config)?;
    let max_len = model.encoder_config().max_len;
    let mut acts = Vec::new();
    let mut deps = Vec::new();
    for (tokens, gold) in corpus.sentences.iter().zip(&corpus.gold) {
        let Some(dep) = gold.as_ref().and_then(|g| g.dependency.as_ref()) else {
            continue;
        };
        if tokens.len() > max_len {
            continue;
        }
        acts.push(model.activations(tokens)?);
        deps.push(dep);
    }
    let table = alignment_table(&acts, &deps, !args.head_only)?;
    let mut out = String::from("# layers\nlayer,dep_align\n");
    for (l, m) in table.layer_means().iter().enumerate() {
        let _ = writeln!(out, "{},{m}", l + 1);
    }
    let _ = write!(out, "\n# heads\n{}", table.to_csv());
    emit(args.out.as_deref(), &out)
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let corpus = synth_corpus(args.seed, args.n)?;
    let files = corpus.write(&args.out, &args.stem, args.with_labels)?;
    println!("{}", files.sentences.display());
    println!("{}", files.trees.display());
    println!("{}", files.deps.display());
    if let Some(l) = files.labels {
        println!("{}", l.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain(a) => run_pretrain(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Induce(a) => run_induce(a),
        Command::Eval(a) => run_eval(a),
        Command::ProbeDep(a) => run_probe(a),
        Command::Synth(a) => run_synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
