//! `emfr`: every stage of the pipeline as a subcommand.
//!
//! Exit status is 0 on success, 1 on a runtime error and 2 on a usage
//! error. Logging goes to stderr; `-v` raises the level, as does the
//! `EMFR_LOG` variable.

mod overrides;

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use emfr_core::bpe::{self, BpeModel};
use emfr_core::carbon;
use emfr_core::corpus::{self, MetadataTable, SourceFile};
use emfr_core::mlm::{self, PretrainConfig};
use emfr_core::normalize::{default_rules, RuleSet};
use emfr_core::tagger::{self, FinetuneConfig, TagSet, TaggedDocument, TaggedSentence, Tagger};
use emfr_core::{EncoderModel, TokenSequence};

#[derive(Debug, Parser)]
#[command(name = "emfr", version, about = "Early Modern French language-model toolkit")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker threads for parallel stages; 1 runs serially.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Seed overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a corpus directory from source files and a metadata table.
    Ingest(IngestArgs),
    /// Split a corpus into its distributable part and withheld ids.
    Partition(PartitionArgs),
    /// Token counts per source and the per-year document histogram.
    Stats(StatsArgs),
    /// Apply graphemic normalization rules to a corpus.
    Normalize(NormalizeArgs),
    /// Train a byte-level BPE model on a corpus.
    BpeTrain(BpeTrainArgs),
    /// Encode text lines to token ids.
    BpeEncode(BpeEncodeArgs),
    /// Decode token-id lines to text.
    BpeDecode(BpeDecodeArgs),
    /// Masked-language-model pretraining.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained encoder as a POS tagger.
    Finetune(FinetuneArgs),
    /// Tag sentences with a fine-tuned tagger.
    Tag(TagArgs),
    /// Stratified accuracy report against a gold tagged corpus.
    Eval(EvalArgs),
    /// Energy and emissions table for hardware profiles.
    Carbon(CarbonArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Metadata table with a header row; one row per source file.
    #[arg(long)]
    meta: PathBuf,
    /// Field delimiter of the metadata table.
    #[arg(long, default_value = "\t")]
    delimiter: char,
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Destination of the distributable corpus [default: <in>/distributable].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Histogram bin width in years.
    #[arg(long, default_value_t = 10)]
    hist_width: u32,
}

#[derive(Debug, Args)]
struct NormalizeArgs {
    /// Rule file [default: built-in rules].
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also rewrite documents whose licence forbids modification.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct BpeTrainArgs {
    #[arg(long)]
    vocab_size: usize,
    /// Corpus directory.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BpeEncodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Text file, one sequence per line [default: stdin].
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Omit the <s> and </s> frame.
    #[arg(long)]
    bare: bool,
}

#[derive(Debug, Args)]
struct BpeDecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Whitespace-separated ids, one sequence per line [default: stdin].
    #[arg(long = "in")]
    input: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// TOML config [default: built-in toy settings].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory whose bodies form the training text.
    #[arg(long)]
    corpus: PathBuf,
    /// BPE model directory; its size fixes the model vocabulary.
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Config override `dotted.key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Encoder checkpoint directory.
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Tagged training corpus.
    #[arg(long)]
    train: PathBuf,
    /// Tagged development corpus.
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Args)]
struct TagArgs {
    /// Fine-tuned tagger directory.
    #[arg(long)]
    model: PathBuf,
    /// Tagged corpus, or plain text with one whitespace-tokenized sentence
    /// per line.
    #[arg(long = "in")]
    input: PathBuf,
    /// Tagged output [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Gold tagged corpus with `state`, `genre` and `year` or `century`
    /// headers per document.
    #[arg(long)]
    gold: PathBuf,
    /// Report directory (report.txt and report.tsv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TableFormat {
    Table,
    Tsv,
    Both,
}

#[derive(Debug, Args)]
struct CarbonArgs {
    /// Profile file with one or more `[[profile]]` tables.
    #[arg(long, required = true)]
    profile: Vec<PathBuf>,
    /// kg CO2e per kWh [default: the file's value, else 0.030].
    #[arg(long)]
    emission_factor: Option<f64>,
    #[arg(long, value_enum, default_value_t = TableFormat::Table)]
    format: TableFormat,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EMFR_LOG", level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        ensure!(n >= 1, "--jobs must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Partition(a) => partition(a),
        Command::Stats(a) => stats(a),
        Command::Normalize(a) => normalize(a),
        Command::BpeTrain(a) => bpe_train(a),
        Command::BpeEncode(a) => bpe_encode(a),
        Command::BpeDecode(a) => bpe_decode(a),
        Command::Pretrain(a) => pretrain(a, seed),
        Command::Finetune(a) => finetune(a, seed),
        Command::Tag(a) => tag(a),
        Command::Eval(a) => eval(a),
        Command::Carbon(a) => carbon_cmd(a),
    }
}

fn require_file(p: &Path) -> Result<()> {
    ensure!(p.is_file(), "{} is not a readable file", p.display());
    Ok(())
}

fn require_dir(p: &Path) -> Result<()> {
    ensure!(p.is_dir(), "{} is not a directory", p.display());
    Ok(())
}

fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ingest(a: IngestArgs) -> Result<()> {
    require_file(&a.meta)?;
    for f in &a.files {
        require_file(f)?;
    }
    let delimiter = u8::try_from(a.delimiter).context("delimiter must be a single ASCII character")?;
    let table = MetadataTable::load(&a.meta, delimiter)?;
    let sources: Vec<SourceFile> = a.files.iter().map(SourceFile::guess).collect();
    let report = corpus::ingest(&sources, &table);
    for f in &report.failures {
        eprintln!("skipped {}: {}", f.path.display(), f.message);
    }
    ensure!(!report.documents.is_empty(), "no document could be ingested");
    corpus::write_corpus_dir(&a.out, &report.documents)?;
    println!(
        "{} documents written, {} files skipped",
        report.documents.len(),
        report.failures.len()
    );
    Ok(())
}

fn partition(a: PartitionArgs) -> Result<()> {
    require_dir(&a.input)?;
    let out = a.out.unwrap_or_else(|| a.input.join("distributable"));
    let docs = corpus::read_corpus_dir(&a.input)?;
    let (open, withheld) = corpus::partition(docs);
    corpus::write_distribution(&out, &open, &withheld)?;
    println!("{} distributable, {} withheld", open.len(), withheld.len());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    require_dir(&a.input)?;
    let docs = corpus::read_corpus_dir(&a.input)?;
    let st = corpus::stats(&docs);
    println!("documents\t{}", docs.len());
    println!("tokens\t{}", st.total_tokens);
    print!("{}", st.render_origins());
    if st.dated_documents() > 0 {
        println!();
        print!("{}", corpus::emit_histogram(&st, a.hist_width)?.render());
    }
    Ok(())
}

fn normalize(a: NormalizeArgs) -> Result<()> {
    require_dir(&a.input)?;
    let rules = match &a.rules {
        Some(p) => {
            require_file(p)?;
            RuleSet::load(p)?
        }
        None => default_rules(),
    };
    let mut docs = corpus::read_corpus_dir(&a.input)?;
    corpus::normalize_documents(&mut docs, &rules, a.force)?;
    corpus::write_corpus_dir(&a.out, &docs)?;
    println!("{} documents normalized", docs.len());
    Ok(())
}

fn bpe_train(a: BpeTrainArgs) -> Result<()> {
    require_dir(&a.input)?;
    let docs = corpus::read_corpus_dir(&a.input)?;
    let model = bpe::train_bpe(docs.iter().map(|d| d.body.as_str()), a.vocab_size)?;
    model.save(&a.out)?;
    println!("vocabulary of {} written to {}", model.vocab_size(), a.out.display());
    Ok(())
}

fn bpe_encode(a: BpeEncodeArgs) -> Result<()> {
    require_dir(&a.model)?;
    let model = BpeModel::load(&a.model)?;
    let text = read_input(a.input.as_deref())?;
    let mut out = io::stdout().lock();
    for line in text.lines() {
        let ids = if a.bare {
            model.encode_bytes(line.as_bytes())
        } else {
            model.encode(line).ids
        };
        let strs: Vec<String> = ids.iter().map(u32::to_string).collect();
        writeln!(out, "{}", strs.join(" "))?;
    }
    Ok(())
}

fn bpe_decode(a: BpeDecodeArgs) -> Result<()> {
    require_dir(&a.model)?;
    let model = BpeModel::load(&a.model)?;
    let text = read_input(a.input.as_deref())?;
    let mut out = io::stdout().lock();
    for (n, line) in text.lines().enumerate() {
        let ids = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<Vec<u32>, _>>()
            .with_context(|| format!("line {}: expected token ids", n + 1))?;
        let keep: Vec<u32> = ids.into_iter().filter(|&id| !bpe::is_special(id)).collect();
        writeln!(out, "{}", model.decode(&keep)?)?;
    }
    Ok(())
}

fn pretrain(a: PretrainArgs, seed: Option<u64>) -> Result<()> {
    require_dir(&a.corpus)?;
    require_dir(&a.tokenizer)?;
    if let Some(c) = &a.config {
        require_file(c)?;
    }
    if let Some(r) = &a.resume {
        require_dir(r)?;
    }
    let bpe = BpeModel::load(&a.tokenizer)?;
    let mut config: PretrainConfig = overrides::load(a.config.as_deref(), &a.sets)?;
    config.model.vocab_size = bpe.vocab_size();
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;

    let docs = corpus::read_corpus_dir(&a.corpus)?;
    let encoded: Vec<Vec<u32>> = docs.iter().map(|d| bpe.encode_bytes(d.body.as_bytes())).collect();
    let data: Vec<TokenSequence> = mlm::pack_sequences(&encoded, config.optimizer.max_seq_len)?;
    log::info!("{} documents packed into {} sequences", docs.len(), data.len());

    bpe.save(&a.out.join("tokenizer"))?;
    let trainer = mlm::pretrain::<f32>(config, data, &a.out, a.resume.as_deref())?;
    println!(
        "{} steps, running loss {:.4}, final checkpoint in {}",
        trainer.state.step,
        trainer.state.running_loss,
        a.out.join(mlm::FINAL_DIR).display()
    );
    Ok(())
}

fn read_tagged(path: &Path) -> Result<Vec<TaggedDocument>> {
    require_file(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    tagger::parse_tagged(&text).with_context(|| format!("parsing {}", path.display()))
}

fn finetune(a: FinetuneArgs, seed: Option<u64>) -> Result<()> {
    require_dir(&a.encoder)?;
    require_dir(&a.tokenizer)?;
    let train = tagger::sentences_of(&read_tagged(&a.train)?);
    let dev = tagger::sentences_of(&read_tagged(&a.dev)?);
    if let Some(c) = &a.config {
        require_file(c)?;
    }
    let mut cfg: FinetuneConfig = overrides::load(a.config.as_deref(), &a.sets)?;
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.validate()?;

    let encoder = EncoderModel::<f32>::load(&a.encoder)?;
    let bpe = BpeModel::load(&a.tokenizer)?;
    let tagset = TagSet::from_sentences(&train);
    tagset.check(&dev).context("development corpus")?;
    let model = Tagger::new(encoder, bpe, tagset, cfg.head.clone(), cfg.seed)?;
    let outcome = tagger::finetune(model, &train, &dev, &cfg)?;
    outcome.tagger.save(&a.out)?;

    let mut trace = String::from("epoch\tdev_accuracy\n");
    for (i, acc) in outcome.dev_trace.iter().enumerate() {
        trace.push_str(&format!("{}\t{acc:.6}\n", i + 1));
    }
    write_file(&a.out.join("dev_trace.tsv"), &trace)?;
    println!(
        "best dev accuracy {:.4} at epoch {}",
        outcome.dev_trace[outcome.best_epoch - 1],
        outcome.best_epoch
    );
    Ok(())
}

/// Tagged files keep their documents; plain text becomes one document.
fn read_sentences(path: &Path) -> Result<Vec<TaggedDocument>> {
    require_file(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.contains('\t') {
        return tagger::parse_tagged(&text).with_context(|| format!("parsing {}", path.display()));
    }
    let sentences = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| TaggedSentence {
            tokens: l.split_whitespace().map(String::from).collect(),
            gold_tags: Vec::new(),
        })
        .collect();
    Ok(vec![TaggedDocument {
        meta: Default::default(),
        sentences,
    }])
}

fn tag(a: TagArgs) -> Result<()> {
    require_dir(&a.model)?;
    let model = Tagger::<f32>::load(&a.model)?;
    let mut docs = read_sentences(&a.input)?;
    for d in &mut docs {
        let tokens: Vec<Vec<String>> = d.sentences.iter().map(|s| s.tokens.clone()).collect();
        for (s, tags) in d.sentences.iter_mut().zip(model.tag(&tokens)?) {
            s.gold_tags = tags;
        }
    }
    let text = tagger::render_tagged(&docs);
    match &a.out {
        Some(p) => write_file(p, &text),
        None => Ok(io::stdout().write_all(text.as_bytes())?),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    require_dir(&a.model)?;
    let gold = read_tagged(&a.gold)?;
    let model = Tagger::<f32>::load(&a.model)?;
    let report = tagger::evaluate(&gold, &model)?;
    if report.outside_grid > 0 {
        log::warn!("{} tokens fall outside centuries 16 to 20", report.outside_grid);
    }
    let grid = report.render_grid();
    write_file(&a.out.join("report.txt"), &grid)?;
    write_file(&a.out.join("report.tsv"), &report.render_tsv())?;
    print!("{grid}");
    Ok(())
}

fn carbon_cmd(a: CarbonArgs) -> Result<()> {
    let mut profiles = Vec::new();
    let mut file_factor = None;
    for p in &a.profile {
        require_file(p)?;
        let (mut ps, f) = carbon::load_profiles(p)?;
        if let (Some(prev), Some(new)) = (file_factor, f) {
            if prev != new {
                bail!("profile files disagree on the emission factor ({prev} vs {new})");
            }
        }
        file_factor = file_factor.or(f);
        profiles.append(&mut ps);
    }
    let factor = a
        .emission_factor
        .or(file_factor)
        .unwrap_or(carbon::DEFAULT_EMISSION_FACTOR);
    let report = carbon::report(&profiles, factor)?;
    match a.format {
        TableFormat::Table => print!("{}", report.render_table()),
        TableFormat::Tsv => print!("{}", report.render_tsv()),
        TableFormat::Both => print!("{}\n{}", report.render_table(), report.render_tsv()),
    }
    Ok(())
}
