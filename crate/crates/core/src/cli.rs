//! The `ctk` command line.
//!
//! Exit status is 0 on success, 1 for usage errors (unknown subcommand, bad
//! flags, invalid config files) and 2 when a pipeline fails at runtime.
//! Every file output is written to a temporary file and renamed into place.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::bpe::{
    blocks_to_text, frame_documents, pack_blocks, parse_blocks, train_bpe, vocab_intersection, TokenizerModel,
    DEFAULT_BLOCK_LEN, DEFAULT_VOCAB_SIZE,
};
use crate::classifier::{
    f1_macro, finetune_observed, mean_ci95, predict, stratified_split, FinetuneConfig, LabeledDataset, SeedResults,
};
use crate::contrastive::{encode_sentences, train_encoder_observed, ContrastiveConfig, ContrastiveDataset, Objective, SentenceEncoder};
use crate::encoder::{init_params, load_checkpoint, EncoderConfig};
use crate::evalsuite::{matrix_to_tsv, metric_report, parse_matrix_tsv, timing_bench, LabeledEmbeddings, SelfPairs};
use crate::mlm::{pretrain_from, PretrainConfig};
use crate::pooling::PoolingStrategy;
use crate::textprep::{corpus_stats_parallel, passes_length_filter, preprocess_tweet, RawTweet, DEFAULT_MIN_TOKENS};
use crate::util::write_atomic;

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "CT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ctk", version, about = "Crisis-tweet encoder toolkit")]
pub struct Cli {
    /// Seed for every random choice; overrides the seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize raw tweets (one per line) and drop short ones.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep tweets with more than this many tokens.
        #[arg(long, default_value_t = DEFAULT_MIN_TOKENS)]
        min_tokens: usize,
    },
    /// Token, sentence and unique-token counts of a corpus as JSON.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train a byte-level BPE tokenizer; writes vocab.json and merges.txt.
    TrainTokenizer {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
        vocab_size: usize,
    },
    /// Tokenize a corpus, frame each line as one document and cut blocks.
    Pack {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BLOCK_LEN)]
        block_len: usize,
    },
    /// Masked-language-model pre-training from packed blocks.
    Pretrain(PretrainArgs),
    /// Contrastive sentence-encoder training on a pair or triplet TSV.
    TrainEncoder(TrainEncoderArgs),
    /// Classification fine-tuning with a 70/10/20 stratified split.
    Finetune(FinetuneArgs),
    /// D_avg of labeled embeddings, from TSV files or computed by a model.
    EvaluateDavg(EvaluateArgs),
    /// Time tokenization and embedding generation per text.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// One text per line.
        #[arg(long)]
        texts: PathBuf,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
    },
    /// Compare the vocabularies of two tokenizers.
    VocabDiff {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

/// Where a sentence encoder comes from: a saved encoder or classifier
/// directory, or a bare checkpoint plus tokenizer.
#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, conflicts_with = "checkpoint")]
    model: Option<PathBuf>,
    #[arg(long, requires = "tokenizer")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// mean, cls, max or mean-noattn.
    #[arg(long)]
    pooling: Option<PoolingStrategy>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Packed blocks from `pack`.
    #[arg(long)]
    blocks: PathBuf,
    /// Validation blocks; defaults to the tail of `--blocks`.
    #[arg(long)]
    val_blocks: Option<PathBuf>,
    /// Fraction of `--blocks` held out when `--val-blocks` is absent.
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    /// JSON training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON architecture config.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Checkpoint directory; overrides `checkpoint_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    accumulation_steps: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    mask_prob: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainEncoderArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// mnr or mnr-hard; inferred from the number of TSV columns if absent.
    #[arg(long, value_parser = parse_objective)]
    objective: Option<Objective>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// TSV `text<TAB>label` with a header row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seeds, one run each; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
    /// Dataset name in the results file; defaults to the file stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// TSV of reals, one embedding per row.
    #[arg(long, requires = "labels", conflicts_with_all = ["model", "checkpoint", "data"])]
    embeddings: Option<PathBuf>,
    /// One label per line, aligned with `--embeddings`.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Labeled TSV with a header row, embedded with the model.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write the model's embeddings as TSV.
    #[arg(long, requires = "data")]
    write_embeddings: Option<PathBuf>,
    /// Count each member's similarity with itself in d_k.
    #[arg(long)]
    include_self: bool,
}

/// A problem with how the command was invoked rather than with its data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    match s {
        "mnr" => Ok(Objective::Mnr),
        "mnr-hard" => Ok(Objective::MnrHard),
        _ => Err(format!("unknown objective {s:?} (expected mnr or mnr-hard)")),
    }
}

/// Parses argv, runs the subcommand and maps the outcome to an exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|()| execute(cli)) {
        Ok(()) => 0,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n\nRun `ctk --help` for usage.");
            1
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a pool configured earlier in this process stays in effect
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn emit(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.trim().is_empty())
}

/// Loads `T` from a JSON file, rejecting keys `T` does not know. Missing
/// keys take their defaults.
fn load_config<T: DeserializeOwned + Serialize + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let raw: Value = serde_json::from_str(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let parsed: T = serde_json::from_value(raw.clone()).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let known: BTreeSet<String> = match serde_json::to_value(&parsed)? {
        Value::Object(m) => m.into_iter().map(|(k, _)| k).collect(),
        _ => BTreeSet::new(),
    };
    if let Value::Object(m) = &raw {
        if let Some(k) = m.keys().find(|k| !known.contains(*k)) {
            return Err(usage(format!("{}: unknown field {k:?}", path.display())));
        }
    }
    Ok(parsed)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ModelArgs {
    fn is_set(&self) -> bool {
        self.model.is_some() || self.checkpoint.is_some()
    }

    fn load(&self) -> Result<SentenceEncoder> {
        let mut enc = match (&self.model, &self.checkpoint, &self.tokenizer) {
            (Some(dir), _, _) => {
                SentenceEncoder::load(dir).with_context(|| format!("loading model from {}", dir.display()))?
            }
            (None, Some(ckpt), Some(tok)) => SentenceEncoder::new(
                load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?,
                TokenizerModel::load(tok).with_context(|| format!("loading tokenizer from {}", tok.display()))?,
                PoolingStrategy::default(),
            )?,
            _ => return Err(usage("pass --model DIR, or --checkpoint FILE with --tokenizer DIR")),
        };
        set(&mut enc.pooling, self.pooling);
        Ok(enc)
    }
}

fn execute(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Preprocess { input, out, min_tokens } => {
            let text = read(&input)?;
            let (mut total, mut kept) = (0usize, Vec::new());
            for line in text.lines() {
                total += 1;
                let clean = preprocess_tweet(&RawTweet::from_corpus_line(line));
                if passes_length_filter(&clean, min_tokens) {
                    kept.push(clean.into_string());
                }
            }
            let mut body = kept.join("\n");
            if !body.is_empty() {
                body.push('\n');
            }
            write(&out, &body)?;
            eprintln!("kept {} of {total} tweets", kept.len());
            Ok(())
        }
        Command::Stats { input } => {
            let text = read(&input)?;
            let docs: Vec<&str> = text.lines().collect();
            emit(&corpus_stats_parallel(&docs))
        }
        Command::TrainTokenizer { input, out, vocab_size } => {
            let text = read(&input)?;
            let model = train_bpe(lines(&text), vocab_size)?;
            model.save(&out)?;
            emit(&json!({ "vocab_size": model.vocab_size(), "merges": model.num_merges() }))
        }
        Command::Pack { input, tokenizer, out, block_len } => {
            if block_len < 2 {
                return Err(usage("--block-len must be at least 2"));
            }
            let tok = TokenizerModel::load(&tokenizer)?;
            let text = read(&input)?;
            let docs: Vec<&str> = lines(&text).collect();
            let encoded: Vec<Vec<u32>> = docs.par_iter().map(|d| tok.encode(d)).collect();
            let tokens: usize = encoded.iter().map(|d| d.len() + 2).sum();
            let packed = pack_blocks(frame_documents(encoded), block_len);
            write(&out, &blocks_to_text(&packed.blocks))?;
            emit(&json!({ "blocks": packed.blocks.len(), "dropped": packed.dropped, "tokens": tokens }))
        }
        Command::Pretrain(a) => pretrain_cmd(a, seed),
        Command::TrainEncoder(a) => train_encoder_cmd(a, seed),
        Command::Finetune(a) => finetune_cmd(a, seed),
        Command::EvaluateDavg(a) => evaluate_cmd(a),
        Command::Bench { model, texts, repetitions } => {
            if repetitions == 0 {
                return Err(usage("--repetitions must be positive"));
            }
            let enc = model.load()?;
            let text = read(&texts)?;
            let texts: Vec<&str> = lines(&text).collect();
            emit(&timing_bench(&enc, &texts, repetitions)?)
        }
        Command::VocabDiff { a, b } => {
            let (ta, tb) = (TokenizerModel::load(&a)?, TokenizerModel::load(&b)?);
            let ab = vocab_intersection(&ta, &tb);
            let ba = vocab_intersection(&tb, &ta);
            emit(&json!({
                "a_vocab_size": ta.vocab_size(),
                "b_vocab_size": tb.vocab_size(),
                "intersection": ab.intersection,
                "unique_in_a": ab.unique_in_a,
                "unique_in_b": ba.unique_in_a,
            }))
        }
    }
}

fn pretrain_cmd(a: PretrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: PretrainConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.seed, seed);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.micro_batch, a.micro_batch);
    set(&mut cfg.accumulation_steps, a.accumulation_steps);
    set(&mut cfg.peak_lr, a.peak_lr);
    set(&mut cfg.mask_prob, a.mask_prob);
    if a.out.is_some() {
        cfg.checkpoint_dir = a.out;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let dir = cfg
        .checkpoint_dir
        .clone()
        .ok_or_else(|| usage("pass --out DIR or set checkpoint_dir in the config"))?;
    let mut model: EncoderConfig = load_config(a.model_config.as_deref())?;
    set(&mut model.vocab_size, a.vocab_size);
    model.validate().map_err(|e| usage(e.to_string()))?;

    let blocks = parse_blocks(&read(&a.blocks)?)?;
    let (train, val) = match &a.val_blocks {
        Some(p) => (blocks, parse_blocks(&read(p)?)?),
        None => {
            if !(a.val_frac > 0.0 && a.val_frac < 1.0) {
                return Err(usage("--val-frac must lie in (0, 1)"));
            }
            let n_val = ((blocks.len() as f64 * a.val_frac).round() as usize).max(1);
            if n_val >= blocks.len() {
                bail!("{} blocks are too few to hold out a validation set", blocks.len());
            }
            let mut train = blocks;
            let val = train.split_off(train.len() - n_val);
            (train, val)
        }
    };
    let params = init_params(&model, cfg.seed)?;
    let set_ = pretrain_from(params, &train, &val, &cfg, |epoch, loss| {
        eprintln!("epoch {epoch}: val_loss {loss:.4}");
    })?;
    set_.save(&dir)?;
    emit(&json!({
        "initial_loss": set_.initial_loss,
        "final_loss": set_.complete.val_loss,
        "best_loss": set_.best_loss.val_loss,
        "best_epoch": set_.best_loss.epoch,
        "checkpoint_dir": dir,
    }))
}

fn train_encoder_cmd(a: TrainEncoderArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: ContrastiveConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.seed, seed);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.temperature, a.temperature);
    let data = ContrastiveDataset::load_tsv(&a.data)?;
    let objective = a.objective.unwrap_or(match data {
        ContrastiveDataset::Pairs(_) => Objective::Mnr,
        ContrastiveDataset::Triplets(_) => Objective::MnrHard,
    });
    let enc = a.model.load()?;
    let mut last = f64::NAN;
    let enc = train_encoder_observed(enc, &data, objective, &cfg, |epoch, loss| {
        eprintln!("epoch {epoch}: train_loss {loss:.4}");
        last = loss;
    })?;
    enc.save(&a.out)?;
    emit(&json!({ "objective": objective, "examples": data.len(), "epochs": cfg.epochs, "final_train_loss": last }))
}

fn finetune_cmd(a: FinetuneArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: FinetuneConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.seed, seed);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.early_stop.max_epochs, a.max_epochs);
    set(&mut cfg.early_stop.patience, a.patience);
    set(&mut cfg.early_stop.threshold, a.threshold);
    cfg.early_stop.validate().map_err(|e| usage(e.to_string()))?;
    set(&mut cfg.pooling, a.model.pooling);
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
    let data = LabeledDataset::load_tsv(&a.data)?;
    let enc = a.model.load()?;
    let (train, val, test) = stratified_split(&data, (0.7, 0.1, 0.2), a.split_seed)?;
    if test.is_empty() {
        bail!("the test split is empty");
    }
    let runs = seeds
        .par_iter()
        .map(|&s| {
            let run_cfg = FinetuneConfig { seed: s, ..cfg.clone() };
            let out = finetune_observed(enc.clone(), data.class_names().to_vec(), &train, &val, &run_cfg, |r| {
                eprintln!("seed {s} epoch {}: train_loss {:.4} val_f1 {:.4}", r.epoch, r.train_loss, r.val_f1)
            })?;
            let f1 = f1_macro(&test.labels, &predict(&out.classifier, &test.texts)?, data.num_classes())?;
            Ok((s, f1, out))
        })
        .collect::<Result<Vec<_>>>()?;
    for (s, _, out) in &runs {
        out.classifier.save(&a.out.join(format!("seed-{s}")))?;
        let history = serde_json::to_string_pretty(&out.history)? + "\n";
        write(&a.out.join(format!("seed-{s}")).join("history.json"), &history)?;
    }
    let f1_per_seed: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let (mean, ci95) = mean_ci95(&f1_per_seed);
    let name = a
        .name
        .or_else(|| a.data.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_default();
    let results = SeedResults { dataset: name, seeds, f1_per_seed, mean, ci95 };
    write(&a.out.join("results.json"), &(serde_json::to_string_pretty(&results)? + "\n"))?;
    emit(&results)
}

/// Integer labels are class ids; anything else is a class name, with ids
/// in sorted name order.
fn parse_labels(text: &str) -> (Vec<usize>, usize) {
    let raw: Vec<&str> = lines(text).map(str::trim).collect();
    if let Ok(ids) = raw.iter().map(|s| s.parse::<usize>()).collect::<Result<Vec<_>, _>>() {
        let k = ids.iter().max().map_or(0, |m| m + 1);
        return (ids, k);
    }
    let names: Vec<&str> = raw.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let ids = raw.iter().map(|s| names.binary_search(s).expect("collected")).collect();
    (ids, names.len())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let self_pairs = if a.include_self { SelfPairs::Include } else { SelfPairs::Exclude };
    let labeled = match (&a.embeddings, &a.labels, &a.data) {
        (Some(e), Some(l), None) => {
            let e = parse_matrix_tsv(&read(e)?)?;
            let (y, k) = parse_labels(&read(l)?);
            LabeledEmbeddings::normalized(&e.view(), y, k)?
        }
        (None, None, Some(d)) if a.model.is_set() => {
            let data = LabeledDataset::load_tsv(d)?;
            let enc = a.model.load()?;
            let e = encode_sentences(&enc, data.texts())?;
            if let Some(p) = &a.write_embeddings {
                write(p, &matrix_to_tsv(&e.view()))?;
            }
            LabeledEmbeddings::new(e, data.labels().to_vec(), data.num_classes())?
        }
        _ => return Err(usage("pass --embeddings with --labels, or a model with --data")),
    };
    emit(&metric_report(&labeled, self_pairs)?)
}
