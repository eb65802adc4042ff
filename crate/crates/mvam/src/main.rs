//! Command-line front end: synthetic-corpus generation, training,
//! evaluation, prediction, and gradient checking, all driven by one TOML
//! run configuration with dotted-path overrides.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numeric failure (gradient-check failure or diverged training).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mvam::checkpoint::Checkpoint;
use mvam::data::synthetic::generate_synthetic;
use mvam::data::{
    batch_iter_in_order, build_vocab, filter_top_labels, load_pretrained_embeddings, map_corpus,
    read_predictions, read_raw_corpus, truncate_documents, write_corpus, Corpus, LabelIndex,
    Split, Vocabulary, PAD_ID,
};
use mvam::metrics::{evaluate_all, MetricsReport, PredictionSet};
use mvam::model::{Model, ModelConfig};
use mvam::run_config::RunConfig;
use mvam::tensor::grad_check;
use mvam::train::{evaluate_checkpoint, train};
use mvam::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mvam",
    version,
    about = "Multi-view alignment model for multi-label document classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigOpts {
    /// Run configuration file (TOML); every field has a default when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set train.learning_rate=0.05 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides both train.seed and synth.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        config.apply_overrides(&self.set)?;
        if let Some(seed) = self.seed {
            config.train.seed = seed;
            config.synth.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output.dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and vocabulary under the output directory.
    Synth(ConfigOpts),
    /// Train on data.corpus and write the best checkpoint plus a train log.
    Train(ConfigOpts),
    /// Print a metrics record for a checkpoint or a predictions file on one split.
    Eval {
        #[command(flatten)]
        opts: ConfigOpts,
        /// Checkpoint to evaluate (exclusive with --predictions).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Precomputed probability rows to score instead of a model.
        #[arg(long, value_name = "PATH")]
        predictions: Option<PathBuf>,
        /// Corpus file; defaults to data.corpus from the config.
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Precision cutoff (repeatable); defaults to train.eval_ns entries that fit.
        #[arg(long = "n", value_name = "N")]
        n: Vec<usize>,
    },
    /// Print each document's top-scoring labels, optionally with the most-attended token.
    Predict {
        #[command(flatten)]
        opts: ConfigOpts,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Corpus file; defaults to data.corpus from the config.
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Labels reported per document.
        #[arg(long, default_value_t = 5)]
        top: usize,
        /// Append each predicted label's argmax attention position and token.
        #[arg(long)]
        attend: bool,
    },
    /// Compare analytic gradients with central differences on a tiny model.
    Gradcheck(ConfigOpts),
}

fn main() -> ExitCode {
    // Die quietly on SIGPIPE like other line-oriented tools instead of
    // panicking once a downstream consumer closes the pipe.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            report_error(&e);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn report_error(e: &Error) {
    eprintln!("error: {e}");
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument { .. } | Error::ShapeMismatch { .. } => 2,
        Error::Io { .. }
        | Error::Json { .. }
        | Error::MalformedData { .. }
        | Error::Checkpoint { .. }
        | Error::Metrics(_) => 3,
        Error::NonFinite { .. } | Error::FullyMaskedRow { .. } | Error::NonScalarLoss { .. } => 4,
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(opts) => cmd_synth(&opts.resolve()?),
        Command::Train(opts) => cmd_train(&opts.resolve()?),
        Command::Eval {
            opts,
            checkpoint,
            predictions,
            corpus,
            split,
            n,
        } => cmd_eval(&opts.resolve()?, checkpoint, predictions, corpus, split, &n),
        Command::Predict {
            opts,
            checkpoint,
            corpus,
            split,
            top,
            attend,
        } => cmd_predict(&opts.resolve()?, &checkpoint, corpus, split, top, attend),
        Command::Gradcheck(opts) => cmd_gradcheck(&opts.resolve()?),
    }
}

fn ensure_out_dir(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.output.dir).map_err(|e| {
        Error::io(
            format!("creating output directory {}", config.output.dir.display()),
            e,
        )
    })?;
    // The effective configuration, after file + overrides, echoed verbatim.
    fs::write(config.output.dir.join("config.toml"), config.to_toml_string()?)
        .map_err(|e| Error::io("writing config echo", e))
}

fn cmd_synth(config: &RunConfig) -> Result<ExitCode> {
    let (corpus, vocab, labels) = generate_synthetic(&config.synth)?;
    ensure_out_dir(config)?;
    let dir = &config.output.dir;
    write_corpus(&dir.join("corpus.tsv"), &corpus, &vocab, &labels)?;
    vocab.save(&dir.join("vocab.txt"))?;
    println!(
        "wrote {} documents over {} labels to {} (vocabulary of {})",
        corpus.documents.len(),
        labels.len(),
        dir.display(),
        vocab.len()
    );
    Ok(ExitCode::SUCCESS)
}

struct LoadedData {
    corpus: Corpus,
    vocab: Vocabulary,
    labels: LabelIndex,
}

fn load_data(config: &RunConfig, corpus_override: Option<&Path>) -> Result<LoadedData> {
    let path = corpus_override
        .or(config.data.corpus.as_deref())
        .ok_or_else(|| {
            Error::Config("data.corpus is required (set it in the config or pass --corpus)".into())
        })?;
    let (raw, rejected) = read_raw_corpus(path)?;
    if rejected > 0 {
        eprintln!("note: skipped {rejected} documents with empty text");
    }
    if raw.is_empty() {
        return Err(Error::MalformedData {
            path: path.to_path_buf(),
            line: 1,
            details: "corpus has no documents".into(),
        });
    }
    let vocab = match &config.data.vocab {
        Some(vocab_path) => Vocabulary::load(vocab_path)?,
        None => build_vocab(
            raw.iter().filter(|d| d.split == Split::Train),
            config.data.min_freq,
        )?,
    };
    let labels = LabelIndex::from_names(raw.iter().flat_map(|d| d.labels.iter().cloned()))?;
    let mut corpus = map_corpus(&raw, &vocab, &labels)?;
    truncate_documents(&mut corpus, config.data.max_doc_len)?;
    if config.data.top_labels > 0 {
        let (corpus, labels) = filter_top_labels(&corpus, &labels, config.data.top_labels)?;
        return Ok(LoadedData { corpus, vocab, labels });
    }
    Ok(LoadedData { corpus, vocab, labels })
}

fn check_label_names(ckpt: &Checkpoint, labels: &LabelIndex) -> Result<()> {
    if ckpt.label_names != labels.names() {
        return Err(Error::Config(format!(
            "checkpoint was trained on a different label set ({} names vs {} in this corpus)",
            ckpt.label_names.len(),
            labels.len()
        )));
    }
    Ok(())
}

fn cmd_train(config: &RunConfig) -> Result<ExitCode> {
    let data = load_data(config, None)?;
    let pretrained = match &config.data.embeddings {
        Some(path) => Some(load_pretrained_embeddings(path, &data.vocab, config.model.d_e)?),
        None => None,
    };
    ensure_out_dir(config)?;
    let dir = &config.output.dir;
    let (ckpt, log) = train(
        &config.model,
        &config.train,
        &data.corpus,
        &data.vocab,
        &data.labels,
        pretrained.as_deref(),
    )?;
    ckpt.save(&dir.join("model.ckpt"))?;
    fs::write(dir.join("train.jsonl"), log.to_lines()?)
        .map_err(|e| Error::io("writing train log", e))?;
    if log.diverged {
        eprintln!(
            "training diverged after {} completed epochs; kept the last good checkpoint",
            log.epochs.len()
        );
        return Ok(ExitCode::from(4));
    }
    let best = &log.epochs[log.best_epoch];
    println!(
        "best epoch {} of {} (val P@{} = {:.4}); wrote model.ckpt and train.jsonl to {}",
        log.best_epoch,
        log.epochs.len(),
        config.train.early_stop_n,
        best.val.p_at(config.train.early_stop_n).unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Explicit cutoffs are validated against the label count; otherwise the
/// config's eval_ns entries that fit are used, falling back to min(5, L).
fn resolve_ns(explicit: &[usize], config: &RunConfig, num_labels: usize) -> Result<Vec<usize>> {
    let mut ns = if explicit.is_empty() {
        let fitting: Vec<usize> = config
            .train
            .eval_ns
            .iter()
            .copied()
            .filter(|&n| n >= 1 && n <= num_labels)
            .collect();
        if fitting.is_empty() {
            vec![num_labels.min(5)]
        } else {
            fitting
        }
    } else {
        for &n in explicit {
            if n == 0 || n > num_labels {
                return Err(Error::Config(format!(
                    "--n {n} outside 1..={num_labels}"
                )));
            }
        }
        explicit.to_vec()
    };
    ns.sort_unstable();
    ns.dedup();
    Ok(ns)
}

fn evaluate_prediction_rows(
    rows: &[(String, Vec<f64>)],
    corpus: &Corpus,
    split: Split,
    ns: &[usize],
) -> Result<MetricsReport> {
    let by_id: HashMap<&str, &[f64]> = rows
        .iter()
        .map(|(id, probs)| (id.as_str(), probs.as_slice()))
        .collect();
    let mut probs = Vec::new();
    let mut truth = Vec::new();
    let mut docs = 0usize;
    for doc in corpus.split_docs(split) {
        let row = by_id.get(doc.id.as_str()).ok_or_else(|| {
            Error::Metrics(format!("predictions are missing document '{}'", doc.id))
        })?;
        probs.extend_from_slice(row);
        let mut dense = vec![0.0; corpus.num_labels];
        for &l in &doc.labels {
            dense[l] = 1.0;
        }
        truth.extend_from_slice(&dense);
        docs += 1;
    }
    if docs == 0 {
        return Err(Error::Metrics(format!("split {split} is empty")));
    }
    let pred = PredictionSet::new(probs, truth, docs, corpus.num_labels)?;
    evaluate_all(&pred, ns)
}

fn cmd_eval(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
    predictions: Option<PathBuf>,
    corpus_override: Option<PathBuf>,
    split: Split,
    explicit_ns: &[usize],
) -> Result<ExitCode> {
    let data = load_data(config, corpus_override.as_deref())?;
    let ns = resolve_ns(explicit_ns, config, data.labels.len())?;
    let report = match (checkpoint, predictions) {
        (Some(ckpt_path), None) => {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            check_label_names(&ckpt, &data.labels)?;
            evaluate_checkpoint(
                &ckpt,
                &data.corpus,
                &data.vocab,
                split,
                config.train.batch_size,
                &ns,
            )?
        }
        (None, Some(pred_path)) => {
            let rows = read_predictions(&pred_path, &data.labels)?;
            evaluate_prediction_rows(&rows, &data.corpus, split, &ns)?
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --checkpoint and --predictions".into(),
            ))
        }
    };
    print!("{}", report.format_record());
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(
    config: &RunConfig,
    checkpoint: &Path,
    corpus_override: Option<PathBuf>,
    split: Split,
    top: usize,
    attend: bool,
) -> Result<ExitCode> {
    let data = load_data(config, corpus_override.as_deref())?;
    let ckpt = Checkpoint::load(checkpoint)?;
    check_label_names(&ckpt, &data.labels)?;
    let actual = data.vocab.sha256_hex();
    if ckpt.vocab_sha256 != actual {
        return Err(Error::Config(
            "checkpoint was trained with a different vocabulary".into(),
        ));
    }
    let num_labels = data.labels.len();
    if top == 0 || top > num_labels {
        return Err(Error::Config(format!(
            "--top {top} outside 1..={num_labels}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in batch_iter_in_order(&data.corpus, config.train.batch_size, split)? {
        let slices = batch.token_slices();
        let out = ckpt.model.forward(&slices, PAD_ID, false, &mut rng)?;
        let probs = out.probabilities.data();
        for (r, &doc_idx) in batch.doc_indices.iter().enumerate() {
            let doc = &data.corpus.documents[doc_idx];
            let row = &probs[r * num_labels..(r + 1) * num_labels];
            // Score descending, ties to the lower label id — the same order
            // precision-at-n uses.
            let mut order: Vec<usize> = (0..num_labels).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for (rank, &l) in order.iter().take(top).enumerate() {
                let name = data.labels.name_of(l).expect("label id in range");
                if attend {
                    let att = out.attention[r].data();
                    let n = batch.padded_len;
                    let weights = &att[l * n..(l + 1) * n];
                    let pos = weights
                        .iter()
                        .enumerate()
                        .max_by(|(i, a), (j, b)| a.total_cmp(b).then(j.cmp(i)))
                        .map(|(i, _)| i)
                        .expect("documents are non-empty");
                    let token = data
                        .vocab
                        .token_of(batch.tokens[r][pos])
                        .expect("token id in range");
                    println!(
                        "{}\t{}\t{}\t{:.4}\t{}\t{}",
                        doc.id,
                        rank + 1,
                        name,
                        row[l],
                        pos,
                        token
                    );
                } else {
                    println!("{}\t{}\t{}\t{:.4}", doc.id, rank + 1, name, row[l]);
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(config: &RunConfig) -> Result<ExitCode> {
    // Dimensions small enough that the full finite-difference sweep over
    // every parameter finishes in seconds; architecture switches follow the
    // config so variants can be checked too.
    let model_config = ModelConfig {
        d_e: 8,
        d_c: 6,
        k: 3,
        d_ff: 16,
        num_labels: 5,
        vocab_size: 12,
        dropout_p: 0.0,
        use_positional_encoding: config.model.use_positional_encoding,
        use_label_self_attention: config.model.use_label_self_attention,
        activation: config.model.activation,
        num_label_blocks: config.model.num_label_blocks,
        norm_kind: config.model.norm_kind,
    };
    let seed = config.train.seed;
    let model = Model::init(model_config, None, seed)?;
    // Training-scale initialization leaves parts of the label path with
    // gradients below the finite-difference noise floor; a generic point
    // exercises every branch at measurable magnitude.
    model.randomize_generic_point(seed.wrapping_add(1));
    let docs: Vec<Vec<usize>> = vec![vec![2, 3, 4, 5, 6, 7, 8, 9], vec![10, 11, 2, 4]];
    let truth = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let trainable = model.params.trainable();
    let report = grad_check(
        || {
            let slices: Vec<&[usize]> = docs.iter().map(Vec::as_slice).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = model.forward(&slices, PAD_ID, false, &mut rng)?;
            out.probabilities.binary_cross_entropy(&truth)
        },
        &trainable,
        1e-5,
        1e-4,
    )?;
    println!("{report}");
    Ok(if report.pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(4)
    })
}
