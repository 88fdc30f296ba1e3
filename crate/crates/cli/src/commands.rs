use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use qgen_core::checkpoint::Checkpoint;
use qgen_core::data::{load_inputs, load_jsonl, truncate_passages};
use qgen_core::diagnostics::model_gradcheck;
use qgen_core::metrics::{corpus_metric, Metric};
use qgen_core::model::{Instance, Model, ModelDims};
use qgen_core::numerics::{GradCheck, Rng};
use qgen_core::rl::{finetune, RewardSpec};
use qgen_core::text::{detokenize, load_embeddings, tokenize, EmbeddingTable, Vocabulary};
use qgen_core::training::{train, EpochRecord, TrainOutcome};
use qgen_core::{TrainingExample, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::{require_exists, Overrides, RunConfig};
use crate::CliError;

const METRICS_LOG: &str = "metrics.jsonl";
const BEST: &str = "best.ckpt";
const LAST: &str = "last.ckpt";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Canonical JSONL training set.
    #[arg(long, value_name = "PATH")]
    pub train: Option<PathBuf>,
    /// Canonical JSONL dev set for model selection.
    #[arg(long, value_name = "PATH")]
    pub dev: Option<PathBuf>,
    /// GloVe-style text embeddings; random vectors when omitted.
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    /// Directory for checkpoints and the metrics log.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint to start from.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub train: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub dev: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub p_flip: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// JSONL with id, passage and query (target optional).
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Destination JSONL of {"id", "output"} records.
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSONL of {"id", "output"} records.
    #[arg(long, value_name = "PATH")]
    pub predictions: PathBuf,
    /// JSONL with "id" and "target" fields.
    #[arg(long, value_name = "PATH")]
    pub references: PathBuf,
    /// bleu4 or rouge_l; defaults from --mode.
    #[arg(long)]
    pub metric: Option<String>,
    /// Where to write the JSON report; printed to stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Breaks one backward rule to prove the check can fail.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

fn resolve(flag: &Option<PathBuf>, file: &Option<PathBuf>) -> Option<PathBuf> {
    flag.clone().or_else(|| file.clone())
}

fn validated(mut config: TrainConfig, overrides: &Overrides) -> Result<TrainConfig, CliError> {
    overrides.apply(&mut config);
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(config)
}

fn output_dir(path: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = path.ok_or_else(|| CliError::usage("no output directory (--out or output_dir)"))?;
    fs::create_dir_all(&dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_examples(path: &Path, max_passage_len: usize) -> Result<Vec<TrainingExample>, CliError> {
    let mut examples = load_jsonl(path).map_err(|e| CliError::failure(format!("{}: {e}", path.display())))?;
    truncate_passages(&mut examples, max_passage_len);
    Ok(examples)
}

fn instances(examples: &[TrainingExample], vocab: &Vocabulary) -> Result<Vec<Instance>, CliError> {
    examples
        .iter()
        .map(|e| Instance::new(e, vocab).map_err(CliError::from))
        .collect()
}

/// Appends each epoch record to the metrics log as it arrives.
struct MetricsLog {
    writer: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::failure(format!("{}: {e}", path.display())))?;
        Ok(Self {
            writer: BufWriter::new(file),
            error: None,
        })
    }

    fn record(&mut self, r: &EpochRecord) {
        let line = serde_json::to_string(r).expect("record serializes");
        let res = writeln!(self.writer, "{line}").and_then(|_| self.writer.flush());
        if let Err(e) = res {
            self.error.get_or_insert(e);
        }
    }

    fn finish(self) -> Result<(), CliError> {
        match self.error {
            Some(e) => Err(CliError::failure(format!("writing metrics log: {e}"))),
            None => Ok(()),
        }
    }
}

fn save_outcome(dir: &Path, outcome: &TrainOutcome<f64>) -> Result<(), CliError> {
    outcome.best.save(dir.join(BEST))?;
    outcome.last.save(dir.join(LAST))?;
    if let Some(r) = outcome.history.last() {
        println!(
            "epoch {} loss {:.6}; best epoch {} -> {}",
            r.epoch,
            r.loss,
            outcome.best.epoch,
            dir.join(BEST).display()
        );
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, overrides: &Overrides) -> Result<(), CliError> {
    let file = RunConfig::load_or_default(overrides.config.as_deref())?;
    let mut config = file.train.clone();
    if let Some(e) = args.epochs {
        config.epochs_ce = e;
    }
    if let Some(lr) = args.lr {
        config.lr_ce = lr;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    let config = validated(config, overrides)?;
    let train_path = resolve(&args.train, &file.train_path)
        .ok_or_else(|| CliError::usage("no training data (--train or train_path)"))?;
    require_exists("training data", &train_path)?;
    let dev_path = resolve(&args.dev, &file.dev_path);
    if let Some(p) = &dev_path {
        require_exists("dev data", p)?;
    }
    let embeddings_path = resolve(&args.embeddings, &file.embeddings_path);
    if let Some(p) = &embeddings_path {
        require_exists("embeddings file", p)?;
    }
    let out = output_dir(resolve(&args.out, &file.output_dir))?;

    let train_examples = load_examples(&train_path, config.max_passage_len)?;
    if train_examples.is_empty() {
        return Err(CliError::failure(format!("{} has no examples", train_path.display())));
    }
    let dev_examples = match &dev_path {
        Some(p) => load_examples(p, config.max_passage_len)?,
        None => Vec::new(),
    };
    let corpus: Vec<Vec<String>> = train_examples
        .iter()
        .flat_map(|e| [e.passage.clone(), e.query.clone(), e.target.clone()])
        .collect();
    let vocab = Vocabulary::build(&corpus, config.vocab_max_size, config.vocab_min_count);
    let mut rng = Rng::new(config.seed);
    let embeddings = match &embeddings_path {
        Some(p) => load_embeddings(p, &vocab, config.embed_dim, &mut rng)
            .map_err(|e| CliError::failure(format!("{}: {e}", p.display())))?,
        None => {
            log::warn!("no embeddings file given; using random frozen vectors");
            EmbeddingTable::random(vocab.len(), config.embed_dim, &mut rng)
        }
    };
    let dims = ModelDims::uniform(vocab.len(), config.embed_dim, config.hidden, config.perspectives);
    let mut model = Model::new(dims, embeddings, &mut rng)?;
    let train_set = instances(&train_examples, &vocab)?;
    let dev_set = instances(&dev_examples, &vocab)?;
    log::info!(
        "{} training / {} dev examples, vocabulary {}, {} parameters",
        train_set.len(),
        dev_set.len(),
        vocab.len(),
        model.params.num_scalars()
    );

    let mut log = MetricsLog::create(&out.join(METRICS_LOG))?;
    let outcome = train(&mut model, &vocab, &train_set, &dev_set, &config, config.lr_ce, |r| log.record(r))?;
    log.finish()?;
    save_outcome(&out, &outcome)
}

pub fn cmd_finetune(args: &FinetuneArgs, overrides: &Overrides) -> Result<(), CliError> {
    require_exists("checkpoint", &args.checkpoint)?;
    let checkpoint = Checkpoint::<f64>::load(&args.checkpoint)?;
    let file = match &overrides.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig {
            train: checkpoint.config.clone(),
            ..RunConfig::default()
        },
    };
    let mut config = file.train.clone();
    if let Some(e) = args.epochs {
        config.epochs_rl = e;
    }
    if let Some(lr) = args.lr {
        config.lr_rl = lr;
    }
    if let Some(p) = args.p_flip {
        config.p_flip = p;
    }
    let config = validated(config, overrides)?;
    let train_path = resolve(&args.train, &file.train_path)
        .ok_or_else(|| CliError::usage("no training data (--train or train_path)"))?;
    require_exists("training data", &train_path)?;
    let dev_path = resolve(&args.dev, &file.dev_path);
    if let Some(p) = &dev_path {
        require_exists("dev data", p)?;
    }
    let out = output_dir(resolve(&args.out, &file.output_dir))?;

    let mut model = checkpoint.to_model()?;
    let vocab = checkpoint.vocab.clone();
    let train_set = instances(&load_examples(&train_path, config.max_passage_len)?, &vocab)?;
    let dev_set = match &dev_path {
        Some(p) => instances(&load_examples(p, config.max_passage_len)?, &vocab)?,
        None => Vec::new(),
    };
    let reward = RewardSpec::for_mode(config.mode);
    let mut log = MetricsLog::create(&out.join(METRICS_LOG))?;
    let outcome = finetune(&mut model, &vocab, &train_set, &dev_set, &config, &reward, |r| log.record(r))?;
    log.finish()?;
    save_outcome(&out, &outcome)
}

#[derive(Serialize, Deserialize)]
struct Prediction {
    id: String,
    output: String,
}

pub fn cmd_generate(args: &GenerateArgs, _overrides: &Overrides) -> Result<(), CliError> {
    require_exists("checkpoint", &args.checkpoint)?;
    require_exists("input", &args.input)?;
    let checkpoint = Checkpoint::<f64>::load(&args.checkpoint)?;
    let model = checkpoint.to_model()?;
    let vocab = &checkpoint.vocab;
    let max_len = args.max_len.unwrap_or(checkpoint.config.max_decode_len);
    if max_len == 0 {
        return Err(CliError::usage("--max-len must be positive"));
    }
    let mut examples = load_inputs(&args.input).map_err(|e| CliError::failure(format!("{}: {e}", args.input.display())))?;
    truncate_passages(&mut examples, checkpoint.config.max_passage_len);
    let file = File::create(&args.output).map_err(|e| CliError::failure(format!("{}: {e}", args.output.display())))?;
    let mut w = BufWriter::new(file);
    for ex in &examples {
        let inst = Instance::new(ex, vocab)?;
        let decoded = model.greedy_decode(&inst, max_len)?;
        let record = Prediction {
            id: ex.id.clone(),
            output: detokenize(&inst.surface(&decoded.ids, vocab)),
        };
        let line = serde_json::to_string(&record).expect("prediction serializes");
        writeln!(w, "{line}").map_err(|e| CliError::failure(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::failure(e.to_string()))?;
    println!("{} predictions -> {}", examples.len(), args.output.display());
    Ok(())
}

/// `id → field` from a JSONL file, rejecting duplicates.
fn read_field(path: &Path, field: &str) -> Result<Vec<(String, String)>, CliError> {
    let fail = |m: String| CliError::failure(format!("{}: {m}", path.display()));
    let reader = BufReader::new(File::open(path).map_err(|e| fail(e.to_string()))?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| fail(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| fail(format!("line {}: {e}", n + 1)))?;
        let get = |k: &str| {
            v.get(k)
                .and_then(|x| x.as_str())
                .map(str::to_string)
                .ok_or_else(|| fail(format!("line {}: missing string field \"{k}\"", n + 1)))
        };
        out.push((get("id")?, get(field)?));
    }
    Ok(out)
}

pub fn cmd_evaluate(args: &EvaluateArgs, overrides: &Overrides) -> Result<(), CliError> {
    require_exists("predictions", &args.predictions)?;
    require_exists("references", &args.references)?;
    let file = RunConfig::load_or_default(overrides.config.as_deref())?;
    let mode = overrides.mode.unwrap_or(file.train.mode);
    let metric = match &args.metric {
        Some(m) => m.parse::<Metric>().map_err(|e| CliError::usage(e.to_string()))?,
        None => Metric::for_mode(mode),
    };
    let predictions = read_field(&args.predictions, "output")?;
    let references = read_field(&args.references, "target")?;
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for (id, out) in &predictions {
        if by_id.insert(id, out).is_some() {
            return Err(CliError::failure(format!("duplicate prediction id {id}")));
        }
    }
    let mut pairs = Vec::with_capacity(references.len());
    for (id, target) in &references {
        let out = by_id
            .remove(id.as_str())
            .ok_or_else(|| CliError::failure(format!("missing prediction for id {id}")))?;
        pairs.push((id.clone(), tokenize(out), tokenize(target)));
    }
    if let Some(id) = predictions.iter().map(|(id, _)| id).find(|id| by_id.contains_key(id.as_str())) {
        return Err(CliError::failure(format!("missing reference for id {id}")));
    }
    let report = corpus_metric(&pairs, metric)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.report {
        Some(p) => fs::write(p, json + "\n").map_err(|e| CliError::failure(format!("{}: {e}", p.display())))?,
        None => println!("{json}"),
    }
    println!("{} mean {:.6}", report.metric, report.mean);
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs, overrides: &Overrides) -> Result<(), CliError> {
    let file = RunConfig::load_or_default(overrides.config.as_deref())?;
    let seed = overrides.seed.unwrap_or(file.train.seed);
    if args.tol.is_nan() || args.tol <= 0.0 {
        return Err(CliError::usage("--tol must be positive"));
    }
    let checker = GradCheck {
        tol: args.tol,
        corrupt_backward: args.corrupt_backward,
        ..GradCheck::default()
    };
    let reports = model_gradcheck(seed, &checker)?;
    for r in &reports {
        println!(
            "{:<14} max rel error {:.3e} over {} coordinates: {}",
            r.block,
            r.max_rel_error,
            r.coordinates,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    if let Some(p) = &args.report {
        let json = serde_json::to_string_pretty(&reports).expect("report serializes");
        fs::write(p, json + "\n").map_err(|e| CliError::failure(format!("{}: {e}", p.display())))?;
    }
    match reports.iter().find(|r| !r.passed) {
        Some(r) => Err(CliError::failure(format!(
            "gradient check failed in block {} (max rel error {:.3e} >= {:.1e})",
            r.block, r.max_rel_error, args.tol
        ))),
        None => Ok(()),
    }
}
