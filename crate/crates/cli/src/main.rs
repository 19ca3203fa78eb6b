//! `cegi`: train the evidence generators and the reader, generate evidence,
//! and run evaluation — all deterministic under `--seed`.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::fs::File;
use std::path::{Path, PathBuf};

use cegi_core::encoder::{EncoderConfig, Vocabulary};
use cegi_core::factual::{
    CompletionModel, FactualGenConfig, FilterParams, FrequencyTable, KnowledgeStore, PosLexicon,
    Stopwords,
};
use cegi_core::numerics::OptimizerConfig;
use cegi_core::pipeline::{
    attach_evidence_records, evaluate, load_dataset, load_evidence, predict_samples, save_dataset,
    save_evidence, synth_task, to_generator_sample, train_reader, write_predictions, ConfigMap,
    EvidenceDependency, EvidenceSources, PipelineConfig, ReaderModel, Sample, SynthSpec,
};
use cegi_core::textual::{DecodeMode, LmTrainConfig, TextualGenerator, TrainOpts};

#[derive(Parser)]
#[command(name = "cegi", version, about = "Evidence generation + injection reading comprehension")]
struct Cli {
    /// Configuration file with `key = value` lines; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master random seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-choice dataset with gold evidence.
    Synth(SynthArgs),
    /// Ingest a knowledge-triple file and report/normalize it.
    IngestKg(IngestArgs),
    /// Train the textual evidence generator (pretrain, then fine-tune).
    TrainTextualGen(TrainTextualArgs),
    /// Train the triple-completion model.
    TrainCompletion(TrainCompletionArgs),
    /// Generate evidence records for a dataset.
    GenEvidence(GenEvidenceArgs),
    /// Train the reader on a dataset with attached evidence.
    TrainReader(TrainReaderArgs),
    /// Evaluate a reader checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Emit predictions for a dataset (labels not required).
    Predict(PredictArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Additional development samples (separate seed stream).
    #[arg(long, default_value_t = 0)]
    dev: usize,
    /// `required` ties the label to the gold evidence; `none` makes it
    /// recoverable from the paragraph alone.
    #[arg(long, default_value = "required")]
    mode: String,
    #[arg(long, default_value_t = 0.5)]
    similarity: f64,
    #[arg(long, default_value_t = 40)]
    vocab_words: usize,
    #[arg(long, default_value_t = 6)]
    p_len: usize,
    #[arg(long, default_value_t = 4)]
    q_len: usize,
    #[arg(long, default_value_t = 3)]
    o_len: usize,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    triples: PathBuf,
    /// Relation template table; defaults to the bundled 34-relation file.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Write the normalized store back out as a triple file.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args)]
struct LmModelArgs {
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 8000)]
    vocab_cap: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    warmup: f64,
}

#[derive(Args)]
struct TrainTextualArgs {
    #[arg(long)]
    out: PathBuf,
    /// Pretraining sentence corpus (one sentence per line); defaults to the
    /// bundled commonsense statements.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Labeled dataset for joint fine-tuning; skipped when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 2)]
    finetune_epochs: usize,
    /// Classification weight in the joint objective.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 40)]
    max_tokens: usize,
    /// `greedy` or `topk:K`.
    #[arg(long, default_value = "greedy")]
    decode: String,
    #[command(flatten)]
    model: LmModelArgs,
}

#[derive(Args)]
struct TrainCompletionArgs {
    #[arg(long)]
    out: PathBuf,
    /// Triple file; defaults to the bundled seed graph.
    #[arg(long)]
    triples: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[command(flatten)]
    model: LmModelArgs,
}

#[derive(Args)]
struct GenEvidenceArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which generators run: textual, factual, or both.
    #[arg(long, default_value = "both")]
    sources: String,
    #[arg(long)]
    textual_model: Option<PathBuf>,
    #[arg(long)]
    completion_model: Option<PathBuf>,
    /// Knowledge triples for retrieval; defaults to the bundled seed graph.
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    freq: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    max_sentences: usize,
    #[arg(long, default_value_t = 500)]
    top_k: usize,
    #[arg(long, default_value_t = 100)]
    freq_slack: usize,
    #[arg(long, default_value_t = 2)]
    max_objects: usize,
    /// Compare rule (ii) by raw counts instead of ranks.
    #[arg(long, default_value_t = false)]
    count_mode: bool,
}

#[derive(Args)]
struct TrainReaderArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Evidence records to attach before training.
    #[arg(long)]
    evidence: Option<PathBuf>,
    /// Answer head: capsule or maxpool.
    #[arg(long)]
    head: Option<String>,
    /// Evidence sources admitted into the E segment.
    #[arg(long)]
    evidence_sources: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Extra `key=value` config overrides (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    evidence: Option<PathBuf>,
    #[arg(long)]
    evidence_sources: Option<String>,
    /// Also write per-sample predictions here.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 24)]
    batch_size: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    evidence: Option<PathBuf>,
    #[arg(long)]
    evidence_sources: Option<String>,
    #[arg(long, default_value_t = 24)]
    batch_size: usize,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut base = match &cli.config {
        Some(path) => ConfigMap::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ConfigMap::new(),
    };
    if let Some(seed) = cli.seed {
        base.set("seed", seed);
    }
    match cli.command {
        Command::Synth(args) => cmd_synth(&base, args),
        Command::IngestKg(args) => cmd_ingest(args),
        Command::TrainTextualGen(args) => cmd_train_textual(&base, args),
        Command::TrainCompletion(args) => cmd_train_completion(&base, args),
        Command::GenEvidence(args) => cmd_gen_evidence(&base, args),
        Command::TrainReader(args) => cmd_train_reader(&base, args),
        Command::Eval(args) => cmd_eval(&base, args),
        Command::Predict(args) => cmd_predict(&base, args),
    }
}

fn seed_of(map: &ConfigMap) -> u64 {
    map.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0)
}

fn cmd_synth(base: &ConfigMap, args: SynthArgs) -> Result<()> {
    let seed = seed_of(base);
    let mode = match args.mode.as_str() {
        "required" => EvidenceDependency::Required,
        "none" => EvidenceDependency::None,
        other => bail!("--mode must be required|none, got `{other}`"),
    };
    let spec = SynthSpec {
        n: args.n,
        vocab_words: args.vocab_words,
        evidence_dependency: mode,
        distractor_similarity: args.similarity,
        num_options: 4,
        p_len: args.p_len,
        q_len: args.q_len,
        o_len: args.o_len,
        seed,
    };
    std::fs::create_dir_all(&args.out)?;
    let train = synth_task(&spec);
    write_split(&args.out.join("train.jsonl"), &train)?;
    let mut evidence: Vec<_> = train.iter().flat_map(|s| s.evidence.clone()).collect();
    if args.dev > 0 {
        let dev = synth_task(&SynthSpec {
            n: args.dev,
            seed: seed.wrapping_add(1),
            ..spec
        });
        let dev: Vec<Sample> = dev
            .into_iter()
            .map(|mut s| {
                s.id = format!("dev-{}", s.id);
                for e in &mut s.evidence {
                    e.id = format!("dev-{}", e.id);
                }
                s
            })
            .collect();
        write_split(&args.out.join("dev.jsonl"), &dev)?;
        evidence.extend(dev.iter().flat_map(|s| s.evidence.clone()));
    }
    let mut f = File::create(args.out.join("evidence.jsonl"))?;
    save_evidence(&evidence, &mut f)?;
    println!(
        "synth: wrote {} train samples{} to {}",
        args.n,
        if args.dev > 0 {
            format!(" and {} dev samples", args.dev)
        } else {
            String::new()
        },
        args.out.display()
    );
    Ok(())
}

fn write_split(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut f = File::create(path)?;
    save_dataset(samples, &mut f)?;
    Ok(())
}

fn load_store(templates: Option<&PathBuf>, triples: Option<&PathBuf>) -> Result<KnowledgeStore> {
    let mut store = match templates {
        Some(path) => KnowledgeStore::from_template_file(path)?,
        None => KnowledgeStore::with_default_templates(),
    };
    let report = match triples {
        Some(path) => store.ingest_file(path)?,
        None => store.ingest_text(cegi_core::factual::bundled_kg_seed()),
    };
    if report.skipped > 0 {
        for d in report.diagnostics.iter().take(10) {
            eprintln!("note: {d}");
        }
    }
    Ok(store)
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let mut store = match &args.templates {
        Some(path) => KnowledgeStore::from_template_file(path)?,
        None => KnowledgeStore::with_default_templates(),
    };
    let report = store.ingest_file(&args.triples)?;
    println!(
        "ingest-kg: added {} triples, {} duplicates, {} skipped",
        report.added, report.duplicates, report.skipped
    );
    for d in &report.diagnostics {
        eprintln!("note: {d}");
    }
    if let Some(path) = args.export {
        let mut f = File::create(&path)?;
        store.export(&mut f)?;
        println!("ingest-kg: exported normalized store to {}", path.display());
    }
    Ok(())
}

fn lm_config(model: &LmModelArgs, seed: u64) -> EncoderConfig {
    EncoderConfig {
        d: model.d,
        layers: model.layers,
        heads: model.heads,
        max_seq_len: model.max_seq_len,
        vocab_size: model.vocab_cap,
        seed,
    }
}

fn parse_decode(s: &str) -> Result<DecodeMode> {
    if s == "greedy" {
        return Ok(DecodeMode::Greedy);
    }
    if let Some(k) = s.strip_prefix("topk:") {
        return Ok(DecodeMode::TopK(k.parse().context("bad top-k value")?));
    }
    bail!("--decode must be greedy or topk:K, got `{s}`")
}

fn cmd_train_textual(base: &ConfigMap, args: TrainTextualArgs) -> Result<()> {
    let seed = seed_of(base);
    let corpus_text = match &args.corpus {
        Some(path) => std::fs::read_to_string(path)?,
        None => cegi_core::factual::bundled_corpus().to_string(),
    };
    let lines: Vec<&str> = corpus_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let data = match &args.data {
        Some(path) => load_dataset(path)?,
        None => Vec::new(),
    };
    let mut vocab_texts: Vec<&str> = lines.clone();
    let owned: Vec<String> = data
        .iter()
        .flat_map(|s| {
            let mut v = vec![s.paragraph.clone(), s.question.clone()];
            v.extend(s.options.clone());
            v
        })
        .collect();
    vocab_texts.extend(owned.iter().map(String::as_str));
    let vocab = Vocabulary::build(vocab_texts.into_iter(), args.model.vocab_cap);
    let train_cfg = LmTrainConfig {
        lambda: args.lambda,
        max_tokens: args.max_tokens,
        decode: parse_decode(&args.decode)?,
        pool_first_token: false,
        seed,
    };
    let mut generator =
        TextualGenerator::new(vocab, lm_config(&args.model, seed), train_cfg);
    let corpus_ids: Vec<Vec<u32>> = lines.iter().map(|l| generator.vocab.encode(l)).collect();
    let pre_opts = TrainOpts {
        epochs: args.pretrain_epochs,
        batch_size: args.model.batch_size,
        optimizer: OptimizerConfig::adam(args.model.lr, args.model.warmup, 0),
        seed,
    };
    let curve = generator
        .pretrain(&corpus_ids, &pre_opts)
        .map_err(|e| anyhow::anyhow!("pretraining failed: {e}"))?;
    println!(
        "train-textual-gen: pretrained {} epochs, loss {:.4} -> {:.4}",
        curve.len(),
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    if !data.is_empty() {
        let gen_samples: Vec<_> = data
            .iter()
            .filter_map(|s| to_generator_sample(s, &generator.vocab))
            .collect();
        if gen_samples.is_empty() {
            bail!("--data has no labeled samples to fine-tune on");
        }
        let ft_opts = TrainOpts {
            epochs: args.finetune_epochs,
            batch_size: args.model.batch_size,
            optimizer: OptimizerConfig::adam(args.model.lr, args.model.warmup, 0),
            seed: seed.wrapping_add(1),
        };
        let curve = generator
            .finetune(&gen_samples, &ft_opts)
            .map_err(|e| anyhow::anyhow!("fine-tuning failed: {e}"))?;
        println!(
            "train-textual-gen: fine-tuned {} epochs, joint loss {:.4} -> {:.4}",
            curve.len(),
            curve.first().copied().unwrap_or(f64::NAN),
            curve.last().copied().unwrap_or(f64::NAN)
        );
    }
    generator.save(&args.out)?;
    println!("train-textual-gen: saved to {}", args.out.display());
    Ok(())
}

fn cmd_train_completion(base: &ConfigMap, args: TrainCompletionArgs) -> Result<()> {
    let seed = seed_of(base);
    let store = load_store(args.templates.as_ref(), args.triples.as_ref())?;
    let opts = TrainOpts {
        epochs: args.epochs,
        batch_size: args.model.batch_size,
        optimizer: OptimizerConfig::adam(args.model.lr, args.model.warmup, 0),
        seed,
    };
    let model = CompletionModel::train(&store, lm_config(&args.model, seed), &opts)?;
    model.generator.save(&args.out)?;
    println!(
        "train-completion: trained on {} triples, saved to {}",
        store.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_gen_evidence(base: &ConfigMap, args: GenEvidenceArgs) -> Result<()> {
    let seed = seed_of(base);
    let sources = EvidenceSources::parse(&args.sources)?;
    if matches!(sources, EvidenceSources::None) {
        bail!("--sources none generates nothing; pick textual, factual, or both");
    }
    let samples = load_dataset(&args.data)?;
    let mut records = Vec::new();
    if matches!(sources, EvidenceSources::Textual | EvidenceSources::Both) {
        let dir = args
            .textual_model
            .as_ref()
            .context("--textual-model is required for textual evidence")?;
        let generator = TextualGenerator::load(dir).map_err(|e| anyhow::anyhow!(e))?;
        records.extend(cegi_core::pipeline::generate_textual_records(
            &samples, &generator, seed,
        ));
    }
    if matches!(sources, EvidenceSources::Factual | EvidenceSources::Both) {
        let store = load_store(args.templates.as_ref(), args.kg.as_ref())?;
        let completion = match &args.completion_model {
            Some(dir) => Some(CompletionModel {
                generator: TextualGenerator::load(dir).map_err(|e| anyhow::anyhow!(e))?,
            }),
            None => None,
        };
        let freq = match &args.freq {
            Some(path) => FrequencyTable::parse(&std::fs::read_to_string(path)?)?,
            None => FrequencyTable::parse(cegi_core::factual::default_frequency_table())?,
        };
        let lexicon = match &args.lexicon {
            Some(path) => PosLexicon::parse(&std::fs::read_to_string(path)?),
            None => PosLexicon::bundled(),
        };
        let stop = match &args.stopwords {
            Some(path) => Stopwords::parse(&std::fs::read_to_string(path)?),
            None => Stopwords::bundled(),
        };
        let cfg = FactualGenConfig {
            filter: FilterParams {
                top_k: args.top_k,
                freq_slack: args.freq_slack,
                max_objects: args.max_objects,
                count_mode: args.count_mode,
            },
            max_sentences: args.max_sentences,
            ..FactualGenConfig::default()
        };
        records.extend(cegi_core::pipeline::generate_factual_records(
            &samples,
            &store,
            completion.as_ref(),
            &freq,
            &lexicon,
            &stop,
            &cfg,
            seed,
        )?);
    }
    let mut f = File::create(&args.out)?;
    save_evidence(&records, &mut f)?;
    println!(
        "gen-evidence: wrote {} records to {}",
        records.len(),
        args.out.display()
    );
    Ok(())
}

fn effective_reader_config(base: &ConfigMap, args: &TrainReaderArgs) -> Result<PipelineConfig> {
    let mut overrides = ConfigMap::new();
    for kv in &args.sets {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set needs KEY=VALUE, got `{kv}`"))?;
        overrides.set(k.trim(), v.trim());
    }
    if let Some(head) = &args.head {
        overrides.set("head", head);
    }
    if let Some(sources) = &args.evidence_sources {
        overrides.set("evidence", sources);
    }
    if let Some(epochs) = args.epochs {
        overrides.set("epochs", epochs);
    }
    if let Some(batch) = args.batch_size {
        overrides.set("batch_size", batch);
    }
    let merged = base.clone().merged_with(&overrides);
    Ok(PipelineConfig::from_map(&merged)?)
}

fn attach_from_args(
    samples: &mut [Sample],
    evidence: Option<&PathBuf>,
    sources: EvidenceSources,
) -> Result<()> {
    let records = match evidence {
        Some(path) => load_evidence(path)?,
        None => Vec::new(),
    };
    attach_evidence_records(samples, &records, sources)?;
    Ok(())
}

fn cmd_train_reader(base: &ConfigMap, args: TrainReaderArgs) -> Result<()> {
    let cfg = effective_reader_config(base, &args)?;
    let mut train = load_dataset(&args.train)?;
    attach_from_args(&mut train, args.evidence.as_ref(), cfg.evidence)?;
    let mut dev = match &args.dev {
        Some(path) => Some(load_dataset(path)?),
        None => None,
    };
    if let Some(dev_samples) = dev.as_mut() {
        attach_from_args(dev_samples, args.evidence.as_ref(), cfg.evidence)?;
    }
    let outcome = train_reader(&train, dev.as_deref(), &cfg)?;
    outcome.model.save(&args.out, &outcome.loss_curve)?;
    println!(
        "train-reader: {} epochs, train loss {:.4} -> {:.4}{}",
        outcome.loss_curve.len(),
        outcome.loss_curve.first().copied().unwrap_or(f64::NAN),
        outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
        match outcome.dev_accuracy_curve.last() {
            Some(acc) => format!(", dev accuracy {acc:.4}"),
            None => String::new(),
        }
    );
    println!("train-reader: checkpoint at {}", args.out.display());
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<(ReaderModel, Vec<f64>)> {
    ReaderModel::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn eval_sources(flag: Option<&String>) -> Result<EvidenceSources> {
    match flag {
        Some(s) => Ok(EvidenceSources::parse(s)?),
        None => Ok(EvidenceSources::Both),
    }
}

fn report_config(model: &ReaderModel, batch_size: usize, seed: u64) -> PipelineConfig {
    PipelineConfig {
        encoder: model.cfg.encoder.clone(),
        capsule_dim: model.cfg.capsule_dim,
        routing_iters: model.cfg.routing_iters,
        margins: model.cfg.margins,
        head: model.cfg.head,
        per_pair_attention: model.cfg.per_pair_attention,
        routing_per_option: model.cfg.routing_per_option,
        num_options: model.cfg.num_options,
        batch_size,
        seed,
        ..PipelineConfig::default()
    }
}

fn cmd_eval(base: &ConfigMap, args: EvalArgs) -> Result<()> {
    let seed = seed_of(base);
    let (model, loss_curve) = load_checkpoint(&args.checkpoint)?;
    let mut samples = load_dataset(&args.data)?;
    attach_from_args(
        &mut samples,
        args.evidence.as_ref(),
        eval_sources(args.evidence_sources.as_ref())?,
    )?;
    let labeled = samples.iter().all(|s| s.label.is_some());
    if labeled {
        let mut report = evaluate(&model, &samples, args.batch_size)?;
        report.loss_curve = loss_curve;
        report.config_fingerprint = report_config(&model, args.batch_size, seed).fingerprint();
        report.seed = seed;
        std::fs::write(&args.out, report.render())?;
        println!(
            "eval: accuracy {:.4} ({}/{}) -> {}",
            report.accuracy.unwrap_or(f64::NAN),
            report.correct,
            report.total,
            args.out.display()
        );
    } else {
        // no labels: refuse accuracy, emit predictions only
        let preds = predict_samples(&model, &samples, args.batch_size)?;
        let pred_path = args
            .predictions
            .clone()
            .unwrap_or_else(|| args.out.with_extension("predictions.tsv"));
        let mut f = File::create(&pred_path)?;
        write_predictions(&preds, &mut f)?;
        let text = format!(
            "accuracy = NA\ncorrect = 0\ntotal = {}\nseed = {}\nconfig_fingerprint = {}\nloss_curve = {}\n",
            samples.len(),
            seed,
            report_config(&model, args.batch_size, seed).fingerprint(),
            loss_curve
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        std::fs::write(&args.out, text)?;
        println!(
            "eval: dataset is unlabeled; wrote predictions to {}",
            pred_path.display()
        );
        return Ok(());
    }
    if let Some(path) = args.predictions {
        let preds = predict_samples(&model, &samples, args.batch_size)?;
        let mut f = File::create(&path)?;
        write_predictions(&preds, &mut f)?;
        println!("eval: predictions at {}", path.display());
    }
    Ok(())
}

fn cmd_predict(base: &ConfigMap, args: PredictArgs) -> Result<()> {
    let _ = seed_of(base);
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let mut samples = load_dataset(&args.data)?;
    attach_from_args(
        &mut samples,
        args.evidence.as_ref(),
        eval_sources(args.evidence_sources.as_ref())?,
    )?;
    let preds = predict_samples(&model, &samples, args.batch_size)?;
    let mut f = File::create(&args.out)?;
    write_predictions(&preds, &mut f)?;
    println!(
        "predict: wrote {} predictions to {}",
        preds.len(),
        args.out.display()
    );
    Ok(())
}
