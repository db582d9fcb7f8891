//! Command-line entry points: train, predict, evaluate, grad-check, and
//! dump-table over JSON-lines corpora and a JSON run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use reltab::corpus::{load_corpus, load_documents, schema_from_corpus, LabelSchema};
use reltab::eval::{
    aggregate_runs, entity_metrics, relation_metrics, Criterion, RunAggregate,
};
use reltab::model::{Model, ModelConfig, PredictOptions, SentencePrediction};
use reltab::subword::PoolingMode;
use reltab::table::{
    build_gold_table, render_table, resolve_spans, resolve_triples, RelAggregation, Span, Triple,
};
use reltab::trainer::{evaluate_corpus, fit, grad_check, TrainConfig};
use reltab::{demo, LossReduction};

#[derive(Parser)]
#[command(name = "reltab", version, about = "Joint entity and relation extraction over label tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a JSON-lines corpus and write a checkpoint.
    Train(TrainArgs),
    /// Tag a corpus with a trained checkpoint and write predictions.
    Predict(PredictArgs),
    /// Score a predictions file against a gold corpus.
    Evaluate(EvaluateArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Print gold label tables for an annotated corpus.
    DumpTable(DumpTableArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON); missing fields take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Train this many times with consecutive seeds and report mean/SD.
    #[arg(long, default_value_t = 1)]
    runs: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to load (defaults to the configured path).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus to tag.
    #[arg(long)]
    input: PathBuf,
    /// Predictions file to write (JSON-lines, one line per sentence).
    #[arg(long)]
    output: PathBuf,
    /// Pack whole documents into encoder segments for tagging.
    #[arg(long)]
    multi_sentence: bool,
    /// Override the subword pooling mode.
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,
    /// Override how span-pair cell blocks become relation triples.
    #[arg(long, value_enum)]
    rel_aggregation: Option<AggregationArg>,
    /// Decode relation cells sequentially with label history.
    #[arg(long)]
    history: bool,
    /// Include per-cell relation probabilities in the output.
    #[arg(long)]
    dump_cells: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Gold corpus (JSON-lines).
    #[arg(long)]
    gold: PathBuf,
    /// Predictions produced by `predict`.
    #[arg(long)]
    pred: PathBuf,
    /// Scoring criteria (repeatable).
    #[arg(long = "criterion", value_enum)]
    criteria: Vec<CriterionArg>,
    /// Also write the report as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Optional run configuration; its training corpus seeds the check.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

#[derive(Args)]
struct DumpTableArgs {
    /// Annotated corpus (JSON-lines).
    #[arg(long)]
    input: PathBuf,
    /// Restrict to one document id.
    #[arg(long)]
    doc: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    First,
    Mean,
    Max,
}

impl From<PoolingArg> for PoolingMode {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::First => PoolingMode::First,
            PoolingArg::Mean => PoolingMode::Mean,
            PoolingArg::Max => PoolingMode::Max,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    /// Read the (last, last) cell of the span pair.
    Last,
    /// Majority vote over the span-pair block.
    Vote,
}

impl From<AggregationArg> for RelAggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Last => RelAggregation::LastLastCell,
            AggregationArg::Vote => RelAggregation::MajorityVote,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    ConllExact,
    AceBoundary,
    AceStrict,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::ConllExact => Criterion::ConllExact,
            CriterionArg::AceBoundary => Criterion::AceBoundary,
            CriterionArg::AceStrict => Criterion::AceStrict,
        }
    }
}

/// The run configuration file. Defaults reproduce the reference
/// hyperparameters: 768-dim token embeddings, 50-dim label embeddings,
/// 20-dim relation attention, encoder rate 5e-5, head rate 1e-3, dropout
/// 0.3, warm-up fraction 0.2, 30 epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    train_path: Option<PathBuf>,
    dev_path: Option<PathBuf>,
    checkpoint_path: PathBuf,
    output_dir: PathBuf,
    model: ModelConfig,
    train: TrainConfig,
    multi_sentence: bool,
    l_max: usize,
    use_history: bool,
    criteria: Vec<Criterion>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_path: None,
            dev_path: None,
            checkpoint_path: PathBuf::from("model.json"),
            output_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            multi_sentence: false,
            l_max: 256,
            use_history: false,
            criteria: vec![Criterion::ConllExact],
        }
    }
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let config: RunConfig =
        serde_json::from_str(&text).with_context(|| format!("bad config {}", path.display()))?;
    Ok(config)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------
// predictions file format

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredEntity {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    etype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredRelation {
    head: PredEntity,
    tail: PredEntity,
    #[serde(rename = "type")]
    rtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredLine {
    doc: String,
    sentence: usize,
    labels: Vec<String>,
    entities: Vec<PredEntity>,
    relations: Vec<PredRelation>,
    aggregation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    cells: Option<CellDump>,
}

/// Per-cell probabilities: `rows[k] = [i, j]`, `probs[k]` the distribution
/// over `labels`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellDump {
    labels: Vec<String>,
    rows: Vec<[usize; 2]>,
    probs: Vec<Vec<f64>>,
}

fn span_to_pred(span: &Span, schema: &LabelSchema) -> PredEntity {
    PredEntity {
        start: span.start,
        end: span.end,
        etype: schema.entity_types()[span.etype].clone(),
    }
}

fn pred_line(
    doc: &str,
    sentence: usize,
    prediction: &SentencePrediction,
    schema: &LabelSchema,
    aggregation: RelAggregation,
) -> PredLine {
    let labels = prediction
        .labels
        .iter()
        .map(|&l| schema.entity_label_name(l))
        .collect();
    let entities = prediction.entities.iter().map(|s| span_to_pred(s, schema)).collect();
    let relations = prediction
        .relations
        .iter()
        .map(|t| PredRelation {
            head: span_to_pred(&t.head, schema),
            tail: span_to_pred(&t.tail, schema),
            rtype: schema.relation_types()[t.rtype].clone(),
        })
        .collect();
    let cells = prediction.cells.as_ref().map(|table| {
        let labels = (0..schema.num_relation_labels())
            .map(|id| schema.relation_label_name(id))
            .collect();
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        for (i, j) in table.cells() {
            rows.push([i, j]);
            probs.push(table.probs(i, j).to_vec());
        }
        CellDump { labels, rows, probs }
    });
    PredLine {
        doc: doc.to_string(),
        sentence,
        labels,
        entities,
        relations,
        aggregation: match aggregation {
            RelAggregation::LastLastCell => "last".to_string(),
            RelAggregation::MajorityVote => "vote".to_string(),
        },
        cells,
    }
}

// ---------------------------------------------------------------------
// commands

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let train_path = config
        .train_path
        .clone()
        .context("config is missing train_path")?;
    require_file(&train_path, "training corpus")?;
    if let Some(dev) = &config.dev_path {
        require_file(dev, "dev corpus")?;
    }

    let train_docs = load_documents(&train_path)?;
    let schema = schema_from_corpus(&train_docs)?;
    load_corpus(&train_path, &schema)?;
    let train_sentences: Vec<_> = train_docs.iter().flat_map(|d| d.sentences.clone()).collect();
    let dev_sentences: Vec<_> = match &config.dev_path {
        Some(path) => {
            let docs = load_corpus(path, &schema)?;
            docs.iter().flat_map(|d| d.sentences.clone()).collect()
        }
        None => train_sentences.clone(),
    };

    fs::create_dir_all(&config.output_dir)?;
    let mut run_entity = Vec::new();
    let mut run_boundary = Vec::new();
    let mut run_strict = Vec::new();
    for run in 0..args.runs.max(1) {
        let seed = config.train.seed + run as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::init(schema.clone(), &config.model, &train_docs, &mut rng)?;
        let mut train_config = config.train.clone();
        train_config.seed = seed;
        let report = fit(&mut model, &train_sentences, &dev_sentences, &train_config)?;
        let eval = evaluate_corpus(&model, &dev_sentences)?;
        eprintln!(
            "run {run} (seed {seed}): best epoch {}, dev entity F1 {:.4}, relation F1 {:.4} (strict)",
            report.best_epoch, eval.entity.f1, eval.relation_strict.f1
        );
        if run == 0 {
            model.save(&config.checkpoint_path)?;
            let log_path = config.output_dir.join("train_log.json");
            fs::write(&log_path, serde_json::to_string_pretty(&report.log)?)?;
            let metrics_path = config.output_dir.join("dev_metrics.json");
            fs::write(
                &metrics_path,
                serde_json::to_string_pretty(&serde_json::json!({
                    "entity": eval.entity,
                    "relation_boundary": eval.relation_boundary,
                    "relation_strict": eval.relation_strict,
                    "best_epoch": report.best_epoch,
                }))?,
            )?;
        }
        run_entity.push(eval.entity);
        run_boundary.push(eval.relation_boundary);
        run_strict.push(eval.relation_strict);
    }
    if args.runs > 1 {
        let summary = serde_json::json!({
            "runs": args.runs,
            "entity": aggregate_runs(&run_entity)?,
            "relation_boundary": aggregate_runs(&run_boundary)?,
            "relation_strict": aggregate_runs(&run_strict)?,
        });
        let path = config.output_dir.join("runs.json");
        fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
        print_aggregate("entity", &aggregate_runs(&run_entity)?);
        print_aggregate("relation (boundary)", &aggregate_runs(&run_boundary)?);
        print_aggregate("relation (strict)", &aggregate_runs(&run_strict)?);
    }
    println!("checkpoint written to {}", config.checkpoint_path.display());
    Ok(())
}

fn print_aggregate(name: &str, agg: &RunAggregate) {
    println!(
        "{name}: P {:.4} +/- {:.4}  R {:.4} +/- {:.4}  F1 {:.4} +/- {:.4}  ({} runs)",
        agg.precision_mean,
        agg.precision_sd,
        agg.recall_mean,
        agg.recall_sd,
        agg.f1_mean,
        agg.f1_sd,
        agg.runs
    );
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let config = match &args.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    let checkpoint = args.checkpoint.clone().unwrap_or(config.checkpoint_path.clone());
    require_file(&checkpoint, "checkpoint")?;
    require_file(&args.input, "input corpus")?;

    let mut model = Model::load(&checkpoint)?;
    if let Some(pooling) = args.pooling {
        model.pooling = pooling.into();
    }
    if let Some(aggregation) = args.rel_aggregation {
        model.policy.rel_aggregation = aggregation.into();
    }
    let docs = load_corpus(&args.input, &model.schema)?;

    let opts = PredictOptions {
        multi_sentence: args.multi_sentence || config.multi_sentence,
        l_max: config.l_max,
        keep_cells: args.dump_cells,
        use_history: args.history || config.use_history,
    };
    let mut out = String::new();
    for doc in &docs {
        let prediction = model.predict_document(doc, &opts)?;
        for warning in &prediction.warnings {
            eprintln!("warning: {}: {warning}", doc.id);
        }
        for (idx, sent_pred) in prediction.sentences.iter().enumerate() {
            let line =
                pred_line(&doc.id, idx, sent_pred, &model.schema, model.policy.rel_aggregation);
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
    }
    fs::write(&args.output, out)?;
    Ok(())
}

fn pred_entity_to_span(e: &PredEntity, schema: &LabelSchema) -> Result<Span> {
    let etype = schema
        .entity_type_index(&e.etype)
        .with_context(|| format!("prediction uses unknown entity type {:?}", e.etype))?;
    Ok(Span { start: e.start, end: e.end, etype })
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    require_file(&args.gold, "gold corpus")?;
    require_file(&args.pred, "predictions file")?;
    let gold_docs = load_documents(&args.gold)?;
    let schema = schema_from_corpus(&gold_docs)?;

    let pred_text = fs::read_to_string(&args.pred)?;
    let mut pred_lines = Vec::new();
    for (lineno, line) in pred_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredLine = serde_json::from_str(line)
            .with_context(|| format!("predictions line {}", lineno + 1))?;
        pred_lines.push(parsed);
    }

    // alignment: same sentences in the same order
    let gold_keys: Vec<(String, usize)> = gold_docs
        .iter()
        .flat_map(|d| (0..d.sentences.len()).map(move |i| (d.id.clone(), i)))
        .collect();
    if gold_keys.len() != pred_lines.len() {
        bail!(
            "misaligned corpora: gold has {} sentences, predictions have {}",
            gold_keys.len(),
            pred_lines.len()
        );
    }
    for (key, line) in gold_keys.iter().zip(&pred_lines) {
        if key.0 != line.doc || key.1 != line.sentence {
            bail!(
                "misaligned corpora: expected {}#{}, found {}#{}",
                key.0,
                key.1,
                line.doc,
                line.sentence
            );
        }
    }

    let mut gold_spans = Vec::new();
    let mut gold_triples = Vec::new();
    for doc in &gold_docs {
        for sentence in &doc.sentences {
            gold_spans.push(resolve_spans(sentence, &schema)?);
            gold_triples.push(resolve_triples(sentence, &schema)?);
        }
    }
    let mut pred_spans = Vec::new();
    let mut pred_triples = Vec::new();
    for line in &pred_lines {
        pred_spans.push(
            line.entities
                .iter()
                .map(|e| pred_entity_to_span(e, &schema))
                .collect::<Result<Vec<_>>>()?,
        );
        pred_triples.push(
            line.relations
                .iter()
                .map(|r| {
                    Ok(Triple {
                        head: pred_entity_to_span(&r.head, &schema)?,
                        tail: pred_entity_to_span(&r.tail, &schema)?,
                        rtype: schema
                            .relation_type_index(&r.rtype)
                            .with_context(|| format!("unknown relation type {:?}", r.rtype))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }

    let criteria: Vec<Criterion> = if args.criteria.is_empty() {
        vec![Criterion::ConllExact]
    } else {
        args.criteria.iter().map(|&c| c.into()).collect()
    };

    let entity = entity_metrics(&gold_spans, &pred_spans)?;
    let mut report = BTreeMap::new();
    println!(
        "{:14} {:>7} {:>7} {:>7}   {:>7} {:>7} {:>7}",
        "criterion", "ent P", "ent R", "ent F1", "rel P", "rel R", "rel F1"
    );
    for criterion in &criteria {
        let rel = relation_metrics(&gold_triples, &pred_triples, *criterion)?;
        println!(
            "{:14} {:7.4} {:7.4} {:7.4}   {:7.4} {:7.4} {:7.4}",
            criterion.name(),
            entity.precision,
            entity.recall,
            entity.f1,
            rel.precision,
            rel.recall,
            rel.f1
        );
        report.insert(criterion.name(), serde_json::json!({ "entity": entity, "relation": rel }));
    }
    if let Some(path) = &args.output {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let (docs, model_config) = match &args.config {
        Some(path) => {
            let config = load_run_config(path)?;
            let train_path = config.train_path.context("config is missing train_path")?;
            require_file(&train_path, "training corpus")?;
            (load_documents(&train_path)?, config.model)
        }
        None => {
            let config = ModelConfig {
                encoder: reltab::encoder::EncoderConfig::tiny(16, args.seed),
                d_label: 4,
                d_att: 3,
                ..ModelConfig::default()
            };
            (demo::tiny_corpus(), config)
        }
    };
    let schema = schema_from_corpus(&docs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut model = Model::init(schema, &model_config, &docs, &mut rng)?;
    let sentences: Vec<_> = docs
        .iter()
        .flat_map(|d| d.sentences.clone())
        .filter(|s| !s.relations.is_empty())
        .take(2)
        .collect();
    let batch: Vec<_> = sentences.iter().collect();
    if batch.is_empty() {
        bail!("corpus has no sentences with relations to check against");
    }
    let report = grad_check(&mut model, &batch, args.eps, LossReduction::Sum)?;
    println!("{:28} {:>9} {:>13}", "block", "elements", "max rel err");
    for block in &report.blocks {
        println!("{:28} {:>9} {:>13.3e}", block.name, block.elements, block.max_rel_error);
    }
    println!(
        "max relative error {:.3e} in {} (tolerance {:.1e})",
        report.max_rel_error, report.worst_block, args.tolerance
    );
    if !report.passed(args.tolerance) {
        bail!("gradient check failed");
    }
    println!("gradient check passed");
    Ok(())
}

fn cmd_dump_table(args: DumpTableArgs) -> Result<()> {
    require_file(&args.input, "corpus")?;
    let docs = load_documents(&args.input)?;
    let schema = schema_from_corpus(&docs)?;
    for doc in &docs {
        if let Some(only) = &args.doc {
            if &doc.id != only {
                continue;
            }
        }
        for (idx, sentence) in doc.sentences.iter().enumerate() {
            let table = build_gold_table(sentence, &schema)?;
            println!("# {}#{idx}", doc.id);
            print!("{}", render_table(&table, &sentence.words, &schema));
            println!();
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::DumpTable(args) => cmd_dump_table(args),
    }
}
