use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser as ClapParser, Subcommand, ValueEnum};
use eventgraph::corpus::{
    detect_schema, graph_from_json, parse_corpus, write_corpus_to, write_graphs_to, LineSchema,
};
use eventgraph::graph::{decode_graph, encode_graph, EventGraph};
use eventgraph::model::ExternalEmbeddings;
use eventgraph::scoring::score_corpus;
use eventgraph::trainer::{init_thread_pool, predict_corpus};
use eventgraph::{
    compute_stats, gen_synthetic, train, Checkpoint, Corpus, Example, ModelConfig, Ontology,
    Sentence, TrainConfig,
};
use serde_json::{Map, Value};

#[derive(ClapParser)]
#[command(name = "eventgraph", version, about = "Event extraction as semantic graph parsing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert between mention files and graph files.
    Convert(ConvertArgs),
    /// Check a mention or graph file and report the first violation.
    Validate(ValidateArgs),
    /// Print corpus length and count statistics.
    Stats(StatsArgs),
    /// Write a synthetic mention corpus.
    GenSynthetic(GenArgs),
    /// Train a parser and write checkpoints to an output directory.
    Train(TrainArgs),
    /// Parse sentences with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predicted mentions against gold mentions.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Graph,
    Mentions,
}

#[derive(Args)]
struct ConvertArgs {
    input: PathBuf,
    output: PathBuf,
    /// Output format; inferred from the input when omitted.
    #[arg(long, value_enum)]
    to: Option<Format>,
    /// Mention file supplying the tokens of each graph's sentence.
    #[arg(long)]
    sentences: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    input: PathBuf,
    /// Mention file to check graph anchors against.
    #[arg(long)]
    sentences: Option<PathBuf>,
    /// Ontology JSON; labels outside it are violations.
    #[arg(long)]
    ontology: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    input: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenArgs {
    /// Output file; standard output when omitted.
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "sentences", short = 'n', default_value_t = 500)]
    n_sentences: usize,
    #[arg(long, default_value_t = 5)]
    event_types: usize,
    #[arg(long, default_value_t = 6)]
    roles: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Directory for checkpoints and the metric history.
    #[arg(long)]
    out: PathBuf,
    /// JSON object of model and training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one config key; the value is parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets both the shuffling seed and the initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Token vectors for an external encoder.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    input: PathBuf,
    output: PathBuf,
    #[arg(long, value_enum, default_value = "mentions")]
    to: Format,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted mentions, or graphs over the gold sentences.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Bad flag values or config keys; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    init_thread_pool()?;
    match command {
        Command::Convert(a) => convert(a),
        Command::Validate(a) => validate(a),
        Command::Stats(a) => stats(a),
        Command::GenSynthetic(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

/// Schema of the first non-blank line, or `None` for an empty file.
fn sniff(path: &Path) -> Result<Option<LineSchema>> {
    for line in open(path)?.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        return detect_schema(&line)
            .map(Some)
            .ok_or_else(|| anyhow!("{}: line is neither a mention nor a graph record", path.display()));
    }
    Ok(None)
}

fn read_mentions(path: &Path, ontology: Option<&Ontology>) -> Result<Corpus> {
    parse_corpus(open(path)?, ontology).with_context(|| path.display().to_string())
}

/// Graphs with the 1-based line each came from.
fn read_graph_lines(path: &Path) -> Result<Vec<(usize, EventGraph)>> {
    let mut graphs = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let graph = graph_from_json(&line, i + 1).with_context(|| path.display().to_string())?;
        graphs.push((i + 1, graph));
    }
    Ok(graphs)
}

fn sentences_by_id(corpus: &Corpus) -> HashMap<&str, &Sentence> {
    corpus.sentences().map(|s| (s.id.as_str(), s)).collect()
}

/// Decodes graphs against the sentences of `source`, keeping graph order.
fn graphs_to_corpus(path: &Path, graphs: &[(usize, EventGraph)], source: &Corpus) -> Result<Corpus> {
    let sentences = sentences_by_id(source);
    let mut examples = Vec::with_capacity(graphs.len());
    for (line, graph) in graphs {
        let sentence = sentences
            .get(graph.sentence_id.as_str())
            .ok_or_else(|| anyhow!("{}: line {line}: no sentence with id `{}`", path.display(), graph.sentence_id))?;
        let mentions = decode_graph(graph, sentence)
            .map_err(|e| anyhow!("{}: line {line}: {e}", path.display()))?;
        examples.push(Example {
            sentence: (*sentence).clone(),
            mentions,
        });
    }
    Ok(Corpus::new(examples))
}

fn corpus_to_graphs(path: &Path, corpus: &Corpus) -> Result<Vec<EventGraph>> {
    corpus
        .examples
        .iter()
        .map(|ex| {
            encode_graph(&ex.sentence, &ex.mentions)
                .map_err(|e| anyhow!("{}: sentence `{}`: {e}", path.display(), ex.sentence.id))
        })
        .collect()
}

fn convert(a: ConvertArgs) -> Result<()> {
    let schema = sniff(&a.input)?;
    let target = match (a.to, schema) {
        (Some(to), _) => to,
        (None, Some(LineSchema::Graph)) => Format::Mentions,
        (None, _) => Format::Graph,
    };
    match (target, schema) {
        (Format::Graph, Some(LineSchema::Graph)) | (Format::Mentions, Some(LineSchema::Mentions)) => {
            Err(usage("input is already in the requested format"))
        }
        (Format::Graph, _) => {
            let corpus = read_mentions(&a.input, None)?;
            let graphs = corpus_to_graphs(&a.input, &corpus)?;
            write_graphs_to(&graphs, create(&a.output)?)?;
            eprintln!("wrote {} graphs to {}", graphs.len(), a.output.display());
            Ok(())
        }
        (Format::Mentions, _) => {
            let source = a
                .sentences
                .as_deref()
                .ok_or_else(|| usage("converting graphs to mentions needs --sentences"))?;
            let graphs = read_graph_lines(&a.input)?;
            let corpus = graphs_to_corpus(&a.input, &graphs, &read_mentions(source, None)?)?;
            write_corpus_to(&corpus, create(&a.output)?)?;
            eprintln!("wrote {} sentences to {}", corpus.len(), a.output.display());
            Ok(())
        }
    }
}

fn validate(a: ValidateArgs) -> Result<()> {
    let ontology = a.ontology.as_deref().map(Ontology::read).transpose()?;
    match sniff(&a.input)? {
        None => println!("ok: empty file"),
        Some(LineSchema::Mentions) => {
            let corpus = read_mentions(&a.input, ontology.as_ref())?;
            corpus_to_graphs(&a.input, &corpus)?;
            println!("ok: {} sentences, {} events", corpus.len(), corpus.event_count());
        }
        Some(LineSchema::Graph) => {
            let graphs = read_graph_lines(&a.input)?;
            if let Some(path) = &a.sentences {
                let source = read_mentions(path, None)?;
                let corpus = graphs_to_corpus(&a.input, &graphs, &source)?;
                if let Some(ont) = &ontology {
                    for ((line, _), ex) in graphs.iter().zip(&corpus.examples) {
                        if let Some(label) = ex.mentions.iter().find_map(|m| ont.unknown_label(m)) {
                            return Err(anyhow!(
                                "{}: line {line}: label `{label}` is not in the ontology",
                                a.input.display()
                            ));
                        }
                    }
                }
            }
            println!("ok: {} graphs", graphs.len());
        }
    }
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let s = compute_stats(&read_mentions(&a.input, None)?);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        print!("{}", s.to_table());
    }
    Ok(())
}

fn gen(a: GenArgs) -> Result<()> {
    if a.n_sentences == 0 || a.event_types == 0 || a.roles == 0 {
        return Err(usage("--sentences, --event-types and --roles must be positive"));
    }
    let corpus = gen_synthetic(a.seed, a.n_sentences, (a.event_types, a.roles));
    match &a.output {
        Some(path) => write_corpus_to(&corpus, create(path)?)?,
        None => write_corpus_to(&corpus, io::stdout().lock())?,
    }
    Ok(())
}

/// Merges defaults, the config file, `--seed` and `--set` overrides, in
/// increasing precedence.
fn build_configs(
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<(ModelConfig, TrainConfig)> {
    let as_map = |v: Value| match v {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize to objects"),
    };
    let mut model = as_map(serde_json::to_value(ModelConfig::default())?);
    let mut train = as_map(serde_json::to_value(TrainConfig::default())?);
    let set = |key: &str, value: Value, model: &mut Map<String, Value>, train: &mut Map<String, Value>| {
        if let Some(slot) = model.get_mut(key) {
            *slot = value;
        } else if let Some(slot) = train.get_mut(key) {
            *slot = value;
        } else {
            return Err(usage(format!("unknown config key `{key}`")));
        }
        Ok(())
    };
    if let Some(path) = file {
        let value: Value = serde_json::from_reader(open(path)?)
            .with_context(|| format!("{}: malformed config", path.display()))?;
        let Value::Object(entries) = value else {
            return Err(usage(format!("{}: config must be a JSON object", path.display())));
        };
        for (key, value) in entries {
            set(&key, value, &mut model, &mut train)?;
        }
    }
    if let Some(seed) = seed {
        set("seed", seed.into(), &mut model, &mut train)?;
        set("init_seed", seed.into(), &mut model, &mut train)?;
    }
    for entry in overrides {
        let (key, raw) = entry
            .split_once('=')
            .ok_or_else(|| usage(format!("override `{entry}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        set(key.trim(), value, &mut model, &mut train)?;
    }
    let model: ModelConfig =
        serde_json::from_value(Value::Object(model)).map_err(|e| usage(format!("model config: {e}")))?;
    let train: TrainConfig =
        serde_json::from_value(Value::Object(train)).map_err(|e| usage(format!("training config: {e}")))?;
    Ok((model, train))
}

fn read_embeddings(path: Option<&Path>) -> Result<Option<ExternalEmbeddings>> {
    path.map(|p| ExternalEmbeddings::read(p).with_context(|| p.display().to_string()))
        .transpose()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (model_config, mut train_config) = build_configs(a.config.as_deref(), &a.overrides, a.seed)?;
    train_config.checkpoint_dir = Some(a.out.clone());
    let ontology = a.ontology.as_deref().map(Ontology::read).transpose()?;
    let train_set = read_mentions(&a.train, ontology.as_ref())?;
    let dev = match &a.dev {
        Some(path) => read_mentions(path, ontology.as_ref())?,
        None => Corpus::default(),
    };
    let mut labels = train_set.ontology.clone();
    labels.merge(&dev.ontology);
    if let Some(ont) = &ontology {
        labels.merge(ont);
    }
    let model_config = if model_config.event_types.is_empty() {
        model_config.with_ontology(&labels)
    } else {
        model_config
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let embeddings = read_embeddings(a.embeddings.as_deref())?;
    let outcome = train(&train_set, &dev, &model_config, &train_config, embeddings.as_ref())?;
    let best = outcome.history[outcome.best.epoch - 1].dev;
    if a.json {
        let summary = serde_json::json!({
            "best_epoch": outcome.best.epoch,
            "steps": outcome.best.step,
            "rejected": outcome.rejected,
            "dev": best,
        });
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        println!("best epoch {} of {}", outcome.best.epoch, train_config.epochs);
        if let Some(report) = best {
            print!("{report}");
        }
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let (parser, ckpt) = Checkpoint::load(&a.checkpoint).with_context(|| a.checkpoint.display().to_string())?;
    let input = read_mentions(&a.input, None)?.without_mentions();
    let embeddings = read_embeddings(a.embeddings.as_deref())?;
    let predicted = predict_corpus(&parser, &ckpt.params, &input, embeddings.as_ref())?;
    match a.to {
        Format::Mentions => write_corpus_to(&predicted, create(&a.output)?)?,
        Format::Graph => write_graphs_to(&corpus_to_graphs(&a.output, &predicted)?, create(&a.output)?)?,
    }
    eprintln!("wrote {} predictions to {}", predicted.len(), a.output.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let gold = read_mentions(&a.gold, None)?;
    let pred = match sniff(&a.pred)? {
        Some(LineSchema::Graph) => graphs_to_corpus(&a.pred, &read_graph_lines(&a.pred)?, &gold)?,
        _ => read_mentions(&a.pred, None)?,
    };
    let report = score_corpus(&pred, &gold)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{report}");
    }
    Ok(())
}
