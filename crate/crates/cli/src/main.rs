use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adatag::attribute_embeddings::{
    build_uncontextualized, ingest_contextualized, random_table, AttributeEmbeddingTable,
};
use adatag::checkpoint;
use adatag::config::TrainConfig;
use adatag::corpus::{
    build_corpus, read_products, tokenize, AttributeVocab, CorpusOptions, LabeledExample,
    SplitManifest,
};
use adatag::encoder::{StaticVectors, WordVocab};
use adatag::evaluation::evaluate;
use adatag::io::{file_sha256, read_json, read_jsonl, write_json, write_jsonl};
use adatag::model::{count_config, Model};
use adatag::synth::{generate, SynthSpec};
use adatag::training::{train, TrainOptions};
use adatag::{ErrorClass, Mode};
use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adatag",
    version,
    about = "Attribute value extraction with an attribute-conditioned CRF decoder"
)]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distant-label product text with catalog values.
    Label(LabelArgs),
    /// Build the attribute embedding table.
    Embed(EmbedArgs),
    /// Train a model and write its best checkpoint.
    Train(TrainArgs),
    /// Extract values from raw text.
    Extract(ExtractArgs),
    /// Score a checkpoint on labeled examples.
    Eval(EvalArgs),
    /// Count parameters of a checkpoint or a configuration.
    ParamCount(ParamCountArgs),
    /// Generate a templated synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct LabelArgs {
    /// Products JSONL.
    #[arg(long)]
    products: PathBuf,
    /// Attribute vocabulary JSON.
    #[arg(long)]
    attributes: PathBuf,
    /// `title` or `title_plus_bullets`.
    #[arg(long, default_value = "title")]
    setting: String,
    /// Also emit all-O examples for unmatched pairs.
    #[arg(long)]
    include_negatives: bool,
    /// Labeled examples JSONL to write.
    #[arg(long)]
    out: PathBuf,
    /// Coverage report JSON (defaults to `<out>.coverage.json`).
    #[arg(long)]
    coverage: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Attribute vocabulary JSON.
    #[arg(long)]
    attributes: PathBuf,
    /// Labeled training examples JSONL (for static-vector embeddings).
    #[arg(long)]
    examples: Option<PathBuf>,
    /// Restrict `--examples` to the training products of this split manifest.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Static word vectors in text format.
    #[arg(long, conflicts_with_all = ["contextualized", "random"])]
    vectors: Option<PathBuf>,
    /// Externally produced contextualized instance vectors (JSONL).
    #[arg(long, conflicts_with = "random")]
    contextualized: Option<PathBuf>,
    /// Draw a random trainable table of this size.
    #[arg(long, value_name = "D_R")]
    random: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Preset name (adatag_default, desk) or TOML file.
    #[arg(long, default_value = "adatag_default")]
    config: String,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    d_word: Option<usize>,
    #[arg(long)]
    d_r: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long = "epochs")]
    max_epochs: Option<usize>,
    /// Comma-separated attribute subset.
    #[arg(long, value_delimiter = ',')]
    attributes: Option<Vec<String>>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut c = TrainConfig::resolve(&self.config)?;
        if let Some(v) = &self.variant {
            c.variant = v.parse()?;
        }
        if let Some(s) = &self.setting {
            c.setting = s.parse()?;
        }
        macro_rules! apply {
            ($($field:ident),*) => {$(if let Some(v) = self.$field.clone() { c.$field = v; })*};
        }
        apply!(
            seed,
            d_h,
            d_word,
            d_r,
            k,
            batch_size,
            learning_rate,
            patience,
            max_epochs
        );
        if let Some(a) = &self.attributes {
            c.attributes = Some(a.clone());
        }
        c.validate()?;
        log::info!("resolved config:\n{}", c.to_toml().trim_end());
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Labeled examples JSONL (all splits).
    #[arg(long)]
    examples: PathBuf,
    /// Split manifest assigning product ids to train/dev/test.
    #[arg(long)]
    splits: PathBuf,
    /// Attribute vocabulary JSON.
    #[arg(long = "attribute-vocab")]
    attribute_vocab: PathBuf,
    /// Static word vectors used to initialize word embeddings.
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Attribute embedding table (required by `adatag`).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Checkpoint manifest to write; the payload goes next to it as `.bin`.
    #[arg(long)]
    out: PathBuf,
    /// Also write the training report here (it is always printed).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Attribute id(s), comma-separated.
    #[arg(long = "attr", required = true, value_delimiter = ',')]
    attributes: Vec<String>,
    /// Text to extract from.
    #[arg(long, conflicts_with = "input")]
    text: Option<String>,
    /// File with one text per line; prints one JSON object per line.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled examples JSONL.
    #[arg(long)]
    examples: PathBuf,
    /// Keep only the products of `--split` in this manifest.
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "dev", "test"])]
    split: String,
    /// Comma-separated attribute subset.
    #[arg(long, value_delimiter = ',')]
    attributes: Option<Vec<String>>,
    /// Add high/low-resource sub-reports split at this training count.
    #[arg(long, num_args = 0..=1, default_missing_value = "1000", value_name = "THRESHOLD")]
    stratify: Option<usize>,
    /// Metrics report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-example predictions JSONL.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct ParamCountArgs {
    #[arg(long, conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Word vocabulary size assumed when counting from a configuration.
    #[arg(long, default_value_t = 10_000)]
    vocab_size: usize,
    /// Number of attributes assumed when counting from a configuration.
    #[arg(long, default_value_t = 12)]
    num_attributes: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Built-in template set: overfit or sharing.
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// Template spec JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Files written by the running command, removed again if it fails.
#[derive(Default)]
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn add(&mut self, path: &Path) -> PathBuf {
        self.0.push(path.to_path_buf());
        path.to_path_buf()
    }

    fn remove_all(&self) {
        for p in &self.0 {
            if p.is_file() {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

fn log_input(path: &Path) -> anyhow::Result<()> {
    log::info!("input {} sha256 {}", path.display(), file_sha256(path)?);
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn attribute_vocab(path: &Path) -> anyhow::Result<AttributeVocab> {
    log_input(path)?;
    Ok(AttributeVocab::load(path)?)
}

fn label(args: &LabelArgs, mode: Mode, outputs: &mut Outputs) -> anyhow::Result<()> {
    let vocab = attribute_vocab(&args.attributes)?;
    log_input(&args.products)?;
    let (products, malformed) = read_products(&args.products)?;
    for m in &malformed {
        log::warn!(
            "{}:{}: skipped malformed product: {}",
            args.products.display(),
            m.line,
            m.message
        );
    }
    let options = CorpusOptions {
        include_negatives: args.include_negatives,
        mode: Some(mode),
    };
    let (examples, mut report) = build_corpus(&products, &vocab, args.setting.parse()?, options);
    report.malformed_lines = malformed;
    let coverage = args
        .coverage
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.coverage.json", args.out.display())));
    write_jsonl(&outputs.add(&args.out), &examples)?;
    write_json(&outputs.add(&coverage), &report)?;
    log::info!(
        "{} products, {} examples, {} dropped pairs, {} negatives",
        report.products,
        report.examples,
        report.dropped_pairs,
        report.negatives
    );
    Ok(())
}

fn read_examples(path: &Path) -> anyhow::Result<Vec<LabeledExample>> {
    log_input(path)?;
    Ok(read_jsonl(path)?)
}

fn load_splits(path: &Path) -> anyhow::Result<SplitManifest> {
    log_input(path)?;
    Ok(SplitManifest::load(path)?)
}

fn embed(args: &EmbedArgs, outputs: &mut Outputs) -> anyhow::Result<()> {
    let vocab = attribute_vocab(&args.attributes)?;
    let table = if let Some(path) = &args.contextualized {
        log_input(path)?;
        let table = ingest_contextualized(path)?;
        for id in vocab.ids() {
            if table.get(id).is_none() {
                bail!(adatag::Error::Data(format!(
                    "contextualized vectors lack attribute `{id}`"
                )));
            }
        }
        table
    } else if let Some(d_r) = args.random {
        random_table(&vocab, d_r, args.seed)?
    } else {
        let vectors = args
            .vectors
            .as_ref()
            .ok_or_else(|| anyhow!("one of --vectors, --contextualized or --random is required"))?;
        let examples_path = args
            .examples
            .as_ref()
            .ok_or_else(|| anyhow!("--vectors needs --examples"))?;
        let mut examples = read_examples(examples_path)?;
        if let Some(splits) = &args.splits {
            examples = load_splits(splits)?.apply(examples).train;
        }
        log_input(vectors)?;
        let vectors = StaticVectors::load(vectors)?;
        let (table, flagged) = build_uncontextualized(&examples, &vocab, &vectors)?;
        if !flagged.is_empty() {
            log::warn!("name-only embeddings for: {}", flagged.join(", "));
        }
        table
    };
    table.save(&outputs.add(&args.out))?;
    log::info!(
        "{} attributes, d_r = {}, {} table",
        table.len(),
        table.d_r(),
        table.provenance()
    );
    Ok(())
}

fn train_command(args: &TrainArgs, mode: Mode, outputs: &mut Outputs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let attributes = attribute_vocab(&args.attribute_vocab)?;
    let examples = read_examples(&args.examples)?;
    if let Some(ex) = examples.iter().find(|e| e.source_field != config.setting) {
        bail!(adatag::Error::Config(format!(
            "example `{}` was labeled from {:?} but the configured setting is {:?}",
            ex.id, ex.source_field, config.setting
        )));
    }
    let splits = load_splits(&args.splits)?.apply(examples);
    let vectors = match &args.vectors {
        Some(p) => {
            log_input(p)?;
            Some(StaticVectors::load(p)?)
        }
        None => None,
    };
    let table = match &args.embeddings {
        Some(p) => {
            log_input(p)?;
            Some(AttributeEmbeddingTable::load(p)?)
        }
        None => None,
    };
    let texts = |xs: &[LabeledExample]| -> Vec<String> {
        xs.iter()
            .flat_map(|e| e.tokens.iter().map(|t| t.text.clone()))
            .collect()
    };
    let train_tokens = texts(&splits.train);
    let other_tokens = [texts(&splits.dev), texts(&splits.test)].concat();
    let words = WordVocab::build(
        train_tokens.iter().map(String::as_str),
        other_tokens.iter().map(String::as_str),
        vectors.as_ref(),
    );
    log::info!(
        "{} train / {} dev examples, {} words",
        splits.train.len(),
        splits.dev.len(),
        words.len()
    );
    let mut model = Model::new(&config, words, attributes, vectors.as_ref(), table.as_ref())?;
    outputs.add(&args.out);
    outputs.add(&checkpoint::payload_path(&args.out));
    let options = TrainOptions {
        mode,
        checkpoint: Some(args.out.clone()),
    };
    let report = train(&mut model, &splits.train, &splits.dev, &options)?;
    if let Some(path) = &args.report {
        write_json(&outputs.add(path), &report)?;
    }
    print_json(&report)
}

fn extract(args: &ExtractArgs) -> anyhow::Result<()> {
    log_input(&args.checkpoint)?;
    let model = checkpoint::load(&args.checkpoint)?;
    let predictor = model.predictor()?;
    let run = |text: &str| -> anyhow::Result<BTreeMap<String, Vec<String>>> {
        let tokens = tokenize(text);
        let mut out = BTreeMap::new();
        for attr in &args.attributes {
            let values = predictor.extract(attr, &tokens)?;
            out.insert(attr.clone(), values.into_iter().collect());
        }
        Ok(out)
    };
    match (&args.text, &args.input) {
        (Some(text), _) => print_json(&run(text)?),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let mut out = std::io::stdout().lock();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                writeln!(out, "{}", serde_json::to_string(&run(line)?)?)?;
            }
            Ok(())
        }
        (None, None) => {
            Err(adatag::Error::Config("one of --text or --input is required".into()).into())
        }
    }
}

fn eval(args: &EvalArgs, mode: Mode, outputs: &mut Outputs) -> anyhow::Result<()> {
    log_input(&args.checkpoint)?;
    let model = checkpoint::load(&args.checkpoint)?;
    let mut examples = read_examples(&args.examples)?;
    if let Some(path) = &args.splits {
        let s = load_splits(path)?.apply(examples);
        examples = match args.split.as_str() {
            "train" => s.train,
            "dev" => s.dev,
            _ => s.test,
        };
    }
    if let Some(keep) = &args.attributes {
        examples.retain(|e| keep.contains(&e.attribute));
    }
    let before = examples.len();
    examples.retain(|e| model.attributes.index_of(&e.attribute).is_some());
    if examples.len() < before {
        log::warn!(
            "skipped {} examples of attributes the model does not know",
            before - examples.len()
        );
    }
    if examples.is_empty() {
        bail!(adatag::Error::Data("no examples to evaluate".into()));
    }
    let (results, mut report) = evaluate(&model, &examples, mode)?;
    if let Some(threshold) = args.stratify {
        if model.train_counts.is_empty() {
            log::warn!("checkpoint has no training counts; every attribute counts as low-resource");
        }
        report = report.with_strata(&model.train_counts, threshold);
    }
    if let Some(path) = &args.predictions {
        write_jsonl(&outputs.add(path), &results)?;
    }
    if let Some(path) = &args.report {
        write_json(&outputs.add(path), &report)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn param_count(args: &ParamCountArgs) -> anyhow::Result<()> {
    let count = match &args.checkpoint {
        Some(path) => {
            log_input(path)?;
            checkpoint::load(path)?.count()
        }
        None => {
            let config = args.config.resolve()?;
            let ids: Vec<String> = match &config.attributes {
                Some(a) => a.clone(),
                None => (1..=args.num_attributes)
                    .map(|i| format!("attribute_{i}"))
                    .collect(),
            };
            log::info!(
                "assuming {} words and {} attributes",
                args.vocab_size,
                ids.len()
            );
            count_config(&config, args.vocab_size, &AttributeVocab::from_ids(&ids)?)
        }
    };
    if args.json {
        print_json(&count)
    } else {
        print!("{}", count.to_table());
        Ok(())
    }
}

fn synth(args: &SynthArgs, outputs: &mut Outputs) -> anyhow::Result<()> {
    let mut spec = match (&args.preset, &args.spec) {
        (Some(name), _) => SynthSpec::preset(name, args.seed.unwrap_or(0))?,
        (None, Some(path)) => {
            log_input(path)?;
            read_json::<SynthSpec>(path)?
        }
        (None, None) => {
            return Err(
                adatag::Error::Config("one of --preset or --spec is required".into()).into(),
            )
        }
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let corpus = generate(&spec)?;
    for name in [
        "products.jsonl",
        "attributes.json",
        "splits.json",
        "vectors.txt",
    ] {
        outputs.add(&args.out.join(name));
    }
    corpus.write(&args.out)?;
    log::info!(
        "{} products ({} train, {} dev, {} test) in {}",
        corpus.products.len(),
        corpus.splits.train.len(),
        corpus.splits.dev.len(),
        corpus.splits.test.len(),
        args.out.display()
    );
    Ok(())
}

fn run(cli: &Cli, outputs: &mut Outputs) -> anyhow::Result<()> {
    let mode = if cli.sequential {
        Mode::Sequential
    } else {
        Mode::default()
    };
    match &cli.command {
        Command::Label(a) => label(a, mode, outputs),
        Command::Embed(a) => embed(a, outputs),
        Command::Train(a) => train_command(a, mode, outputs),
        Command::Extract(a) => extract(a),
        Command::Eval(a) => eval(a, mode, outputs),
        Command::ParamCount(a) => param_count(a),
        Command::Synth(a) => synth(a, outputs),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err
        .downcast_ref::<adatag::Error>()
        .map(adatag::Error::class)
    {
        Some(ErrorClass::Usage) => 1,
        Some(ErrorClass::Numerical) => 3,
        Some(ErrorClass::Data) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

/// The error and its causes, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let mut outputs = Outputs::default();
    match run(&cli, &mut outputs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            outputs.remove_all();
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
