//! `sfsl`: command-line entry point for the semantic few-shot pipeline.
//!
//! Every configuration key is also a flag (`--n-way 5`), an environment
//! variable (`SFSL_N_WAY=5`) and a config-file line (`n-way = 5`).
//! Flags beat the environment, which beats the file, which beats defaults.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Arg, ArgMatches, Command};

use sfsl_core::annotation::AnswerLog;
use sfsl_core::config::{RunConfig, KEYS};
use sfsl_core::data::{generate_synthetic, FeatureStore};
use sfsl_core::embedding::{train_srn, Checkpoint, Embedder, NormalizedFeatures};
use sfsl_core::hierarchy::{ConceptTree, CIFAR100_TREE};
use sfsl_core::pipeline::{
    checkpoint_for, evaluate, export_embeddings, read_file, reproduce_desk, simulate,
    write_atomic, PipelineError, FEATURES_FILE, REPORT_FILE, TABLE_FILE, TREE_FILE,
};
use sfsl_service::{AppState, ServiceConfig, SystemClock};

enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

macro_rules! from_validation {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}

from_validation!(
    sfsl_core::config::ConfigError,
    sfsl_core::hierarchy::TreeError,
    sfsl_core::data::DataError
);

impl From<sfsl_core::embedding::EmbeddingError> for CliError {
    fn from(e: sfsl_core::embedding::EmbeddingError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<sfsl_core::annotation::AnnotationError> for CliError {
    fn from(e: sfsl_core::annotation::AnnotationError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<sfsl_service::StartError> for CliError {
    fn from(e: sfsl_service::StartError) -> Self {
        match e {
            sfsl_service::StartError::Annotation(a) => a.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn help_for(key: &str) -> &'static str {
    match key {
        "seed" => "Seed for every random stage",
        "tree" => "Concept tree file (id<TAB>parent<TAB>label)",
        "features" => "Feature file",
        "answers" => "Answer log (JSON lines)",
        "checkpoint" => "Head checkpoint file",
        "report" => "Evaluation report file (key=value)",
        "embeddings" => "Embedding export file",
        "out" => "Output directory",
        "n-way" => "Support-set size per episode",
        "k-shot" => "Shots per class in typical episodes",
        "episodes" => "Episodes per evaluation mode",
        "budget" => "Number of answered tests to collect",
        "policy" => "Ambiguous simulated tests: discard | tiebreak-lowest-index",
        "distinct-leaves" => "Draw semantic supports from distinct leaves",
        "margin" => "Triplet margin",
        "lr" => "Learning rate",
        "epochs" => "Training epochs",
        "momentum" => "SGD momentum",
        "decay" => "Learning-rate decay factor",
        "milestones" => "Decay epochs, comma separated, or auto",
        "batch-size" => "Answered tests per step",
        "hidden" => "Hidden width, or auto",
        "output" => "Embedding width, or auto",
        "synth-dim" => "Synthetic feature dimension",
        "synth-branching" => "Synthetic branching per layer, comma separated",
        "synth-scales" => "Synthetic mean jitter per layer, comma separated",
        "synth-noise" => "Synthetic observation noise",
        "synth-samples-per-leaf" => "Synthetic samples per leaf",
        "synth-base-fraction" => "Fraction of leaves in the base split",
        "synth-novel-fraction" => "Fraction of leaves in the novel split",
        "host" => "Service bind address",
        "port" => "Service port",
        "lease-secs" => "Seconds a served test stays leased",
        "image-dir" => "Directory of <sample_id>.png|jpg|svg thumbnails",
        _ => "",
    }
}

fn with_keys(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("Config file of key = value lines"),
    );
    KEYS.iter().fold(cmd, |c, &k| {
        c.arg(
            Arg::new(k)
                .long(k)
                .value_name("VALUE")
                .allow_negative_numbers(true)
                .help(help_for(k)),
        )
    })
}

fn cli() -> Command {
    let sub = |name: &'static str, about: &'static str| with_keys(Command::new(name).about(about));
    Command::new("sfsl")
        .about("Semantic few-shot learning from triplet annotations")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("validate-tree", "Check a concept tree and print its shape"))
        .subcommand(sub("gen-synth", "Write a synthetic tree and feature file to --out"))
        .subcommand(sub("simulate-tests", "Answer --budget tests with the tree oracle"))
        .subcommand(sub("serve", "Serve tests to human annotators over HTTP"))
        .subcommand(sub("train", "Fine-tune the head on an answer log"))
        .subcommand(sub("eval", "Compare untuned features and a trained head"))
        .subcommand(sub("export-embeddings", "Write novel-split embeddings"))
        .subcommand(sub("reproduce-desk", "Run every stage into --out"))
}

fn env_name(key: &str) -> String {
    format!("SFSL_{}", key.to_uppercase().replace('-', "_"))
}

fn load_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_text(&read_input(Path::new(path))?)?;
    }
    for &k in KEYS {
        if let Ok(v) = std::env::var(env_name(k)) {
            cfg.set(k, &v)?;
        }
    }
    for &k in KEYS {
        if let Some(v) = m.get_one::<String>(k) {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// An unreadable input is a configuration problem, not a runtime failure.
fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn required<'a>(v: &'a Option<String>, key: &str) -> Result<&'a Path> {
    v.as_deref()
        .map(Path::new)
        .ok_or_else(|| CliError::Validation(format!("--{key} is required")))
}

fn load_tree(cfg: &RunConfig) -> Result<ConceptTree> {
    Ok(ConceptTree::parse(&read_input(required(&cfg.tree, "tree")?)?)?)
}

fn load_features(cfg: &RunConfig, tree: Option<&ConceptTree>) -> Result<FeatureStore> {
    let text = read_input(required(&cfg.features, "features")?)?;
    Ok(match tree {
        Some(t) => FeatureStore::parse_for_tree(&text, t)?,
        None => FeatureStore::parse(&text)?,
    })
}

fn load_answers(cfg: &RunConfig) -> Result<Vec<sfsl_core::annotation::TestAnswer>> {
    let text = read_input(required(&cfg.answers, "answers")?)?;
    Ok(AnswerLog::parse(&text)?)
}

fn load_head(cfg: &RunConfig) -> Result<Checkpoint> {
    Ok(Checkpoint::parse(&read_input(required(&cfg.checkpoint, "checkpoint")?)?)?)
}

fn validate_tree(cfg: &RunConfig) -> Result<()> {
    let (tree, source) = match &cfg.tree {
        Some(p) => (ConceptTree::parse(&read_input(Path::new(p))?)?, p.as_str()),
        None => (ConceptTree::parse(CIFAR100_TREE)?, "built-in CIFAR-100 tree"),
    };
    let layers = tree.layer_sizes();
    let below: Vec<String> = layers[1..].iter().map(usize::to_string).collect();
    println!("tree: {source}");
    println!("nodes: {}", tree.len());
    println!("leaves: {}", tree.leaf_count());
    println!("height: {}", tree.tree_height());
    println!("layers below root: {}", below.join("/"));
    Ok(())
}

fn gen_synth(cfg: &RunConfig) -> Result<()> {
    let out = PathBuf::from(required(&cfg.out, "out")?);
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let (tree, store) = generate_synthetic(&cfg.synth)?;
    write_atomic(&out.join(TREE_FILE), &tree.to_tsv())?;
    write_atomic(&out.join(FEATURES_FILE), &store.to_text())?;
    println!(
        "wrote {} leaves and {} samples to {}",
        tree.leaf_count(),
        store.len(),
        out.display()
    );
    Ok(())
}

fn simulate_tests(cfg: &RunConfig) -> Result<()> {
    let tree = load_tree(cfg)?;
    let store = load_features(cfg, Some(&tree))?;
    let path = required(&cfg.answers, "answers")?;
    let answers = simulate(&tree, &store, cfg)?;
    write_atomic(path, &sfsl_core::annotation::to_jsonl(&answers))?;
    println!("wrote {} answers to {}", answers.len(), path.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let store = load_features(cfg, None)?;
    let answers = load_answers(cfg)?;
    let path = required(&cfg.checkpoint, "checkpoint")?;
    let out = train_srn(&store, &answers, &cfg.train)?;
    write_atomic(path, &checkpoint_for(&out.head, cfg).to_text())?;
    println!("answers: {}", answers.len());
    println!("initial loss: {:.6}", out.initial_loss);
    println!("final loss: {:.6}", out.final_loss);
    println!("wrote {}", path.display());
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let tree = load_tree(cfg)?;
    let store = load_features(cfg, Some(&tree))?;
    let head = load_head(cfg)?.head;
    let answers = match &cfg.answers {
        Some(_) => load_answers(cfg)?,
        None => Vec::new(),
    };
    let report = evaluate(&tree, &store, &head, &answers, cfg)?;
    if let Some(path) = &cfg.report {
        write_atomic(Path::new(path), &report.to_kv())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn export(cfg: &RunConfig) -> Result<()> {
    let store = load_features(cfg, None)?;
    let path = required(&cfg.embeddings, "embeddings")?;
    let text = match &cfg.checkpoint {
        Some(_) => export_embeddings(&store, &load_head(cfg)?.head as &dyn Embedder)?,
        None => export_embeddings(&store, &NormalizedFeatures)?,
    };
    write_atomic(path, &text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn desk(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.out, "out")?;
    reproduce_desk(out, cfg)?;
    print!("{}", read_file(&out.join(TABLE_FILE))?);
    println!("report: {}", out.join(REPORT_FILE).display());
    Ok(())
}

fn serve(cfg: &RunConfig) -> Result<()> {
    let store = Arc::new(load_features(cfg, None)?);
    let log = AnswerLog::open(required(&cfg.answers, "answers")?)?;
    let service = ServiceConfig {
        seed: cfg.seed,
        target: cfg.budget,
        lease: Duration::from_secs(cfg.lease_secs),
        image_dir: cfg.image_dir.as_ref().map(PathBuf::from),
    };
    let state = Arc::new(AppState::new(store, log, service, Arc::new(SystemClock::default()))?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    let addr = format!("{}:{}", cfg.host, cfg.port);
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Runtime(format!("{addr}: {e}")))?;
        eprintln!("listening on http://{addr}");
        sfsl_service::serve(listener, state)
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}

fn run(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = load_config(sub)?;
    match name {
        "validate-tree" => validate_tree(&cfg),
        "gen-synth" => gen_synth(&cfg),
        "simulate-tests" => simulate_tests(&cfg),
        "serve" => serve(&cfg),
        "train" => train(&cfg),
        "eval" => eval(&cfg),
        "export-embeddings" => export(&cfg),
        "reproduce-desk" => desk(&cfg),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
