//! End-to-end desk pipeline: synthesize, simulate answers, train, evaluate.
//!
//! Each stage writes one artifact into the output directory and is skipped
//! when that artifact already exists, so an interrupted run resumes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::annotation::{collect_oracle_answers, AnswerLog, AnswerSource, AnnotationError, TestAnswer};
use crate::config::{ConfigError, RunConfig};
use crate::data::{generate_synthetic, DataError, FeatureStore, Sample, Split};
use crate::embedding::{
    average_loss, initial_head, train_srn, Checkpoint, Embedder, EmbeddingError, EmbeddingHead,
    NormalizedFeatures,
};
use crate::episodes::{
    infer_nn, infer_prototype, sample_semantic_task, sample_typical_task, score, EmbeddingTable,
    Episode, EpisodeError, Outcome, Score,
};
use crate::hierarchy::{ConceptTree, TreeError};
use crate::report::{EvalReport, MethodRow};

pub const TREE_FILE: &str = "tree.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const ANSWERS_FILE: &str = "answers.jsonl";
pub const CHECKPOINT_FILE: &str = "head.ckpt";
pub const REPORT_FILE: &str = "report.txt";
pub const TABLE_FILE: &str = "report.md";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// RNG streams, so each stage's draws are independent of the others.
const ANSWER_STREAM: u64 = 1;
const TYPICAL_STREAM: u64 = 2;
const SEMANTIC_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl PipelineError {
    /// Bad input or configuration, as opposed to a failure while running.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            PipelineError::Io { .. }
                | PipelineError::Annotation(AnnotationError::Io(_))
                | PipelineError::Annotation(AnnotationError::Exhausted { .. })
                | PipelineError::Embedding(EmbeddingError::NonFinite)
        )
    }
}

pub fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn read_file(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes through a temporary sibling and renames, so a crash never leaves
/// a half-written artifact under the final name.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), PipelineError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Oracle answers for `cfg.budget` tests drawn over the base split.
pub fn simulate(
    tree: &ConceptTree,
    store: &FeatureStore,
    cfg: &RunConfig,
) -> Result<Vec<TestAnswer>, PipelineError> {
    let pool = store.ids_in(Split::Base);
    let mut rng = stage_rng(cfg.seed, ANSWER_STREAM);
    Ok(collect_oracle_answers(
        &pool, cfg.budget, tree, store, cfg.policy, &mut rng,
    )?)
}

/// Typical and semantic episodes shared by every evaluated method.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSet {
    pub typical: Vec<Episode>,
    pub semantic: Vec<Episode>,
}

pub fn sample_episodes(store: &FeatureStore, cfg: &RunConfig) -> Result<EpisodeSet, PipelineError> {
    let mut rng = stage_rng(cfg.seed, TYPICAL_STREAM);
    let typical = (0..cfg.episodes)
        .map(|_| sample_typical_task(store, cfg.n_way, cfg.k_shot, &mut rng))
        .collect::<Result<_, _>>()?;
    let mut rng = stage_rng(cfg.seed, SEMANTIC_STREAM);
    let semantic = (0..cfg.episodes)
        .map(|_| sample_semantic_task(store, cfg.n_way, cfg.distinct_leaves, &mut rng))
        .collect::<Result<_, _>>()?;
    Ok(EpisodeSet { typical, semantic })
}

/// Nearest-prototype on typical episodes and nearest-neighbour on semantic
/// episodes, both over `embedder`'s novel-split embeddings.
pub fn evaluate_embedder(
    episodes: &EpisodeSet,
    tree: &ConceptTree,
    store: &FeatureStore,
    embedder: &dyn Embedder,
) -> Result<(Score, Score), PipelineError> {
    let table = EmbeddingTable::build(store, embedder, Some(Split::Novel))?;
    let typical = episodes
        .typical
        .iter()
        .map(|ep| {
            let p = infer_prototype(ep, &table, store)?;
            Ok(Outcome {
                episode: ep.clone(),
                chosen: p.support_index,
                tied: p.tied,
            })
        })
        .collect::<Result<Vec<_>, EpisodeError>>()?;
    let semantic = episodes
        .semantic
        .iter()
        .map(|ep| {
            let c = infer_nn(ep, &table)?;
            Ok(Outcome {
                episode: ep.clone(),
                chosen: c.index,
                tied: c.tied,
            })
        })
        .collect::<Result<Vec<_>, EpisodeError>>()?;
    Ok((score(&typical, tree, store)?, score(&semantic, tree, store)?))
}

fn supervision(answers: &[TestAnswer]) -> &'static str {
    let oracle = answers.iter().any(|a| a.source == AnswerSource::Oracle);
    let human = answers.iter().any(|a| a.source == AnswerSource::Human);
    match (oracle, human) {
        (true, false) => "3afc-simulated",
        (false, true) => "3afc-human",
        _ => "3afc-mixed",
    }
}

/// Compares the untuned features against `head` on one shared episode set.
pub fn evaluate(
    tree: &ConceptTree,
    store: &FeatureStore,
    head: &EmbeddingHead,
    answers: &[TestAnswer],
    cfg: &RunConfig,
) -> Result<EvalReport, PipelineError> {
    cfg.validate()?;
    let episodes = sample_episodes(store, cfg)?;
    let (bt, bs) = evaluate_embedder(&episodes, tree, store, &NormalizedFeatures)?;
    let (ht, hs) = evaluate_embedder(&episodes, tree, store, head)?;
    let mut notes = Vec::new();
    if !answers.is_empty() {
        let init = initial_head(store.dim(), &cfg.train);
        let initial = average_loss(&init, store, answers, cfg.train.margin)?;
        let last = average_loss(head, store, answers, cfg.train.margin)?;
        notes.push(("train.initial_loss".to_owned(), format!("{initial:.6}")));
        notes.push(("train.final_loss".to_owned(), format!("{last:.6}")));
    }
    Ok(EvalReport {
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        episodes: cfg.episodes,
        seed: cfg.seed,
        rows: vec![
            MethodRow {
                method: "untuned-features".into(),
                supervision: "none".into(),
                annotations: 0,
                typical: bt,
                semantic: bs,
            },
            MethodRow {
                method: "srn".into(),
                supervision: supervision(answers).into(),
                annotations: answers.len(),
                typical: ht,
                semantic: hs,
            },
        ],
        notes,
        config: cfg.echo(),
    })
}

/// One row per novel sample in the feature-file format, vectors replaced
/// by their unit-norm embeddings.
pub fn export_embeddings(
    store: &FeatureStore,
    embedder: &dyn Embedder,
) -> Result<String, PipelineError> {
    let mut out: Option<FeatureStore> = None;
    for s in store.samples().iter().filter(|s| s.split == Split::Novel) {
        let v = embedder.embed(&s.features)?;
        let dst = match &mut out {
            Some(o) => o,
            None => out.insert(FeatureStore::new(v.len())?),
        };
        dst.push(Sample {
            id: s.id.clone(),
            leaf: s.leaf.clone(),
            split: Split::Novel,
            features: v,
        })?;
    }
    Ok(match out {
        Some(o) => o.to_text(),
        None => FeatureStore::new(store.dim())?.to_text(),
    })
}

/// Artifacts of a desk run.
#[derive(Debug, Clone)]
pub struct DeskRun {
    pub tree: ConceptTree,
    pub store: FeatureStore,
    pub answers: Vec<TestAnswer>,
    pub head: EmbeddingHead,
    pub report: EvalReport,
}

pub fn checkpoint_for(head: &EmbeddingHead, cfg: &RunConfig) -> Checkpoint {
    let keys = [
        "seed", "margin", "lr", "epochs", "momentum", "decay", "milestones", "batch-size",
    ];
    Checkpoint {
        head: head.clone(),
        config: keys
            .iter()
            .map(|&k| (k.to_owned(), cfg.get(k).expect("known key")))
            .collect(),
    }
}

/// Runs every stage in memory, writing nothing.
pub fn run_desk(cfg: &RunConfig) -> Result<DeskRun, PipelineError> {
    cfg.validate()?;
    let (tree, store) = generate_synthetic(&cfg.synth)?;
    let answers = simulate(&tree, &store, cfg)?;
    let head = train_srn(&store, &answers, &cfg.train)?.head;
    let report = evaluate(&tree, &store, &head, &answers, cfg)?;
    Ok(DeskRun {
        tree,
        store,
        answers,
        head,
        report,
    })
}

/// Runs every stage against `out`, reusing artifacts already present.
pub fn reproduce_desk(out: &Path, cfg: &RunConfig) -> Result<DeskRun, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_atomic(&out.join(CONFIG_FILE), &cfg.to_text())?;

    let (tree_path, features_path) = (out.join(TREE_FILE), out.join(FEATURES_FILE));
    let (tree, store) = if tree_path.exists() && features_path.exists() {
        let tree = ConceptTree::parse(&read_file(&tree_path)?)?;
        let store = FeatureStore::parse_for_tree(&read_file(&features_path)?, &tree)?;
        (tree, store)
    } else {
        let (tree, store) = generate_synthetic(&cfg.synth)?;
        write_atomic(&tree_path, &tree.to_tsv())?;
        write_atomic(&features_path, &store.to_text())?;
        (tree, store)
    };

    let answers_path = out.join(ANSWERS_FILE);
    let existing = if answers_path.exists() {
        AnswerLog::open(&answers_path)?.answers().to_vec()
    } else {
        Vec::new()
    };
    let answers = if existing.len() >= cfg.budget {
        existing[..cfg.budget].to_vec()
    } else {
        let answers = simulate(&tree, &store, cfg)?;
        write_atomic(&answers_path, &crate::annotation::to_jsonl(&answers))?;
        answers
    };

    let ckpt_path = out.join(CHECKPOINT_FILE);
    let head = if ckpt_path.exists() {
        Checkpoint::parse(&read_file(&ckpt_path)?)?.head
    } else {
        let head = train_srn(&store, &answers, &cfg.train)?.head;
        write_atomic(&ckpt_path, &checkpoint_for(&head, cfg).to_text())?;
        head
    };

    let report = evaluate(&tree, &store, &head, &answers, cfg)?;
    write_atomic(&out.join(REPORT_FILE), &report.to_kv())?;
    write_atomic(&out.join(TABLE_FILE), &report.to_table())?;
    write_atomic(&out.join(EMBEDDINGS_FILE), &export_embeddings(&store, &head)?)?;
    Ok(DeskRun {
        tree,
        store,
        answers,
        head,
        report,
    })
}
