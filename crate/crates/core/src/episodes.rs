//! Few-shot episodes over the novel split: sampling, nearest-neighbour and
//! nearest-prototype inference, and typical / semantic scoring.

use std::collections::HashMap;

use num_rational::Ratio;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FeatureStore, LeafLookup, SampleId, Split};
use crate::embedding::{pair_distance, Embedder, EmbeddingError};
use crate::hierarchy::{ConceptTree, NodeId, TreeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpisodeError {
    #[error("need {need} samples, pool has {have}")]
    PoolTooSmall { need: usize, have: usize },
    #[error("need {need} classes with enough samples, found {have}")]
    InsufficientClasses { need: usize, have: usize },
    #[error("query class `{0}` has too few samples for a distinct query")]
    QueryClassTooSmall(String),
    #[error("sample `{0}` is unknown")]
    UnknownSample(String),
    #[error("nearest-prototype inference needs a typical episode")]
    NotTypical,
    #[error("episode has no support samples")]
    EmptySupport,
    #[error("way must be at least 1")]
    ZeroWay,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeMode {
    /// N classes, K shots each; the query's class is among them.
    Typical,
    /// N samples drawn directly; the query may match no support class.
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<SampleId>,
    pub query: SampleId,
    pub mode: EpisodeMode,
}

/// Draws `n_way + 1` distinct novel samples uniformly; the last is the
/// query. With `distinct_leaves`, the supports come from distinct leaves.
pub fn sample_semantic_task<R: Rng + ?Sized>(
    store: &FeatureStore,
    n_way: usize,
    distinct_leaves: bool,
    rng: &mut R,
) -> Result<Episode, EpisodeError> {
    if n_way == 0 {
        return Err(EpisodeError::ZeroWay);
    }
    let pool = store.ids_in(Split::Novel);
    if pool.len() < n_way + 1 {
        return Err(EpisodeError::PoolTooSmall {
            need: n_way + 1,
            have: pool.len(),
        });
    }
    if !distinct_leaves {
        let mut picked: Vec<SampleId> = pool.choose_multiple(rng, n_way + 1).cloned().collect();
        let query = picked.pop().expect("n_way + 1 >= 1");
        return Ok(Episode {
            support: picked,
            query,
            mode: EpisodeMode::Semantic,
        });
    }

    let by_leaf = group_by_leaf(store, &pool);
    if by_leaf.len() < n_way {
        return Err(EpisodeError::InsufficientClasses {
            need: n_way,
            have: by_leaf.len(),
        });
    }
    let leaves: Vec<&NodeId> = by_leaf.iter().map(|(l, _)| *l).collect();
    let chosen: Vec<&&NodeId> = leaves.choose_multiple(rng, n_way).collect();
    let support: Vec<SampleId> = chosen
        .iter()
        .map(|leaf| {
            let members = &by_leaf.iter().find(|(l, _)| l == *leaf).expect("grouped").1;
            (*members.choose(rng).expect("non-empty group")).clone()
        })
        .collect();
    let rest: Vec<&SampleId> = pool.iter().filter(|s| !support.contains(s)).collect();
    let query = (*rest.choose(rng).expect("pool larger than support")).clone();
    Ok(Episode {
        support,
        query,
        mode: EpisodeMode::Semantic,
    })
}

/// Novel samples grouped by leaf, leaves in first-seen order.
fn group_by_leaf<'a>(
    store: &'a FeatureStore,
    pool: &'a [SampleId],
) -> Vec<(&'a NodeId, Vec<&'a SampleId>)> {
    let mut groups: Vec<(&NodeId, Vec<&SampleId>)> = Vec::new();
    let mut slot: HashMap<&NodeId, usize> = HashMap::new();
    for id in pool {
        let leaf = store.leaf_of(id).expect("pool drawn from store");
        let i = *slot.entry(leaf).or_insert_with(|| {
            groups.push((leaf, Vec::new()));
            groups.len() - 1
        });
        groups[i].1.push(id);
    }
    groups
}

/// Draws `n_way` distinct novel leaves with `shots` supports each, and a
/// distinct query from one of them.
pub fn sample_typical_task<R: Rng + ?Sized>(
    store: &FeatureStore,
    n_way: usize,
    shots: usize,
    rng: &mut R,
) -> Result<Episode, EpisodeError> {
    if n_way == 0 || shots == 0 {
        return Err(EpisodeError::ZeroWay);
    }
    let pool = store.ids_in(Split::Novel);
    let groups: Vec<(&NodeId, Vec<&SampleId>)> = group_by_leaf(store, &pool)
        .into_iter()
        .filter(|(_, m)| m.len() >= shots)
        .collect();
    if groups.len() < n_way {
        return Err(EpisodeError::InsufficientClasses {
            need: n_way,
            have: groups.len(),
        });
    }
    let classes: Vec<&(&NodeId, Vec<&SampleId>)> = groups.choose_multiple(rng, n_way).collect();
    let query_class = rng.random_range(0..n_way);
    let (query_leaf, members) = classes[query_class];
    if members.len() < shots + 1 {
        return Err(EpisodeError::QueryClassTooSmall(query_leaf.to_string()));
    }

    let mut support = Vec::with_capacity(n_way * shots);
    let mut query = None;
    for (c, (_, members)) in classes.iter().enumerate() {
        let take = if c == query_class { shots + 1 } else { shots };
        let mut picked: Vec<&SampleId> = members.choose_multiple(rng, take).copied().collect();
        if c == query_class {
            query = picked.pop().cloned();
        }
        support.extend(picked.into_iter().cloned());
    }
    Ok(Episode {
        support,
        query: query.expect("query class visited"),
        mode: EpisodeMode::Typical,
    })
}

/// Precomputed embeddings keyed by sample id.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    index: HashMap<SampleId, usize>,
    rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    /// Embeds every sample of `split` (or all samples when `None`).
    pub fn build(
        store: &FeatureStore,
        embedder: &dyn Embedder,
        split: Option<Split>,
    ) -> Result<Self, EpisodeError> {
        let mut table = EmbeddingTable {
            index: HashMap::new(),
            rows: Vec::new(),
        };
        for s in store.samples() {
            if split.is_some_and(|sp| sp != s.split) {
                continue;
            }
            table.insert(s.id.clone(), embedder.embed(&s.features)?);
        }
        Ok(table)
    }

    pub fn from_rows(rows: impl IntoIterator<Item = (SampleId, Vec<f64>)>) -> Self {
        let mut table = EmbeddingTable {
            index: HashMap::new(),
            rows: Vec::new(),
        };
        for (id, v) in rows {
            table.insert(id, v);
        }
        table
    }

    fn insert(&mut self, id: SampleId, v: Vec<f64>) {
        self.index.insert(id, self.rows.len());
        self.rows.push(v);
    }

    pub fn get(&self, id: &SampleId) -> Result<&[f64], EpisodeError> {
        self.index
            .get(id)
            .map(|&i| self.rows[i].as_slice())
            .ok_or_else(|| EpisodeError::UnknownSample(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Index of the chosen support sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Choice {
    pub index: usize,
    /// Another candidate was exactly as close; the lowest index won.
    pub tied: bool,
}

/// Lowest-index argmin with tie detection.
fn argmin(distances: impl IntoIterator<Item = f64>) -> Option<Choice> {
    let mut best: Option<(usize, f64)> = None;
    let mut tied = false;
    for (i, d) in distances.into_iter().enumerate() {
        match best {
            None => best = Some((i, d)),
            Some((_, b)) if d < b => {
                best = Some((i, d));
                tied = false;
            }
            Some((_, b)) if d == b => tied = true,
            _ => {}
        }
    }
    best.map(|(index, _)| Choice { index, tied })
}

/// Nearest support sample to the query.
pub fn infer_nn(ep: &Episode, table: &EmbeddingTable) -> Result<Choice, EpisodeError> {
    let q = table.get(&ep.query)?;
    let distances = ep
        .support
        .iter()
        .map(|s| Ok(pair_distance(q, table.get(s)?)))
        .collect::<Result<Vec<_>, EpisodeError>>()?;
    argmin(distances).ok_or(EpisodeError::EmptySupport)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeChoice {
    /// Predicted class, in order of first appearance in the support set.
    pub class_index: usize,
    pub leaf: NodeId,
    /// First support sample of the predicted class.
    pub support_index: usize,
    pub tied: bool,
}

/// Nearest class mean of the support embeddings.
pub fn infer_prototype(
    ep: &Episode,
    table: &EmbeddingTable,
    labels: &impl LeafLookup,
) -> Result<PrototypeChoice, EpisodeError> {
    if ep.mode != EpisodeMode::Typical {
        return Err(EpisodeError::NotTypical);
    }
    let q = table.get(&ep.query)?;
    let mut classes: Vec<(NodeId, usize, Vec<f64>, usize)> = Vec::new();
    for (i, s) in ep.support.iter().enumerate() {
        let leaf = labels
            .leaf_of(s)
            .ok_or_else(|| EpisodeError::UnknownSample(s.to_string()))?;
        let v = table.get(s)?;
        match classes.iter_mut().find(|(l, ..)| l == leaf) {
            Some((_, _, sum, count)) => {
                sum.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                *count += 1;
            }
            None => classes.push((leaf.clone(), i, v.to_vec(), 1)),
        }
    }
    let distances: Vec<f64> = classes
        .iter()
        .map(|(_, _, sum, count)| {
            let mean: Vec<f64> = sum.iter().map(|v| v / *count as f64).collect();
            pair_distance(q, &mean)
        })
        .collect();
    let choice = argmin(distances).ok_or(EpisodeError::EmptySupport)?;
    let (leaf, first, ..) = &classes[choice.index];
    Ok(PrototypeChoice {
        class_index: choice.index,
        leaf: leaf.clone(),
        support_index: *first,
        tied: choice.tied,
    })
}

/// An episode with the support index a method picked for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub episode: Episode,
    pub chosen: usize,
    pub tied: bool,
}

/// Exact counts over a set of scored episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Score {
    pub episodes: u64,
    /// Chosen support shares the query's leaf.
    pub typical_correct: u64,
    /// Chosen support attains the maximum similarity to the query.
    pub semantic_correct: u64,
    /// Sum of the achieved similarity, exact.
    pub similarity_sum: Ratio<u64>,
    pub ties: u64,
}

impl Score {
    pub fn typical_accuracy(&self) -> f64 {
        self.typical_correct as f64 / self.episodes.max(1) as f64
    }

    pub fn semantic_accuracy(&self) -> f64 {
        self.semantic_correct as f64 / self.episodes.max(1) as f64
    }

    pub fn mean_similarity(&self) -> f64 {
        let s = self.similarity_sum;
        *s.numer() as f64 / *s.denom() as f64 / self.episodes.max(1) as f64
    }

    pub fn merge(&mut self, other: &Score) {
        self.episodes += other.episodes;
        self.typical_correct += other.typical_correct;
        self.semantic_correct += other.semantic_correct;
        self.similarity_sum += other.similarity_sum;
        self.ties += other.ties;
    }
}

/// Scores outcomes against the ground-truth hierarchy.
pub fn score(
    outcomes: &[Outcome],
    tree: &ConceptTree,
    labels: &impl LeafLookup,
) -> Result<Score, EpisodeError> {
    let leaf = |id: &SampleId| {
        labels
            .leaf_of(id)
            .ok_or_else(|| EpisodeError::UnknownSample(id.to_string()))
    };
    let mut s = Score::default();
    for o in outcomes {
        let q = leaf(&o.episode.query)?;
        let sims = o
            .episode
            .support
            .iter()
            .map(|id| Ok(tree.semantic_similarity(q.as_str(), leaf(id)?.as_str())?))
            .collect::<Result<Vec<_>, EpisodeError>>()?;
        let chosen_leaf = leaf(o.episode.support.get(o.chosen).ok_or(EpisodeError::EmptySupport)?)?;
        let best = *sims.iter().max().ok_or(EpisodeError::EmptySupport)?;
        let achieved = sims[o.chosen];
        s.episodes += 1;
        s.typical_correct += u64::from(chosen_leaf == q);
        s.semantic_correct += u64::from(achieved == best);
        s.similarity_sum += Ratio::new(*achieved.numer() as u64, *achieved.denom() as u64);
        s.ties += u64::from(o.tied);
    }
    Ok(s)
}
