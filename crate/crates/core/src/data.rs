//! Feature ingestion and seeded synthetic hierarchical datasets.
//!
//! A [`FeatureStore`] maps sample ids to frozen base feature vectors together
//! with their (hidden) leaf class and their base/novel split. Feature files
//! are plain text:
//!
//! ```text
//! dim=4
//! s00001,wolf,base,0.1,0.2,0.3,0.4
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{ConceptTree, LoadOptions, NodeId, TreeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("feature dimension must be positive")]
    ZeroDim,
    #[error("sample `{id}` has {found} values, expected {expected}")]
    DimMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("sample `{0}` has a non-finite value")]
    NonFinite(String),
    #[error("duplicate sample id `{0}`")]
    DuplicateSample(String),
    #[error("leaf `{0}` appears in both base and novel splits")]
    SplitOverlap(String),
    #[error("unknown leaf label `{0}`")]
    UnknownLeaf(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Identifier of a data sample, unique within a store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(String);

impl SampleId {
    pub fn new(id: impl Into<String>) -> Self {
        SampleId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SampleId {
    fn from(s: &str) -> Self {
        SampleId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Novel => "novel",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Split::Base),
            "novel" => Ok(Split::Novel),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Resolves a sample to its ground-truth leaf.
pub trait LeafLookup {
    fn leaf_of(&self, id: &SampleId) -> Option<&NodeId>;
}

impl LeafLookup for HashMap<SampleId, NodeId> {
    fn leaf_of(&self, id: &SampleId) -> Option<&NodeId> {
        self.get(id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub leaf: NodeId,
    pub split: Split,
    pub features: Vec<f64>,
}

/// Validated collection of base feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    samples: Vec<Sample>,
    index: HashMap<SampleId, usize>,
    leaf_split: HashMap<NodeId, Split>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::ZeroDim);
        }
        Ok(FeatureStore {
            dim,
            samples: Vec::new(),
            index: HashMap::new(),
            leaf_split: HashMap::new(),
        })
    }

    pub fn push(&mut self, sample: Sample) -> Result<(), DataError> {
        if sample.features.len() != self.dim {
            return Err(DataError::DimMismatch {
                id: sample.id.0,
                expected: self.dim,
                found: sample.features.len(),
            });
        }
        if sample.features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(sample.id.0));
        }
        if self.index.contains_key(&sample.id) {
            return Err(DataError::DuplicateSample(sample.id.0));
        }
        match self.leaf_split.get(&sample.leaf) {
            Some(&s) if s != sample.split => {
                return Err(DataError::SplitOverlap(sample.leaf.to_string()))
            }
            Some(_) => {}
            None => {
                self.leaf_split.insert(sample.leaf.clone(), sample.split);
            }
        }
        self.index.insert(sample.id.clone(), self.samples.len());
        self.samples.push(sample);
        Ok(())
    }

    /// Parses a feature file.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(DataError::Parse {
            line: 1,
            message: "missing `dim=<d>` header".into(),
        })?;
        let dim = header
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or_else(|| DataError::Parse {
                line: 1,
                message: format!("bad header `{header}`"),
            })?;
        let mut store = FeatureStore::new(dim)?;
        for (i, line) in lines {
            let lineno = i + 1;
            let mut fields = line.trim_end_matches('\r').split(',');
            let mut next = |what: &str| {
                fields
                    .next()
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| DataError::Parse {
                        line: lineno,
                        message: format!("missing {what}"),
                    })
            };
            let id = SampleId::from(next("sample id")?);
            let leaf = NodeId::from(next("leaf label")?);
            let split = next("split")?
                .parse::<Split>()
                .map_err(|message| DataError::Parse { line: lineno, message })?;
            let features = fields
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|e| DataError::Parse {
                        line: lineno,
                        message: format!("bad value `{v}`: {e}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            store.push(Sample {
                id,
                leaf,
                split,
                features,
            })?;
        }
        Ok(store)
    }

    /// Parses a feature file and checks every leaf label against `tree`.
    pub fn parse_for_tree(text: &str, tree: &ConceptTree) -> Result<Self, DataError> {
        let store = Self::parse(text)?;
        store.validate_against(tree)?;
        Ok(store)
    }

    pub fn validate_against(&self, tree: &ConceptTree) -> Result<(), DataError> {
        for s in &self.samples {
            if !tree.is_leaf(s.leaf.as_str()) {
                return Err(DataError::UnknownLeaf(s.leaf.to_string()));
            }
        }
        Ok(())
    }

    /// Serializes with 17 significant digits, which round-trips exactly.
    pub fn to_text(&self) -> String {
        let mut out = format!("dim={}\n", self.dim);
        for s in &self.samples {
            out.push_str(&format!("{},{},{}", s.id, s.leaf, s.split.as_str()));
            for v in &s.features {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, id: &SampleId) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn features(&self, id: &SampleId) -> Option<&[f64]> {
        self.get(id).map(|s| s.features.as_slice())
    }

    /// Sample ids of one split, in store order.
    pub fn ids_in(&self, split: Split) -> Vec<SampleId> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.id.clone())
            .collect()
    }

    /// Distinct leaves of one split, sorted.
    pub fn leaves_in(&self, split: Split) -> BTreeSet<NodeId> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.leaf.clone())
            .collect()
    }
}

impl LeafLookup for FeatureStore {
    fn leaf_of(&self, id: &SampleId) -> Option<&NodeId> {
        self.get(id).map(|s| &s.leaf)
    }
}

/// Shape and noise parameters of a synthetic hierarchical dataset.
///
/// Node means are nested isotropic Gaussians: top-layer means are drawn
/// around the origin with `layer_scales[0]`, each child mean is its parent
/// mean plus jitter at its own layer's scale, and samples add `obs_noise`
/// around their leaf mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    /// Children per node at each layer below the root.
    pub branching: Vec<usize>,
    /// Mean jitter per layer, strictly decreasing and positive.
    pub layer_scales: Vec<f64>,
    pub obs_noise: f64,
    pub samples_per_leaf: usize,
    pub base_fraction: f64,
    pub novel_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 128,
            branching: vec![2, 5, 10],
            layer_scales: vec![1.0, 0.8, 0.6],
            obs_noise: 4.0,
            samples_per_leaf: 20,
            base_fraction: 0.6,
            novel_fraction: 0.4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn leaf_count(&self) -> usize {
        self.branching.iter().product()
    }

    fn base_leaf_count(&self) -> usize {
        (self.leaf_count() as f64 * self.base_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_owned()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.branching.is_empty() || self.branching.contains(&0) {
            return bad("branching factors must be positive and non-empty");
        }
        if self.layer_scales.len() != self.branching.len() {
            return bad("need one scale per layer");
        }
        if self.layer_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("layer scales must be positive");
        }
        if self.layer_scales.windows(2).any(|w| w[0] <= w[1]) {
            return bad("layer scales must strictly decrease with depth");
        }
        if !(self.obs_noise.is_finite() && self.obs_noise >= 0.0) {
            return bad("observation noise must be non-negative");
        }
        if self.samples_per_leaf == 0 {
            return bad("samples per leaf must be positive");
        }
        if !(self.base_fraction >= 0.0 && self.novel_fraction >= 0.0)
            || (self.base_fraction + self.novel_fraction - 1.0).abs() > 1e-9
        {
            return bad("split fractions must be non-negative and sum to 1");
        }
        let base = self.base_leaf_count();
        if base < 2 || self.leaf_count() - base.min(self.leaf_count()) < 2 {
            return bad("each split needs at least 2 leaves");
        }
        Ok(())
    }
}

/// Builds a layered tree and a hierarchical Gaussian feature store.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(ConceptTree, FeatureStore), DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gauss = |scale: f64, rng: &mut ChaCha8Rng| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    };

    let mut edges = vec![("root".to_owned(), None, "root".to_owned())];
    let mut layer: Vec<(String, Vec<f64>)> = vec![("root".to_owned(), vec![0.0; cfg.dim])];
    for (&branch, &scale) in cfg.branching.iter().zip(&cfg.layer_scales) {
        let mut next = Vec::with_capacity(layer.len() * branch);
        for (parent, mean) in &layer {
            for c in 0..branch {
                let id = if parent == "root" {
                    format!("n{c}")
                } else {
                    format!("{parent}.{c}")
                };
                let child_mean = mean.iter().map(|m| m + gauss(scale, &mut rng)).collect();
                edges.push((id.clone(), Some(parent.clone()), id.clone()));
                next.push((id, child_mean));
            }
        }
        layer = next;
    }
    let tree = ConceptTree::from_edges(edges, LoadOptions::default())?;

    let mut order: Vec<usize> = (0..layer.len()).collect();
    order.shuffle(&mut rng);
    let mut split = vec![Split::Novel; layer.len()];
    for &i in &order[..cfg.base_leaf_count()] {
        split[i] = Split::Base;
    }

    let mut store = FeatureStore::new(cfg.dim)?;
    let mut counter = 0usize;
    for ((leaf, mean), split) in layer.iter().zip(split) {
        for _ in 0..cfg.samples_per_leaf {
            let features = mean.iter().map(|m| m + gauss(cfg.obs_noise, &mut rng)).collect();
            store.push(Sample {
                id: SampleId(format!("s{counter:05}")),
                leaf: NodeId::new(leaf.clone()),
                split,
                features,
            })?;
            counter += 1;
        }
    }
    Ok((tree, store))
}
