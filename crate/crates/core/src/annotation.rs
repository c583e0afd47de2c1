//! Triplet odd-one-out tests, the simulated hierarchy annotator, and the
//! append-only answer log.
//!
//! A test shows three samples; the annotator picks the one that is most
//! dissimilar to the other two. The picked item is the negative, the other
//! two are positives.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{LeafLookup, SampleId};
use crate::hierarchy::{ConceptTree, Rational, TreeError};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("pool has {0} samples, need at least 3")]
    PoolTooSmall(usize),
    #[error("test count must be at least 1")]
    ZeroCount,
    #[error("sample `{0}` has no known leaf")]
    UnknownSample(String),
    #[error("test `{0}` already has an answer")]
    Duplicate(String),
    #[error("invalid answer: {0}")]
    Invalid(String),
    #[error("answer log line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("gave up after {attempts} sampled tests with only {answered} usable answers")]
    Exhausted { attempts: usize, answered: usize },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A 3AFC test over three distinct samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletTest {
    pub test_id: String,
    pub items: [SampleId; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerSource {
    Oracle,
    Human,
}

/// A recorded choice: `items[chosen]` is the negative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestAnswer {
    pub test_id: String,
    pub items: [SampleId; 3],
    pub chosen: u8,
    pub source: AnswerSource,
    pub timestamp: String,
}

impl TestAnswer {
    pub fn new(
        test: &TripletTest,
        chosen: u8,
        source: AnswerSource,
        timestamp: DateTime<Utc>,
    ) -> Self {
        TestAnswer {
            test_id: test.test_id.clone(),
            items: test.items.clone(),
            chosen,
            source,
            timestamp: format_timestamp(timestamp),
        }
    }

    pub fn negative(&self) -> &SampleId {
        &self.items[self.chosen as usize]
    }

    /// The two unpicked items, in test order.
    pub fn positives(&self) -> (&SampleId, &SampleId) {
        let mut rest = (0..3).filter(|&i| i != self.chosen as usize);
        let a = rest.next().expect("three items");
        let b = rest.next().expect("three items");
        (&self.items[a], &self.items[b])
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        if self.test_id.is_empty() {
            return Err(AnnotationError::Invalid("empty test id".into()));
        }
        if self.chosen > 2 {
            return Err(AnnotationError::Invalid(format!(
                "chosen index {} is outside 0..=2",
                self.chosen
            )));
        }
        let [a, b, c] = &self.items;
        if a == b || b == c || a == c {
            return Err(AnnotationError::Invalid(format!(
                "test `{}` repeats an item",
                self.test_id
            )));
        }
        if DateTime::parse_from_rfc3339(&self.timestamp).is_err() {
            return Err(AnnotationError::Invalid(format!(
                "bad timestamp `{}`",
                self.timestamp
            )));
        }
        Ok(())
    }

    /// Whether `other` records the same decision on the same test.
    pub fn same_decision(&self, other: &TestAnswer) -> bool {
        self.test_id == other.test_id && self.items == other.items && self.chosen == other.chosen
    }
}

/// ISO-8601 UTC, second resolution.
pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Logical clock used for simulated answers: the Unix epoch plus `tick`
/// seconds, so simulated logs are reproducible.
pub fn logical_timestamp(tick: u64) -> DateTime<Utc> {
    DateTime::from_timestamp(tick as i64, 0).expect("tick within range")
}

pub fn test_id(n: usize) -> String {
    format!("t{n:06}")
}

/// Draws `count` tests, each over three distinct pool members chosen
/// uniformly. Test ids are numbered from `first_id`.
pub fn sample_tests<R: Rng + ?Sized>(
    pool: &[SampleId],
    count: usize,
    first_id: usize,
    rng: &mut R,
) -> Result<Vec<TripletTest>, AnnotationError> {
    if pool.len() < 3 {
        return Err(AnnotationError::PoolTooSmall(pool.len()));
    }
    if count == 0 {
        return Err(AnnotationError::ZeroCount);
    }
    Ok((0..count)
        .map(|k| {
            let idx = rand::seq::index::sample(rng, pool.len(), 3);
            TripletTest {
                test_id: test_id(first_id + k),
                items: [
                    pool[idx.index(0)].clone(),
                    pool[idx.index(1)].clone(),
                    pool[idx.index(2)].clone(),
                ],
            }
        })
        .collect())
}

/// Outcome of asking the simulated annotator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleVerdict {
    Chosen(u8),
    /// More than one item's removal leaves an equally similar pair.
    Ambiguous { tied: Vec<u8> },
}

/// For each item, the similarity of the pair left after removing it.
pub fn remaining_pair_similarities(
    test: &TripletTest,
    tree: &ConceptTree,
    leaves: &impl LeafLookup,
) -> Result<[Rational; 3], AnnotationError> {
    let leaf = |i: usize| {
        leaves
            .leaf_of(&test.items[i])
            .ok_or_else(|| AnnotationError::UnknownSample(test.items[i].to_string()))
    };
    let (l0, l1, l2) = (leaf(0)?, leaf(1)?, leaf(2)?);
    Ok([
        tree.semantic_similarity(l1.as_str(), l2.as_str())?,
        tree.semantic_similarity(l0.as_str(), l2.as_str())?,
        tree.semantic_similarity(l0.as_str(), l1.as_str())?,
    ])
}

/// Picks the item whose removal leaves the most similar pair.
pub fn oracle_answer(
    test: &TripletTest,
    tree: &ConceptTree,
    leaves: &impl LeafLookup,
) -> Result<OracleVerdict, AnnotationError> {
    let sims = remaining_pair_similarities(test, tree, leaves)?;
    let best = *sims.iter().max().expect("three entries");
    let tied: Vec<u8> = (0..3u8).filter(|&i| sims[i as usize] == best).collect();
    Ok(if tied.len() == 1 {
        OracleVerdict::Chosen(tied[0])
    } else {
        OracleVerdict::Ambiguous { tied }
    })
}

/// What to do with tests the oracle cannot decide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AmbiguityPolicy {
    /// Drop the test; callers resample a replacement.
    #[default]
    Discard,
    /// Answer with the lowest tied index.
    TieBreakLowest,
}

impl FromStr for AmbiguityPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "discard" => Ok(AmbiguityPolicy::Discard),
            "tiebreak-lowest-index" | "tiebreak" => Ok(AmbiguityPolicy::TieBreakLowest),
            other => Err(format!(
                "unknown policy `{other}` (expected discard or tiebreak-lowest-index)"
            )),
        }
    }
}

impl fmt::Display for AmbiguityPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AmbiguityPolicy::Discard => "discard",
            AmbiguityPolicy::TieBreakLowest => "tiebreak-lowest-index",
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Simulation {
    pub answers: Vec<TestAnswer>,
    pub discarded: Vec<TripletTest>,
}

/// Answers every test with the oracle. Timestamps come from the logical
/// clock starting at `first_tick`, one tick per answer.
pub fn simulate_annotations(
    tests: &[TripletTest],
    tree: &ConceptTree,
    leaves: &impl LeafLookup,
    policy: AmbiguityPolicy,
    first_tick: u64,
) -> Result<Simulation, AnnotationError> {
    let mut out = Simulation::default();
    for test in tests {
        let chosen = match (oracle_answer(test, tree, leaves)?, policy) {
            (OracleVerdict::Chosen(i), _) => i,
            (OracleVerdict::Ambiguous { tied }, AmbiguityPolicy::TieBreakLowest) => tied[0],
            (OracleVerdict::Ambiguous { .. }, AmbiguityPolicy::Discard) => {
                out.discarded.push(test.clone());
                continue;
            }
        };
        let tick = first_tick + out.answers.len() as u64;
        out.answers.push(TestAnswer::new(
            test,
            chosen,
            AnswerSource::Oracle,
            logical_timestamp(tick),
        ));
    }
    Ok(out)
}

/// Samples and answers tests until exactly `count` answers exist,
/// resampling replacements for discarded tests.
pub fn collect_oracle_answers<R: Rng + ?Sized>(
    pool: &[SampleId],
    count: usize,
    tree: &ConceptTree,
    leaves: &impl LeafLookup,
    policy: AmbiguityPolicy,
    rng: &mut R,
) -> Result<Vec<TestAnswer>, AnnotationError> {
    let max_attempts = count.saturating_mul(100).max(1000);
    let mut answers: Vec<TestAnswer> = Vec::with_capacity(count);
    let mut attempts = 0;
    while answers.len() < count {
        if attempts >= max_attempts {
            return Err(AnnotationError::Exhausted {
                attempts,
                answered: answers.len(),
            });
        }
        let want = count - answers.len();
        let tests = sample_tests(pool, want, attempts, rng)?;
        attempts += want;
        let sim = simulate_annotations(&tests, tree, leaves, policy, answers.len() as u64)?;
        answers.extend(sim.answers);
    }
    Ok(answers)
}

/// Append-only record of answers with at-most-once semantics per test id.
///
/// The on-disk form is one JSON object per line. A final line without a
/// terminating newline is a torn write and is dropped (and truncated away)
/// when the log is opened.
#[derive(Debug, Default)]
pub struct AnswerLog {
    answers: Vec<TestAnswer>,
    by_id: HashMap<String, usize>,
    file: Option<(PathBuf, File)>,
}

impl AnswerLog {
    pub fn in_memory() -> Self {
        AnswerLog::default()
    }

    pub fn from_answers(answers: Vec<TestAnswer>) -> Result<Self, AnnotationError> {
        let mut log = AnswerLog::in_memory();
        for a in answers {
            log.append(a)?;
        }
        Ok(log)
    }

    /// Parses log text, dropping an unterminated last line.
    pub fn parse(text: &str) -> Result<Vec<TestAnswer>, AnnotationError> {
        let complete = match text.rfind('\n') {
            Some(end) => &text[..=end],
            None => "",
        };
        let mut out = Vec::new();
        for (i, line) in complete.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let answer: TestAnswer =
                serde_json::from_str(line).map_err(|e| AnnotationError::Corrupt {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            answer.validate().map_err(|e| AnnotationError::Corrupt {
                line: i + 1,
                message: e.to_string(),
            })?;
            out.push(answer);
        }
        Ok(out)
    }

    /// Opens (or creates) a durable log file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AnnotationError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let mut text = String::new();
        file.read_to_string(&mut text)?;
        let answers = Self::parse(&text)?;
        let valid_len = text.rfind('\n').map_or(0, |e| e + 1);
        if valid_len < text.len() {
            file.set_len(valid_len as u64)?;
        }
        let mut log = Self::from_answers(answers)?;
        log.file = Some((path, file));
        Ok(log)
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn append(&mut self, answer: TestAnswer) -> Result<(), AnnotationError> {
        answer.validate()?;
        if self.by_id.contains_key(&answer.test_id) {
            return Err(AnnotationError::Duplicate(answer.test_id));
        }
        if let Some((_, file)) = self.file.as_mut() {
            let mut line = serde_json::to_string(&answer).expect("answer serializes");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        self.by_id.insert(answer.test_id.clone(), self.answers.len());
        self.answers.push(answer);
        Ok(())
    }

    pub fn get(&self, test_id: &str) -> Option<&TestAnswer> {
        self.by_id.get(test_id).map(|&i| &self.answers[i])
    }

    pub fn answers(&self) -> &[TestAnswer] {
        &self.answers
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.answers)
    }
}

pub fn to_jsonl(answers: &[TestAnswer]) -> String {
    let mut out = String::new();
    for a in answers {
        out.push_str(&serde_json::to_string(a).expect("answer serializes"));
        out.push('\n');
    }
    out
}
