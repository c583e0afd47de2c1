//! Semantic few-shot learning: a concept hierarchy, triplet annotations, a
//! semantic embedding head, and episodic evaluation.

pub mod annotation;
pub mod config;
pub mod data;
pub mod embedding;
pub mod episodes;
pub mod hierarchy;
pub mod pipeline;
pub mod report;
