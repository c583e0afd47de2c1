//! Evaluation report: a key/value file for machines and a table for people.

use std::fmt::Write;

use crate::episodes::Score;

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub method: String,
    pub supervision: String,
    /// Answered tests used to train the method.
    pub annotations: usize,
    /// Scored on typical episodes.
    pub typical: Score,
    /// Scored on semantic episodes.
    pub semantic: Score,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub seed: u64,
    pub rows: Vec<MethodRow>,
    /// Extra measurements, e.g. training losses.
    pub notes: Vec<(String, String)>,
    pub config: Vec<(String, String)>,
}

fn ratio(correct: u64, total: u64) -> String {
    format!("{:.6}", correct as f64 / total.max(1) as f64)
}

fn score_kv(out: &mut String, prefix: &str, s: &Score) {
    let sum = s.similarity_sum;
    let lines = [
        ("episodes", s.episodes.to_string()),
        ("typical_correct", s.typical_correct.to_string()),
        ("typical_accuracy", ratio(s.typical_correct, s.episodes)),
        ("semantic_correct", s.semantic_correct.to_string()),
        ("semantic_accuracy", ratio(s.semantic_correct, s.episodes)),
        ("similarity_sum", format!("{}/{}", sum.numer(), sum.denom())),
        ("mean_similarity", format!("{:.6}", s.mean_similarity())),
        ("ties", s.ties.to_string()),
    ];
    for (k, v) in lines {
        writeln!(out, "{prefix}.{k}={v}").unwrap();
    }
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "n_way={}", self.n_way).unwrap();
        writeln!(out, "k_shot={}", self.k_shot).unwrap();
        writeln!(out, "episodes={}", self.episodes).unwrap();
        writeln!(out, "seed={}", self.seed).unwrap();
        writeln!(out, "rows={}", self.rows.len()).unwrap();
        for (i, r) in self.rows.iter().enumerate() {
            writeln!(out, "row.{i}.method={}", r.method).unwrap();
            writeln!(out, "row.{i}.supervision={}", r.supervision).unwrap();
            writeln!(out, "row.{i}.annotations={}", r.annotations).unwrap();
            score_kv(&mut out, &format!("row.{i}.typical"), &r.typical);
            score_kv(&mut out, &format!("row.{i}.semantic"), &r.semantic);
        }
        for (k, v) in &self.notes {
            writeln!(out, "note.{k}={v}").unwrap();
        }
        for (k, v) in &self.config {
            writeln!(out, "config.{k}={v}").unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let header = [
            "Method".to_owned(),
            "Supervision".to_owned(),
            "Annotations".to_owned(),
            format!("Typical {}-way {}-shot acc", self.n_way, self.k_shot),
            format!("Semantic {}-way 1-shot acc", self.n_way),
            "Mean S_s".to_owned(),
        ];
        let rows: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    r.supervision.clone(),
                    r.annotations.to_string(),
                    format!("{:.2}", 100.0 * r.typical.typical_accuracy()),
                    format!("{:.2}", 100.0 * r.semantic.semantic_accuracy()),
                    format!("{:.4}", r.semantic.mean_similarity()),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..6)
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap())
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let mut out = line(&header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&line(&rule));
        for r in &rows {
            out.push_str(&line(r));
        }
        writeln!(
            out,
            "\n{} episodes per mode, seed {}.",
            self.episodes, self.seed
        )
        .unwrap();
        out
    }
}
