//! Conclusion accuracy by string matching, the human review loop, and the
//! quantized-versus-adapter comparison.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::circuit::CHANNELS;
use crate::dataset::{TaskKind, CANONICAL_LABELS, CONCLUSION_MARKER};
use crate::util::derive_seed;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no records for task {0}")]
    EmptyTask(TaskKind),
    #[error("task {task} has {available} records, {needed} requested")]
    InsufficientRecords { task: TaskKind, needed: usize, available: usize },
    #[error("row {id}: {field} is not annotated")]
    MissingAnnotation { id: String, field: &'static str },
    #[error("row {id}: cannot read {value:?} as a boolean for {field}")]
    BadAnnotation { id: String, field: &'static str, value: String },
    #[error("no annotated rows")]
    NoAnnotations,
    #[error("runs were evaluated on different test samples ({0})")]
    SplitMismatch(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn normalize(text: &str) -> String {
    let cleaned: String =
        text.chars().map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' }).collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical label named on the last conclusion line, if any.
pub fn extract_conclusion(response: &str) -> Option<String> {
    let marker = CONCLUSION_MARKER.to_lowercase();
    let line = response.lines().rev().find_map(|l| {
        let lower = l.to_lowercase();
        lower.rfind(&marker).map(|at| lower[at + marker.len()..].to_string())
    })?;
    let text = format!(" {} ", normalize(&line));
    let mut best: Option<(&str, usize)> = None;
    for label in CANONICAL_LABELS {
        if let Some(at) = text.find(&format!(" {label} ")) {
            let better = match best {
                None => true,
                Some((b, bat)) => label.len() > b.len() || (label.len() == b.len() && at < bat),
            };
            if better {
                best = Some((label, at));
            }
        }
    }
    best.map(|(l, _)| l.to_string())
}

/// One model response scored against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub task: TaskKind,
    pub question: String,
    pub reference: String,
    pub response: String,
    pub extracted: Option<String>,
    pub correct: bool,
    /// Peak amplitude per channel of the input window.
    pub ref_amplitudes: [f64; CHANNELS],
}

impl EvalRecord {
    pub fn new(
        id: impl Into<String>,
        task: TaskKind,
        question: impl Into<String>,
        reference: impl Into<String>,
        response: impl Into<String>,
        ref_amplitudes: [f64; CHANNELS],
    ) -> Self {
        let response = response.into();
        let reference = reference.into();
        let extracted = extract_conclusion(&response);
        let correct = extracted.as_deref() == Some(normalize(&reference).as_str());
        Self { id: id.into(), task, question: question.into(), reference, response, extracted, correct, ref_amplitudes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub correct: usize,
    pub total: usize,
    pub ca: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaReport {
    pub per_task: BTreeMap<TaskKind, TaskScore>,
    /// Unweighted mean over the reported tasks.
    pub average: f64,
}

impl CaReport {
    pub fn ca(&self, task: TaskKind) -> Option<f64> {
        self.per_task.get(&task).map(|s| s.ca)
    }

    /// Unweighted mean over a subset of the reported tasks.
    pub fn mean_over(&self, tasks: &[TaskKind]) -> Option<f64> {
        let cas: Option<Vec<f64>> = tasks.iter().map(|t| self.ca(*t)).collect();
        cas.map(|v| mean(&v))
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Conclusion accuracy per task over `tasks`; every task needs a record.
pub fn score_ca(records: &[EvalRecord], tasks: &[TaskKind]) -> Result<CaReport, EvalError> {
    let mut per_task = BTreeMap::new();
    for &task in tasks {
        let (correct, total) = records
            .iter()
            .filter(|r| r.task == task)
            .fold((0, 0), |(c, t), r| (c + usize::from(r.correct), t + 1));
        if total == 0 {
            return Err(EvalError::EmptyTask(task));
        }
        per_task.insert(task, TaskScore { correct, total, ca: correct as f64 / total as f64 });
    }
    let average = mean(&per_task.values().map(|s| s.ca).collect::<Vec<_>>());
    Ok(CaReport { per_task, average })
}

/// One row of the review sheet; the three flags are filled by a reviewer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRow {
    pub id: String,
    pub task: TaskKind,
    pub question: String,
    pub response: String,
    pub ref_conclusion: String,
    pub ref_amplitudes: String,
    pub perception_ok: Option<bool>,
    pub logic_ok: Option<bool>,
    pub conclusion_ok: Option<bool>,
}

/// Draw `k` records per reasoning task with a seeded shuffle.
pub fn export_review_bundle(records: &[EvalRecord], k: usize, seed: u64) -> Result<Vec<ReviewRow>, EvalError> {
    let mut rows = Vec::with_capacity(k * TaskKind::REASONING.len());
    for task in TaskKind::REASONING {
        let mut pool: Vec<&EvalRecord> = records.iter().filter(|r| r.task == task).collect();
        if pool.len() < k {
            return Err(EvalError::InsufficientRecords { task, needed: k, available: pool.len() });
        }
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, task.name())));
        for r in pool.into_iter().take(k) {
            rows.push(ReviewRow {
                id: r.id.clone(),
                task,
                question: r.question.clone(),
                response: r.response.clone(),
                ref_conclusion: r.reference.clone(),
                ref_amplitudes: r.ref_amplitudes.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(";"),
                perception_ok: None,
                logic_ok: None,
                conclusion_ok: None,
            });
        }
    }
    Ok(rows)
}

pub fn write_review_csv(path: &Path, rows: &[ReviewRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

fn parse_flag(id: &str, field: &'static str, raw: &str) -> Result<Option<bool>, EvalError> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "" => Ok(None),
        "true" | "t" | "yes" | "y" | "1" => Ok(Some(true)),
        "false" | "f" | "no" | "n" | "0" => Ok(Some(false)),
        other => Err(EvalError::BadAnnotation { id: id.into(), field, value: other.into() }),
    }
}

/// Read a filled-in review sheet.
pub fn read_review_csv(path: &Path) -> Result<Vec<ReviewRow>, EvalError> {
    #[derive(Deserialize)]
    struct Raw {
        id: String,
        task: TaskKind,
        question: String,
        response: String,
        ref_conclusion: String,
        ref_amplitudes: String,
        perception_ok: String,
        logic_ok: String,
        conclusion_ok: String,
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<Raw>()
        .map(|raw| {
            let raw = raw?;
            Ok(ReviewRow {
                perception_ok: parse_flag(&raw.id, "perception_ok", &raw.perception_ok)?,
                logic_ok: parse_flag(&raw.id, "logic_ok", &raw.logic_ok)?,
                conclusion_ok: parse_flag(&raw.id, "conclusion_ok", &raw.conclusion_ok)?,
                id: raw.id,
                task: raw.task,
                question: raw.question,
                response: raw.response,
                ref_conclusion: raw.ref_conclusion,
                ref_amplitudes: raw.ref_amplitudes,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReviewMetrics {
    /// Share of rows correct in perception, logic and conclusion.
    pub lra: f64,
    /// Share of rows with a correct conclusion but flawed perception or logic.
    pub dr: f64,
    /// Share of rows with a correct conclusion.
    pub conclusion_rate: f64,
    pub annotated: usize,
}

pub fn compute_lra_dr(rows: &[ReviewRow]) -> Result<ReviewMetrics, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::NoAnnotations);
    }
    let (mut sound, mut deceptive, mut concluded) = (0usize, 0usize, 0usize);
    for r in rows {
        let need = |v: Option<bool>, field| v.ok_or_else(|| EvalError::MissingAnnotation { id: r.id.clone(), field });
        let p = need(r.perception_ok, "perception_ok")?;
        let l = need(r.logic_ok, "logic_ok")?;
        let c = need(r.conclusion_ok, "conclusion_ok")?;
        sound += usize::from(p && l && c);
        deceptive += usize::from(c && !(p && l));
        concluded += usize::from(c);
    }
    let n = rows.len() as f64;
    Ok(ReviewMetrics {
        lra: sound as f64 / n,
        dr: deceptive as f64 / n,
        conclusion_rate: concluded as f64 / n,
        annotated: rows.len(),
    })
}

/// Relative gain of `a` over `b`; undefined when `b` is zero.
pub fn promotion(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| (a - b) / b)
}

/// Evaluation records of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskComparison {
    pub task: TaskKind,
    pub ca_a: f64,
    pub ca_b: f64,
    pub delta: f64,
    pub promotion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub tasks: Vec<TaskComparison>,
    pub reasoning_a: f64,
    pub reasoning_b: f64,
    pub promotion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub label_a: String,
    pub label_b: String,
    pub seeds: Vec<SeedComparison>,
    /// Seed-averaged rows.
    pub mean: Vec<TaskComparison>,
    pub mean_reasoning_a: f64,
    pub mean_reasoning_b: f64,
    pub mean_promotion: Option<f64>,
    /// Seeds where `a` beats `b` on mean reasoning CA.
    pub wins: usize,
}

fn compare(task: TaskKind, a: f64, b: f64) -> TaskComparison {
    TaskComparison { task, ca_a: a, ca_b: b, delta: a - b, promotion: promotion(a, b) }
}

/// Compare run `a` against run `b` seed by seed on the reasoning tasks.
pub fn ablation_report(label_a: &str, a: &[SeedRun], label_b: &str, b: &[SeedRun]) -> Result<AblationReport, EvalError> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.seed != y.seed) {
        return Err(EvalError::SplitMismatch("runs cover different seeds".into()));
    }
    let mut seeds = Vec::with_capacity(a.len());
    for (ra, rb) in a.iter().zip(b) {
        let ids = |r: &SeedRun| r.records.iter().map(|x| x.id.clone()).collect::<BTreeSet<_>>();
        if ids(ra) != ids(rb) {
            return Err(EvalError::SplitMismatch(format!("seed {}", ra.seed)));
        }
        let sa = score_ca(&ra.records, &TaskKind::REASONING)?;
        let sb = score_ca(&rb.records, &TaskKind::REASONING)?;
        let tasks =
            TaskKind::REASONING.iter().map(|&t| compare(t, sa.per_task[&t].ca, sb.per_task[&t].ca)).collect();
        seeds.push(SeedComparison {
            seed: ra.seed,
            tasks,
            reasoning_a: sa.average,
            reasoning_b: sb.average,
            promotion: promotion(sa.average, sb.average),
        });
    }
    let mean_rows = TaskKind::REASONING
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let ca_a = mean(&seeds.iter().map(|s| s.tasks[i].ca_a).collect::<Vec<_>>());
            let ca_b = mean(&seeds.iter().map(|s| s.tasks[i].ca_b).collect::<Vec<_>>());
            compare(t, ca_a, ca_b)
        })
        .collect();
    let mean_a = mean(&seeds.iter().map(|s| s.reasoning_a).collect::<Vec<_>>());
    let mean_b = mean(&seeds.iter().map(|s| s.reasoning_b).collect::<Vec<_>>());
    Ok(AblationReport {
        label_a: label_a.into(),
        label_b: label_b.into(),
        wins: seeds.iter().filter(|s| s.reasoning_a > s.reasoning_b).count(),
        seeds,
        mean: mean_rows,
        mean_reasoning_a: mean_a,
        mean_reasoning_b: mean_b,
        mean_promotion: promotion(mean_a, mean_b),
    })
}

fn pct(p: Option<f64>) -> String {
    p.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}%", v * 100.0))
}

impl AblationReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["seed", "task", "ca_a", "ca_b", "delta", "promotion"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut row = |seed: String, t: &TaskComparison| {
            w.write_record([seed, t.task.to_string(), t.ca_a.to_string(), t.ca_b.to_string(), t.delta.to_string(), opt(t.promotion)])
        };
        for s in &self.seeds {
            for t in &s.tasks {
                row(s.seed.to_string(), t)?;
            }
        }
        for t in &self.mean {
            row("mean".into(), t)?;
        }
        w.flush().map_err(|source| EvalError::Io { path: path.display().to_string(), source })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} vs {} on reasoning tasks", self.label_a, self.label_b);
        let _ = writeln!(out, "{:<10} {:<18} {:>8} {:>8} {:>9}", "seed", "task", "a", "b", "promotion");
        for s in &self.seeds {
            for t in &s.tasks {
                let _ = writeln!(out, "{:<10} {:<18} {:>8.3} {:>8.3} {:>9}", s.seed, t.task.name(), t.ca_a, t.ca_b, pct(t.promotion));
            }
            let _ = writeln!(out, "{:<10} {:<18} {:>8.3} {:>8.3} {:>9}", s.seed, "average", s.reasoning_a, s.reasoning_b, pct(s.promotion));
        }
        for t in &self.mean {
            let _ = writeln!(out, "{:<10} {:<18} {:>8.3} {:>8.3} {:>9}", "mean", t.task.name(), t.ca_a, t.ca_b, pct(t.promotion));
        }
        let _ = writeln!(
            out,
            "{:<10} {:<18} {:>8.3} {:>8.3} {:>9}",
            "mean",
            "average",
            self.mean_reasoning_a,
            self.mean_reasoning_b,
            pct(self.mean_promotion)
        );
        let _ = writeln!(out, "{} wins {} of {} seeds", self.label_a, self.wins, self.seeds.len());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_examples() {
        assert_eq!(extract_conclusion("blah\nConclusion: Load 2 is faulty.").as_deref(), Some("load 2"));
        assert_eq!(extract_conclusion("conclusion: NORMAL.").as_deref(), Some("normal"));
        assert_eq!(extract_conclusion("load 2 is faulty"), None);
        assert_eq!(extract_conclusion("Conclusion: abnormal").as_deref(), Some("abnormal"));
        assert_eq!(extract_conclusion("Conclusion: load 23"), None);
        assert_eq!(extract_conclusion("Conclusion: rising\nConclusion: falling").as_deref(), Some("falling"));
        assert_eq!(extract_conclusion("Conclusion: voltage source 1 dropped").as_deref(), Some("voltage source 1"));
    }

    #[test]
    fn ca_counts() {
        let amps = [0.0; CHANNELS];
        let recs: Vec<_> = ["load 2", "load 2", "load 2", "load 1"]
            .iter()
            .enumerate()
            .map(|(i, r)| EvalRecord::new(i.to_string(), TaskKind::FaultDiagnosis, "q", "load 2", format!("Conclusion: {r}"), amps))
            .collect();
        let rep = score_ca(&recs, &[TaskKind::FaultDiagnosis]).unwrap();
        assert_eq!(rep.ca(TaskKind::FaultDiagnosis), Some(0.75));
        assert!(matches!(score_ca(&recs, &[TaskKind::TrendAnalysis]), Err(EvalError::EmptyTask(TaskKind::TrendAnalysis))));
    }

    #[test]
    fn promotion_oracle() {
        assert!((promotion(71.7, 54.1).unwrap() - 0.3253).abs() < 1e-4);
        assert_eq!(promotion(0.5, 0.5), Some(0.0));
        assert_eq!(promotion(0.5, 0.0), None);
    }
}
