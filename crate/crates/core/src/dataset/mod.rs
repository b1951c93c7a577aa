//! Synthetic multimodal reasoning data: simulate, label with rules, render
//! chain-of-thought samples, split and serialize as JSONL.

pub mod analysis;
pub mod build;
pub mod templates;

pub use analysis::{analyze, AnalysisError, AnalysisRules, Direction, MultiplierRanges, RuleReport, Trend};
pub use build::{build_dataset, read_bundle, write_bundle, DatasetBundle, DatasetError, DatasetSpec, Manifest, Split};
pub use templates::{augment_question, render_sample, ParaphraseBank, TemplateError, CONCLUSION_MARKER};

use crate::circuit::{FaultTarget, CHANNELS};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PretrainAnomaly,
    PretrainTemporal,
    TrendAnalysis,
    TrendForecast,
    FaultJudgement,
    FaultDiagnosis,
    FaultAnalysis,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::PretrainAnomaly,
        TaskKind::PretrainTemporal,
        TaskKind::TrendAnalysis,
        TaskKind::TrendForecast,
        TaskKind::FaultJudgement,
        TaskKind::FaultDiagnosis,
        TaskKind::FaultAnalysis,
    ];

    pub const PRETRAIN: [TaskKind; 2] = [TaskKind::PretrainAnomaly, TaskKind::PretrainTemporal];

    /// The five evaluation tasks.
    pub const EVAL: [TaskKind; 5] = [
        TaskKind::TrendAnalysis,
        TaskKind::TrendForecast,
        TaskKind::FaultJudgement,
        TaskKind::FaultDiagnosis,
        TaskKind::FaultAnalysis,
    ];

    pub const TREND: [TaskKind; 2] = [TaskKind::TrendAnalysis, TaskKind::TrendForecast];

    pub const REASONING: [TaskKind; 3] = [TaskKind::FaultJudgement, TaskKind::FaultDiagnosis, TaskKind::FaultAnalysis];

    pub fn is_pretrain(self) -> bool {
        matches!(self, TaskKind::PretrainAnomaly | TaskKind::PretrainTemporal)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PretrainAnomaly => "pretrain_anomaly",
            TaskKind::PretrainTemporal => "pretrain_temporal",
            TaskKind::TrendAnalysis => "trend_analysis",
            TaskKind::TrendForecast => "trend_forecast",
            TaskKind::FaultJudgement => "fault_judgement",
            TaskKind::FaultDiagnosis => "fault_diagnosis",
            TaskKind::FaultAnalysis => "fault_analysis",
        }
    }

    pub fn from_name(name: &str) -> Option<TaskKind> {
        TaskKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub target: FaultTarget,
    pub multiplier: f64,
    pub onset: usize,
    pub seed: u64,
}

/// One (series, question, chain-of-thought answer) record. Field order is the
/// JSONL key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaSample {
    pub id: String,
    pub task: TaskKind,
    pub series: Vec<[f64; CHANNELS]>,
    pub question: String,
    pub answer: String,
    pub conclusion: String,
    pub meta: SampleMeta,
}

/// Every canonical conclusion label.
pub const CANONICAL_LABELS: [&str; 10] = [
    "normal",
    "abnormal",
    "voltage source 1",
    "voltage source 2",
    "load 1",
    "load 2",
    "load 3",
    "rising",
    "falling",
    "stable",
];
