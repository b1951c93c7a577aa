use super::analysis::{analyze, peak_amplitudes, AnalysisRules, Direction};
use super::templates::{augment_question, render_sample, TemplateError};
use super::{QaSample, TaskKind};
use crate::circuit::{simulate, CircuitConfig, CircuitError, FaultScenario, FaultTarget};
use crate::util::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

/// Attempts per sample before generation gives up on it outright.
const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("regeneration budget exhausted: {regenerated} rejected windows for {total} samples (limit {limit:.0}%)")]
    RegenerationBudget { regenerated: usize, total: usize, limit: f64 },
    #[error("sample {0} could not be generated with a consistent verdict")]
    AttemptsExhausted(String),
    #[error("test split may only hold evaluation tasks, found {0}")]
    NonEvalTaskInTest(TaskKind),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed record at {path}:{line}: {source}")]
    Parse { path: String, line: usize, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    FinetuneTrain,
    FinetuneVal,
    FinetuneTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::FinetuneTrain, Split::FinetuneVal, Split::FinetuneTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::FinetuneTrain => "finetune_train",
            Split::FinetuneVal => "finetune_val",
            Split::FinetuneTest => "finetune_test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

/// Requested sample counts per split and task, plus labeling rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Timesteps per window (M).
    pub window_len: usize,
    pub pretrain: BTreeMap<TaskKind, usize>,
    pub finetune_train: BTreeMap<TaskKind, usize>,
    pub finetune_val: BTreeMap<TaskKind, usize>,
    pub finetune_test: BTreeMap<TaskKind, usize>,
    pub rules: AnalysisRules,
    /// Largest tolerated ratio of rejected windows to generated samples.
    pub max_regeneration_fraction: f64,
    /// Apply the paraphrase bank to fine-tuning questions.
    pub augment_questions: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let per = |kinds: &[TaskKind], n: usize| kinds.iter().map(|k| (*k, n)).collect::<BTreeMap<_, _>>();
        Self {
            window_len: 256,
            pretrain: per(&TaskKind::PRETRAIN, 3300),
            finetune_train: per(&TaskKind::EVAL, 720),
            finetune_val: per(&TaskKind::EVAL, 80),
            finetune_test: per(&TaskKind::EVAL, 100),
            rules: AnalysisRules::default(),
            max_regeneration_fraction: 0.25,
            augment_questions: true,
        }
    }
}

impl DatasetSpec {
    pub fn counts(&self, split: Split) -> &BTreeMap<TaskKind, usize> {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::FinetuneTrain => &self.finetune_train,
            Split::FinetuneVal => &self.finetune_val,
            Split::FinetuneTest => &self.finetune_test,
        }
    }

    /// Scale every count by `factor`, keeping at least `min` per task.
    pub fn scaled(&self, factor: f64, min: usize) -> Self {
        let scale = |m: &BTreeMap<TaskKind, usize>| {
            m.iter().map(|(k, n)| (*k, ((*n as f64 * factor).round() as usize).max(min))).collect()
        };
        Self {
            pretrain: scale(&self.pretrain),
            finetune_train: scale(&self.finetune_train),
            finetune_val: scale(&self.finetune_val),
            finetune_test: scale(&self.finetune_test),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub counts: BTreeMap<Split, BTreeMap<TaskKind, usize>>,
    pub total_samples: usize,
    pub regenerations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub pretrain: Vec<QaSample>,
    pub finetune_train: Vec<QaSample>,
    pub finetune_val: Vec<QaSample>,
    pub finetune_test: Vec<QaSample>,
    pub manifest: Manifest,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &[QaSample] {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::FinetuneTrain => &self.finetune_train,
            Split::FinetuneVal => &self.finetune_val,
            Split::FinetuneTest => &self.finetune_test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<QaSample> {
        match split {
            Split::Pretrain => &mut self.pretrain,
            Split::FinetuneTrain => &mut self.finetune_train,
            Split::FinetuneVal => &mut self.finetune_val,
            Split::FinetuneTest => &mut self.finetune_test,
        }
    }
}

fn draw_multiplier(target: FaultTarget, rules: &AnalysisRules, rng: &mut ChaCha8Rng) -> f64 {
    if target == FaultTarget::None {
        return 1.0;
    }
    let (lo, hi) = if rng.random_bool(0.5) { rules.multipliers.up } else { rules.multipliers.down };
    rng.random_range(lo..=hi)
}

/// Generate one accepted sample; returns it with the number of rejected windows.
fn generate_sample(
    spec: &DatasetSpec,
    circuit: &CircuitConfig,
    seed: u64,
    split: Split,
    kind: TaskKind,
    index: usize,
) -> Result<(QaSample, usize), DatasetError> {
    let m = spec.window_len;
    let id = format!("{}-{}-{:05}", split.name(), kind.name(), index);
    let base = derive_seed(seed, &id);
    let target = FaultTarget::ALL[index % FaultTarget::ALL.len()];
    for attempt in 0..MAX_ATTEMPTS {
        let window_seed = derive_seed(base, &format!("attempt-{attempt}"));
        let mut rng = ChaCha8Rng::seed_from_u64(window_seed);
        let multiplier = draw_multiplier(target, &spec.rules, &mut rng);
        let onset = if TaskKind::TREND.contains(&kind) || rng.random_bool(0.5) { m / 2 } else { 0 };
        let scenario = FaultScenario::new(target, multiplier, onset, m)?;
        let forecast = kind == TaskKind::TrendForecast;
        let full = simulate(circuit, &scenario, if forecast { 2 * m } else { m }, window_seed);
        let window = if forecast { full.slice(0, m) } else { full.clone() };
        let Ok(mut report) = analyze(&window, circuit, &spec.rules) else { continue };
        let expected_direction = match multiplier {
            k if k > 1.0 => Direction::Increased,
            k if k < 1.0 => Direction::Decreased,
            _ => Direction::None,
        };
        if report.verdict != target || report.direction != expected_direction {
            continue;
        }
        if forecast {
            report.continuation = Some(peak_amplitudes(&full.values[m..]));
        }
        let mut sample = render_sample(
            &id,
            kind,
            &window,
            &report,
            spec.rules.trend_threshold,
            derive_seed(window_seed, "render"),
        )?;
        if spec.augment_questions && !kind.is_pretrain() {
            sample.question = augment_question(kind, &sample.question, derive_seed(window_seed, "augment"));
        }
        return Ok((sample, attempt));
    }
    Err(DatasetError::AttemptsExhausted(id))
}

/// Simulate, label, render and split. Output is independent of thread count.
pub fn build_dataset(spec: &DatasetSpec, circuit: &CircuitConfig, seed: u64) -> Result<DatasetBundle, DatasetError> {
    circuit.validate()?;
    for kind in spec.finetune_test.keys() {
        if kind.is_pretrain() {
            return Err(DatasetError::NonEvalTaskInTest(*kind));
        }
    }
    let mut jobs = Vec::new();
    for split in Split::ALL {
        for (kind, n) in spec.counts(split) {
            jobs.extend((0..*n).map(|i| (split, *kind, i)));
        }
    }
    let results: Vec<Result<(Split, QaSample, usize), DatasetError>> = jobs
        .par_iter()
        .map(|&(split, kind, i)| generate_sample(spec, circuit, seed, split, kind, i).map(|(s, r)| (split, s, r)))
        .collect();

    let mut bundle = DatasetBundle {
        pretrain: Vec::new(),
        finetune_train: Vec::new(),
        finetune_val: Vec::new(),
        finetune_test: Vec::new(),
        manifest: Manifest { seed, counts: BTreeMap::new(), total_samples: 0, regenerations: 0 },
    };
    let mut regenerations = 0;
    for r in results {
        let (split, sample, regen) = r?;
        regenerations += regen;
        *bundle.manifest.counts.entry(split).or_default().entry(sample.task).or_default() += 1;
        bundle.split_mut(split).push(sample);
    }
    let total = jobs.len();
    if total > 0 && regenerations as f64 > spec.max_regeneration_fraction * total as f64 {
        return Err(DatasetError::RegenerationBudget {
            regenerated: regenerations,
            total,
            limit: 100.0 * spec.max_regeneration_fraction,
        });
    }
    for split in Split::ALL {
        bundle.split_mut(split).sort_by(|a, b| a.id.cmp(&b.id));
    }
    bundle.manifest.total_samples = total;
    bundle.manifest.regenerations = regenerations;
    Ok(bundle)
}

pub fn write_jsonl(path: &Path, samples: &[QaSample]) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QaSample>, DatasetError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|source| DatasetError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for split in Split::ALL {
        write_jsonl(&dir.join(split.file_name()), bundle.split(split))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&bundle.manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn read_bundle(dir: &Path) -> Result<DatasetBundle, DatasetError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest =
        serde_json::from_str(&text).map_err(|source| DatasetError::Parse { path: path.display().to_string(), line: 0, source })?;
    Ok(DatasetBundle {
        pretrain: read_jsonl(&dir.join(Split::Pretrain.file_name()))?,
        finetune_train: read_jsonl(&dir.join(Split::FinetuneTrain.file_name()))?,
        finetune_val: read_jsonl(&dir.join(Split::FinetuneVal.file_name()))?,
        finetune_test: read_jsonl(&dir.join(Split::FinetuneTest.file_name()))?,
        manifest,
    })
}
