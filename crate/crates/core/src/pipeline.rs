//! End-to-end orchestration over an output directory: dataset, tokenizer,
//! both training stages, evaluation and the adapter comparison.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::circuit::CHANNELS;
use crate::config::{ConfigError, RunConfig};
use crate::container::ContainerError;
use crate::dataset::{
    analysis::peak_amplitudes, build_dataset, read_bundle, write_bundle, DatasetBundle, DatasetError, QaSample, Split,
    TaskKind,
};
use crate::eval::{
    ablation_report, export_review_bundle, mean, score_ca, write_review_csv, AblationReport, CaReport, EvalError,
    EvalRecord, SeedRun,
};
use crate::lm::{
    build_text_vocab, extend_vocabulary, generation_mask, Checkpoint, CollisionError, Decoding, LanguageModel, LmError,
    TemporalEncoding, Vocabulary, SPECIALS,
};
use crate::train::{evaluate_loss, finetune, prepare_samples, pretrain, PreparedSample, Snapshot, TrainError, TrainHistory};
use crate::util::{derive_seed, sha256_hex};
use crate::vq::{evaluate, patch_pool, train_vqvae, NormStats, Tokenizer, VqError, VqEvaluation, VqHistory};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing {what}: {path} (run `{hint}` first)")]
    MissingArtifact { what: &'static str, path: String, hint: &'static str },
    #[error("io on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tokenizer(#[from] VqError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Vocabulary(#[from] CollisionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("json on {path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// File locations under a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer.bin")
    }
    pub fn tokenizer_report(&self) -> PathBuf {
        self.root.join("tokenizer.json")
    }
    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}.ckpt"))
    }
    pub fn history(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}_history.csv"))
    }
    pub fn records(&self) -> PathBuf {
        self.root.join("eval_records.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }
    pub fn review(&self) -> PathBuf {
        self.root.join("review.csv")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    fn require(&self, path: PathBuf, what: &'static str, hint: &'static str) -> Result<PathBuf, PipelineError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::MissingArtifact { what, path: path.display().to_string(), hint })
        }
    }
}

/// Record of what a run directory holds and the config that produced it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    /// Artifact path relative to the run directory, mapped to its SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub commands: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| PipelineError::Json { path: path.display().to_string(), source })
    }
}

/// Hash the listed artifacts and append `command` to the run manifest.
pub fn record_artifacts(cfg: &RunConfig, layout: &Layout, command: &str, files: &[PathBuf]) -> Result<(), PipelineError> {
    let path = layout.manifest();
    let mut m = RunManifest::load(&path)?;
    m.config_hash = cfg.hash();
    m.seed = cfg.seed;
    m.deterministic = cfg.deterministic;
    for f in files {
        let bytes = std::fs::read(f).map_err(io_err(f))?;
        let rel = f.strip_prefix(&layout.root).unwrap_or(f).display().to_string();
        m.artifacts.insert(rel, sha256_hex(&bytes));
    }
    m.commands.push(command.to_string());
    write_json(&path, &m)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json { path: path.display().to_string(), source })
}

/// Generate the dataset; deterministic mode pins generation to one thread.
pub fn make_dataset(cfg: &RunConfig) -> Result<DatasetBundle, PipelineError> {
    let build = || build_dataset(&cfg.dataset, &cfg.circuit, derive_seed(cfg.seed, "dataset"));
    if cfg.deterministic {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool");
        Ok(pool.install(build)?)
    } else {
        Ok(build()?)
    }
}

pub fn load_dataset(layout: &Layout) -> Result<DatasetBundle, PipelineError> {
    let dir = layout.require(layout.dataset(), "dataset", "dataset build")?;
    Ok(read_bundle(&dir)?)
}

pub fn dataset_files(layout: &Layout) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = Split::ALL.iter().map(|s| layout.dataset().join(s.file_name())).collect();
    files.push(layout.dataset().join("manifest.json"));
    files
}

pub fn save_dataset(layout: &Layout, bundle: &DatasetBundle) -> Result<(), PipelineError> {
    Ok(write_bundle(&layout.dataset(), bundle)?)
}

fn training_series(bundle: &DatasetBundle) -> impl Iterator<Item = &[[f64; CHANNELS]]> {
    bundle.pretrain.iter().chain(&bundle.finetune_train).map(|s| s.series.as_slice())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub steps: usize,
    pub final_loss: f64,
    pub reseeded: usize,
    pub heldout: VqEvaluation,
}

/// Fit normalization and the VQ-VAE on the training windows; score on the
/// validation and test windows.
pub fn fit_tokenizer(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<(Tokenizer, TokenizerReport, VqHistory), PipelineError> {
    let stats = NormStats::from_series(training_series(bundle));
    let pool = patch_pool(training_series(bundle), &cfg.tokenizer, &stats)?;
    let (model, history) = train_vqvae(&pool, &cfg.tokenizer, &cfg.tokenizer_training, derive_seed(cfg.seed, "tokenizer"))?;
    let heldout_series = bundle.finetune_val.iter().chain(&bundle.finetune_test).map(|s| s.series.as_slice());
    let heldout = evaluate(&model, &patch_pool(heldout_series, &cfg.tokenizer, &stats)?);
    let report = TokenizerReport {
        steps: history.steps.len(),
        final_loss: history.steps.last().map_or(f64::NAN, |s| s.loss.total),
        reseeded: history.reseeded,
        heldout,
    };
    Ok((Tokenizer { stats, model }, report, history))
}

pub fn load_tokenizer(layout: &Layout) -> Result<Tokenizer, PipelineError> {
    let path = layout.require(layout.tokenizer(), "tokenizer", "tokenizer train")?;
    Ok(Tokenizer::load(&path)?)
}

/// Text vocabulary from the training splits, extended with specials and
/// one token per codeword.
pub fn build_vocabulary(bundle: &DatasetBundle, codebook_size: usize) -> Result<Vocabulary, CollisionError> {
    let corpus = bundle
        .pretrain
        .iter()
        .chain(&bundle.finetune_train)
        .flat_map(|s| [s.question.as_str(), s.answer.as_str()]);
    extend_vocabulary(&build_text_vocab(corpus), codebook_size, &SPECIALS)
}

pub fn prepare(
    cfg: &RunConfig,
    samples: &[QaSample],
    tokenizer: &Tokenizer,
    vocab: &Vocabulary,
    encoding: TemporalEncoding,
) -> Result<Vec<PreparedSample>, PipelineError> {
    Ok(prepare_samples(samples, tokenizer, vocab, encoding, cfg.model.context)?)
}

/// Pre-train a freshly initialized model.
pub fn run_pretrain(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    tokenizer: &Tokenizer,
    encoding: TemporalEncoding,
) -> Result<(Checkpoint, TrainHistory), PipelineError> {
    let vocab = build_vocabulary(bundle, tokenizer.cfg().codebook_size)?;
    let data = prepare(cfg, &bundle.pretrain, tokenizer, &vocab, encoding)?;
    let model =
        LanguageModel::init(cfg.model, &vocab, encoding, tokenizer.cfg().patch_len, derive_seed(cfg.seed, "model"))?;
    Ok(pretrain(model, &vocab, &data, &cfg.pretrain)?)
}

/// Answer text generated after the prompt of `sample`.
pub fn respond(model: &LanguageModel<f32>, vocab: &Vocabulary, sample: &PreparedSample, max_new: usize) -> Result<String, PipelineError> {
    let ids = model.generate(&sample.prompt(), max_new, Decoding::Greedy, &generation_mask(vocab), vocab.eos())?;
    Ok(vocab.decode_text(&ids))
}

/// Generate and score a response for every sample.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    checkpoint: &Checkpoint,
    tokenizer: &Tokenizer,
    samples: &[QaSample],
) -> Result<Vec<EvalRecord>, PipelineError> {
    let prepared = prepare(cfg, samples, tokenizer, &checkpoint.vocab, checkpoint.model.encoding)?;
    samples
        .iter()
        .zip(&prepared)
        .map(|(s, p)| {
            let response = respond(&checkpoint.model, &checkpoint.vocab, p, cfg.eval.max_new_tokens)?;
            Ok(EvalRecord::new(&s.id, s.task, &s.question, &s.conclusion, response, peak_amplitudes(&s.series)))
        })
        .collect()
}

fn probe_subset(samples: &[QaSample], per_task: usize) -> Vec<QaSample> {
    TaskKind::EVAL
        .iter()
        .flat_map(|t| samples.iter().filter(move |s| s.task == *t).take(per_task))
        .cloned()
        .collect()
}

fn greedy_ca(
    model: &LanguageModel<f32>,
    vocab: &Vocabulary,
    prepared: &[PreparedSample],
    tasks: &[TaskKind],
    max_new: usize,
) -> Option<f64> {
    let mut per_task = Vec::new();
    for t in tasks {
        let (mut hit, mut n) = (0usize, 0usize);
        for p in prepared.iter().filter(|p| p.task == *t) {
            let response = respond(model, vocab, p, max_new).ok()?;
            hit += usize::from(crate::eval::extract_conclusion(&response).as_deref() == Some(p.conclusion.as_str()));
            n += 1;
        }
        if n > 0 {
            per_task.push(hit as f64 / n as f64);
        }
    }
    (!per_task.is_empty()).then(|| mean(&per_task))
}

/// Fine-tune a pre-trained checkpoint, snapshotting validation loss and
/// trend/reasoning CA on a fixed validation subset.
pub fn run_finetune(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    tokenizer: &Tokenizer,
    checkpoint: Checkpoint,
) -> Result<(Checkpoint, TrainHistory), PipelineError> {
    let vocab = checkpoint.vocab.clone();
    let encoding = checkpoint.model.encoding;
    let data = prepare(cfg, &bundle.finetune_train, tokenizer, &vocab, encoding)?;
    let probe_set = prepare(cfg, &probe_subset(&bundle.finetune_val, cfg.eval.probe_per_task), tokenizer, &vocab, encoding)?;
    let max_new = cfg.eval.max_new_tokens;
    let mut probe = |model: &LanguageModel<f32>, step: usize| {
        let val_loss = evaluate_loss(model, &probe_set).ok().map(|(l, _)| l);
        let snap = Snapshot {
            val_loss,
            trend_ca: greedy_ca(model, &vocab, &probe_set, &TaskKind::TREND, max_new),
            reasoning_ca: greedy_ca(model, &vocab, &probe_set, &TaskKind::REASONING, max_new),
        };
        log::info!("finetune step {step}: val_loss {:?} trend_ca {:?} reasoning_ca {:?}", snap.val_loss, snap.trend_ca, snap.reasoning_ca);
        snap
    };
    let probe_ref: Option<&mut crate::train::Probe<'_>> =
        if probe_set.is_empty() || cfg.finetune.eval_every == 0 { None } else { Some(&mut probe) };
    Ok(finetune(checkpoint, &data, &cfg.finetune, probe_ref)?)
}

pub fn load_checkpoint(layout: &Layout, stage: &'static str, hint: &'static str) -> Result<Checkpoint, PipelineError> {
    let path = layout.require(layout.checkpoint(stage), "checkpoint", hint)?;
    Ok(Checkpoint::load(&path)?)
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|source| PipelineError::Json { path: path.display().to_string(), source }))
        .collect()
}

pub fn score(records: &[EvalRecord]) -> Result<CaReport, PipelineError> {
    Ok(score_ca(records, &TaskKind::EVAL)?)
}

/// Everything one end-to-end run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub encoding: TemporalEncoding,
    pub checkpoint: Checkpoint,
    pub pretrain_history: TrainHistory,
    pub finetune_history: TrainHistory,
    pub records: Vec<EvalRecord>,
    pub report: CaReport,
}

/// Pre-train, fine-tune and evaluate one encoding on the test split.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    tokenizer: &Tokenizer,
    encoding: TemporalEncoding,
) -> Result<RunOutcome, PipelineError> {
    let (pre, pretrain_history) = run_pretrain(cfg, bundle, tokenizer, encoding)?;
    let (checkpoint, finetune_history) = run_finetune(cfg, bundle, tokenizer, pre)?;
    let records = evaluate_checkpoint(cfg, &checkpoint, tokenizer, &bundle.finetune_test)?;
    let report = score(&records)?;
    Ok(RunOutcome { encoding, checkpoint, pretrain_history, finetune_history, records, report })
}

/// Quantized tokens against the configured adapter baseline, one full run of
/// each per seed under the same dataset, tokenizer and step budget.
pub fn run_ablation(
    cfg: &RunConfig,
    mut on_run: impl FnMut(u64, &RunOutcome),
) -> Result<AblationReport, PipelineError> {
    let mut quantized = Vec::new();
    let mut baseline = Vec::new();
    let base = RunConfig { dataset: cfg.dataset.scaled(cfg.ablation.dataset_scale, 1), ..cfg.clone() };
    for &seed in &cfg.ablation.seeds {
        let run_cfg = base.clone().with_seed(seed);
        let bundle = make_dataset(&run_cfg)?;
        let (tokenizer, _, _) = fit_tokenizer(&run_cfg, &bundle)?;
        for (encoding, sink) in [(TemporalEncoding::Tokens, &mut quantized), (cfg.ablation.baseline, &mut baseline)] {
            let outcome = train_and_evaluate(&run_cfg, &bundle, &tokenizer, encoding)?;
            on_run(seed, &outcome);
            sink.push(SeedRun { seed, records: outcome.records });
        }
    }
    Ok(ablation_report(TemporalEncoding::Tokens.name(), &quantized, cfg.ablation.baseline.name(), &baseline)?)
}

pub fn review_bundle(cfg: &RunConfig, layout: &Layout, records: &[EvalRecord]) -> Result<PathBuf, PipelineError> {
    let rows = export_review_bundle(records, cfg.eval.review_per_task, derive_seed(cfg.seed, "review"))?;
    let path = layout.review();
    write_review_csv(&path, &rows)?;
    Ok(path)
}
