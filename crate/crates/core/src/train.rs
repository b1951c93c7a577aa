//! Two-stage training: embedding-only pre-training, then full fine-tuning,
//! both on the masked next-token loss with a cosine learning-rate schedule.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dataset::{QaSample, TaskKind};
use crate::gradcheck::{finite_difference_check, GroupCheck};
use crate::lm::{
    assemble_sequence, AssembledSequence, Checkpoint, LanguageModel, LmError, LossStats, ModelInput, TemporalEncoding,
    Trainable, Vocabulary,
};
use crate::nn::log_sum_exp;
use crate::params::{clip_grad_norm, AdamConfig, AdamW, ParamStore};
use crate::real::Real;
use crate::util::derive_seed;
use crate::vq::{Tokenizer, VqError};

pub const PRETRAIN_STAGE: &str = "pretrain";
pub const FINETUNE_STAGE: &str = "finetune";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("the response mask selects no target position")]
    EmptyMask,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("fine-tuning needs a pre-trained checkpoint, got stage {0:?}")]
    NotPretrained(String),
    #[error("no training samples")]
    NoData,
    #[error("invalid stage config: {0}")]
    InvalidConfig(String),
    #[error("sample {id}: {source}")]
    Sample { id: String, source: LmError },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tokenizer(#[from] VqError),
    #[error("history csv: {0}")]
    Csv(#[from] csv::Error),
}

fn lm_err(e: LmError) -> TrainError {
    match e {
        LmError::EmptyMask => TrainError::EmptyMask,
        e => TrainError::Lm(e),
    }
}

/// Mean over masked positions `t` of `-log softmax(logits[t - 1])[targets[t]]`.
pub fn masked_nll<R: Real>(logits: ArrayView2<R>, targets: &[u32], mask: &[bool]) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 1..targets.len() {
        if mask[t] {
            let row = logits.row(t - 1).to_vec();
            sum += (log_sum_exp(&row) - row[targets[t] as usize]).f64();
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Cosine decay from `peak` at step 0 to `min` at `total`.
pub fn cosine_lr(step: usize, total: usize, peak: f64, min: f64) -> f64 {
    let frac = step.min(total) as f64 / total.max(1) as f64;
    min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Pretrain => PRETRAIN_STAGE,
            Stage::Finetune => FINETUNE_STAGE,
        }
    }

    pub fn trainable(self) -> Trainable {
        match self {
            Stage::Pretrain => Trainable::INPUT_ONLY,
            Stage::Finetune => Trainable::ALL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    /// Caps the step count derived from `epochs`.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// Steps between validation snapshots; 0 disables them.
    pub eval_every: usize,
    /// Derived from the run seed, never read from a file.
    #[serde(skip)]
    pub seed: u64,
}

impl StageConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            peak_lr: 1e-3,
            min_lr: 1e-4,
            epochs: 1,
            max_steps: None,
            batch_size: 32,
            grad_clip: 1.0,
            weight_decay: 0.01,
            eval_every: 0,
            seed: 0,
        }
    }

    pub fn finetune() -> Self {
        Self { stage: Stage::Finetune, peak_lr: 1e-3, min_lr: 1e-4, epochs: 3, batch_size: 16, eval_every: 100, ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.peak_lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rates must satisfy 0 < min_lr ({}) <= peak_lr ({})",
                self.min_lr, self.peak_lr
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return Err(TrainError::InvalidConfig("batch_size, epochs and max_steps must be >= 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(TrainError::InvalidConfig("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        let per_epoch = samples.div_ceil(self.batch_size);
        let steps = per_epoch * self.epochs;
        self.max_steps.map_or(steps, |m| m.min(steps))
    }
}

/// Learning rate at `step` of a run of `total` steps.
pub fn lr_at(step: usize, total: usize, cfg: &StageConfig) -> f64 {
    cosine_lr(step, total, cfg.peak_lr, cfg.min_lr)
}

/// One sample laid out for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub task: TaskKind,
    pub conclusion: String,
    pub seq: AssembledSequence,
    /// Normalized patch rows, present for continuous encodings.
    pub patches: Option<Array2<f32>>,
}

impl PreparedSample {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            ids: &self.seq.ids,
            temporal_positions: &self.seq.temporal_positions,
            patches: self.patches.as_ref().map(|p| p.view()),
        }
    }

    pub fn prompt(&self) -> ModelInput<'_> {
        ModelInput { ids: self.seq.prompt(), ..self.input() }
    }
}

/// Tokenize and lay out samples. Discrete models see temporal tokens;
/// continuous ones see `<pad>` placeholders plus the patch rows.
pub fn prepare_samples(
    samples: &[QaSample],
    tokenizer: &Tokenizer,
    vocab: &Vocabulary,
    encoding: TemporalEncoding,
    context: usize,
) -> Result<Vec<PreparedSample>, TrainError> {
    samples
        .iter()
        .map(|s| {
            let (temporal, patches) = if encoding.is_continuous() {
                let p = tokenizer.patches(&s.series)?;
                (vec![vocab.pad(); p.nrows()], Some(p))
            } else {
                let codes = tokenizer.tokenize(&s.series)?;
                (codes.into_iter().map(|k| vocab.temporal(k)).collect(), None)
            };
            let seq = assemble_sequence(&s.question, &temporal, crate::circuit::CHANNELS, Some(&s.answer), vocab, context)
                .map_err(|source| TrainError::Sample { id: s.id.clone(), source })?;
            Ok(PreparedSample { id: s.id.clone(), task: s.task, conclusion: s.conclusion.clone(), seq, patches })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Snapshot {
    pub val_loss: Option<f64>,
    pub trend_ca: Option<f64>,
    pub reasoning_ca: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub token_accuracy: f64,
    pub val_loss: Option<f64>,
    pub trend_ca: Option<f64>,
    pub reasoning_ca: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean loss over the first and the last `window` steps.
    pub fn moving_average_ends(&self, window: usize) -> Option<(f64, f64)> {
        if self.rows.len() < window || window == 0 {
            return None;
        }
        let mean = |rows: &[HistoryRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.rows[..window]), mean(&self.rows[self.rows.len() - window..])))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss", "lr", "val_loss", "trend_ca", "reasoning_ca"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.loss.to_string(),
                r.lr.to_string(),
                opt(r.val_loss),
                opt(r.trend_ca),
                opt(r.reasoning_ca),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Mean of per-sample masked losses, plus token accuracy.
pub fn evaluate_loss<R: Real>(model: &LanguageModel<R>, data: &[PreparedSample]) -> Result<(f64, f64), TrainError> {
    let mut total = 0.0;
    let mut acc = LossStats::default();
    for s in data {
        let stats = model.loss(&s.input(), &s.seq.mask).map_err(lm_err)?;
        total += stats.mean();
        acc.add(stats);
    }
    Ok((total / data.len().max(1) as f64, acc.accuracy()))
}

/// Called every `eval_every` steps and after the last step.
pub type Probe<'a> = dyn FnMut(&LanguageModel<f32>, usize) -> Snapshot + 'a;

/// Run one stage in place. Batches are drawn from a seeded shuffle per
/// epoch and processed strictly in order.
pub fn train_stage(
    model: &mut LanguageModel<f32>,
    data: &[PreparedSample],
    cfg: &StageConfig,
    mut probe: Option<&mut Probe<'_>>,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::NoData);
    }
    let trainable = cfg.stage.trainable();
    let indices = model.trainable_indices(trainable);
    let adam = AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() };
    let mut opt = AdamW::new(&model.params, &indices, adam);
    let total = cfg.total_steps(data.len());
    let mut grads = model.params.zeros_like();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..total {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                if !batch.is_empty() {
                    break;
                }
                order = (0..data.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("epoch{epoch}"))));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        grads.fill_zero();
        let mut loss = 0.0;
        let mut stats = LossStats::default();
        let scale = 1.0 / batch.len() as f64;
        for &i in &batch {
            let s = &data[i];
            let k = s.seq.masked_count() as f64;
            let st = model
                .loss_and_grad(&s.input(), &s.seq.mask, trainable, (scale / k) as f32, &mut grads)
                .map_err(|e| match e {
                    LmError::EmptyMask => TrainError::EmptyMask,
                    source => TrainError::Sample { id: s.id.clone(), source },
                })?;
            loss += st.mean() * scale;
            stats.add(st);
        }
        if !loss.is_finite() || !grads.all_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss });
        }
        let grad_norm = clip_grad_norm(&mut grads, &indices, cfg.grad_clip);
        let lr = lr_at(step, total, cfg);
        opt.step(&mut model.params, &grads, lr);
        let mut row = HistoryRow {
            step,
            loss,
            lr,
            grad_norm,
            token_accuracy: stats.accuracy(),
            val_loss: None,
            trend_ca: None,
            reasoning_ca: None,
        };
        let due = (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || step + 1 == total;
        if let (true, Some(p)) = (due, probe.as_mut()) {
            let snap = p(model, step + 1);
            row.val_loss = snap.val_loss;
            row.trend_ca = snap.trend_ca;
            row.reasoning_ca = snap.reasoning_ca;
        }
        log::debug!("{} step {step}/{total} loss {loss:.4} lr {lr:.2e}", cfg.stage.tag());
        history.rows.push(row);
    }
    Ok(history)
}

/// Pre-train the embedding rows (and adapter, if any) of a fresh model.
pub fn pretrain(
    model: LanguageModel<f32>,
    vocab: &Vocabulary,
    data: &[PreparedSample],
    cfg: &StageConfig,
) -> Result<(Checkpoint, TrainHistory), TrainError> {
    if cfg.stage != Stage::Pretrain {
        return Err(TrainError::InvalidConfig("pretrain needs a pretrain stage config".into()));
    }
    let mut model = model;
    let history = train_stage(&mut model, data, cfg, None)?;
    Ok((Checkpoint { model, vocab: vocab.clone(), stage: PRETRAIN_STAGE.into() }, history))
}

/// Fine-tune every parameter of a pre-trained checkpoint.
pub fn finetune(
    checkpoint: Checkpoint,
    data: &[PreparedSample],
    cfg: &StageConfig,
    probe: Option<&mut Probe<'_>>,
) -> Result<(Checkpoint, TrainHistory), TrainError> {
    if checkpoint.stage != PRETRAIN_STAGE {
        return Err(TrainError::NotPretrained(checkpoint.stage));
    }
    if cfg.stage != Stage::Finetune {
        return Err(TrainError::InvalidConfig("finetune needs a finetune stage config".into()));
    }
    let Checkpoint { mut model, vocab, .. } = checkpoint;
    let history = train_stage(&mut model, data, cfg, probe)?;
    Ok((Checkpoint { model, vocab, stage: FINETUNE_STAGE.into() }, history))
}

/// Central-difference check (`h = 1e-5`) of the masked loss gradient for
/// every parameter group of a double-precision model.
pub fn grad_check(model: &LanguageModel<f64>, sample: &PreparedSample) -> Result<Vec<GroupCheck>, TrainError> {
    let mut grads: ParamStore<f64> = model.params.zeros_like();
    let k = sample.seq.masked_count() as f64;
    model
        .loss_and_grad(&sample.input(), &sample.seq.mask, Trainable::ALL, 1.0 / k, &mut grads)
        .map_err(lm_err)?;
    let mut probe = model.clone();
    Ok(finite_difference_check(&model.params, &grads, &model.all_indices(), 1e-5, |p| {
        probe.params.clone_from(p);
        probe.loss(&sample.input(), &sample.seq.mask).map(|s| s.mean()).unwrap_or(f64::NAN)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Array2::<f64>::zeros((3, 562));
        let loss = masked_nll(logits.view(), &[0, 5, 9], &[false, false, true]).unwrap();
        assert!((loss - 562f64.ln()).abs() < 1e-12);
        assert!((loss - 6.3315).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let mut logits = Array2::<f64>::zeros((3, 10));
        logits[[0, 4]] = 50.0;
        logits[[1, 7]] = 50.0;
        let loss = masked_nll(logits.view(), &[0, 4, 7], &[false, true, true]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn question_targets_do_not_affect_answer_only_loss() {
        let logits = Array2::from_shape_fn((4, 6), |(i, j)| ((i * 5 + j * 3) % 7) as f64);
        let mask = [false, false, true, true];
        let a = masked_nll(logits.view(), &[0, 1, 2, 3], &mask).unwrap();
        let b = masked_nll(logits.view(), &[5, 4, 2, 3], &mask).unwrap();
        assert_eq!(a, b);
        assert!(matches!(masked_nll(logits.view(), &[0, 1, 2, 3], &[false; 4]), Err(TrainError::EmptyMask)));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn step_count_follows_epochs_and_cap() {
        let cfg = StageConfig::finetune();
        assert_eq!(cfg.total_steps(3600), 675);
        assert_eq!(StageConfig { max_steps: Some(10), ..cfg.clone() }.total_steps(3600), 10);
        assert_eq!(StageConfig::pretrain().total_steps(6600), 207);
        assert!(StageConfig { min_lr: 0.0, ..cfg }.validate().is_err());
    }
}
