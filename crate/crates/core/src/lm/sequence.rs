//! Prompt layout: `<bos> question <ts_start> ch1 <var_sep> ... chN <ts_end> answer <eos>`.

use super::vocab::Vocabulary;
use super::LmError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledSequence {
    pub ids: Vec<u32>,
    /// True exactly on answer tokens and the closing `<eos>`.
    pub mask: Vec<bool>,
    /// Index of the first answer token (generation starts here).
    pub boundary: usize,
    /// Positions holding temporal tokens, in variable-major order.
    pub temporal_positions: Vec<usize>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The prompt, up to and including `<ts_end>`.
    pub fn prompt(&self) -> &[u32] {
        &self.ids[..self.boundary]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Lay out one sample. `temporal` holds `channels` equal runs of token ids in
/// variable-major order; `answer = None` stops at the prompt.
pub fn assemble_sequence(
    question: &str,
    temporal: &[u32],
    channels: usize,
    answer: Option<&str>,
    vocab: &Vocabulary,
    context: usize,
) -> Result<AssembledSequence, LmError> {
    assert!(channels > 0 && temporal.len() % channels == 0, "temporal tokens must split evenly by channel");
    let per_channel = temporal.len() / channels;
    let mut ids = vec![vocab.bos()];
    ids.extend(vocab.encode_text(question));
    ids.push(vocab.ts_start());
    let mut temporal_positions = Vec::with_capacity(temporal.len());
    for (c, run) in temporal.chunks(per_channel.max(1)).enumerate() {
        if c > 0 {
            ids.push(vocab.var_sep());
        }
        for &t in run {
            temporal_positions.push(ids.len());
            ids.push(t);
        }
    }
    ids.push(vocab.ts_end());
    let boundary = ids.len();
    let mut mask = vec![false; boundary];
    if let Some(answer) = answer {
        ids.extend(vocab.encode_text(answer));
        ids.push(vocab.eos());
        mask.resize(ids.len(), true);
    }
    if ids.len() > context {
        return Err(LmError::ContextOverflow { len: ids.len(), context });
    }
    Ok(AssembledSequence { ids, mask, boundary, temporal_positions })
}
