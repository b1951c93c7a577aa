//! Decoder-only pre-LN transformer over the merged vocabulary.
//!
//! One embedding matrix serves both the input lookup and the output
//! projection. Positions use a fixed sinusoid table, so the embedding matrix
//! is the only parameter the input layer owns. A model built with a
//! continuous [`TemporalEncoding`] computes the rows at temporal positions
//! from the raw patches through an adapter instead of looking up tokens.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::attention::{attend_cached, attention, attention_backward};
use super::vocab::{extend_embeddings, Vocabulary, VocabularyParts};
use super::LmError;
use crate::container::{Container, ContainerError};
use crate::nn::{
    gelu_backward, gelu_forward, layer_norm, layer_norm_backward, linear, linear_backward, log_sum_exp,
    softmax_inplace, LayerNormCache,
};
use crate::params::ParamStore;
use crate::real::{gelu, Real};
use crate::util::derive_seed;

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Amplitude of the sinusoid position table, matched to the embedding scale.
pub const POSITION_SCALE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub context: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { d_model: 128, layers: 4, heads: 4, ffn_mult: 4, context: 640, dropout: 0.0 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::InvalidConfig(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model ({}) must be a positive multiple of heads ({})", self.d_model, self.heads));
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even for the sinusoid position table".into());
        }
        if self.layers == 0 || self.ffn_mult == 0 || self.context == 0 {
            return bad("layers, ffn_mult and context must be >= 1".into());
        }
        if self.dropout != 0.0 {
            return bad(format!("dropout must be 0 (got {}); stochastic layers are not implemented", self.dropout));
        }
        Ok(())
    }
}

/// How temporal positions are embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalEncoding {
    /// Discrete codebook tokens looked up in the shared embedding matrix.
    Tokens,
    /// One affine map per patch.
    Linear,
    /// Two-layer perceptron per patch.
    Mlp,
    /// Affine map followed by self-attention across the window's patches.
    Attention,
}

impl TemporalEncoding {
    pub fn is_continuous(self) -> bool {
        self != TemporalEncoding::Tokens
    }

    pub fn name(self) -> &'static str {
        match self {
            TemporalEncoding::Tokens => "tokens",
            TemporalEncoding::Linear => "linear",
            TemporalEncoding::Mlp => "mlp",
            TemporalEncoding::Attention => "attention",
        }
    }
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub embedding: bool,
    pub adapter: bool,
    pub body: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { embedding: true, adapter: true, body: true };
    pub const INPUT_ONLY: Trainable = Trainable { embedding: true, adapter: true, body: false };
}

/// One sequence fed to the model.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub ids: &'a [u32],
    pub temporal_positions: &'a [usize],
    /// Normalized patches (`positions x patch_len`), required by continuous encodings.
    pub patches: Option<ArrayView2<'a, f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub nll_sum: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl LossStats {
    pub fn add(&mut self, o: LossStats) {
        self.nll_sum += o.nll_sum;
        self.tokens += o.tokens;
        self.correct += o.correct;
    }

    pub fn mean(&self) -> f64 {
        self.nll_sum / self.tokens.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel<R> {
    pub cfg: TransformerConfig,
    pub encoding: TemporalEncoding,
    pub patch_len: usize,
    pub params: ParamStore<R>,
    positions: Array2<R>,
}

struct LayerCache<R> {
    ln1: LayerNormCache<R>,
    a: Array2<R>,
    qkv: Array2<R>,
    probs: Vec<Array2<R>>,
    att: Array2<R>,
    ln2: LayerNormCache<R>,
    m: Array2<R>,
    f_pre: Array2<R>,
    f: Array2<R>,
}

struct AdapterCache<R> {
    patches: Array2<R>,
    hidden_pre: Option<Array2<R>>,
    hidden: Option<Array2<R>>,
    qkv: Option<Array2<R>>,
    probs: Vec<Array2<R>>,
    att: Option<Array2<R>>,
}

struct Forward<R> {
    layers: Vec<LayerCache<R>>,
    lnf: LayerNormCache<R>,
    h: Array2<R>,
    adapter: Option<AdapterCache<R>>,
}

fn sinusoid_table<R: Real>(context: usize, d: usize) -> Array2<R> {
    Array2::from_shape_fn((context, d), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        R::c(POSITION_SCALE * if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<R: Real> LanguageModel<R> {
    /// Build a model: text rows first, then the extension rows for specials
    /// and temporal tokens, then the body and any adapter.
    pub fn init(
        cfg: TransformerConfig,
        vocab: &Vocabulary,
        encoding: TemporalEncoding,
        patch_len: usize,
        seed: u64,
    ) -> Result<Self, LmError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "body"));
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("valid std");
            Array2::from_shape_fn((rows, cols), |_| R::c(n.sample(&mut rng)))
        };
        let w0 = {
            let mut r = ChaCha8Rng::seed_from_u64(derive_seed(seed, "text-embedding"));
            let n = Normal::new(0.0, 0.02).expect("valid std");
            Array2::from_shape_fn((vocab.text_len(), d), |_| R::c(n.sample(&mut r)))
        };
        let w2 = extend_embeddings(&w0, vocab.len() - vocab.text_len(), derive_seed(seed, "extension"));

        let mut p = ParamStore::new();
        p.push("embedding", w2, true);
        let resid_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
        let ffn = cfg.ffn_mult * d;
        for l in 0..cfg.layers {
            let n = |s: &str| format!("layer{l}.{s}");
            p.push(n("ln1.g"), Array2::ones((1, d)), false);
            p.push(n("ln1.b"), Array2::zeros((1, d)), false);
            p.push(n("attn.wqkv"), normal(d, 3 * d, 0.02), true);
            p.push(n("attn.bqkv"), Array2::zeros((1, 3 * d)), false);
            p.push(n("attn.wo"), normal(d, d, resid_std), true);
            p.push(n("attn.bo"), Array2::zeros((1, d)), false);
            p.push(n("ln2.g"), Array2::ones((1, d)), false);
            p.push(n("ln2.b"), Array2::zeros((1, d)), false);
            p.push(n("ffn.w1"), normal(d, ffn, 0.02), true);
            p.push(n("ffn.b1"), Array2::zeros((1, ffn)), false);
            p.push(n("ffn.w2"), normal(ffn, d, resid_std), true);
            p.push(n("ffn.b2"), Array2::zeros((1, d)), false);
        }
        p.push("final_ln.g", Array2::ones((1, d)), false);
        p.push("final_ln.b", Array2::zeros((1, d)), false);
        let a_std = (1.0 / patch_len as f64).sqrt() * 0.1;
        match encoding {
            TemporalEncoding::Tokens => {}
            TemporalEncoding::Linear => {
                p.push("adapter.w", normal(patch_len, d, a_std), true);
                p.push("adapter.b", Array2::zeros((1, d)), false);
            }
            TemporalEncoding::Mlp => {
                p.push("adapter.w1", normal(patch_len, d, a_std), true);
                p.push("adapter.b1", Array2::zeros((1, d)), false);
                p.push("adapter.w2", normal(d, d, 0.02), true);
                p.push("adapter.b2", Array2::zeros((1, d)), false);
            }
            TemporalEncoding::Attention => {
                p.push("adapter.w_in", normal(patch_len, d, a_std), true);
                p.push("adapter.b_in", Array2::zeros((1, d)), false);
                p.push("adapter.wqkv", normal(d, 3 * d, 0.02), true);
                p.push("adapter.bqkv", Array2::zeros((1, 3 * d)), false);
                p.push("adapter.wo", normal(d, d, 0.02), true);
                p.push("adapter.bo", Array2::zeros((1, d)), false);
            }
        }
        Ok(Self { cfg, encoding, patch_len, params: p, positions: sinusoid_table(cfg.context, d) })
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get(0).nrows()
    }

    pub fn embedding(&self) -> &Array2<R> {
        self.params.get(0)
    }

    pub fn embedding_index(&self) -> usize {
        0
    }

    fn layer(&self, l: usize) -> LayerIdx {
        let b = 1 + 12 * l;
        LayerIdx {
            ln1_g: b,
            ln1_b: b + 1,
            wqkv: b + 2,
            bqkv: b + 3,
            wo: b + 4,
            bo: b + 5,
            ln2_g: b + 6,
            ln2_b: b + 7,
            w1: b + 8,
            b1: b + 9,
            w2: b + 10,
            b2: b + 11,
        }
    }

    fn lnf(&self) -> (usize, usize) {
        let b = 1 + 12 * self.cfg.layers;
        (b, b + 1)
    }

    /// Transformer blocks and final norm: everything except the embedding
    /// matrix and the adapter.
    pub fn body_indices(&self) -> Vec<usize> {
        (1..self.lnf().1 + 1).collect()
    }

    pub fn adapter_indices(&self) -> Vec<usize> {
        (self.lnf().1 + 1..self.params.len()).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.params.len()).collect()
    }

    /// Indices trained under `t`.
    pub fn trainable_indices(&self, t: Trainable) -> Vec<usize> {
        let mut out = Vec::new();
        if t.embedding {
            out.push(0);
        }
        if t.body {
            out.extend(self.body_indices());
        }
        if t.adapter {
            out.extend(self.adapter_indices());
        }
        out
    }

    pub fn cast<S: Real>(&self) -> LanguageModel<S> {
        LanguageModel {
            cfg: self.cfg,
            encoding: self.encoding,
            patch_len: self.patch_len,
            params: self.params.cast(),
            positions: self.positions.mapv(|v| S::c(v.f64())),
        }
    }

    fn check_input(&self, input: &ModelInput<'_>) -> Result<(), LmError> {
        if input.ids.len() > self.cfg.context {
            return Err(LmError::ContextOverflow { len: input.ids.len(), context: self.cfg.context });
        }
        if input.ids.is_empty() {
            return Err(LmError::EmptySequence);
        }
        let v = self.vocab_size() as u32;
        if let Some(&bad) = input.ids.iter().find(|&&i| i >= v) {
            return Err(LmError::TokenOutOfRange { id: bad, vocab: v as usize });
        }
        if self.encoding.is_continuous() {
            let patches = input.patches.ok_or(LmError::MissingPatches)?;
            if patches.nrows() != input.temporal_positions.len() || patches.ncols() != self.patch_len {
                return Err(LmError::MissingPatches);
            }
        }
        Ok(())
    }

    fn adapter_forward(&self, patches: ArrayView2<'_, f32>) -> (Array2<R>, AdapterCache<R>) {
        let p = &self.params;
        let a = self.adapter_indices();
        let x = patches.mapv(|v| R::c(v as f64));
        let mut cache = AdapterCache { patches: x, hidden_pre: None, hidden: None, qkv: None, probs: Vec::new(), att: None };
        let out = match self.encoding {
            TemporalEncoding::Tokens => unreachable!("token models have no adapter"),
            TemporalEncoding::Linear => linear(cache.patches.view(), p.get(a[0]).view(), p.get(a[1]).view()),
            TemporalEncoding::Mlp => {
                let pre = linear(cache.patches.view(), p.get(a[0]).view(), p.get(a[1]).view());
                let h = gelu_forward(&pre);
                let out = linear(h.view(), p.get(a[2]).view(), p.get(a[3]).view());
                cache.hidden_pre = Some(pre);
                cache.hidden = Some(h);
                out
            }
            TemporalEncoding::Attention => {
                let e = linear(cache.patches.view(), p.get(a[0]).view(), p.get(a[1]).view());
                let qkv = linear(e.view(), p.get(a[2]).view(), p.get(a[3]).view());
                let (att, probs) = attention(qkv.view(), self.cfg.heads, false);
                let out = linear(att.view(), p.get(a[4]).view(), p.get(a[5]).view());
                cache.hidden = Some(e);
                cache.qkv = Some(qkv);
                cache.probs = probs;
                cache.att = Some(att);
                out
            }
        };
        (out, cache)
    }

    fn adapter_backward(&self, cache: &AdapterCache<R>, dout: ArrayView2<'_, R>, grads: &mut ParamStore<R>) {
        let p = &self.params;
        let a = self.adapter_indices();
        match self.encoding {
            TemporalEncoding::Tokens => {}
            TemporalEncoding::Linear => {
                let (w, b) = grads.pair_mut(a[0], a[1]);
                linear_backward(cache.patches.view(), p.get(a[0]).view(), dout, Some((w, b)));
            }
            TemporalEncoding::Mlp => {
                let h = cache.hidden.as_ref().expect("mlp cache");
                let (w, b) = grads.pair_mut(a[2], a[3]);
                let dh = linear_backward(h.view(), p.get(a[2]).view(), dout, Some((w, b)));
                let dpre = gelu_backward(cache.hidden_pre.as_ref().expect("mlp cache"), &dh);
                let (w, b) = grads.pair_mut(a[0], a[1]);
                linear_backward(cache.patches.view(), p.get(a[0]).view(), dpre.view(), Some((w, b)));
            }
            TemporalEncoding::Attention => {
                let (w, b) = grads.pair_mut(a[4], a[5]);
                let datt = linear_backward(cache.att.as_ref().expect("cache").view(), p.get(a[4]).view(), dout, Some((w, b)));
                let qkv = cache.qkv.as_ref().expect("cache");
                let dqkv = attention_backward(qkv.view(), &cache.probs, datt.view());
                let (w, b) = grads.pair_mut(a[2], a[3]);
                let de = linear_backward(cache.hidden.as_ref().expect("cache").view(), p.get(a[2]).view(), dqkv.view(), Some((w, b)));
                let (w, b) = grads.pair_mut(a[0], a[1]);
                linear_backward(cache.patches.view(), p.get(a[0]).view(), de.view(), Some((w, b)));
            }
        }
    }

    /// Adapter output rows for the given patches (`positions x d`).
    pub fn encode_continuous(&self, patches: ArrayView2<'_, f32>) -> Result<Array2<R>, LmError> {
        if !self.encoding.is_continuous() {
            return Err(LmError::InvalidConfig("model uses discrete temporal tokens".into()));
        }
        Ok(self.adapter_forward(patches).0)
    }

    fn embed(&self, input: &ModelInput<'_>) -> (Array2<R>, Option<AdapterCache<R>>) {
        let e = self.embedding();
        let t = input.ids.len();
        let mut x = Array2::zeros((t, self.cfg.d_model));
        for (row, &id) in x.rows_mut().into_iter().zip(input.ids) {
            let mut row = row;
            row.assign(&e.row(id as usize));
        }
        let mut adapter = None;
        if self.encoding.is_continuous() {
            let (rows, cache) = self.adapter_forward(input.patches.expect("checked"));
            for (r, &pos) in input.temporal_positions.iter().enumerate() {
                x.row_mut(pos).assign(&rows.row(r));
            }
            adapter = Some(cache);
        }
        x += &self.positions.slice(s![..t, ..]);
        (x, adapter)
    }

    fn forward(&self, input: &ModelInput<'_>) -> Result<Forward<R>, LmError> {
        self.check_input(input)?;
        let p = &self.params;
        let (mut x, adapter) = self.embed(input);
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let ix = self.layer(l);
            let (a, ln1) = layer_norm(x.view(), p.get(ix.ln1_g).view(), p.get(ix.ln1_b).view());
            let qkv = linear(a.view(), p.get(ix.wqkv).view(), p.get(ix.bqkv).view());
            let (att, probs) = attention(qkv.view(), self.cfg.heads, true);
            x += &linear(att.view(), p.get(ix.wo).view(), p.get(ix.bo).view());
            let (m, ln2) = layer_norm(x.view(), p.get(ix.ln2_g).view(), p.get(ix.ln2_b).view());
            let f_pre = linear(m.view(), p.get(ix.w1).view(), p.get(ix.b1).view());
            let f = gelu_forward(&f_pre);
            x += &linear(f.view(), p.get(ix.w2).view(), p.get(ix.b2).view());
            layers.push(LayerCache { ln1, a, qkv, probs, att, ln2, m, f_pre, f });
        }
        let (g, b) = self.lnf();
        let (h, lnf) = layer_norm(x.view(), p.get(g).view(), p.get(b).view());
        Ok(Forward { layers, lnf, h, adapter })
    }

    /// Full `T x |V|` logits.
    pub fn logits(&self, input: &ModelInput<'_>) -> Result<Array2<R>, LmError> {
        let f = self.forward(input)?;
        Ok(f.h.dot(&self.embedding().t()))
    }

    /// Masked next-token loss statistics without gradients.
    pub fn loss(&self, input: &ModelInput<'_>, mask: &[bool]) -> Result<LossStats, LmError> {
        let f = self.forward(input)?;
        let (stats, _) = self.head(&f, input.ids, mask, None)?;
        Ok(stats)
    }

    /// Predictions for every masked target: returns stats and, when
    /// `grad_scale` is given, `d loss / d logits` for the selected rows.
    #[allow(clippy::type_complexity)]
    fn head(
        &self,
        f: &Forward<R>,
        ids: &[u32],
        mask: &[bool],
        grad_scale: Option<R>,
    ) -> Result<(LossStats, Option<(Vec<usize>, Array2<R>)>), LmError> {
        let rows: Vec<usize> = (1..ids.len()).filter(|&t| mask[t]).map(|t| t - 1).collect();
        if rows.is_empty() {
            return Err(LmError::EmptyMask);
        }
        let hs = f.h.select(Axis(0), &rows);
        let mut logits = hs.dot(&self.embedding().t());
        let mut stats = LossStats::default();
        for (mut row, &r) in logits.rows_mut().into_iter().zip(&rows) {
            let target = ids[r + 1] as usize;
            let row = row.as_slice_mut().expect("standard layout");
            let lse = log_sum_exp(row);
            stats.nll_sum += (lse - row[target]).f64();
            stats.tokens += 1;
            let argmax = row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            stats.correct += usize::from(argmax == target);
            if let Some(k) = grad_scale {
                softmax_inplace(row);
                row[target] -= R::one();
                for v in row.iter_mut() {
                    *v *= k;
                }
            }
        }
        Ok((stats, grad_scale.map(|_| (rows, logits))))
    }

    /// Masked next-token loss and its gradient, scaled by `grad_scale` and
    /// added into `grads`. Frozen groups receive no gradient.
    pub fn loss_and_grad(
        &self,
        input: &ModelInput<'_>,
        mask: &[bool],
        trainable: Trainable,
        grad_scale: R,
        grads: &mut ParamStore<R>,
    ) -> Result<LossStats, LmError> {
        let f = self.forward(input)?;
        let (stats, d) = self.head(&f, input.ids, mask, Some(grad_scale))?;
        let (rows, dlogits) = d.expect("gradient requested");
        let p = &self.params;
        let e = self.embedding();
        let t = input.ids.len();

        let mut dh = Array2::zeros((t, self.cfg.d_model));
        let dh_sel = dlogits.dot(e);
        for (i, &r) in rows.iter().enumerate() {
            let mut row = dh.row_mut(r);
            row += &dh_sel.row(i);
        }
        if trainable.embedding {
            let hs = f.h.select(Axis(0), &rows);
            ndarray::linalg::general_mat_mul(R::one(), &dlogits.t(), &hs, R::one(), grads.get_mut(0));
        }

        let body = trainable.body;
        let (g, b) = self.lnf();
        let mut dx = {
            let (dg, db) = grads.pair_mut(g, b);
            layer_norm_backward(&f.lnf, p.get(g).view(), dh.view(), body.then_some((dg, db)))
        };
        for l in (0..self.cfg.layers).rev() {
            let ix = self.layer(l);
            let c = &f.layers[l];
            let df = {
                let (w, b) = grads.pair_mut(ix.w2, ix.b2);
                linear_backward(c.f.view(), p.get(ix.w2).view(), dx.view(), body.then_some((w, b)))
            };
            let df_pre = gelu_backward(&c.f_pre, &df);
            let dm = {
                let (w, b) = grads.pair_mut(ix.w1, ix.b1);
                linear_backward(c.m.view(), p.get(ix.w1).view(), df_pre.view(), body.then_some((w, b)))
            };
            {
                let (dg, db) = grads.pair_mut(ix.ln2_g, ix.ln2_b);
                dx += &layer_norm_backward(&c.ln2, p.get(ix.ln2_g).view(), dm.view(), body.then_some((dg, db)));
            }
            let datt = {
                let (w, b) = grads.pair_mut(ix.wo, ix.bo);
                linear_backward(c.att.view(), p.get(ix.wo).view(), dx.view(), body.then_some((w, b)))
            };
            let dqkv = attention_backward(c.qkv.view(), &c.probs, datt.view());
            let da = {
                let (w, b) = grads.pair_mut(ix.wqkv, ix.bqkv);
                linear_backward(c.a.view(), p.get(ix.wqkv).view(), dqkv.view(), body.then_some((w, b)))
            };
            {
                let (dg, db) = grads.pair_mut(ix.ln1_g, ix.ln1_b);
                dx += &layer_norm_backward(&c.ln1, p.get(ix.ln1_g).view(), da.view(), body.then_some((dg, db)));
            }
        }

        let continuous = self.encoding.is_continuous();
        if trainable.embedding {
            let de = grads.get_mut(0);
            let mut is_temporal = vec![false; t];
            if continuous {
                for &pos in input.temporal_positions {
                    is_temporal[pos] = true;
                }
            }
            for (pos, &id) in input.ids.iter().enumerate() {
                if !is_temporal[pos] {
                    let mut row = de.row_mut(id as usize);
                    row += &dx.row(pos);
                }
            }
        }
        if continuous && trainable.adapter {
            let dadapter = dx.select(Axis(0), input.temporal_positions);
            self.adapter_backward(f.adapter.as_ref().expect("adapter cache"), dadapter.view(), grads);
        }
        Ok(stats)
    }

    /// Decode up to `max_new` tokens after the prompt with a key/value cache.
    /// Only ids with `allowed[id]` can be produced; generation stops at
    /// `eos` (not returned) or when the context is full.
    pub fn generate(
        &self,
        prompt: &ModelInput<'_>,
        max_new: usize,
        decoding: Decoding,
        allowed: &[bool],
        eos: u32,
    ) -> Result<Vec<u32>, LmError> {
        let f = self.forward(prompt)?;
        let p = &self.params;
        let d = self.cfg.d_model;
        let ctx = self.cfg.context;
        let mut keys: Vec<Array2<R>> = Vec::with_capacity(self.cfg.layers);
        let mut values: Vec<Array2<R>> = Vec::with_capacity(self.cfg.layers);
        let mut n = prompt.ids.len();
        for c in &f.layers {
            let mut k = Array2::zeros((ctx, d));
            let mut v = Array2::zeros((ctx, d));
            k.slice_mut(s![..n, ..]).assign(&c.qkv.slice(s![.., d..2 * d]));
            v.slice_mut(s![..n, ..]).assign(&c.qkv.slice(s![.., 2 * d..]));
            keys.push(k);
            values.push(v);
        }
        let mut rng = match decoding {
            Decoding::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Decoding::Greedy => None,
        };
        let mut h = f.h.row(n - 1).to_owned().insert_axis(Axis(0));
        let mut out = Vec::new();
        let (g, b) = self.lnf();
        for _ in 0..max_new {
            let mut logits = h.dot(&self.embedding().t()).row(0).to_vec();
            let next = choose(&mut logits, allowed, decoding, rng.as_mut()).unwrap_or(eos);
            if next == eos || n >= ctx {
                break;
            }
            out.push(next);
            let mut x = self.embedding().row(next as usize).to_owned().insert_axis(Axis(0));
            x += &self.positions.slice(s![n..n + 1, ..]);
            for l in 0..self.cfg.layers {
                let ix = self.layer(l);
                let (a, _) = layer_norm(x.view(), p.get(ix.ln1_g).view(), p.get(ix.ln1_b).view());
                let qkv = linear(a.view(), p.get(ix.wqkv).view(), p.get(ix.bqkv).view());
                keys[l].row_mut(n).assign(&qkv.slice(s![0, d..2 * d]));
                values[l].row_mut(n).assign(&qkv.slice(s![0, 2 * d..]));
                let q: Vec<R> = qkv.slice(s![0, ..d]).to_vec();
                let att = attend_cached(&q, keys[l].slice(s![..=n, ..]), values[l].slice(s![..=n, ..]), self.cfg.heads);
                let att = Array2::from_shape_vec((1, d), att).expect("d values");
                x += &linear(att.view(), p.get(ix.wo).view(), p.get(ix.bo).view());
                let (m, _) = layer_norm(x.view(), p.get(ix.ln2_g).view(), p.get(ix.ln2_b).view());
                let fh = linear(m.view(), p.get(ix.w1).view(), p.get(ix.b1).view()).mapv(gelu);
                x += &linear(fh.view(), p.get(ix.w2).view(), p.get(ix.b2).view());
            }
            h = layer_norm(x.view(), p.get(g).view(), p.get(b).view()).0;
            n += 1;
        }
        Ok(out)
    }
}

fn choose<R: Real>(logits: &mut [R], allowed: &[bool], decoding: Decoding, rng: Option<&mut ChaCha8Rng>) -> Option<u32> {
    for (v, &ok) in logits.iter_mut().zip(allowed) {
        if !ok {
            *v = R::neg_infinity();
        }
    }
    if !logits.iter().any(|v| v.is_finite()) {
        return None;
    }
    match (decoding, rng) {
        (Decoding::Temperature { temperature, .. }, Some(rng)) if temperature > 0.0 => {
            let t = R::c(temperature);
            for v in logits.iter_mut() {
                *v /= t;
            }
            softmax_inplace(logits);
            let mut u = R::c(rng.random::<f64>());
            for (i, &p) in logits.iter().enumerate() {
                if u < p {
                    return Some(i as u32);
                }
                u -= p;
            }
            logits.iter().rposition(|p| *p > R::zero()).map(|i| i as u32)
        }
        _ => {
            let mut best = None;
            for (i, &v) in logits.iter().enumerate() {
                if v.is_finite() && best.is_none_or(|b: usize| v > logits[b]) {
                    best = Some(i);
                }
            }
            best.map(|i| i as u32)
        }
    }
}

/// Generation may emit text tokens and `<eos>`; specials, `<pad>` and
/// temporal tokens are masked out.
pub fn generation_mask(vocab: &Vocabulary) -> Vec<bool> {
    (0..vocab.len() as u32).map(|id| (id as usize) < vocab.text_len() || id == vocab.eos()).collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    cfg: TransformerConfig,
    encoding: TemporalEncoding,
    patch_len: usize,
    vocab: VocabularyParts,
    stage: String,
}

/// A model with its vocabulary and training-stage tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LanguageModel<f32>,
    pub vocab: Vocabulary,
    pub stage: String,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let meta = CheckpointMeta {
            cfg: self.model.cfg,
            encoding: self.model.encoding,
            patch_len: self.model.patch_len,
            vocab: self.vocab.to_parts(),
            stage: self.stage.clone(),
        };
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serializes"));
        self.model.params.write_to(&mut c, "");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, LmError> {
        let meta: CheckpointMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| ContainerError::Header(e.to_string()))?;
        let vocab = Vocabulary::from_parts(&meta.vocab).map_err(|e| ContainerError::Header(e.to_string()))?;
        let mut model = LanguageModel::<f32>::init(meta.cfg, &vocab, meta.encoding, meta.patch_len, 0)?;
        model.params.read_from(c, "")?;
        Ok(Self { model, vocab, stage: meta.stage })
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        Self::from_container(&Container::load(path, CHECKPOINT_KIND)?)
    }
}
