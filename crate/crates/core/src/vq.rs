//! Patch-level VQ-VAE temporal tokenizer.
//!
//! Every channel is cut into patches of `patch_len` steps and z-scored with
//! stored per-channel statistics. One shared 1-D conv encoder maps each patch
//! to a `embed_dim` vector, which snaps to the nearest of `codebook_size`
//! codewords; the codeword index is the temporal token.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::circuit::CHANNELS;
use crate::container::{Container, ContainerError};
use crate::nn::{col2im, gelu_backward, gelu_forward, im2col, linear, linear_backward};
use crate::params::{AdamConfig, AdamW, ParamStore};
use crate::real::Real;

pub const TOKENIZER_KIND: &str = "tokenizer";

#[derive(Debug, thiserror::Error)]
pub enum VqError {
    #[error("window has {m} steps, fewer than patch_len = {patch_len}")]
    WindowTooShort { m: usize, patch_len: usize },
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("tokenizer training set is empty")]
    EmptyDataset,
    #[error("non-finite VQ-VAE loss at step {step}: {breakdown:?}")]
    NonFiniteLoss { step: usize, breakdown: LossBreakdown },
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Average the conv features over the patch axis.
    Mean,
    /// Concatenate the conv features of every step.
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub codebook_size: usize,
    /// Odd kernel width shared by every convolution.
    pub kernel: usize,
    /// Widths of the two encoder convolutions; the decoder mirrors them.
    pub conv_channels: [usize; 2],
    pub pooling: Pooling,
    /// Commitment weight.
    pub beta: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            patch_len: 16,
            stride: 16,
            embed_dim: 64,
            codebook_size: 256,
            kernel: 5,
            conv_channels: [32, 64],
            pooling: Pooling::Mean,
            beta: 0.25,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<(), VqError> {
        let bad = |m: &str| Err(VqError::InvalidConfig(m.to_string()));
        if self.patch_len == 0 || self.stride == 0 || self.embed_dim == 0 || self.codebook_size == 0 {
            return bad("patch_len, stride, embed_dim and codebook_size must be >= 1");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if self.conv_channels.contains(&0) {
            return bad("conv_channels must be >= 1");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be >= 0");
        }
        Ok(())
    }

    /// Patches per channel for a window of `m` steps.
    pub fn num_patches(&self, m: usize) -> Result<usize, VqError> {
        if m < self.patch_len {
            return Err(VqError::WindowTooShort { m, patch_len: self.patch_len });
        }
        Ok((m - self.patch_len) / self.stride + 1)
    }

    fn pooled_width(&self) -> usize {
        match self.pooling {
            Pooling::Mean => self.conv_channels[1],
            Pooling::Flatten => self.conv_channels[1] * self.patch_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Codewords unused over this many steps are re-seeded.
    pub reseed_every: usize,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 256, lr: 1e-3, reseed_every: 200 }
    }
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: [0.0; CHANNELS], std: [1.0; CHANNELS] }
    }

    pub fn from_series<'a>(series: impl IntoIterator<Item = &'a [[f64; CHANNELS]]>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        for rows in series {
            for row in rows {
                n += 1;
                for c in 0..CHANNELS {
                    sum[c] += row[c];
                    sq[c] += row[c] * row[c];
                }
            }
        }
        let n = n.max(1) as f64;
        let mut out = Self::identity();
        for c in 0..CHANNELS {
            let mean = sum[c] / n;
            out.mean[c] = mean;
            out.std[c] = (sq[c] / n - mean * mean).max(0.0).sqrt().max(1e-8);
        }
        out
    }
}

/// Cut a window into normalized patches, shape `(P, N, L)`. Trailing steps
/// past the last full patch are dropped.
pub fn patchify(values: &[[f64; CHANNELS]], cfg: &TokenizerConfig, stats: &NormStats) -> Result<Array3<f64>, VqError> {
    let p = cfg.num_patches(values.len())?;
    let l = cfg.patch_len;
    Ok(Array3::from_shape_fn((p, CHANNELS, l), |(pi, n, t)| {
        (values[pi * cfg.stride + t][n] - stats.mean[n]) / stats.std[n]
    }))
}

/// Patches of one window as rows, in variable-major order (all patches of
/// channel 1, then channel 2, ...).
pub fn patch_rows<R: Real>(patches: &Array3<f64>) -> Array2<R> {
    let (p, n, l) = patches.dim();
    Array2::from_shape_fn((n * p, l), |(row, t)| R::c(patches[[row % p, row / p, t]]))
}

/// Index of the nearest codeword for each row, ties to the lowest index.
pub fn quantize<R: Real>(z: ArrayView2<R>, codebook: ArrayView2<R>) -> Vec<usize> {
    z.rows()
        .into_iter()
        .map(|q| {
            let mut best = 0;
            let mut best_d = R::infinity();
            for (k, c) in codebook.rows().into_iter().enumerate() {
                let mut d = R::zero();
                for (&a, &b) in q.iter().zip(c.iter()) {
                    let e = a - b;
                    d += e * e;
                }
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

/// The three VQ-VAE terms, each a mean over elements.
pub fn vq_loss<R: Real>(
    patches: ArrayView2<R>,
    recon: ArrayView2<R>,
    z_e: ArrayView2<R>,
    z_q: ArrayView2<R>,
    beta: f64,
) -> LossBreakdown {
    let mse = |a: ArrayView2<R>, b: ArrayView2<R>| {
        a.iter().zip(b.iter()).map(|(&x, &y)| (x - y).f64().powi(2)).sum::<f64>() / a.len().max(1) as f64
    };
    let recon = mse(recon, patches);
    let codebook = mse(z_e, z_q);
    LossBreakdown { recon, codebook, commitment: codebook, total: recon + codebook + beta * codebook }
}

/// How the latent passes to the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantizer {
    Nearest,
    /// Skip quantization (`z_q = z_e`); used to verify encoder gradients.
    Identity,
}

/// Which loss terms contribute to the returned gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub recon: bool,
    pub codebook: bool,
    pub commitment: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms { recon: true, codebook: true, commitment: true };
}

const ENC_C1_W: usize = 0;
const ENC_C1_B: usize = 1;
const ENC_C2_W: usize = 2;
const ENC_C2_B: usize = 3;
const ENC_PROJ_W: usize = 4;
const ENC_PROJ_B: usize = 5;
const DEC_PROJ_W: usize = 6;
const DEC_PROJ_B: usize = 7;
const DEC_C1_W: usize = 8;
const DEC_C1_B: usize = 9;
const DEC_C2_W: usize = 10;
const DEC_C2_B: usize = 11;
pub const CODEBOOK: usize = 12;

/// Parameter groups, as index lists into the store.
pub const ENCODER: [usize; 6] = [ENC_C1_W, ENC_C1_B, ENC_C2_W, ENC_C2_B, ENC_PROJ_W, ENC_PROJ_B];
pub const DECODER: [usize; 6] = [DEC_PROJ_W, DEC_PROJ_B, DEC_C1_W, DEC_C1_B, DEC_C2_W, DEC_C2_B];

#[derive(Debug, Clone, PartialEq)]
pub struct VqModel<R> {
    pub cfg: TokenizerConfig,
    pub params: ParamStore<R>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct VqForward<R> {
    pub batch: usize,
    pub x: Array2<R>,
    col1: Array2<R>,
    a1: Array2<R>,
    col2: Array2<R>,
    a2: Array2<R>,
    pooled: Array2<R>,
    pub z_e: Array2<R>,
    pub indices: Option<Vec<usize>>,
    pub z_q: Array2<R>,
    u: Array2<R>,
    col3: Array2<R>,
    a3: Array2<R>,
    col4: Array2<R>,
    pub recon: Array2<R>,
}

impl<R: Real> VqModel<R> {
    /// Fresh model; the codebook stays zero until [`train_vqvae`] seeds it.
    pub fn init(cfg: TokenizerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2] = cfg.conv_channels;
        let (k, l, d) = (cfg.kernel, cfg.patch_len, cfg.embed_dim);
        let mut dense = |rows: usize, cols: usize| {
            let n = Normal::new(0.0, (1.0 / rows as f64).sqrt()).expect("valid std");
            Array2::from_shape_fn((rows, cols), |_| R::c(n.sample(&mut rng)))
        };
        let mut p = ParamStore::new();
        p.push("enc.conv1.w", dense(k, c1), true);
        p.push("enc.conv1.b", Array2::zeros((1, c1)), false);
        p.push("enc.conv2.w", dense(k * c1, c2), true);
        p.push("enc.conv2.b", Array2::zeros((1, c2)), false);
        p.push("enc.proj.w", dense(cfg.pooled_width(), d), true);
        p.push("enc.proj.b", Array2::zeros((1, d)), false);
        p.push("dec.proj.w", dense(d, l * c2), true);
        p.push("dec.proj.b", Array2::zeros((1, l * c2)), false);
        p.push("dec.conv1.w", dense(k * c2, c1), true);
        p.push("dec.conv1.b", Array2::zeros((1, c1)), false);
        p.push("dec.conv2.w", dense(k * c1, 1), true);
        p.push("dec.conv2.b", Array2::zeros((1, 1)), false);
        p.push("codebook", Array2::zeros((cfg.codebook_size, d)), false);
        Self { cfg, params: p }
    }

    pub fn codebook(&self) -> &Array2<R> {
        self.params.get(CODEBOOK)
    }

    pub fn cast<S: Real>(&self) -> VqModel<S> {
        VqModel { cfg: self.cfg, params: self.params.cast() }
    }

    /// Encoder front end: `(batch x L)` patches to `(batch x D)` embeddings,
    /// with the caches needed for backward.
    #[allow(clippy::type_complexity)]
    fn encode_cached(&self, x: ArrayView2<R>) -> (Array2<R>, Array2<R>, Array2<R>, Array2<R>, Array2<R>, Array2<R>) {
        let p = &self.params;
        let (b, l) = x.dim();
        let k = self.cfg.kernel;
        let c2 = self.cfg.conv_channels[1];
        let x_col = x.to_shape((b * l, 1)).expect("contiguous patches").to_owned();
        let col1 = im2col(x_col.view(), b, l, k);
        let a1 = linear(col1.view(), p.get(ENC_C1_W).view(), p.get(ENC_C1_B).view());
        let h1 = gelu_forward(&a1);
        let col2 = im2col(h1.view(), b, l, k);
        let a2 = linear(col2.view(), p.get(ENC_C2_W).view(), p.get(ENC_C2_B).view());
        let h2 = gelu_forward(&a2);
        let pooled = match self.cfg.pooling {
            Pooling::Mean => h2.to_shape((b, l, c2)).expect("contiguous").mean_axis(Axis(1)).expect("l >= 1"),
            Pooling::Flatten => h2.into_shape_with_order((b, l * c2)).expect("contiguous"),
        };
        let z_e = linear(pooled.view(), p.get(ENC_PROJ_W).view(), p.get(ENC_PROJ_B).view());
        (col1, a1, col2, a2, pooled, z_e)
    }

    /// Encode `(batch x L)` patches to `(batch x D)` embeddings.
    pub fn encode(&self, x: ArrayView2<R>) -> Array2<R> {
        self.encode_cached(x).5
    }

    /// Decode `(batch x D)` latents to `(batch x L)` patches.
    pub fn decode(&self, z: ArrayView2<R>) -> Array2<R> {
        self.decode_cached(z).4
    }

    fn decode_cached(&self, z: ArrayView2<R>) -> (Array2<R>, Array2<R>, Array2<R>, Array2<R>, Array2<R>) {
        let p = &self.params;
        let b = z.nrows();
        let (l, k) = (self.cfg.patch_len, self.cfg.kernel);
        let c2 = self.cfg.conv_channels[1];
        let u = linear(z, p.get(DEC_PROJ_W).view(), p.get(DEC_PROJ_B).view());
        let g = gelu_forward(&u).into_shape_with_order((b * l, c2)).expect("contiguous");
        let col3 = im2col(g.view(), b, l, k);
        let a3 = linear(col3.view(), p.get(DEC_C1_W).view(), p.get(DEC_C1_B).view());
        let h3 = gelu_forward(&a3);
        let col4 = im2col(h3.view(), b, l, k);
        let y = linear(col4.view(), p.get(DEC_C2_W).view(), p.get(DEC_C2_B).view());
        let recon = y.into_shape_with_order((b, l)).expect("contiguous");
        (u, col3, a3, col4, recon)
    }

    pub fn forward(&self, x: ArrayView2<R>, mode: Quantizer) -> VqForward<R> {
        let (col1, a1, col2, a2, pooled, z_e) = self.encode_cached(x);
        let (indices, z_q) = match mode {
            Quantizer::Nearest => {
                let idx = quantize(z_e.view(), self.codebook().view());
                let z_q = self.codebook().select(Axis(0), &idx);
                (Some(idx), z_q)
            }
            Quantizer::Identity => (None, z_e.clone()),
        };
        let (u, col3, a3, col4, recon) = self.decode_cached(z_q.view());
        VqForward { batch: x.nrows(), x: x.to_owned(), col1, a1, col2, a2, pooled, z_e, indices, z_q, u, col3, a3, col4, recon }
    }

    pub fn loss(&self, f: &VqForward<R>) -> LossBreakdown {
        vq_loss(f.x.view(), f.recon.view(), f.z_e.view(), f.z_q.view(), self.cfg.beta)
    }

    /// Gradient of the selected loss terms. The reconstruction gradient
    /// reaches the encoder straight through the quantizer.
    pub fn backward(&self, f: &VqForward<R>, terms: LossTerms) -> ParamStore<R> {
        let p = &self.params;
        let mut g = p.zeros_like();
        let (b, l, k) = (f.batch, self.cfg.patch_len, self.cfg.kernel);
        let [c1, c2] = self.cfg.conv_channels;
        let d = self.cfg.embed_dim;

        let mut dz = Array2::zeros((b, d));
        if terms.recon {
            let scale = R::c(2.0 / (b * l) as f64);
            let dy = ((&f.recon - &f.x) * scale).into_shape_with_order((b * l, 1)).expect("contiguous");
            let (w, bias) = g.pair_mut(DEC_C2_W, DEC_C2_B);
            let dcol4 = linear_backward(f.col4.view(), p.get(DEC_C2_W).view(), dy.view(), Some((w, bias)));
            let dh3 = col2im(dcol4.view(), b, l, c1, k);
            let da3 = gelu_backward(&f.a3, &dh3);
            let (w, bias) = g.pair_mut(DEC_C1_W, DEC_C1_B);
            let dcol3 = linear_backward(f.col3.view(), p.get(DEC_C1_W).view(), da3.view(), Some((w, bias)));
            let dg = col2im(dcol3.view(), b, l, c2, k).into_shape_with_order((b, l * c2)).expect("contiguous");
            let du = gelu_backward(&f.u, &dg);
            let (w, bias) = g.pair_mut(DEC_PROJ_W, DEC_PROJ_B);
            dz = linear_backward(f.z_q.view(), p.get(DEC_PROJ_W).view(), du.view(), Some((w, bias)));
        }

        let latent_scale = 2.0 / (b * d) as f64;
        if terms.commitment && f.indices.is_some() {
            let k = R::c(self.cfg.beta * latent_scale);
            dz.zip_mut_with(&(&f.z_e - &f.z_q), |o, &e| *o += k * e);
        }
        if terms.codebook {
            if let Some(idx) = &f.indices {
                let k = R::c(latent_scale);
                let cb = g.get_mut(CODEBOOK);
                for (i, &code) in idx.iter().enumerate() {
                    let mut row = cb.row_mut(code);
                    for j in 0..d {
                        row[j] += k * (f.z_q[[i, j]] - f.z_e[[i, j]]);
                    }
                }
            }
        }

        let (w, bias) = g.pair_mut(ENC_PROJ_W, ENC_PROJ_B);
        let dpooled = linear_backward(f.pooled.view(), p.get(ENC_PROJ_W).view(), dz.view(), Some((w, bias)));
        let dh2 = match self.cfg.pooling {
            Pooling::Mean => {
                let inv = R::c(1.0 / l as f64);
                Array2::from_shape_fn((b * l, c2), |(row, c)| dpooled[[row / l, c]] * inv)
            }
            Pooling::Flatten => dpooled.into_shape_with_order((b * l, c2)).expect("contiguous"),
        };
        let da2 = gelu_backward(&f.a2, &dh2);
        let (w, bias) = g.pair_mut(ENC_C2_W, ENC_C2_B);
        let dcol2 = linear_backward(f.col2.view(), p.get(ENC_C2_W).view(), da2.view(), Some((w, bias)));
        let dh1 = col2im(dcol2.view(), b, l, c1, k);
        let da1 = gelu_backward(&f.a1, &dh1);
        let (w, bias) = g.pair_mut(ENC_C1_W, ENC_C1_B);
        linear_backward(f.col1.view(), p.get(ENC_C1_W).view(), da1.view(), Some((w, bias)));
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqStepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Distinct codewords hit by this step's batch, as a fraction of K.
    pub batch_utilization: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VqHistory {
    pub steps: Vec<VqStepRecord>,
    pub reseeded: usize,
}

/// Stack the normalized patches of many windows into `(count x L)` rows.
pub fn patch_pool<'a>(
    series: impl IntoIterator<Item = &'a [[f64; CHANNELS]]>,
    cfg: &TokenizerConfig,
    stats: &NormStats,
) -> Result<Array2<f32>, VqError> {
    let mut rows: Vec<f32> = Vec::new();
    for values in series {
        let p = patchify(values, cfg, stats)?;
        rows.extend(p.iter().map(|&v| v as f32));
    }
    let n = rows.len() / cfg.patch_len;
    Ok(Array2::from_shape_vec((n, cfg.patch_len), rows).expect("whole patches"))
}

fn sample_batch(pool: &Array2<f32>, batch: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..pool.nrows())).collect();
    pool.select(Axis(0), &idx)
}

/// Train encoder, decoder and codebook with Adam. The codebook starts from
/// the first batch's embeddings; codewords no batch selected during the last
/// `reseed_every` steps are moved onto random embeddings of the current batch.
pub fn train_vqvae(
    pool: &Array2<f32>,
    cfg: &TokenizerConfig,
    train: &VqTrainConfig,
    seed: u64,
) -> Result<(VqModel<f32>, VqHistory), VqError> {
    cfg.validate()?;
    if pool.nrows() == 0 {
        return Err(VqError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VqModel::<f32>::init(*cfg, rng.random());
    let all: Vec<usize> = (0..model.params.len()).collect();
    let mut opt = AdamW::new(&model.params, &all, AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
    let k = cfg.codebook_size;
    let mut usage = vec![0u64; k];
    let mut history = VqHistory::default();

    for step in 0..train.steps {
        let x = sample_batch(pool, train.batch_size, &mut rng);
        if step == 0 {
            let z = model.encode(x.view());
            let cb = model.params.get_mut(CODEBOOK);
            for code in 0..k {
                cb.row_mut(code).assign(&z.row(code % z.nrows()));
            }
        }
        let f = model.forward(x.view(), Quantizer::Nearest);
        let loss = model.loss(&f);
        if !loss.total.is_finite() {
            return Err(VqError::NonFiniteLoss { step, breakdown: loss });
        }
        let idx = f.indices.as_deref().expect("nearest mode");
        let mut hit = vec![false; k];
        for &i in idx {
            usage[i] += 1;
            hit[i] = true;
        }
        history.steps.push(VqStepRecord {
            step,
            loss,
            batch_utilization: hit.iter().filter(|&&h| h).count() as f64 / k as f64,
        });
        let grads = model.backward(&f, LossTerms::ALL);
        opt.step(&mut model.params, &grads, train.lr);

        if train.reseed_every > 0 && (step + 1) % train.reseed_every == 0 {
            let cb = model.params.get_mut(CODEBOOK);
            for (code, count) in usage.iter_mut().enumerate() {
                if *count == 0 {
                    let r = rng.random_range(0..f.z_e.nrows());
                    cb.row_mut(code).assign(&f.z_e.row(r));
                    history.reseeded += 1;
                }
                *count = 0;
            }
        }
    }
    Ok((model, history))
}

/// Reconstruction quality and codebook coverage on a held-out pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqEvaluation {
    pub recon_mse: f64,
    pub patch_variance: f64,
    /// Distinct codewords used, as a fraction of K.
    pub utilization: f64,
}

pub fn evaluate(model: &VqModel<f32>, pool: &Array2<f32>) -> VqEvaluation {
    let mut used = vec![false; model.cfg.codebook_size];
    let mut sq = 0.0;
    let n = pool.len().max(1) as f64;
    for chunk in pool.axis_chunks_iter(Axis(0), 1024) {
        let f = model.forward(chunk, Quantizer::Nearest);
        for &i in f.indices.as_deref().expect("nearest mode") {
            used[i] = true;
        }
        sq += f.recon.iter().zip(chunk.iter()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
    }
    let mean = pool.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = pool.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    VqEvaluation {
        recon_mse: sq / n,
        patch_variance: var,
        utilization: used.iter().filter(|&&u| u).count() as f64 / used.len() as f64,
    }
}

/// A trained, frozen tokenizer: config, normalization statistics and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub stats: NormStats,
    pub model: VqModel<f32>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerMeta {
    cfg: TokenizerConfig,
    stats: NormStats,
}

impl Tokenizer {
    pub fn cfg(&self) -> &TokenizerConfig {
        &self.model.cfg
    }

    /// Normalized patch rows in variable-major order, `(N*P) x L`.
    pub fn patches(&self, values: &[[f64; CHANNELS]]) -> Result<Array2<f32>, VqError> {
        Ok(patch_rows(&patchify(values, self.cfg(), &self.stats)?))
    }

    /// `N * P` tokens in `[0, K)`, variable-major.
    pub fn tokenize(&self, values: &[[f64; CHANNELS]]) -> Result<Vec<u32>, VqError> {
        let x = self.patches(values)?;
        let z = self.model.encode(x.view());
        Ok(quantize(z.view(), self.model.codebook().view()).into_iter().map(|i| i as u32).collect())
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::to_value(TokenizerMeta { cfg: self.model.cfg, stats: self.stats }).expect("meta serializes");
        let mut c = Container::new(TOKENIZER_KIND, meta);
        self.model.params.write_to(&mut c, "");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, VqError> {
        let meta: TokenizerMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| ContainerError::Header(e.to_string()))?;
        meta.cfg.validate()?;
        let mut model = VqModel::<f32>::init(meta.cfg, 0);
        model.params.read_from(c, "")?;
        Ok(Self { stats: meta.stats, model })
    }

    pub fn save(&self, path: &Path) -> Result<(), VqError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, VqError> {
        Self::from_container(&Container::load(path, TOKENIZER_KIND)?)
    }
}

/// Slice `rows` of a `(N*P) x W` variable-major matrix belonging to channel `n`.
pub fn channel_rows<R: Clone>(m: &Array2<R>, n: usize, per_channel: usize) -> ArrayView2<'_, R> {
    m.slice(s![n * per_channel..(n + 1) * per_channel, ..])
}
