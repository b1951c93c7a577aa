//! Named parameter tensors, their gradients, and the adaptive-moment optimizer.

use ndarray::{Array2, Zip};
use sha2::{Digest, Sha256};

use crate::container::{Container, ContainerError};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub name: String,
    pub value: Array2<R>,
    /// Whether weight decay applies (matrices yes, biases and norms no).
    pub decay: bool,
}

/// An ordered list of named 2-D tensors. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<R> {
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self { tensors: Vec::new() }
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor and return its index.
    pub fn push(&mut self, name: impl Into<String>, value: Array2<R>, decay: bool) -> usize {
        self.tensors.push(Tensor { name: name.into(), value, decay });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Array2<R> {
        &self.tensors[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Array2<R> {
        &mut self.tensors[i].value
    }

    /// Two distinct tensors mutably at once.
    pub fn pair_mut(&mut self, a: usize, b: usize) -> (&mut Array2<R>, &mut Array2<R>) {
        assert!(a < b, "pair_mut expects a < b");
        let (lo, hi) = self.tensors.split_at_mut(b);
        (&mut lo[a].value, &mut hi[0].value)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.tensors[i].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { name: t.name.clone(), value: Array2::zeros(t.value.raw_dim()), decay: t.decay })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.value.fill(R::zero());
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.value += &b.value;
        }
    }

    pub fn scale(&mut self, k: R) {
        for t in &mut self.tensors {
            t.value.mapv_inplace(|v| v * k);
        }
    }

    /// Euclidean norm over the listed tensors, accumulated in `f64`.
    pub fn norm(&self, indices: &[usize]) -> f64 {
        indices
            .iter()
            .map(|&i| self.tensors[i].value.iter().map(|v| v.f64() * v.f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.iter().all(|v| v.is_finite()))
    }

    /// Convert every tensor to another scalar type.
    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { name: t.name.clone(), value: t.value.mapv(|v| S::c(v.f64())), decay: t.decay })
                .collect(),
        }
    }

    /// sha256 over the little-endian bytes of the listed tensors.
    pub fn checksum(&self, indices: &[usize]) -> String {
        let mut h = Sha256::new();
        for &i in indices {
            h.update(self.tensors[i].name.as_bytes());
            for v in self.tensors[i].value.iter() {
                h.update(v.to_le_bytes_vec());
            }
        }
        hex::encode(h.finalize())
    }

    /// Append every tensor to a container, prefixing names.
    pub fn write_to(&self, c: &mut Container, prefix: &str) {
        for t in &self.tensors {
            c.push(
                format!("{prefix}{}", t.name),
                t.value.shape().to_vec(),
                t.value.iter().map(|v| v.f64() as f32).collect(),
            );
        }
    }

    /// Overwrite every tensor from a container, matching prefixed names and shapes.
    pub fn read_from(&mut self, c: &Container, prefix: &str) -> Result<(), ContainerError> {
        for t in &mut self.tensors {
            let name = format!("{prefix}{}", t.name);
            let (entry, data) = c.tensor(&name)?;
            if entry.shape != t.value.shape() {
                return Err(ContainerError::Header(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    entry.shape,
                    t.value.shape()
                )));
            }
            for (dst, &src) in t.value.iter_mut().zip(data) {
                *dst = R::c(src as f64);
            }
        }
        Ok(())
    }
}

/// Scale the listed gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<R: Real>(grads: &mut ParamStore<R>, indices: &[usize], max_norm: f64) -> f64 {
    let norm = grads.norm(indices);
    if norm > max_norm && norm > 0.0 {
        let k = R::c(max_norm / norm);
        for &i in indices {
            grads.get_mut(i).mapv_inplace(|v| v * k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to tensors flagged `decay`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay. Moment buffers exist only for the
/// tensors it was built over.
#[derive(Debug, Clone)]
pub struct AdamW<R> {
    pub cfg: AdamConfig,
    slots: Vec<(usize, Array2<R>, Array2<R>)>,
    step: u64,
}

impl<R: Real> AdamW<R> {
    pub fn new(params: &ParamStore<R>, trainable: &[usize], cfg: AdamConfig) -> Self {
        let slots = trainable
            .iter()
            .map(|&i| (i, Array2::zeros(params.get(i).raw_dim()), Array2::zeros(params.get(i).raw_dim())))
            .collect();
        Self { cfg, slots, step: 0 }
    }

    pub fn trainable(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.0).collect()
    }

    /// Number of scalars carrying optimizer state.
    pub fn state_len(&self) -> usize {
        self.slots.iter().map(|s| s.1.len()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<R>, grads: &ParamStore<R>, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (R::c(c.beta1), R::c(c.beta2), R::c(c.eps));
        let (one_b1, one_b2) = (R::c(1.0 - c.beta1), R::c(1.0 - c.beta2));
        let step_size = R::c(lr / bc1);
        let inv_sqrt_bc2 = R::c(1.0 / bc2.sqrt());
        for (i, m, v) in &mut self.slots {
            let decay = params.tensors[*i].decay && c.weight_decay > 0.0;
            let p = &mut params.tensors[*i].value;
            if decay {
                let k = R::c(1.0 - lr * c.weight_decay);
                p.mapv_inplace(|x| x * k);
            }
            Zip::from(p).and(m).and(v).and(grads.get(*i)).for_each(|p, m, v, &g| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        // Two parameters: a decayed weight and an undecayed bias.
        let mut p = ParamStore::<f64>::new();
        p.push("w", array![[1.0]], true);
        p.push("b", array![[-2.0]], false);
        let mut g = p.zeros_like();
        g.get_mut(0)[[0, 0]] = 0.5;
        g.get_mut(1)[[0, 0]] = -4.0;
        let mut opt = AdamW::new(&p, &[0, 1], AdamConfig::default());
        opt.step(&mut p, &g, 0.1);
        // m̂ = g, v̂ = g², so the update is lr * g / (|g| + eps) = ±lr (up to eps).
        // w: 1 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8)
        let w = 1.0 * (1.0 - 0.001) - 0.1 * 0.5 / (0.5 + 1e-8);
        let b = -2.0 + 0.1 * 4.0 / (4.0 + 1e-8);
        assert!((p.get(0)[[0, 0]] - w).abs() < 1e-15);
        assert!((p.get(1)[[0, 0]] - b).abs() < 1e-15);

        // Second step, hand-rolled moments.
        g.get_mut(0)[[0, 0]] = -1.0;
        g.get_mut(1)[[0, 0]] = 2.0;
        opt.step(&mut p, &g, 0.1);
        let (m, v) = (0.9 * 0.05 + 0.1 * -1.0, 0.999 * 0.000_25 + 0.001 * 1.0);
        let w2 = w * (1.0 - 0.001) - 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p.get(0)[[0, 0]] - w2).abs() < 1e-12);
    }

    #[test]
    fn optimizer_state_covers_only_trainable_tensors() {
        let mut p = ParamStore::<f32>::new();
        p.push("emb", Array2::ones((4, 3)), true);
        let body = p.push("body", Array2::ones((3, 3)), true);
        let opt = AdamW::new(&p, &[0], AdamConfig::default());
        assert_eq!(opt.state_len(), 12);
        let before = p.checksum(&[body]);
        let mut g = p.zeros_like();
        g.get_mut(body).fill(1.0);
        let mut opt = opt;
        opt.step(&mut p, &g, 1e-3);
        assert_eq!(p.checksum(&[body]), before);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = ParamStore::<f64>::new();
        g.push("a", array![[3.0, 4.0]], true);
        g.push("b", array![[12.0]], true);
        let pre = clip_grad_norm(&mut g, &[0, 1], 1.0);
        assert!((pre - 13.0).abs() < 1e-12);
        assert!((g.norm(&[0, 1]) - 1.0).abs() < 1e-12);
        let pre = clip_grad_norm(&mut g, &[0, 1], 5.0);
        assert!((pre - 1.0).abs() < 1e-12);
        assert!((g.norm(&[0, 1]) - 1.0).abs() < 1e-12);
    }
}
