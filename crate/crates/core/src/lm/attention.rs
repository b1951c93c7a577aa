//! Multi-head scaled dot-product attention over a packed `[q | k | v]` matrix.

use ndarray::{s, Array2, ArrayView2};

use crate::nn::softmax_inplace;
use crate::real::Real;

/// Forward attention for one sequence. `qkv` is `T x 3d`; returns the
/// concatenated head outputs (`T x d`) and each head's probabilities.
pub fn attention<R: Real>(qkv: ArrayView2<R>, heads: usize, causal: bool) -> (Array2<R>, Vec<Array2<R>>) {
    let t = qkv.nrows();
    let d = qkv.ncols() / 3;
    let dh = d / heads;
    let scale = R::c(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut p = q.dot(&k.t());
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            let visible = if causal { i + 1 } else { t };
            for x in row[..visible].iter_mut() {
                *x *= scale;
            }
            softmax_inplace(&mut row[..visible]);
            for x in row[visible..].iter_mut() {
                *x = R::zero();
            }
        }
        out.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
        probs.push(p);
    }
    (out, probs)
}

/// Backward of [`attention`]: gradient with respect to `qkv`.
pub fn attention_backward<R: Real>(qkv: ArrayView2<R>, probs: &[Array2<R>], dout: ArrayView2<R>) -> Array2<R> {
    let t = qkv.nrows();
    let d = qkv.ncols() / 3;
    let heads = probs.len();
    let dh = d / heads;
    let scale = R::c(1.0 / (dh as f64).sqrt());
    let mut dqkv = Array2::zeros((t, 3 * d));
    for (h, p) in probs.iter().enumerate() {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let go = dout.slice(s![.., h * dh..(h + 1) * dh]);
        let dv = p.t().dot(&go);
        let mut ds = go.dot(&v.t());
        for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot: R = ds_row.iter().zip(p_row.iter()).map(|(&a, &b)| a * b).sum();
            for (x, &pj) in ds_row.iter_mut().zip(p_row.iter()) {
                *x = pj * (*x - dot) * scale;
            }
        }
        dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
        dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&ds.t().dot(&q));
        dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
    }
    dqkv
}

/// Causal attention of one new query row against cached keys and values
/// (`n x d` each, the new row included).
pub fn attend_cached<R: Real>(q: &[R], keys: ArrayView2<R>, values: ArrayView2<R>, heads: usize) -> Vec<R> {
    let d = q.len();
    let dh = d / heads;
    let scale = R::c(1.0 / (dh as f64).sqrt());
    let n = keys.nrows();
    let mut out = vec![R::zero(); d];
    let mut scores = vec![R::zero(); n];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kr = keys.slice(s![j, h * dh..(h + 1) * dh]);
            *s = qh.iter().zip(kr.iter()).map(|(&a, &b)| a * b).sum::<R>() * scale;
        }
        softmax_inplace(&mut scores);
        for (j, &p) in scores.iter().enumerate() {
            let vr = values.slice(s![j, h * dh..(h + 1) * dh]);
            for (o, &v) in out[h * dh..(h + 1) * dh].iter_mut().zip(vr.iter()) {
                *o += p * v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qkv(t: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, 3 * d), |(i, j)| ((i * 31 + j * 17) % 13) as f64 / 6.0 - 1.0)
    }

    #[test]
    fn backward_matches_finite_differences() {
        for causal in [true, false] {
            let x = qkv(4, 4);
            let probe = Array2::from_shape_fn((4, 4), |(i, j)| ((i + 2 * j) % 5) as f64 - 2.0);
            let f = |x: &Array2<f64>| (&attention(x.view(), 2, causal).0 * &probe).sum();
            let (_, probs) = attention(x.view(), 2, causal);
            let g = attention_backward(x.view(), &probs, probe.view());
            for i in 0..4 {
                for j in 0..12 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[[i, j]] += 1e-6;
                    xm[[i, j]] -= 1e-6;
                    let fd = (f(&xp) - f(&xm)) / 2e-6;
                    assert!((fd - g[[i, j]]).abs() < 1e-7, "causal={causal} ({i},{j}): {fd} vs {}", g[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn cached_step_matches_full_causal_row() {
        let x = qkv(5, 4);
        let (full, _) = attention(x.view(), 2, true);
        let keys = x.slice(s![.., 4..8]);
        let values = x.slice(s![.., 8..12]);
        for i in 0..5 {
            let q: Vec<f64> = x.slice(s![i, 0..4]).to_vec();
            let row = attend_cached(&q, keys.slice(s![..=i, ..]), values.slice(s![..=i, ..]), 2);
            for (a, b) in row.iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
