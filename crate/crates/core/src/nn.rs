//! Dense building blocks with hand-written backward passes.
//!
//! Activations are `rows x features` matrices. Batches of sequences are
//! stacked along rows, so a batch of `b` sequences of length `len` is a
//! `(b * len) x features` matrix.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::real::{gelu, gelu_grad, Real};

/// Weight and bias gradient accumulators for one affine map.
pub type AffineGrads<'a, R> = Option<(&'a mut Array2<R>, &'a mut Array2<R>)>;

/// `x · w + b`, with `b` a `1 x out` row.
pub fn linear<R: Real>(x: ArrayView2<R>, w: ArrayView2<R>, b: ArrayView2<R>) -> Array2<R> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Backward of [`linear`]. Adds into the accumulators when given and returns `dx`.
pub fn linear_backward<R: Real>(
    x: ArrayView2<R>,
    w: ArrayView2<R>,
    dy: ArrayView2<R>,
    grads: AffineGrads<'_, R>,
) -> Array2<R> {
    if let Some((dw, db)) = grads {
        general_mat_mul(R::one(), &x.t(), &dy, R::one(), dw);
        *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    dy.dot(&w.t())
}

pub fn gelu_forward<R: Real>(x: &Array2<R>) -> Array2<R> {
    x.mapv(gelu)
}

pub fn gelu_backward<R: Real>(pre: &Array2<R>, dy: &Array2<R>) -> Array2<R> {
    Zip::from(pre).and(dy).map_collect(|&p, &g| gelu_grad(p) * g)
}

/// Unfold a stacked batch for a zero-padded "same" convolution with an odd
/// kernel. Row `(b, t)` of the result holds the `kernel` neighbours of step
/// `t`, each `cin` wide, in kernel order.
pub fn im2col<R: Real>(x: ArrayView2<R>, batch: usize, len: usize, kernel: usize) -> Array2<R> {
    let cin = x.ncols();
    let pad = kernel / 2;
    let mut col = Array2::zeros((batch * len, kernel * cin));
    for b in 0..batch {
        for t in 0..len {
            let mut row = col.row_mut(b * len + t);
            for j in 0..kernel {
                let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) else { continue };
                row.slice_mut(s![j * cin..(j + 1) * cin]).assign(&x.row(b * len + src));
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input rows.
pub fn col2im<R: Real>(dcol: ArrayView2<R>, batch: usize, len: usize, cin: usize, kernel: usize) -> Array2<R> {
    let pad = kernel / 2;
    let mut dx = Array2::zeros((batch * len, cin));
    for b in 0..batch {
        for t in 0..len {
            let row = dcol.row(b * len + t);
            for j in 0..kernel {
                let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) else { continue };
                let mut dst = dx.row_mut(b * len + src);
                dst += &row.slice(s![j * cin..(j + 1) * cin]);
            }
        }
    }
    dx
}

/// Cached state of a layer norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<R> {
    pub xhat: Array2<R>,
    pub rstd: Array1<R>,
}

pub fn layer_norm<R: Real>(x: ArrayView2<R>, gamma: ArrayView2<R>, beta: ArrayView2<R>) -> (Array2<R>, LayerNormCache<R>) {
    let d = R::c(x.ncols() as f64);
    let eps = R::c(1e-5);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<R>() / d;
        *r = R::one() / (var + eps).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let mut y = &xhat * &gamma;
    y += &beta;
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<R: Real>(
    cache: &LayerNormCache<R>,
    gamma: ArrayView2<R>,
    dy: ArrayView2<R>,
    grads: AffineGrads<'_, R>,
) -> Array2<R> {
    if let Some((dgamma, dbeta)) = grads {
        *dgamma += &(&dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        *dbeta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    let d = R::c(dy.ncols() as f64);
    let dxhat = &dy * &gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let sum_g = g.sum();
        let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<R>();
        let r = cache.rstd[i] / d;
        for ((o, &gj), &xj) in dx.row_mut(i).iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = r * (d * gj - sum_g - xj * sum_gx);
        }
    }
    dx
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_inplace<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut sum = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))`, stable.
pub fn log_sum_exp<R: Real>(row: &[R]) -> R {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let sum: R = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn im2col_conv_matches_direct_convolution() {
        // batch 1, len 4, cin 1, kernel 3
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let w = array![[0.5], [1.0], [-1.0]];
        let y = im2col(x.view(), 1, 4, 3).dot(&w);
        // y[t] = 0.5 x[t-1] + x[t] - x[t+1]
        assert_eq!(y.column(0).to_vec(), vec![-1.0, -0.5, 0.0, 5.5]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = Array2::from_shape_fn((2 * 5, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 1.0);
        let g = Array2::from_shape_fn((2 * 5, 5 * 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let lhs = (&im2col(x.view(), 2, 5, 5) * &g).sum();
        let rhs = (&x * &col2im(g.view(), 2, 5, 3, 5)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let x: Array2<f64> = array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.5, 10.0]];
        let (y, _) = layer_norm(x.view(), Array2::ones((1, 4)).view(), Array2::zeros((1, 4)).view());
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            assert!((row.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = array![[0.3, -1.2, 2.0], [1.0, 0.1, -0.4]];
        let gamma = array![[1.5, -0.5, 0.8]];
        let beta = array![[0.1, 0.2, -0.3]];
        let probe = array![[0.7, -0.2, 1.1], [0.4, 0.9, -1.3]];
        let f = |x: &Array2<f64>| (&layer_norm(x.view(), gamma.view(), beta.view()).0 * &probe).sum();
        let (_, cache) = layer_norm(x.view(), gamma.view(), beta.view());
        let dx = layer_norm_backward(&cache, gamma.view(), probe.view(), None);
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[i, j]] += 1e-6;
                xm[[i, j]] -= 1e-6;
                let fd = (f(&xp) - f(&xm)) / 2e-6;
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut row = [1000.0f32, 999.0, -5.0, 0.0];
        softmax_inplace(&mut row);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((log_sum_exp(&[0.0f64, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
