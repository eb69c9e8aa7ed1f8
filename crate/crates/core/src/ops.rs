//! Dense forward kernels shared by the frozen backbone and the autodiff tape.
//!
//! Matrices are row-major `Array2`; a "row" is always one token or one vector.
//! Linear weights follow the `out × in` convention, so `y = x·Wᵀ + b`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::Scalar;

pub fn linear<T: Scalar>(
    x: ArrayView2<'_, T>,
    weight: ArrayView2<'_, T>,
    bias: Option<ArrayView2<'_, T>>,
) -> Array2<T> {
    let mut y = x.dot(&weight.t());
    if let Some(b) = bias {
        y += &b.row(0);
    }
    y
}

/// Output of a row-wise layer norm together with the values needed to differentiate it.
pub struct LayerNormOut<T> {
    pub y: Array2<T>,
    pub xhat: Array2<T>,
    pub inv_std: Array1<T>,
}

/// Normalizes every row to zero mean and unit (population) variance, then applies
/// the per-column affine `gain`, `bias`.
pub fn layer_norm_rows<T: Scalar>(
    x: ArrayView2<'_, T>,
    gain: ArrayView1<'_, T>,
    bias: ArrayView1<'_, T>,
    eps: T,
) -> LayerNormOut<T> {
    let (rows, cols) = x.dim();
    let n = T::lit(cols as f64);
    let mut xhat = Array2::zeros((rows, cols));
    let mut inv_std = Array1::zeros(rows);
    for (r, row) in x.outer_iter().enumerate() {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
            *o = (v - mean) * is;
        }
    }
    let y = &xhat * &gain + bias;
    LayerNormOut { y, xhat, inv_std }
}

pub fn softmax_rows_inplace<T: Scalar>(a: &mut Array2<T>) {
    for mut row in a.outer_iter_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub fn relu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Tanh approximation of GELU, used only inside the frozen backbone.
pub fn gelu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    x.mapv(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()))
}

/// Gathers the listed rows and column range into a dense block.
pub fn gather_rows<T: Scalar>(x: &Array2<T>, rows: &[usize], c0: usize, c1: usize) -> Array2<T> {
    let mut out = Array2::zeros((rows.len(), c1 - c0));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&x.slice(s![r, c0..c1]));
    }
    out
}

pub fn scatter_add_rows<T: Scalar>(dst: &mut Array2<T>, rows: &[usize], c0: usize, src: &Array2<T>) {
    let c1 = c0 + src.ncols();
    for (i, &r) in rows.iter().enumerate() {
        let mut d = dst.slice_mut(s![r, c0..c1]);
        d += &src.row(i);
    }
}

/// Multi-head scaled dot-product attention restricted to index groups.
///
/// Each entry of `segments` lists the rows forming one sequence; rows attend only
/// to rows of their own sequence. Returns the attended values and the softmax
/// probabilities, ordered segment-major then head.
pub fn segment_attention<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    heads: usize,
    segments: &[Vec<usize>],
) -> (Array2<T>, Vec<Array2<T>>) {
    let dim = q.ncols();
    let dh = dim / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(segments.len() * heads);
    for seg in segments {
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qs = gather_rows(q, seg, c0, c1);
            let ks = gather_rows(k, seg, c0, c1);
            let vs = gather_rows(v, seg, c0, c1);
            let mut p = qs.dot(&ks.t()) * scale;
            softmax_rows_inplace(&mut p);
            let o = p.dot(&vs);
            for (i, &r) in seg.iter().enumerate() {
                out.slice_mut(s![r, c0..c1]).assign(&o.row(i));
            }
            probs.push(p);
        }
    }
    (out, probs)
}

/// Column sums as a `1 × cols` matrix.
pub fn sum_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// Euclidean norm accumulated in `f64`.
pub fn norm<T: Scalar>(v: ArrayView1<'_, T>) -> T {
    T::lit(v.iter().fold(0.0f64, |a, &x| a + x.as_f64() * x.as_f64()).sqrt())
}

pub fn max_abs_diff<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_of_singleton_is_exactly_one() {
        let mut a = array![[3.7f32]];
        softmax_rows_inplace(&mut a);
        assert_eq!(a[[0, 0]], 1.0);
    }

    #[test]
    fn layer_norm_zero_row_stays_zero() {
        let x = Array2::<f64>::zeros((2, 4));
        let g = Array1::ones(4);
        let b = Array1::zeros(4);
        let out = layer_norm_rows(x.view(), g.view(), b.view(), 1e-5);
        assert!(out.y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_attention_groups_are_isolated() {
        let q = array![[1.0f64, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let k = q.clone();
        let v = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let (out, _) = segment_attention(&q, &k, &v, 1, &[vec![0, 1], vec![2]]);
        assert_eq!(out.row(2), v.row(2));
        let (out2, _) = segment_attention(&q, &k, &v, 1, &[vec![0, 1]]);
        assert_eq!(out.slice(s![0..2, ..]), out2.slice(s![0..2, ..]));
    }
}
