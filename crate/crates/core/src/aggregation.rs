//! Multi-level GeM pooling (1×1, 2×2, 3×3 → 14 regions) and global descriptor assembly.

use ndarray::{Array1, Array2, ArrayView3};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::{Error, Result, Scalar};

pub const REGION_COUNT: usize = 14;
pub const GEM_CLAMP: f64 = 1e-6;
pub const GEM_P_NAME: &str = "aggregation.gem.p";
pub const GEM_P_INIT: f64 = 3.0;

/// Half-open token-index box: rows `r0..r1`, columns `c0..c1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionBox {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl RegionBox {
    pub fn area(&self) -> usize {
        (self.row_end - self.row_start) * (self.col_end - self.col_start)
    }

    /// Flat token indices covered by the box on a grid `width` tokens wide.
    pub fn tokens(&self, width: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.area());
        for r in self.row_start..self.row_end {
            for c in self.col_start..self.col_end {
                out.push(r * width + c);
            }
        }
        out
    }
}

/// The 14 regions, in level order (1×1, then 2×2 row-major, then 3×3 row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<RegionBox>,
}

fn level_bounds(extent: usize, k: usize) -> Vec<usize> {
    (0..=k).map(|i| i * extent / k).collect()
}

pub fn partition_regions(height: usize, width: usize) -> Result<RegionPartition> {
    if height < 3 || width < 3 {
        return Err(Error::Partition(format!(
            "grid {height}×{width} too small; 3×3 regions need at least 3 tokens per axis"
        )));
    }
    let mut boxes = Vec::with_capacity(REGION_COUNT);
    for k in 1..=3 {
        let rb = level_bounds(height, k);
        let cb = level_bounds(width, k);
        for i in 0..k {
            for j in 0..k {
                boxes.push(RegionBox {
                    row_start: rb[i],
                    row_end: rb[i + 1],
                    col_start: cb[j],
                    col_end: cb[j + 1],
                });
            }
        }
    }
    Ok(RegionPartition { height, width, boxes })
}

/// Per-region GeM of one channel's clamped values, in the max-scaled form that
/// stays finite for large `p`. Returns `(y, s, mu)` with `y = s·mu^{1/p}`.
fn gem_scalar<T: Scalar>(values: impl Iterator<Item = T> + Clone, n: usize, p: T) -> (T, T, T) {
    let eps = T::lit(GEM_CLAMP);
    let s = values.clone().fold(eps, |m, v| m.max(v));
    if p == T::one() {
        let mean = values.fold(T::zero(), |a, v| a + v.max(eps)) / T::lit(n as f64);
        return (mean, s, mean / s);
    }
    let mu = values.fold(T::zero(), |a, v| a + (v.max(eps) / s).powf(p)) / T::lit(n as f64);
    (s * mu.powf(T::one() / p), s, mu)
}

/// `(mean over the region of max(x, ε)^p)^{1/p}` per channel of a `C × h × w` block.
pub fn gem_pool<T: Scalar>(region: ArrayView3<'_, T>, p: T) -> Result<Array1<T>> {
    let (c, h, w) = region.dim();
    if h * w == 0 {
        return Err(Error::Shape("GeM over an empty region".into()));
    }
    if !(p > T::zero()) || !p.is_finite() {
        return Err(Error::Input(format!("GeM exponent must be positive, got {p}")));
    }
    if region.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("GeM input contains non-finite values".into()));
    }
    Ok(Array1::from_shape_fn(c, |ch| {
        let plane = region.index_axis(ndarray::Axis(0), ch);
        gem_scalar(plane.iter().copied(), h * w, p).0
    }))
}

struct GemOp {
    regions: Vec<Vec<usize>>,
    tokens_per_image: usize,
}

impl GemOp {
    fn forward<T: Scalar>(&self, x: &Array2<T>, p: T) -> Array2<T> {
        let batch = x.nrows() / self.tokens_per_image;
        let ch = x.ncols();
        let mut y = Array2::zeros((batch * REGION_COUNT, ch));
        for b in 0..batch {
            let base = b * self.tokens_per_image;
            for (r, toks) in self.regions.iter().enumerate() {
                for c in 0..ch {
                    let it = toks.iter().map(|&t| x[[base + t, c]]);
                    y[[b * REGION_COUNT + r, c]] = gem_scalar(it, toks.len(), p).0;
                }
            }
        }
        y
    }
}

impl<T: Scalar> CustomOp<T> for GemOp {
    fn backward(&self, inputs: &[&Array2<T>], output: &Array2<T>, grad: &Array2<T>) -> Vec<Array2<T>> {
        let (x, p) = (inputs[0], inputs[1][[0, 0]]);
        let eps = T::lit(GEM_CLAMP);
        let batch = x.nrows() / self.tokens_per_image;
        let mut dx = Array2::zeros(x.raw_dim());
        let mut dp = T::zero();
        for b in 0..batch {
            let base = b * self.tokens_per_image;
            for (r, toks) in self.regions.iter().enumerate() {
                let n = T::lit(toks.len() as f64);
                for c in 0..x.ncols() {
                    let row = b * REGION_COUNT + r;
                    let g = grad[[row, c]];
                    if g == T::zero() {
                        continue;
                    }
                    let y = output[[row, c]];
                    let it = toks.iter().map(|&t| x[[base + t, c]]);
                    let (_, s, mu) = gem_scalar(it, toks.len(), p);
                    let mut weighted_log = T::zero();
                    for &t in toks {
                        let xv = x[[base + t, c]];
                        let u = xv.max(eps) / s;
                        let up = u.powf(p);
                        weighted_log += up * u.ln();
                        if xv >= eps {
                            dx[[base + t, c]] += g * y * u.powf(p - T::one()) / (n * s * mu);
                        }
                    }
                    dp += g * y * (-mu.ln() / (p * p) + weighted_log / (n * mu * p));
                }
            }
        }
        vec![dx, Array2::from_elem((1, 1), dp)]
    }
}

/// Pools a token-major `B·N × C` map into `B·14 × C` regional rows (image-major).
pub fn gem_regions<T: Scalar>(tape: &mut Tape<T>, x: Var, p: Var, partition: &RegionPartition) -> Var {
    let op = GemOp {
        regions: partition.boxes.iter().map(|b| b.tokens(partition.width)).collect(),
        tokens_per_image: partition.height * partition.width,
    };
    let y = op.forward(tape.value(x), tape.scalar(p));
    tape.custom(&[x, p], y, Box::new(op))
}

/// Fourteen regional vectors for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionalDescriptorSet<T> {
    pub vectors: Array2<T>,
    pub enhanced: bool,
}

/// L2-normalized concatenation of the regional vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor<T> {
    pub values: Array1<T>,
}

impl<T: Scalar> GlobalDescriptor<T> {
    pub fn norm(&self) -> T {
        crate::ops::norm(self.values.view())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn assemble_descriptor<T: Scalar>(set: &RegionalDescriptorSet<T>) -> Result<GlobalDescriptor<T>> {
    if set.vectors.nrows() != REGION_COUNT {
        return Err(Error::Shape(format!(
            "expected {REGION_COUNT} regional vectors, got {}",
            set.vectors.nrows()
        )));
    }
    let values: Array1<T> = set.vectors.iter().copied().collect();
    normalize(values).map(|values| GlobalDescriptor { values })
}

pub fn normalize<T: Scalar>(mut v: Array1<T>) -> Result<Array1<T>> {
    let n = crate::ops::norm(v.view());
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::Normalization("cannot normalize a zero or non-finite vector".into()));
    }
    v.mapv_inplace(|x| x / n);
    Ok(v)
}
