//! A minimal reverse-mode tape over dense matrices.
//!
//! Every value is an `Array2`; scalars are `1 × 1`. Operations are recorded in
//! evaluation order and differentiated by a single reverse sweep. Module-specific
//! operations (attention, GeM, losses) plug in through [`CustomOp`].

use ndarray::{s, Array2, Axis};

use crate::ops;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A differentiable operation defined outside the tape.
pub trait CustomOp<T: Scalar>: Send + Sync {
    /// Returns one gradient per input, in input order.
    fn backward(&self, inputs: &[&Array2<T>], output: &Array2<T>, grad: &Array2<T>) -> Vec<Array2<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<T>,
        inv_std: ndarray::Array1<T>,
    },
    BlockTranspose(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    L2NormalizeRows(Var),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

struct Node<T: Scalar> {
    value: Array2<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(self.value(b));
        self.push(y, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b).t());
        self.push(y, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) - self.value(b);
        self.push(y, Op::Sub(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let y = self.value(a) + &self.value(row).row(0);
        self.push(y, Op::AddRow(a, row))
    }

    /// `x·Wᵀ + b` with `W` stored `out × in` and `b` as `1 × out`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let y = self.matmul_t(x, weight);
        match bias {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = ops::relu(self.value(a));
        self.push(y, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let y = self.value(a) * k;
        self.push(y, Op::Scale(a, k))
    }

    /// Row-wise layer norm; `gain` and `bias` are `1 × cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let out = ops::layer_norm_rows(
            self.value(x).view(),
            self.value(gain).row(0),
            self.value(bias).row(0),
            eps,
        );
        self.push(
            out.y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
        )
    }

    /// Splits the rows into `blocks` equal blocks and transposes each one:
    /// `(blocks·r) × c` becomes `(blocks·c) × r`.
    pub fn block_transpose(&mut self, x: Var, blocks: usize) -> Var {
        let y = block_transpose(self.value(x), blocks);
        self.push(y, Op::BlockTranspose(x, blocks))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(y, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let y = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(y, Op::SliceCols(a, start, end))
    }

    /// Row-major reinterpretation of the same elements.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        let data: Vec<T> = src.iter().copied().collect();
        let y = Array2::from_shape_vec((rows, cols), data).expect("reshape: element count differs");
        self.push(y, Op::Reshape(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut y = self.value(a).clone();
        for mut row in y.outer_iter_mut() {
            let n = ops::norm(row.view());
            row.mapv_inplace(|v| v / n);
        }
        self.push(y, Op::L2NormalizeRows(a))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Array2<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), op))
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward requires a scalar output");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&val(*b).t()));
                    accumulate(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    accumulate(&mut grads, *a, g.dot(val(*b)));
                    accumulate(&mut grads, *b, g.t().dot(val(*a)));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.mapv(|v| -v));
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, ops::sum_rows(&g));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Relu(a) => {
                    let mut d = g.clone();
                    d.zip_mut_with(val(*a), |d, &x| {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gain_row = val(*gain).row(0).to_owned();
                    accumulate(&mut grads, *gain, ops::sum_rows(&(&g * xhat)));
                    accumulate(&mut grads, *bias, ops::sum_rows(&g));
                    let dxhat = &g * &gain_row;
                    let n = T::lit(dxhat.ncols() as f64);
                    let mut dx = Array2::zeros(dxhat.raw_dim());
                    for r in 0..dxhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_d = dr.sum();
                        let sum_dx = dr.dot(&xr);
                        let k = inv_std[r] / n;
                        for c in 0..dr.len() {
                            dx[[r, c]] = k * (n * dr[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::BlockTranspose(x, blocks) => {
                    accumulate(&mut grads, *x, block_transpose(&g, *blocks));
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., c0..c0 + w]).to_owned());
                        c0 += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Array2::zeros(val(*a).raw_dim());
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::Reshape(a) => {
                    let data: Vec<T> = g.iter().copied().collect();
                    let d = Array2::from_shape_vec(val(*a).raw_dim(), data).expect("reshape grad");
                    accumulate(&mut grads, *a, d);
                }
                Op::L2NormalizeRows(a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut d = Array2::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        let norm = ops::norm(x.row(r));
                        let proj = y.row(r).dot(&g.row(r));
                        for c in 0..x.ncols() {
                            d[[r, c]] = (g[[r, c]] - y[[r, c]] * proj) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Custom(inputs, op) => {
                    let ins: Vec<&Array2<T>> = inputs.iter().map(|&v| val(v)).collect();
                    let ds = op.backward(&ins, &node.value, &g);
                    debug_assert_eq!(ds.len(), inputs.len());
                    for (&v, d) in inputs.iter().zip(ds) {
                        accumulate(&mut grads, v, d);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, d: Array2<T>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot => *slot = Some(d),
    }
}

pub fn block_transpose<T: Scalar>(x: &Array2<T>, blocks: usize) -> Array2<T> {
    let (rows, cols) = x.dim();
    assert!(blocks > 0 && rows % blocks == 0, "block_transpose: rows not divisible");
    let r = rows / blocks;
    let mut y = Array2::zeros((blocks * cols, r));
    for b in 0..blocks {
        y.slice_mut(s![b * cols..(b + 1) * cols, ..])
            .assign(&x.slice(s![b * r..(b + 1) * r, ..]).t());
    }
    y
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Array2<T>) -> Array2<T> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(like.raw_dim()))
    }
}
