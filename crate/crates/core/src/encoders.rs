//! Transformer encoders over regional vectors.
//!
//! Both variants share the same pre-LN block stack; they differ only in how rows
//! are grouped into sequences. The cross-image (teacher) encoder forms one
//! sequence per region containing that region from every image in the batch.
//! The self-enhanced (student) encoder treats every regional vector as its own
//! length-one sequence, so an image's output never depends on its batchmates.

use std::sync::Arc;

use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::REGION_COUNT;
use crate::autodiff::{CustomOp, Tape, Var};
use crate::ops;
use crate::params::{fan_in_uniform, ParamStore, ParamVars};
use crate::{Error, Result, Scalar, ValidationError};

pub const ENCODER_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    CrossImage,
    SelfEnhanced,
}

impl EncoderVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::CrossImage => "cross_image",
            Self::SelfEnhanced => "self_enhanced",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: f64,
    pub variant: EncoderVariant,
}

impl EncoderConfig {
    pub fn teacher(dim: usize) -> Self {
        Self {
            dim,
            heads: 4,
            layers: 2,
            mlp_ratio: 4.0,
            variant: EncoderVariant::CrossImage,
        }
    }

    pub fn student(dim: usize) -> Self {
        Self {
            dim,
            heads: 4,
            layers: 1,
            mlp_ratio: 4.0,
            variant: EncoderVariant::SelfEnhanced,
        }
    }

    pub fn hidden(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn validate_into(&self, prefix: &str, err: &mut ValidationError) {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            err.push(format!("{prefix}.heads"), format!("dim {} must be divisible by heads", self.dim));
        }
        if self.layers == 0 {
            err.push(format!("{prefix}.layers"), "must be at least 1");
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() {
            err.push(format!("{prefix}.mlp_ratio"), "must be positive");
        }
    }
}

/// Regional vectors for a batch of images: `B × 14 × C2`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionalBatch<T> {
    pub data: Array3<T>,
    pub image_ids: Vec<String>,
}

impl<T: Scalar> RegionalBatch<T> {
    pub fn new(data: Array3<T>, image_ids: Vec<String>) -> Result<Self> {
        let (b, r, _) = data.dim();
        if b == 0 || r != REGION_COUNT || image_ids.len() != b {
            return Err(Error::Shape(format!(
                "regional batch {:?} with {} ids is not B×{REGION_COUNT}×C with B ≥ 1",
                data.dim(),
                image_ids.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("regional batch contains non-finite values".into()));
        }
        Ok(Self { data, image_ids })
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    /// Image-major rows (`B·14 × C2`).
    pub fn rows(&self) -> Array2<T> {
        let (b, r, c) = self.data.dim();
        self.data.to_shape((b * r, c)).expect("contiguous").to_owned()
    }
}

/// Sequence grouping for `batch` images laid out image-major (`b·14 + r`).
pub fn segments(variant: EncoderVariant, batch: usize) -> Vec<Vec<usize>> {
    match variant {
        EncoderVariant::CrossImage => (0..REGION_COUNT)
            .map(|r| (0..batch).map(|b| b * REGION_COUNT + r).collect())
            .collect(),
        EncoderVariant::SelfEnhanced => (0..batch * REGION_COUNT).map(|i| vec![i]).collect(),
    }
}

struct AttentionOp<T> {
    heads: usize,
    segments: Arc<Vec<Vec<usize>>>,
    probs: Vec<Array2<T>>,
}

impl<T: Scalar> CustomOp<T> for AttentionOp<T> {
    fn backward(&self, inputs: &[&Array2<T>], _output: &Array2<T>, grad: &Array2<T>) -> Vec<Array2<T>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let dh = q.ncols() / self.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dq = Array2::zeros(q.raw_dim());
        let mut dk = Array2::zeros(k.raw_dim());
        let mut dv = Array2::zeros(v.raw_dim());
        let mut probs = self.probs.iter();
        for seg in self.segments.iter() {
            for h in 0..self.heads {
                let p = probs.next().expect("one probability block per segment and head");
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let qs = ops::gather_rows(q, seg, c0, c1);
                let ks = ops::gather_rows(k, seg, c0, c1);
                let vs = ops::gather_rows(v, seg, c0, c1);
                let g = ops::gather_rows(grad, seg, c0, c1);
                ops::scatter_add_rows(&mut dv, seg, c0, &p.t().dot(&g));
                let dp = g.dot(&vs.t());
                let mut ds = dp.clone();
                for i in 0..ds.nrows() {
                    let row_dot = p.row(i).dot(&dp.row(i));
                    for j in 0..ds.ncols() {
                        ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - row_dot);
                    }
                }
                ops::scatter_add_rows(&mut dq, seg, c0, &(ds.dot(&ks) * scale));
                ops::scatter_add_rows(&mut dk, seg, c0, &(ds.t().dot(&qs) * scale));
            }
        }
        vec![dq, dk, dv]
    }
}

pub fn attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize, segments: &Arc<Vec<Vec<usize>>>) -> Var {
    let (out, probs) = ops::segment_attention(tape.value(q), tape.value(k), tape.value(v), heads, segments);
    let op = AttentionOp {
        heads,
        segments: Arc::clone(segments),
        probs,
    };
    tape.custom(&[q, k, v], out, Box::new(op))
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    prefix: String,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        let mut err = ValidationError::default();
        cfg.validate_into("encoder", &mut err);
        err.into_result()?;
        Ok(Self {
            cfg,
            prefix: "encoder".into(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn variant(&self) -> EncoderVariant {
        self.cfg.variant
    }

    fn name(&self, layer: usize, rest: &str) -> String {
        format!("{}.{layer}.{rest}", self.prefix)
    }

    pub fn init_params<T: Scalar, R: Rng>(&self, params: &mut ParamStore<T>, rng: &mut R) {
        let d = self.cfg.dim;
        let hidden = self.cfg.hidden();
        for l in 0..self.cfg.layers {
            for ln in ["ln1", "ln2"] {
                params.insert(self.name(l, &format!("{ln}.gain")), Array2::ones((1, d)));
                params.insert(self.name(l, &format!("{ln}.bias")), Array2::zeros((1, d)));
            }
            for proj in ["q", "k", "v", "o"] {
                params.insert(self.name(l, &format!("attn.w{proj}")), fan_in_uniform(rng, d, d, d));
                params.insert(self.name(l, &format!("attn.b{proj}")), fan_in_uniform(rng, 1, d, d));
            }
            params.insert(self.name(l, "mlp.w1"), fan_in_uniform(rng, hidden, d, d));
            params.insert(self.name(l, "mlp.b1"), fan_in_uniform(rng, 1, hidden, d));
            params.insert(self.name(l, "mlp.w2"), fan_in_uniform(rng, d, hidden, hidden));
            params.insert(self.name(l, "mlp.b2"), fan_in_uniform(rng, 1, d, hidden));
        }
    }

    /// Runs the block stack over `B·14 × C2` image-major rows.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var, batch: usize) -> Var {
        let segs = Arc::new(segments(self.cfg.variant, batch));
        let eps = T::lit(ENCODER_LN_EPS);
        let mut x = x;
        for l in 0..self.cfg.layers {
            let v = |n: &str| vars.get(&self.name(l, n));
            let h = tape.layer_norm(x, v("ln1.gain"), v("ln1.bias"), eps);
            let q = tape.linear(h, v("attn.wq"), Some(v("attn.bq")));
            let k = tape.linear(h, v("attn.wk"), Some(v("attn.bk")));
            let val = tape.linear(h, v("attn.wv"), Some(v("attn.bv")));
            let a = attention(tape, q, k, val, self.cfg.heads, &segs);
            let o = tape.linear(a, v("attn.wo"), Some(v("attn.bo")));
            x = tape.add(x, o);
            let h = tape.layer_norm(x, v("ln2.gain"), v("ln2.bias"), eps);
            let m = tape.linear(h, v("mlp.w1"), Some(v("mlp.b1")));
            let m = tape.relu(m);
            let m = tape.linear(m, v("mlp.w2"), Some(v("mlp.b2")));
            x = tape.add(x, m);
        }
        x
    }

    fn encode<T: Scalar>(&self, params: &ParamStore<T>, batch: &RegionalBatch<T>) -> Result<RegionalBatch<T>> {
        let (b, r, c) = batch.data.dim();
        if c != self.cfg.dim {
            return Err(Error::Shape(format!(
                "regional vectors have {c} channels, encoder expects {}",
                self.cfg.dim
            )));
        }
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.leaf(batch.rows());
        let y = self.forward(&mut tape, &vars, x, b);
        let data = tape
            .value(y)
            .to_shape((b, r, c))
            .expect("shape preserved")
            .to_owned();
        Ok(RegionalBatch {
            data,
            image_ids: batch.image_ids.clone(),
        })
    }

    pub fn cross_image_encode<T: Scalar>(&self, params: &ParamStore<T>, batch: &RegionalBatch<T>) -> Result<RegionalBatch<T>> {
        if self.cfg.variant != EncoderVariant::CrossImage {
            return Err(Error::Config("cross_image_encode on a self-enhanced encoder".into()));
        }
        self.encode(params, batch)
    }

    pub fn self_enhance<T: Scalar>(&self, params: &ParamStore<T>, batch: &RegionalBatch<T>) -> Result<RegionalBatch<T>> {
        if self.cfg.variant != EncoderVariant::SelfEnhanced {
            return Err(Error::Config("self_enhance on a cross-image encoder".into()));
        }
        self.encode(params, batch)
    }
}

/// Rows of `data` for image `b`.
pub fn image_block<T: Scalar>(data: &Array3<T>, b: usize) -> Array2<T> {
    data.slice(s![b, .., ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_batch(b: usize, c: usize, seed: u64) -> RegionalBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let data = Array3::from_shape_simple_fn((b, REGION_COUNT, c), || n.sample(&mut rng));
        RegionalBatch::new(data, (0..b).map(|i| format!("img{i}")).collect()).unwrap()
    }

    fn setup(variant: EncoderVariant, dim: usize, seed: u64) -> (Encoder, ParamStore<f64>) {
        let cfg = EncoderConfig {
            dim,
            heads: 2,
            layers: 2,
            mlp_ratio: 2.0,
            variant,
        };
        let enc = Encoder::new(cfg).unwrap();
        let mut p = ParamStore::new();
        enc.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        (enc, p)
    }

    #[test]
    fn teacher_is_permutation_equivariant() {
        let (enc, p) = setup(EncoderVariant::CrossImage, 4, 1);
        let batch = random_batch(5, 4, 2);
        let out = enc.cross_image_encode(&p, &batch).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permuted = RegionalBatch::new(
            ndarray::stack(ndarray::Axis(0), &perm.map(|i| batch.data.slice(s![i, .., ..]))).unwrap(),
            perm.iter().map(|&i| batch.image_ids[i].clone()).collect(),
        )
        .unwrap();
        let out_p = enc.cross_image_encode(&p, &permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            let d = ops::max_abs_diff(image_block(&out.data, i).view(), image_block(&out_p.data, j).view());
            assert!(d <= 1e-12, "diff {d}");
        }
    }

    #[test]
    fn duplicated_image_gets_identical_teacher_rows() {
        let (enc, p) = setup(EncoderVariant::CrossImage, 4, 3);
        let mut batch = random_batch(3, 4, 4);
        let first = batch.data.slice(s![0, .., ..]).to_owned();
        batch.data.slice_mut(s![2, .., ..]).assign(&first);
        let out = enc.cross_image_encode(&p, &batch).unwrap();
        assert_eq!(image_block(&out.data, 0), image_block(&out.data, 2));
    }

    #[test]
    fn singleton_teacher_batch_matches_student_arrangement() {
        // B = 1: each teacher sequence has one token, softmax weight exactly 1,
        // which is the same rowwise computation the student performs.
        let (enc_t, p) = setup(EncoderVariant::CrossImage, 4, 5);
        let enc_s = Encoder::new(EncoderConfig {
            variant: EncoderVariant::SelfEnhanced,
            ..enc_t.config().clone()
        })
        .unwrap();
        let batch = random_batch(1, 4, 6);
        let t = enc_t.cross_image_encode(&p, &batch).unwrap();
        let s = enc_s.self_enhance(&p, &batch).unwrap();
        assert_eq!(t.data, s.data);
    }

    #[test]
    fn student_output_ignores_batchmates() {
        let (enc, p) = setup(EncoderVariant::SelfEnhanced, 4, 7);
        let both = random_batch(2, 4, 8);
        let alone = RegionalBatch::new(
            both.data.slice(s![0..1, .., ..]).to_owned(),
            vec![both.image_ids[0].clone()],
        )
        .unwrap();
        let a = enc.self_enhance(&p, &both).unwrap();
        let b = enc.self_enhance(&p, &alone).unwrap();
        let d = ops::max_abs_diff(image_block(&a.data, 0).view(), image_block(&b.data, 0).view());
        assert!(d <= 1e-12);
    }

    #[test]
    fn zero_value_output_and_mlp_is_identity() {
        let (enc, mut p) = setup(EncoderVariant::SelfEnhanced, 4, 9);
        for l in 0..2 {
            for n in ["attn.wv", "attn.wo", "mlp.w2"] {
                p.insert(format!("encoder.{l}.{n}"), Array2::zeros(p.get(&format!("encoder.{l}.{n}")).unwrap().raw_dim()));
            }
            for n in ["attn.bv", "attn.bo", "mlp.b2"] {
                p.insert(format!("encoder.{l}.{n}"), Array2::zeros(p.get(&format!("encoder.{l}.{n}")).unwrap().raw_dim()));
            }
        }
        let batch = random_batch(3, 4, 10);
        let out = enc.self_enhance(&p, &batch).unwrap();
        assert_eq!(out.data, batch.data);
    }

    #[test]
    fn hand_evaluated_single_token_attention() {
        // dim 2, one head, one layer. With one key the softmax weight is 1, so the
        // attention output equals the value projection of the normalized input.
        let enc = Encoder::new(EncoderConfig {
            dim: 2,
            heads: 1,
            layers: 1,
            mlp_ratio: 1.0,
            variant: EncoderVariant::SelfEnhanced,
        })
        .unwrap();
        let mut p = ParamStore::<f64>::new();
        enc.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        p.insert("encoder.0.attn.wv", array![[1.0, 2.0], [0.0, -1.0]]);
        p.insert("encoder.0.attn.bv", array![[0.5, 0.0]]);
        p.insert("encoder.0.attn.wo", array![[2.0, 0.0], [1.0, 1.0]]);
        p.insert("encoder.0.attn.bo", array![[0.0, 0.25]]);
        p.insert("encoder.0.mlp.w2", Array2::zeros((2, 2)));
        p.insert("encoder.0.mlp.b2", Array2::zeros((1, 2)));
        // x = (3, 1): LN → (1, −1) (var 1, ε = 1e-5 ⇒ factor 1/√(1+1e-5))
        let k = 1.0 / (1.0f64 + 1e-5).sqrt();
        let h = [k, -k];
        let v = [h[0] + 2.0 * h[1] + 0.5, -h[1]];
        let o = [2.0 * v[0], v[0] + v[1] + 0.25];
        let expect = [3.0 + o[0], 1.0 + o[1]];
        let mut data = Array3::zeros((1, REGION_COUNT, 2));
        for r in 0..REGION_COUNT {
            data[[0, r, 0]] = 3.0;
            data[[0, r, 1]] = 1.0;
        }
        let batch = RegionalBatch::new(data, vec!["a".into()]).unwrap();
        let out = enc.self_enhance(&p, &batch).unwrap();
        for r in 0..REGION_COUNT {
            assert!((out.data[[0, r, 0]] - expect[0]).abs() < 1e-12);
            assert!((out.data[[0, r, 1]] - expect[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_variant_and_dim_are_rejected() {
        let (enc, p) = setup(EncoderVariant::SelfEnhanced, 4, 11);
        let batch = random_batch(2, 4, 12);
        assert!(matches!(enc.cross_image_encode(&p, &batch), Err(Error::Config(_))));
        let wide = random_batch(2, 6, 13);
        assert!(matches!(enc.self_enhance(&p, &wide), Err(Error::Shape(_))));
    }
}
