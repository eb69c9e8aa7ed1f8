//! Multi-similarity loss with online hard-pair mining, descriptor distillation
//! loss, and their weighted combination.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::{Error, Result, Scalar, ValidationError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub margin: f64,
}

impl Default for MsLossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 50.0,
            lambda: 0.0,
            margin: 0.1,
        }
    }
}

impl MsLossConfig {
    pub fn validate_into(&self, prefix: &str, err: &mut ValidationError) {
        if !(self.alpha > 0.0) {
            err.push(format!("{prefix}.alpha"), "must be positive");
        }
        if !(self.beta > 0.0) {
            err.push(format!("{prefix}.beta"), "must be positive");
        }
        if !self.lambda.is_finite() {
            err.push(format!("{prefix}.lambda"), "must be finite");
        }
        if self.margin.is_nan() {
            err.push(format!("{prefix}.margin"), "must be a number");
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 1.0, eta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate_into(&self, prefix: &str, err: &mut ValidationError) {
        if !(self.gamma >= 0.0) {
            err.push(format!("{prefix}.gamma"), "must be nonnegative");
        }
        if !(self.eta >= 0.0) {
            err.push(format!("{prefix}.eta"), "must be nonnegative");
        }
        if self.gamma == 0.0 && self.eta == 0.0 {
            err.push(prefix, "gamma and eta cannot both be zero");
        }
    }
}

/// Mined pair indices for one anchor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MinedPairs {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Hard-pair selection for `anchor` from its similarity row.
///
/// Keeps negatives more similar than the hardest positive minus `margin`, and
/// positives less similar than the hardest negative plus `margin`. Returns `None`
/// when the anchor has no positive or no negative in the batch.
pub fn mine_pairs<T: Scalar>(sim_row: ArrayView1<'_, T>, labels: &[i64], anchor: usize, margin: T) -> Option<MinedPairs> {
    let label = labels[anchor];
    let pos: Vec<usize> = (0..labels.len()).filter(|&j| j != anchor && labels[j] == label).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != label).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let hardest_pos = pos.iter().fold(T::infinity(), |m, &j| m.min(sim_row[j]));
    let hardest_neg = neg.iter().fold(T::neg_infinity(), |m, &j| m.max(sim_row[j]));
    Some(MinedPairs {
        positives: pos.into_iter().filter(|&j| sim_row[j] - margin < hardest_neg).collect(),
        negatives: neg.into_iter().filter(|&j| sim_row[j] + margin > hardest_pos).collect(),
    })
}

/// Mining result for every anchor of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub anchors: Vec<Option<MinedPairs>>,
}

impl Selection {
    pub fn mine<T: Scalar>(sim: &Array2<T>, labels: &[i64], margin: T) -> Self {
        Self {
            anchors: (0..labels.len()).map(|q| mine_pairs(sim.row(q), labels, q, margin)).collect(),
        }
    }

    /// Anchors lacking a positive or a negative in the batch.
    pub fn skipped(&self) -> usize {
        self.anchors.iter().filter(|a| a.is_none()).count()
    }

    /// Anchors that survived but whose mined sets are both empty.
    pub fn empty(&self) -> usize {
        self.anchors
            .iter()
            .flatten()
            .filter(|m| m.positives.is_empty() && m.negatives.is_empty())
            .count()
    }
}

/// `log(1 + Σ exp(z))` and the weights `exp(z_i) / (1 + Σ exp(z))`.
fn log1p_sum_exp<T: Scalar>(z: &[T]) -> (T, Vec<T>) {
    let m = z.iter().fold(T::zero(), |m, &v| m.max(v));
    let denom = (-m).exp() + z.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
    let w = z.iter().map(|&v| (v - m).exp() / denom).collect();
    (m + denom.ln(), w)
}

struct Terms<T> {
    loss: T,
    grad: Array2<T>,
}

fn ms_terms<T: Scalar>(sim: &Array2<T>, sel: &Selection, cfg: &MsLossConfig) -> Terms<T> {
    let b = T::lit(sim.nrows() as f64);
    let (alpha, beta, lambda) = (T::lit(cfg.alpha), T::lit(cfg.beta), T::lit(cfg.lambda));
    let mut loss = T::zero();
    let mut grad = Array2::zeros(sim.raw_dim());
    for (q, mined) in sel.anchors.iter().enumerate() {
        let Some(m) = mined else { continue };
        let zp: Vec<T> = m.positives.iter().map(|&p| -alpha * (sim[[q, p]] - lambda)).collect();
        let zn: Vec<T> = m.negatives.iter().map(|&n| beta * (sim[[q, n]] - lambda)).collect();
        let (lp, wp) = log1p_sum_exp(&zp);
        let (ln, wn) = log1p_sum_exp(&zn);
        loss += lp / alpha + ln / beta;
        for (&p, w) in m.positives.iter().zip(wp) {
            grad[[q, p]] -= w / b;
        }
        for (&n, w) in m.negatives.iter().zip(wn) {
            grad[[q, n]] += w / b;
        }
    }
    Terms { loss: loss / b, grad }
}

/// MS loss on a precomputed similarity matrix with a fixed pair selection.
pub fn ms_loss_from_similarity<T: Scalar>(sim: &Array2<T>, sel: &Selection, cfg: &MsLossConfig) -> T {
    ms_terms(sim, sel, cfg).loss
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsLossOutput<T> {
    pub loss: T,
    pub skipped_anchors: usize,
    pub empty_anchors: usize,
}

pub const UNIT_NORM_TOL: f64 = 1e-4;

fn check_unit_rows<T: Scalar>(d: ArrayView2<'_, T>) -> Result<()> {
    for (i, row) in d.outer_iter().enumerate() {
        let n = crate::ops::norm(row).as_f64();
        if (n - 1.0).abs() > UNIT_NORM_TOL || !n.is_finite() {
            return Err(Error::Input(format!("descriptor row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// MS loss over L2-normalized descriptors; anchors without surviving pairs add zero
/// and the sum is divided by the full batch size.
pub fn ms_loss<T: Scalar>(descriptors: ArrayView2<'_, T>, labels: &[i64], cfg: &MsLossConfig) -> Result<MsLossOutput<T>> {
    if descriptors.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} descriptors but {} labels",
            descriptors.nrows(),
            labels.len()
        )));
    }
    check_unit_rows(descriptors)?;
    let sim = descriptors.dot(&descriptors.t());
    let sel = Selection::mine(&sim, labels, T::lit(cfg.margin));
    Ok(MsLossOutput {
        loss: ms_loss_from_similarity(&sim, &sel, cfg),
        skipped_anchors: sel.skipped(),
        empty_anchors: sel.empty(),
    })
}

struct MsLossOp {
    selection: Selection,
    cfg: MsLossConfig,
}

impl<T: Scalar> CustomOp<T> for MsLossOp {
    fn backward(&self, inputs: &[&Array2<T>], _output: &Array2<T>, grad: &Array2<T>) -> Vec<Array2<T>> {
        let g = grad[[0, 0]];
        vec![ms_terms(inputs[0], &self.selection, &self.cfg).grad * g]
    }
}

/// MS loss on a similarity-matrix variable with a given selection.
pub fn ms_loss_on_similarity<T: Scalar>(tape: &mut Tape<T>, sim: Var, selection: Selection, cfg: &MsLossConfig) -> Var {
    let loss = ms_loss_from_similarity(tape.value(sim), &selection, cfg);
    let op = MsLossOp {
        selection,
        cfg: cfg.clone(),
    };
    tape.custom(&[sim], Array2::from_elem((1, 1), loss), Box::new(op))
}

/// Online-mined MS loss on a `B × D` descriptor variable.
pub fn ms_loss_var<T: Scalar>(tape: &mut Tape<T>, descriptors: Var, labels: &[i64], cfg: &MsLossConfig) -> (Var, Selection) {
    let sim = tape.matmul_t(descriptors, descriptors);
    let selection = Selection::mine(tape.value(sim), labels, T::lit(cfg.margin));
    let loss = ms_loss_on_similarity(tape, sim, selection.clone(), cfg);
    (loss, selection)
}

/// `(1/B) Σ_i ‖student_i − teacher_i‖²`
pub fn distill_loss<T: Scalar>(student: ArrayView2<'_, T>, teacher: ArrayView2<'_, T>) -> Result<T> {
    if student.dim() != teacher.dim() {
        return Err(Error::Shape(format!(
            "student {:?} and teacher {:?} descriptors differ in shape",
            student.dim(),
            teacher.dim()
        )));
    }
    if student.nrows() == 0 {
        return Err(Error::Shape("empty descriptor batch".into()));
    }
    let sq = student
        .iter()
        .zip(teacher.iter())
        .fold(T::zero(), |a, (&s, &t)| a + (s - t) * (s - t));
    Ok(sq / T::lit(student.nrows() as f64))
}

struct DistillOp<T> {
    target: Array2<T>,
}

impl<T: Scalar> CustomOp<T> for DistillOp<T> {
    fn backward(&self, inputs: &[&Array2<T>], _output: &Array2<T>, grad: &Array2<T>) -> Vec<Array2<T>> {
        let k = T::lit(2.0) * grad[[0, 0]] / T::lit(inputs[0].nrows() as f64);
        vec![(inputs[0] - &self.target) * k]
    }
}

/// Distillation loss against a detached teacher: gradients reach only `student`.
pub fn distill_loss_var<T: Scalar>(tape: &mut Tape<T>, student: Var, teacher: Array2<T>) -> Result<Var> {
    let loss = distill_loss(tape.value(student).view(), teacher.view())?;
    Ok(tape.custom(
        &[student],
        Array2::from_elem((1, 1), loss),
        Box::new(DistillOp { target: teacher }),
    ))
}

pub fn total_loss<T: Scalar>(ms: T, kd: T, w: &LossWeights) -> T {
    T::lit(w.gamma) * ms + T::lit(w.eta) * kd
}

pub fn total_loss_var<T: Scalar>(tape: &mut Tape<T>, ms: Var, kd: Option<Var>, w: &LossWeights) -> Var {
    let a = tape.scale(ms, T::lit(w.gamma));
    match kd {
        Some(kd) => {
            let b = tape.scale(kd, T::lit(w.eta));
            tape.add(a, b)
        }
        None => a,
    }
}
