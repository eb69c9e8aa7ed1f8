//! Two-phase training: a cross-image teacher on the metric-learning loss, then a
//! self-enhanced student on metric learning plus distillation, with the 1×1
//! fusion convolution copied from the teacher and frozen.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{sample_from, PlaceDataset};
use crate::encoders::EncoderVariant;
use crate::format::{read_matrix, write_matrix};
use crate::fusion::{CONV_BIAS, CONV_WEIGHT};
use crate::losses::{distill_loss_var, ms_loss_var, total_loss_var, LossWeights, MsLossConfig};
use crate::model::{ModelConfig, Pipeline};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::{Error, Result, Scalar, ValidationError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_places: usize,
    pub images_per_place: usize,
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub seed: u64,
    /// Optimizer steps per epoch. When unset an epoch visits every eligible
    /// place about once, i.e. `ceil(places / P)` steps.
    pub steps_per_epoch: Option<usize>,
    pub loss: MsLossConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_places: 8,
            images_per_place: 4,
            epochs_teacher: 5,
            epochs_student: 2,
            lr0: 1e-3,
            lr_halving_period: 3,
            seed: 0,
            steps_per_epoch: Some(16),
            loss: MsLossConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_places * self.images_per_place
    }

    pub fn validate_into(&self, err: &mut ValidationError) {
        if self.batch_places == 0 {
            err.push("train.batch_places", "must be at least 1");
        }
        if self.images_per_place < 2 {
            err.push("train.images_per_place", "must be at least 2 so that positives exist");
        }
        if self.epochs_teacher == 0 {
            err.push("train.epochs_teacher", "must be at least 1");
        }
        if self.epochs_student == 0 {
            err.push("train.epochs_student", "must be at least 1");
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            err.push("train.lr0", "must be a positive finite number");
        }
        if self.lr_halving_period == 0 {
            err.push("train.lr_halving_period", "must be at least 1");
        }
        if self.steps_per_epoch == Some(0) {
            err.push("train.steps_per_epoch", "must be at least 1");
        }
        if self.seed > i64::MAX as u64 {
            err.push("train.seed", "must be below 2^63");
        }
        self.loss.validate_into("train.loss", err);
        self.weights.validate_into("train.weights", err);
    }

    pub fn validate(&self) -> Result<()> {
        let mut err = ValidationError::default();
        self.validate_into(&mut err);
        err.into_result()
    }
}

/// `lr0 · 0.5^⌊epoch / period⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.lr_halving_period.max(1)).min(i32::MAX as usize) as i32;
    cfg.lr0 * 0.5f64.powi(halvings)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Teacher,
    Student,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Teacher => "teacher",
            Self::Student => "student",
        }
    }

    pub fn variant(&self) -> EncoderVariant {
        match self {
            Self::Teacher => EncoderVariant::CrossImage,
            Self::Student => EncoderVariant::SelfEnhanced,
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Self::Teacher => 0x7eac,
            Self::Student => 0x57d7,
        }
    }
}

/// Deterministic seed derivation (SplitMix64 finalizer over the inputs).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: f64,
    pub ms_loss: f64,
    pub distill_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub variant: EncoderVariant,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub precision: String,
    pub adam_step: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub parameters: Vec<String>,
    pub frozen: Vec<String>,
    pub history: Vec<EpochLog>,
}

/// Trained parameters plus everything needed to resume or reproduce the run.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub meta: CheckpointMeta,
    pub params: ParamStore<T>,
    pub adam_first: ParamStore<T>,
    pub adam_second: ParamStore<T>,
}

pub const METADATA_FILE: &str = "metadata.toml";
const OPTIMIZER_DIR: &str = "optimizer";

fn tensor_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.scvf"))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn phase(&self) -> Phase {
        self.meta.phase
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        Pipeline::new(self.meta.model.clone())
    }

    pub fn check(&self) -> Result<()> {
        if self.meta.phase.variant() != self.meta.variant || self.meta.model.encoder.variant != self.meta.variant {
            return Err(Error::Format(format!(
                "checkpoint phase {} is inconsistent with encoder variant {}",
                self.meta.phase.as_str(),
                self.meta.variant.as_str()
            )));
        }
        for name in &self.meta.parameters {
            self.params.get(name)?;
        }
        self.pipeline()?.check_params(&self.params)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.check()?;
        fs::create_dir_all(dir.join(OPTIMIZER_DIR))?;
        for (name, value) in self.params.iter() {
            write_matrix(&tensor_path(dir, name), value)?;
        }
        for (prefix, store) in [("m", &self.adam_first), ("v", &self.adam_second)] {
            for (name, value) in store.iter() {
                write_matrix(&tensor_path(&dir.join(OPTIMIZER_DIR), &format!("{prefix}.{name}")), value)?;
            }
        }
        let text = toml::to_string(&self.meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        fs::write(dir.join(METADATA_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(METADATA_FILE))?;
        let meta: CheckpointMeta =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.join(METADATA_FILE).display())))?;
        let mut params = ParamStore::new();
        let mut adam_first = ParamStore::new();
        let mut adam_second = ParamStore::new();
        let opt = dir.join(OPTIMIZER_DIR);
        for name in &meta.parameters {
            let path = tensor_path(dir, name);
            if !path.exists() {
                return Err(Error::Format(format!("checkpoint is missing tensor {name}")));
            }
            params.insert(name.clone(), read_matrix(&path)?);
            for (prefix, store) in [("m", &mut adam_first), ("v", &mut adam_second)] {
                let p = tensor_path(&opt, &format!("{prefix}.{name}"));
                if p.exists() {
                    store.insert(name.clone(), read_matrix(&p)?);
                }
            }
        }
        let ckpt = Self {
            meta,
            params,
            adam_first,
            adam_second,
        };
        ckpt.check()?;
        Ok(ckpt)
    }
}

/// Training data: the dataset and one stacked `N × M·C1` input per record.
#[derive(Clone, Copy)]
pub struct TrainData<'a, T> {
    pub dataset: &'a PlaceDataset,
    pub inputs: &'a [Array2<T>],
}

struct TeacherModel<T: Scalar> {
    pipeline: Pipeline,
    params: ParamStore<T>,
}

/// Runs one training phase epoch by epoch.
pub struct Trainer<'a, T: Scalar> {
    phase: Phase,
    pipeline: Pipeline,
    cfg: TrainConfig,
    data: TrainData<'a, T>,
    eligible: Vec<i64>,
    teacher: Option<TeacherModel<T>>,
    params: ParamStore<T>,
    adam: Adam<T>,
    epoch: usize,
    history: Vec<EpochLog>,
}

fn check_data<T: Scalar>(pipeline: &Pipeline, cfg: &TrainConfig, data: &TrainData<'_, T>) -> Result<Vec<i64>> {
    cfg.validate()?;
    if data.inputs.len() != data.dataset.len() {
        return Err(Error::Input(format!(
            "{} inputs for {} records",
            data.inputs.len(),
            data.dataset.len()
        )));
    }
    let want = (pipeline.tokens(), pipeline.input_width());
    if let Some(i) = data.inputs.iter().position(|x| x.dim() != want) {
        return Err(Error::Shape(format!(
            "input {i} is {:?}, expected {want:?}",
            data.inputs[i].dim()
        )));
    }
    let eligible = data.dataset.eligible_places(cfg.images_per_place);
    if eligible.len() < cfg.batch_places {
        return Err(Error::Sampling(format!(
            "{} places have at least {} images; {} are needed per batch",
            eligible.len(),
            cfg.images_per_place,
            cfg.batch_places
        )));
    }
    Ok(eligible)
}

fn check_variant(pipeline: &Pipeline, phase: Phase) -> Result<()> {
    if pipeline.variant() != phase.variant() {
        return Err(Error::Config(format!(
            "{} phase needs a {} encoder, got {}",
            phase.as_str(),
            phase.variant().as_str(),
            pipeline.variant().as_str()
        )));
    }
    Ok(())
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn teacher(model: &ModelConfig, cfg: &TrainConfig, data: TrainData<'a, T>) -> Result<Self> {
        let pipeline = Pipeline::new(model.clone())?;
        check_variant(&pipeline, Phase::Teacher)?;
        let eligible = check_data(&pipeline, cfg, &data)?;
        let params = pipeline.init_params(derive_seed(cfg.seed, Phase::Teacher.tag(), 0));
        Ok(Self {
            phase: Phase::Teacher,
            pipeline,
            cfg: cfg.clone(),
            data,
            eligible,
            teacher: None,
            params,
            adam: Adam::new(AdamConfig::default()),
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn student(
        teacher: &Checkpoint<T>,
        model: &ModelConfig,
        cfg: &TrainConfig,
        data: TrainData<'a, T>,
    ) -> Result<Self> {
        if teacher.phase() != Phase::Teacher {
            return Err(Error::Config(format!(
                "distillation needs a teacher checkpoint, got phase {}",
                teacher.phase().as_str()
            )));
        }
        let tmodel = &teacher.meta.model;
        if tmodel.backbone != model.backbone || tmodel.fusion != model.fusion {
            return Err(Error::Config(
                "student backbone and fusion settings must match the teacher's".into(),
            ));
        }
        let pipeline = Pipeline::new(model.clone())?;
        check_variant(&pipeline, Phase::Student)?;
        let eligible = check_data(&pipeline, cfg, &data)?;
        let teacher_pipeline = teacher.pipeline()?;
        let mut params = pipeline.init_params(derive_seed(cfg.seed, Phase::Student.tag(), 0));
        let mut adam = Adam::new(AdamConfig::default());
        for name in [CONV_WEIGHT, CONV_BIAS] {
            let src = teacher.params.get(name)?;
            let dst = params.get_mut(name)?;
            if src.dim() != dst.dim() {
                return Err(Error::Config(format!(
                    "{name}: teacher shape {:?} differs from student shape {:?}",
                    src.dim(),
                    dst.dim()
                )));
            }
            dst.assign(src);
            adam.freeze(name);
        }
        if cfg.weights.eta == 0.0 {
            log::warn!("weights.eta = 0: distillation is disabled");
        }
        Ok(Self {
            phase: Phase::Student,
            pipeline,
            cfg: cfg.clone(),
            data,
            eligible,
            teacher: Some(TeacherModel {
                pipeline: teacher_pipeline,
                params: teacher.params.clone(),
            }),
            params,
            adam,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint<T>, teacher: Option<&Checkpoint<T>>, data: TrainData<'a, T>) -> Result<Self> {
        let cfg = &ckpt.meta.train;
        let mut t = match ckpt.phase() {
            Phase::Teacher => Self::teacher(&ckpt.meta.model, cfg, data)?,
            Phase::Student => {
                let teacher = teacher.ok_or_else(|| Error::Config("resuming a student run needs its teacher".into()))?;
                Self::student(teacher, &ckpt.meta.model, cfg, data)?
            }
        };
        t.params = ckpt.params.clone();
        t.adam.step = ckpt.meta.adam_step;
        t.adam.first = ckpt.adam_first.clone();
        t.adam.second = ckpt.adam_second.clone();
        t.epoch = ckpt.meta.epoch;
        t.history = ckpt.meta.history.clone();
        Ok(t)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn total_epochs(&self) -> usize {
        match self.phase {
            Phase::Teacher => self.cfg.epochs_teacher,
            Phase::Student => self.cfg.epochs_student,
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.total_epochs()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg
            .steps_per_epoch
            .unwrap_or_else(|| self.eligible.len().div_ceil(self.cfg.batch_places))
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, self.phase.tag(), epoch as u64 + 1));
        let steps = self.steps_per_epoch();
        let (mut sum, mut sum_ms, mut sum_kd) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let batch = sample_from(
                self.data.dataset,
                &self.eligible,
                self.cfg.batch_places,
                self.cfg.images_per_place,
                &mut rng,
            )?;
            let inputs: Vec<&Array2<T>> = batch.indices.iter().map(|&i| &self.data.inputs[i]).collect();
            let (loss, ms, kd) = self.step(&inputs, &batch.labels, lr)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "{} phase, epoch {epoch}, step {step}: loss is {loss}",
                    self.phase.as_str()
                )));
            }
            sum += loss;
            sum_ms += ms;
            sum_kd += kd.unwrap_or(0.0);
        }
        if let Some((name, _)) = self.params.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence(format!("parameter {name} became non-finite in epoch {epoch}")));
        }
        let n = steps as f64;
        let log = EpochLog {
            epoch,
            lr,
            steps,
            loss: sum / n,
            ms_loss: sum_ms / n,
            distill_loss: self.teacher.as_ref().map(|_| sum_kd / n),
        };
        self.epoch += 1;
        self.history.push(log.clone());
        Ok(log)
    }

    fn step(&mut self, inputs: &[&Array2<T>], labels: &[i64], lr: f64) -> Result<(f64, f64, Option<f64>)> {
        let use_kd = self.teacher.is_some() && self.cfg.weights.eta > 0.0;
        let teacher = self.teacher.as_ref().filter(|_| use_kd);
        let (pipeline, params, cfg) = (&self.pipeline, &self.params, &self.cfg);
        let (targets, recorded) = rayon::join(
            || teacher.map(|t| t.pipeline.describe(&t.params, inputs)).transpose(),
            || -> Result<_> {
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape);
                let d = pipeline.forward(&mut tape, &vars, inputs)?;
                let (ms, _) = ms_loss_var(&mut tape, d, labels, &cfg.loss);
                Ok((tape, vars, d, ms))
            },
        );
        let (mut tape, vars, d, ms) = recorded?;
        let kd = match targets? {
            Some(t) => Some(distill_loss_var(&mut tape, d, t)?),
            None => None,
        };
        let total = total_loss_var(&mut tape, ms, kd, &self.cfg.weights);
        let loss = tape.scalar(total).as_f64();
        let ms_v = tape.scalar(ms).as_f64();
        let kd_v = kd.map(|k| tape.scalar(k).as_f64());
        if loss.is_finite() {
            let grads = tape.backward(total);
            self.adam.step(&mut self.params, &vars, &grads, lr);
        }
        Ok((loss, ms_v, kd_v))
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let log = self.run_epoch()?;
            on_epoch(self, &log)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            meta: CheckpointMeta {
                phase: self.phase,
                variant: self.phase.variant(),
                epoch: self.epoch,
                seed: self.cfg.seed,
                precision: T::type_name().to_string(),
                adam_step: self.adam.step,
                model: self.pipeline.config().clone(),
                train: self.cfg.clone(),
                parameters: self.params.names().map(str::to_string).collect(),
                frozen: self.adam.frozen().map(str::to_string).collect(),
                history: self.history.clone(),
            },
            params: self.params.clone(),
            adam_first: self.adam.first.clone(),
            adam_second: self.adam.second.clone(),
        }
    }
}

pub fn train_teacher<T: Scalar>(model: &ModelConfig, cfg: &TrainConfig, data: TrainData<'_, T>) -> Result<Checkpoint<T>> {
    let mut t = Trainer::teacher(model, cfg, data)?;
    t.run(|_, _| Ok(()))?;
    Ok(t.checkpoint())
}

pub fn distill_student<T: Scalar>(
    teacher: &Checkpoint<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: TrainData<'_, T>,
) -> Result<Checkpoint<T>> {
    let mut t = Trainer::student(teacher, model, cfg, data)?;
    t.run(|_, _| Ok(()))?;
    Ok(t.checkpoint())
}
