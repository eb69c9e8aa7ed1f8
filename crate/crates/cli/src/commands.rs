use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use vpr_core::backbone::{Backbone, FeatureArchive};
use vpr_core::data::{generate_synthetic, PlaceDataset};
use vpr_core::model::{stack_archived, Pipeline};
use vpr_core::retrieval::{fit_pca, recall_at_n, search_all, DescriptorStore, GroundTruth, PcaModel, RetrievalIndex};
use vpr_core::training::{Checkpoint, EpochLog, Phase, TrainData, Trainer};
use vpr_core::{Error, Result, ValidationError};

use crate::config::{RunConfig, EFFECTIVE_CONFIG};

/// Precision used by every command; matches the on-disk tensor formats, so
/// resumed runs continue from exactly the state that was saved.
type F = f32;

pub const TRAIN_LOG: &str = "train_log.txt";
const LOCK_FILE: &str = ".lock";

/// Exclusive claim on an output location, released on drop.
pub struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "pid={}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Input(format!(
                "{} exists: another command is writing this output",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    pub fn dir(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Self::acquire(dir.join(LOCK_FILE))
    }

    pub fn file(file: &Path) -> Result<Self> {
        if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        Self::acquire(sibling(file, "lock"))
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// `<file>.<suffix>` next to `file`.
fn sibling(file: &Path, suffix: &str) -> PathBuf {
    let mut s = file.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn invalid(key: &str, msg: impl Into<String>) -> Error {
    let mut err = ValidationError::default();
    err.push(key, msg);
    Error::Validation(err)
}

/// Writes a key=value record to stdout and optionally to a log sink.
fn emit(sink: Option<&mut Vec<String>>, fields: &[(&str, String)]) {
    let line = fields
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ");
    println!("{line}");
    if let Some(s) = sink {
        s.push(line);
    }
}

pub struct SynthArgs {
    pub out: PathBuf,
}

pub fn synth(cfg: &RunConfig, args: &SynthArgs) -> Result<()> {
    cfg.validate()?;
    let synth = cfg.synthetic();
    let data = generate_synthetic::<F>(&synth)?;
    let backbone = Backbone::<F>::new(cfg.backbone.clone())?;
    let all_layers: Vec<usize> = (1..=cfg.backbone.depth).collect();
    let records = data.dataset.records();
    let maps: Vec<_> = {
        use rayon::prelude::*;
        data.images
            .par_iter()
            .map(|img| backbone.forward_tokens(img, &all_layers))
            .collect::<Result<_>>()?
    };
    let (train, query) = data.dataset.split_last_per_place()?;
    let _lock = OutputLock::dir(&args.out)?;
    let archive = FeatureArchive::create(args.out.join("features"))?;
    for (r, m) in records.iter().zip(&maps) {
        archive.store(&r.image_ref, m)?;
    }
    data.dataset.write_manifest(args.out.join("manifest.csv"))?;
    train.write_manifest(args.out.join("train.csv"))?;
    query.write_manifest(args.out.join("query.csv"))?;
    cfg.write_effective(&args.out.join(EFFECTIVE_CONFIG))?;
    emit(
        None,
        &[
            ("event", "synth".into()),
            ("seed", synth.seed.to_string()),
            ("places", synth.n_places.to_string()),
            ("per_place", synth.per_place.to_string()),
            ("records", records.len().to_string()),
            ("train", train.len().to_string()),
            ("query", query.len().to_string()),
            ("layers", all_layers.len().to_string()),
        ],
    );
    Ok(())
}

/// Manifest path plus its feature archive, which defaults to `features/`
/// next to the manifest.
pub struct DataArgs {
    pub manifest: Option<PathBuf>,
    pub features: Option<PathBuf>,
}

struct Loaded {
    dataset: PlaceDataset,
    archive: FeatureArchive,
}

impl DataArgs {
    fn resolve(&self, cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
        let manifest = self
            .manifest
            .clone()
            .or_else(|| cfg.paths.manifest.clone())
            .ok_or_else(|| invalid("paths.manifest", "a manifest is required (--manifest)"))?;
        if !manifest.is_file() {
            return Err(invalid("paths.manifest", format!("{} does not exist", manifest.display())));
        }
        let features = self
            .features
            .clone()
            .or_else(|| cfg.paths.features.clone())
            .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("features"));
        if !features.is_dir() {
            return Err(invalid("paths.features", format!("{} is not a directory", features.display())));
        }
        Ok((manifest, features))
    }

    fn load(&self, cfg: &RunConfig) -> Result<Loaded> {
        let (manifest, features) = self.resolve(cfg)?;
        Ok(Loaded {
            dataset: PlaceDataset::load_manifest(&manifest)?,
            archive: FeatureArchive::open(&features)?,
        })
    }
}

fn stack(pipeline: &Pipeline, loaded: &Loaded) -> Result<Vec<Array2<F>>> {
    let ids: Vec<&str> = loaded.dataset.records().iter().map(|r| r.image_ref.as_str()).collect();
    stack_archived(pipeline, &loaded.archive, &ids)
}

fn epoch_fields(phase: Phase, seed: u64, log: &EpochLog) -> Vec<(&'static str, String)> {
    let mut f = vec![
        ("event", "epoch".to_string()),
        ("phase", phase.as_str().to_string()),
        ("seed", seed.to_string()),
        ("epoch", (log.epoch + 1).to_string()),
        ("lr", format!("{:e}", log.lr)),
        ("steps", log.steps.to_string()),
        ("loss", format!("{:.9}", log.loss)),
        ("ms_loss", format!("{:.9}", log.ms_loss)),
    ];
    if let Some(kd) = log.distill_loss {
        f.push(("distill_loss", format!("{kd:.9}")));
    }
    f
}

/// Runs the trainer to completion, checkpointing into `out` after every epoch.
/// The log file is rebuilt from the full history so that a resumed run ends
/// with the same log as an uninterrupted one.
fn drive(trainer: &mut Trainer<'_, F>, seed: u64, out: &Path) -> Result<Checkpoint<F>> {
    let phase = trainer.phase();
    emit(
        None,
        &[
            ("event", "start".into()),
            ("phase", phase.as_str().into()),
            ("seed", seed.to_string()),
            ("from_epoch", trainer.epoch().to_string()),
            ("epochs", trainer.total_epochs().to_string()),
            ("steps_per_epoch", trainer.steps_per_epoch().to_string()),
        ],
    );
    let write_log = |history: &[EpochLog]| -> Result<()> {
        let mut lines = Vec::new();
        for h in history {
            let fields = epoch_fields(phase, seed, h);
            lines.push(fields.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "));
        }
        fs::write(out.join(TRAIN_LOG), lines.join("\n") + "\n")?;
        Ok(())
    };
    trainer.run(|t, log| {
        emit(None, &epoch_fields(phase, seed, log));
        t.checkpoint().save(out)?;
        write_log(t.history())
    })?;
    let ckpt = trainer.checkpoint();
    if trainer.history().is_empty() {
        ckpt.save(out)?;
    }
    emit(
        None,
        &[
            ("event", "done".into()),
            ("phase", phase.as_str().into()),
            ("epochs", ckpt.meta.epoch.to_string()),
            ("checkpoint", out.display().to_string()),
        ],
    );
    Ok(ckpt)
}

fn load_checkpoint(path: &Path, key: &str) -> Result<Checkpoint<F>> {
    if !path.join(vpr_core::training::METADATA_FILE).is_file() {
        return Err(invalid(key, format!("{} is not a checkpoint directory", path.display())));
    }
    Checkpoint::load(path)
}

pub struct TrainArgs {
    pub data: DataArgs,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
}

/// A resumed run continues under the checkpoint's own settings; only the
/// epoch budget may be raised.
fn resumed_config(cfg: &RunConfig, ckpt: &mut Checkpoint<F>, phase: Phase, epochs: Option<usize>) -> Result<RunConfig> {
    if ckpt.phase() != phase {
        return Err(invalid(
            "--resume",
            format!("checkpoint phase is {}, expected {}", ckpt.phase().as_str(), phase.as_str()),
        ));
    }
    let train = &mut ckpt.meta.train;
    if let Some(e) = epochs {
        match phase {
            Phase::Teacher => train.epochs_teacher = e,
            Phase::Student => train.epochs_student = e,
        }
    }
    let mut effective = cfg.clone();
    effective.train = train.clone();
    effective.backbone = ckpt.meta.model.backbone.clone();
    effective.fusion = ckpt.meta.model.fusion.clone();
    match phase {
        Phase::Teacher => effective.teacher = ckpt.meta.model.encoder.clone(),
        Phase::Student => effective.student = ckpt.meta.model.encoder.clone(),
    }
    effective.validate()?;
    Ok(effective)
}

pub fn train_teacher(cfg: &RunConfig, args: &TrainArgs, epochs: Option<usize>) -> Result<()> {
    cfg.validate()?;
    let mut resume = args.resume.as_deref().map(|p| load_checkpoint(p, "--resume")).transpose()?;
    let cfg = match resume.as_mut() {
        Some(ckpt) => resumed_config(cfg, ckpt, Phase::Teacher, epochs)?,
        None => cfg.clone(),
    };
    let loaded = args.data.load(&cfg)?;
    let pipeline = Pipeline::new(cfg.teacher_model())?;
    let _lock = OutputLock::dir(&args.out)?;
    let inputs = stack(&pipeline, &loaded)?;
    let data = TrainData {
        dataset: &loaded.dataset,
        inputs: &inputs,
    };
    let mut trainer = match &resume {
        Some(ckpt) => Trainer::resume(ckpt, None, data)?,
        None => Trainer::teacher(&cfg.teacher_model(), &cfg.train, data)?,
    };
    cfg.write_effective(&args.out.join(EFFECTIVE_CONFIG))?;
    drive(&mut trainer, cfg.train.seed, &args.out)?;
    Ok(())
}

pub struct DistillArgs {
    pub train: TrainArgs,
    pub teacher: PathBuf,
}

pub fn distill(cfg: &RunConfig, args: &DistillArgs, epochs: Option<usize>) -> Result<()> {
    cfg.validate()?;
    if !args.teacher.exists() {
        return Err(invalid("--teacher", format!("{} does not exist", args.teacher.display())));
    }
    let teacher = load_checkpoint(&args.teacher, "--teacher")?;
    if teacher.phase() != Phase::Teacher {
        return Err(invalid(
            "--teacher",
            format!("{} holds a {} checkpoint", args.teacher.display(), teacher.phase().as_str()),
        ));
    }
    let mut resume = args.train.resume.as_deref().map(|p| load_checkpoint(p, "--resume")).transpose()?;
    let cfg = match resume.as_mut() {
        Some(ckpt) => resumed_config(cfg, ckpt, Phase::Student, epochs)?,
        None => cfg.clone(),
    };
    let tmodel = &teacher.meta.model;
    let mut err = ValidationError::default();
    if tmodel.backbone != cfg.backbone {
        err.push("backbone", "differs from the teacher checkpoint");
    }
    if tmodel.fusion != cfg.fusion {
        err.push("fusion", "differs from the teacher checkpoint");
    }
    err.into_result()?;
    let loaded = args.train.data.load(&cfg)?;
    let pipeline = Pipeline::new(cfg.student_model())?;
    let _lock = OutputLock::dir(&args.train.out)?;
    let inputs = stack(&pipeline, &loaded)?;
    let data = TrainData {
        dataset: &loaded.dataset,
        inputs: &inputs,
    };
    let mut trainer = match &resume {
        Some(ckpt) => Trainer::resume(ckpt, Some(&teacher), data)?,
        None => Trainer::student(&teacher, &cfg.student_model(), &cfg.train, data)?,
    };
    cfg.write_effective(&args.train.out.join(EFFECTIVE_CONFIG))?;
    drive(&mut trainer, cfg.train.seed, &args.train.out)?;
    Ok(())
}

pub struct ExtractArgs {
    pub checkpoint: PathBuf,
    pub data: DataArgs,
    pub out: PathBuf,
    pub batch: usize,
}

pub fn extract(cfg: &RunConfig, args: &ExtractArgs) -> Result<()> {
    cfg.validate()?;
    let ckpt = load_checkpoint(&args.checkpoint, "--checkpoint")?;
    let phase = ckpt.phase();
    let pipeline = ckpt.pipeline()?;
    let want = cfg.descriptor_dim();
    if pipeline.descriptor_dim() != want {
        return Err(invalid(
            "fusion.out_channels",
            format!(
                "checkpoint produces {}-dim descriptors, configuration expects {want}",
                pipeline.descriptor_dim()
            ),
        ));
    }
    if args.batch == 0 {
        return Err(invalid("--batch", "must be at least 1"));
    }
    if phase == Phase::Student && args.batch != 1 {
        log::warn!("--batch is ignored for student checkpoints; images are described one at a time");
    }
    let loaded = args.data.load(cfg)?;
    let _lock = OutputLock::file(&args.out)?;
    let inputs = stack(&pipeline, &loaded)?;
    let refs: Vec<&Array2<F>> = inputs.iter().collect();
    let (descriptors, batch) = match phase {
        Phase::Student => (pipeline.describe_each(&ckpt.params, &refs)?, 1),
        Phase::Teacher => (pipeline.describe_chunked(&ckpt.params, &refs, args.batch)?, args.batch),
    };
    let records = loaded.dataset.records();
    let store = DescriptorStore {
        descriptors,
        ids: records.iter().map(|r| r.image_ref.clone()).collect(),
        coords: records.iter().map(|r| r.coord).collect(),
    };
    store.write(&args.out)?;
    let mut log = Vec::new();
    emit(
        Some(&mut log),
        &[
            ("event", "extract".into()),
            ("phase", phase.as_str().into()),
            ("batch", batch.to_string()),
            ("count", store.len().to_string()),
            ("dim", store.dim().to_string()),
            ("seed", ckpt.meta.seed.to_string()),
            ("out", args.out.display().to_string()),
        ],
    );
    fs::write(sibling(&args.out, "log"), log.join("\n") + "\n")?;
    cfg.write_effective(&sibling(&args.out, EFFECTIVE_CONFIG))?;
    Ok(())
}

pub struct EvalArgs {
    pub query: PathBuf,
    pub database: PathBuf,
    pub ns: Vec<usize>,
    pub threshold_m: f64,
    pub pairs: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub pca_out: Option<PathBuf>,
}

/// Reads `query_id,database_id` lines; `#` starts a comment.
fn read_pairs(path: &Path, queries: &[String], database: &[String]) -> Result<GroundTruth> {
    let text = fs::read_to_string(path)?;
    let mut map = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (q, d) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("{} line {}: expected query_id,database_id", path.display(), n + 1)))?;
        map.insert(q.trim().to_string(), d.trim().to_string());
    }
    let counterparts = queries
        .iter()
        .map(|q| {
            map.get(q)
                .cloned()
                .ok_or_else(|| Error::Evaluation(format!("no counterpart for query {q:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruth::Pairs {
        counterparts,
        database: database.iter().cloned().collect::<HashSet<_>>(),
    })
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    cfg.validate()?;
    let mut err = ValidationError::default();
    if args.ns.is_empty() {
        err.push("--n", "at least one N is required");
    }
    if args.ns.contains(&0) {
        err.push("--n", "every N must be at least 1");
    }
    if !(args.threshold_m >= 0.0) {
        err.push("--threshold", "must be nonnegative");
    }
    err.into_result()?;
    let query = DescriptorStore::<F>::read(&args.query)?;
    let database = DescriptorStore::<F>::read(&args.database)?;
    let mut err = ValidationError::default();
    if query.dim() != database.dim() {
        err.push(
            "--database",
            format!("descriptor dim {} differs from the query dim {}", database.dim(), query.dim()),
        );
    }
    let max_n = args.ns.iter().copied().max().unwrap_or(1);
    if max_n > database.len() {
        err.push("--n", format!("N = {max_n} exceeds the database size {}", database.len()));
    }
    if let Some(d) = cfg.mode.pca_dim {
        if d > database.dim() {
            err.push("mode.pca_dim", format!("exceeds the descriptor dim {}", database.dim()));
        }
    }
    err.into_result()?;
    let _lock = args.out.as_deref().map(OutputLock::file).transpose()?;

    let (qd, dd, pca): (Array2<F>, Array2<F>, Option<PcaModel<F>>) = match cfg.mode.pca_dim {
        Some(d) => {
            let pca = fit_pca(database.descriptors.view(), d)?;
            let q = pca.project_rows(query.descriptors.view())?;
            let db = pca.project_rows(database.descriptors.view())?;
            (q, db, Some(pca))
        }
        None => (query.descriptors.clone(), database.descriptors.clone(), None),
    };
    let dim = dd.ncols();
    let index = RetrievalIndex::new(dd, database.ids.clone(), database.coords.clone())?;
    let ranked = search_all(&index, qd.view(), max_n)?;
    let truth = match &args.pairs {
        Some(p) => read_pairs(p, &query.ids, &database.ids)?,
        None => GroundTruth::geographic(query.coords.clone(), &database.ids, &database.coords, args.threshold_m),
    };
    let recalls = recall_at_n(&ranked, &truth, &args.ns)?;

    let mut ns = args.ns.clone();
    ns.dedup();
    let header: Vec<String> = ns.iter().map(|n| format!("R@{n}")).collect();
    let values: Vec<String> = ns.iter().map(|n| format!("{:.1}", recalls[n])).collect();
    let widths: Vec<usize> = header.iter().zip(&values).map(|(h, v)| h.len().max(v.len())).collect();
    let pad = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut report = vec![
        format!(
            "event=eval queries={} database={} input_dim={} dim={} truth={}",
            query.len(),
            database.len(),
            database.dim(),
            dim,
            if args.pairs.is_some() { "pairs".to_string() } else { format!("geographic threshold_m={}", args.threshold_m) }
        ),
    ];
    if pca.is_some() {
        report.push(format!("pca fit=database reduced_dim={dim}"));
    }
    for n in &ns {
        report.push(format!("recall n={n} value={:.4}", recalls[n]));
    }
    report.push(pad(&header));
    report.push(pad(&values));
    for line in &report {
        println!("{line}");
    }
    if let (Some(dir), Some(p)) = (&args.pca_out, &pca) {
        fs::create_dir_all(dir)?;
        p.save(dir)?;
    }
    if let Some(out) = &args.out {
        fs::write(out, report.join("\n") + "\n")?;
        cfg.write_effective(&sibling(out, EFFECTIVE_CONFIG))?;
    }
    Ok(())
}
