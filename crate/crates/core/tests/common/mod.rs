#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vpr_core::aggregation::{gem_regions, partition_regions};
use vpr_core::autodiff::{Tape, Var};
use vpr_core::encoders::{Encoder, EncoderConfig};
use vpr_core::fusion::{Fusion, FusionConfig};
use vpr_core::losses::{distill_loss_var, ms_loss_on_similarity, MsLossConfig, Selection};
use vpr_core::params::{ParamStore, ParamVars};

pub const INSTANCES: u64 = 20;
pub const GRAD_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over every entry of
/// every tensor in `params`, using central differences.
pub fn gradient_error(
    params: &ParamStore<f64>,
    build: &dyn Fn(&mut Tape<f64>, &ParamVars) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);
    let eval = |p: &ParamStore<f64>| {
        let mut t = Tape::new();
        let v = p.bind(&mut t);
        let l = build(&mut t, &v);
        t.scalar(l)
    };
    let (mut diff, mut an, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let analytic = grads.get_or_zeros(vars.get(name), params.get(name).unwrap());
        let len = analytic.len();
        for i in 0..len {
            let orig = params.get(name).unwrap().as_slice().unwrap()[i];
            probe.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = orig + STEP;
            let up = eval(&probe);
            probe.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = orig - STEP;
            let down = eval(&probe);
            probe.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.as_slice().unwrap()[i];
            diff += (a - numeric).powi(2);
            an += a * a;
            nn += numeric * numeric;
        }
    }
    let scale = an.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Weighted sum `Σ w ⊙ y`, a scalar probe with a dense random gradient.
pub fn probe(tape: &mut Tape<f64>, y: Var, w: &Array2<f64>) -> Var {
    let wv = tape.leaf(w.clone());
    let (r, c) = w.dim();
    let flat_y = tape.reshape(y, 1, r * c);
    let flat_w = tape.reshape(wv, 1, r * c);
    tape.matmul_t(flat_y, flat_w)
}

pub fn fusion_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (grid, per_layer, batch) = (3, 3, 2);
    let cfg = FusionConfig {
        tapped_layers: 2,
        in_channels: None,
        out_channels: 4,
        mixer_layers: 2,
        mixer_hidden: 3,
    };
    let fusion = Fusion::new(cfg, per_layer, (grid, grid)).unwrap();
    let mut params = ParamStore::new();
    fusion.init_params(&mut params, &mut rng);
    for g in 0..2 {
        for n in ["ln.gain", "ln.bias"] {
            let name = format!("fusion.mixer.{g}.{n}");
            let shape = params.get(&name).unwrap().dim();
            let base = if n == "ln.gain" { 1.0 } else { 0.0 };
            *params.get_mut(&name).unwrap() = normal(&mut rng, shape.0, shape.1) * 0.3 + base;
        }
    }
    let rows = batch * grid * grid;
    params.insert("input", normal(&mut rng, rows, 2 * per_layer));
    let w = normal(&mut rng, rows, 4);
    gradient_error(&params, &|tape, vars| {
        let y = fusion.forward(tape, vars, vars.get("input"), batch);
        probe(tape, y, &w)
    })
}

pub fn gem_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c, batch) = (4, 3, 3, 2);
    let part = partition_regions(h, w).unwrap();
    let mut params = ParamStore::new();
    params.insert(
        "input",
        Array2::from_shape_simple_fn((batch * h * w, c), || rng.random_range(0.1..2.0)),
    );
    params.insert("p", Array2::from_elem((1, 1), rng.random_range(1.2..5.0)));
    let wt = normal(&mut rng, batch * 14, c);
    gradient_error(&params, &|tape, vars| {
        let y = gem_regions(tape, vars.get("input"), vars.get("p"), &part);
        probe(tape, y, &wt)
    })
}

pub fn encoder_instance(seed: u64, cfg: EncoderConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 3;
    let dim = cfg.dim;
    let enc = Encoder::new(cfg).unwrap();
    let mut params = ParamStore::new();
    enc.init_params(&mut params, &mut rng);
    let names: Vec<String> = params.names().filter(|n| n.contains(".ln")).map(str::to_string).collect();
    for name in names {
        let base = if name.ends_with("gain") { 1.0 } else { 0.0 };
        *params.get_mut(&name).unwrap() = normal(&mut rng, 1, dim) * 0.3 + base;
    }
    params.insert("input", normal(&mut rng, batch * 14, dim));
    let w = normal(&mut rng, batch * 14, dim);
    gradient_error(&params, &|tape, vars| {
        let y = enc.forward(tape, vars, vars.get("input"), batch);
        probe(tape, y, &w)
    })
}

pub fn teacher_encoder_instance(seed: u64) -> f64 {
    let mut cfg = EncoderConfig::teacher(8);
    cfg.heads = 2;
    cfg.mlp_ratio = 2.0;
    encoder_instance(seed, cfg)
}

pub fn student_encoder_instance(seed: u64) -> f64 {
    let mut cfg = EncoderConfig::student(8);
    cfg.heads = 2;
    cfg.mlp_ratio = 2.0;
    encoder_instance(seed, cfg)
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut x = normal(rng, rows, cols);
    for mut r in x.outer_iter_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    x
}

/// MS loss through row normalization and the similarity matrix, with the
/// mined selection held fixed at the base point.
pub fn ms_loss_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d) = (6, 5);
    let labels: Vec<i64> = (0..b as i64).map(|i| i / 2).collect();
    let cfg = MsLossConfig {
        alpha: rng.random_range(0.5..3.0),
        beta: rng.random_range(5.0..50.0),
        lambda: rng.random_range(-0.2..0.5),
        margin: 0.5,
    };
    let x = normal(&mut rng, b, d);
    let xn = {
        let mut t = x.clone();
        for mut r in t.outer_iter_mut() {
            let n = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / n);
        }
        t
    };
    let selection = Selection::mine(&xn.dot(&xn.t()), &labels, cfg.margin);
    let mut params = ParamStore::new();
    params.insert("input", x);
    gradient_error(&params, &|tape, vars| {
        let n = tape.l2_normalize_rows(vars.get("input"));
        let sim = tape.matmul_t(n, n);
        ms_loss_on_similarity(tape, sim, selection.clone(), &cfg)
    })
}

pub fn distill_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d) = (rng.random_range(1..6), rng.random_range(2..12));
    let teacher = unit_rows(&mut rng, b, d);
    let mut params = ParamStore::new();
    params.insert("input", normal(&mut rng, b, d));
    gradient_error(&params, &|tape, vars| {
        let s = tape.l2_normalize_rows(vars.get("input"));
        distill_loss_var(tape, s, teacher.clone()).unwrap()
    })
}

pub type Suite = (&'static str, fn(u64) -> f64);

pub const GRADIENT_SUITES: [Suite; 6] = [
    ("fusion", fusion_instance),
    ("gem", gem_instance),
    ("teacher_encoder", teacher_encoder_instance),
    ("student_encoder", student_encoder_instance),
    ("ms_loss", ms_loss_instance),
    ("distill_loss", distill_instance),
];

/// Worst relative error over the standard instance count.
pub fn worst_error(suite: fn(u64) -> f64) -> f64 {
    (0..INSTANCES).map(|s| suite(1000 + s)).fold(0.0, f64::max)
}

pub mod desk {
    use std::collections::BTreeMap;

    use ndarray::Array2;
    use vpr_core::backbone::{Backbone, BackboneConfig};
    use vpr_core::data::{generate_synthetic, PlaceDataset, SyntheticConfig};
    use vpr_core::fusion::FusionConfig;
    use vpr_core::losses::distill_loss;
    use vpr_core::model::{stack_images, ModelConfig, Pipeline};
    use vpr_core::retrieval::{recall_at_n, search_all, DescriptorStore, GroundTruth, RetrievalIndex, DEFAULT_THRESHOLD_M};
    use vpr_core::training::{Checkpoint, TrainConfig, TrainData, Trainer};

    pub struct Outcome {
        pub teacher: Checkpoint<f32>,
        pub student: Checkpoint<f32>,
        pub teacher_losses: Vec<f64>,
        pub kd_before: f64,
        pub kd_after: f64,
        pub student_recall: BTreeMap<usize, f64>,
        pub teacher_recall_b1: BTreeMap<usize, f64>,
        pub student_store: DescriptorStore<f32>,
    }

    pub fn reference_data() -> SyntheticConfig {
        SyntheticConfig::default()
    }

    pub fn train_config() -> TrainConfig {
        TrainConfig::default()
    }

    fn store(ds: &PlaceDataset, d: Array2<f32>) -> DescriptorStore<f32> {
        DescriptorStore {
            descriptors: d,
            ids: ds.records().iter().map(|r| r.image_ref.clone()).collect(),
            coords: ds.records().iter().map(|r| r.coord).collect(),
        }
    }

    fn recall(db: &DescriptorStore<f32>, q: &DescriptorStore<f32>) -> BTreeMap<usize, f64> {
        let index = RetrievalIndex::from_store(db).unwrap();
        let results = search_all(&index, q.descriptors.view(), 5).unwrap();
        let truth = GroundTruth::geographic(q.coords.clone(), &db.ids, &db.coords, DEFAULT_THRESHOLD_M);
        recall_at_n(&results, &truth, &[1, 5]).unwrap()
    }

    /// Synthetic data → teacher → student → retrieval on a held-out query split.
    pub fn run(cfg: &TrainConfig) -> Outcome {
        let syn = generate_synthetic::<f32>(&reference_data()).unwrap();
        let (db, queries) = syn.dataset.split_last_per_place().unwrap();
        let backbone_cfg = BackboneConfig::default();
        let fusion = FusionConfig::default();
        let teacher_cfg = ModelConfig::teacher(backbone_cfg.clone(), fusion.clone());
        let student_cfg = ModelConfig::student(backbone_cfg.clone(), fusion);
        let backbone = Backbone::<f32>::new(backbone_cfg).unwrap();
        let head = Pipeline::new(teacher_cfg.clone()).unwrap();
        let pick = |ds: &PlaceDataset| -> Vec<_> {
            ds.records()
                .iter()
                .map(|r| syn.images[syn.dataset.position(&r.image_ref).unwrap()].clone())
                .collect()
        };
        let db_inputs = stack_images(&head, &backbone, &pick(&db)).unwrap();
        let q_inputs = stack_images(&head, &backbone, &pick(&queries)).unwrap();
        let data = TrainData {
            dataset: &db,
            inputs: &db_inputs,
        };

        let mut teacher = Trainer::teacher(&teacher_cfg, cfg, data).unwrap();
        teacher.run(|_, _| Ok(())).unwrap();
        let teacher_ckpt = teacher.checkpoint();
        let teacher_losses = teacher.history().iter().map(|e| e.loss).collect();

        let q_refs: Vec<_> = q_inputs.iter().collect();
        let db_refs: Vec<_> = db_inputs.iter().collect();
        let tnet = teacher.pipeline().clone();
        let held_out_target = tnet.describe(teacher.params(), &q_refs).unwrap();

        let mut student = Trainer::student(&teacher_ckpt, &student_cfg, cfg, data).unwrap();
        let snet = student.pipeline().clone();
        let kd = |p: &vpr_core::params::ParamStore<f32>| {
            let s = snet.describe_chunked(p, &q_refs, 1).unwrap();
            distill_loss(s.view(), held_out_target.view()).unwrap() as f64
        };
        let kd_before = kd(student.params());
        student.run(|_, _| Ok(())).unwrap();
        let kd_after = kd(student.params());

        let s_db = store(&db, snet.describe_chunked(student.params(), &db_refs, 1).unwrap());
        let s_q = store(&queries, snet.describe_chunked(student.params(), &q_refs, 1).unwrap());
        let t_db = store(&db, tnet.describe_chunked(teacher.params(), &db_refs, 1).unwrap());
        let t_q = store(&queries, tnet.describe_chunked(teacher.params(), &q_refs, 1).unwrap());

        Outcome {
            teacher: teacher_ckpt,
            student: student.checkpoint(),
            teacher_losses,
            kd_before,
            kd_after,
            student_recall: recall(&s_db, &s_q),
            teacher_recall_b1: recall(&t_db, &t_q),
            student_store: s_db,
        }
    }
}
