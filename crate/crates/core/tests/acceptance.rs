//! Acceptance suite: one line per criterion, nonzero exit on any failure.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{array, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vpr_core::aggregation::gem_pool;
use vpr_core::backbone::{Backbone, BackboneConfig};
use vpr_core::data::{generate_synthetic, Coord, SyntheticConfig};
use vpr_core::fusion::{FusionConfig, CONV_BIAS, CONV_WEIGHT};
use vpr_core::losses::{distill_loss, ms_loss, MsLossConfig};
use vpr_core::model::{stack_images, ModelConfig, Pipeline};
use vpr_core::ops::max_abs_diff;
use vpr_core::retrieval::{fit_pca, knn_search, recall_at_n, GroundTruth, RetrievalIndex};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Describes `inputs` under a batch composition and returns rows in input order.
fn compose(net: &Pipeline, params: &vpr_core::params::ParamStore<f32>, inputs: &[Array2<f32>], batch: usize, shuffle: Option<u64>) -> Array2<f32> {
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    if let Some(seed) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let refs: Vec<_> = order.iter().map(|&i| &inputs[i]).collect();
    let d = net.describe_chunked(params, &refs, batch).unwrap();
    let mut out = Array2::zeros(d.raw_dim());
    for (row, &i) in order.iter().enumerate() {
        out.row_mut(i).assign(&d.row(row));
    }
    out
}

fn batch_spread(cfg: ModelConfig, seed: u64) -> f32 {
    let syn = generate_synthetic::<f32>(&SyntheticConfig {
        seed: 11,
        n_places: 8,
        per_place: 4,
        ..Default::default()
    })
    .unwrap();
    let net = Pipeline::new(cfg.clone()).unwrap();
    let backbone = Backbone::<f32>::new(cfg.backbone.clone()).unwrap();
    let inputs = stack_images(&net, &backbone, &syn.images).unwrap();
    assert_eq!(inputs.len(), 32);
    let params = net.init_params::<f32>(seed);
    let reference = compose(&net, &params, &inputs, 1, None);
    [
        compose(&net, &params, &inputs, 2, None),
        compose(&net, &params, &inputs, 8, None),
        compose(&net, &params, &inputs, 8, Some(5)),
    ]
    .iter()
    .map(|d| max_abs_diff(reference.view(), d.view()))
    .fold(0.0, f32::max)
}

fn c1_student_batch_invariance() -> Outcome {
    let cfg = ModelConfig::student(BackboneConfig::default(), FusionConfig::default());
    let spread = batch_spread(cfg, 21);
    ensure(spread <= 1e-5, || format!("student descriptors moved by {spread:e}"))?;
    Ok(format!("max-abs spread {spread:e} over batches {{1, 2, 8, shuffled 8}}"))
}

fn c2_teacher_batch_sensitivity() -> Outcome {
    let cfg = ModelConfig::teacher(BackboneConfig::default(), FusionConfig::default());
    let spread = batch_spread(cfg, 21);
    ensure(spread > 1e-3, || format!("teacher descriptors moved only {spread:e}"))?;
    Ok(format!("max-abs change {spread:e} when batchmates change"))
}

fn c3_gradients() -> Outcome {
    let mut parts = Vec::new();
    for (name, suite) in common::GRADIENT_SUITES {
        let err = common::worst_error(suite);
        ensure(err <= common::GRAD_TOL, || format!("{name}: relative error {err:e}"))?;
        parts.push(format!("{name} {err:.1e}"));
    }
    Ok(format!("{} instances each, worst: {}", common::INSTANCES, parts.join(", ")))
}

fn c4_closed_form_losses() -> Outcome {
    let d = array![[1.0f64, 0.0], [0.0, 1.0], [0.0, -1.0], [-1.0, 0.0]];
    let out = ms_loss(d.view(), &[0, 0, 1, 1], &MsLossConfig::default()).unwrap();
    let expect = 2f64.ln() + 2f64.ln() / 50.0;
    ensure((out.loss - expect).abs() <= 1e-9, || format!("ms loss {} vs {expect}", out.loss))?;

    let a = array![[0.5f64, -1.0], [2.0, 3.0]];
    ensure(distill_loss(a.view(), a.view()).unwrap() == 0.0, || "identical inputs".into())?;
    let b = array![[0.5f64, -1.0], [2.0, 4.0]];
    let half = distill_loss(a.view(), b.view()).unwrap();
    ensure(half == 0.5, || format!("one unit difference gave {half}"))?;
    let s = array![[3.0f64, 4.0]];
    let z = array![[0.0f64, 0.0]];
    let v = distill_loss(s.view(), z.view()).unwrap();
    ensure(v == 25.0, || format!("(3,4) gave {v}"))?;
    Ok(format!("ms loss {:.12} (|Δ| {:.1e}); distill 0, 0.5, 25 exact", out.loss, (out.loss - expect).abs()))
}

fn random_region(rng: &mut ChaCha8Rng, max_side: usize) -> Array3<f64> {
    let (h, w) = (rng.random_range(1..=max_side), rng.random_range(2..=max_side));
    Array3::from_shape_simple_fn((4, h, w), || rng.random_range(0.01..1.0))
}

fn c5_gem_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst_max = 0.0f64;
    for _ in 0..100 {
        let region = random_region(&mut rng, 5);
        let p1 = gem_pool(region.view(), 1.0).unwrap();
        for (c, plane) in region.outer_iter().enumerate() {
            let mean = plane.iter().fold(0.0, |a, &v| a + v) / plane.len() as f64;
            ensure(p1[c] == mean, || format!("p=1 gave {} vs mean {mean}", p1[c]))?;
        }
        let ys: Vec<_> = [1.0, 2.0, 3.0, 10.0]
            .iter()
            .map(|&p| gem_pool(region.view(), p).unwrap())
            .collect();
        for pair in ys.windows(2) {
            ensure(pair[0].iter().zip(&pair[1]).all(|(a, b)| a < b), || "not increasing in p".into())?;
        }
        // Level-2/3 region sizes of the desk grid (at most 2×2 tokens).
        let small = Array3::from_shape_simple_fn((4, 2, rng.random_range(1..=2)), || rng.random_range(0.01..1.0));
        let y = gem_pool(small.view(), 100.0).unwrap();
        for (c, plane) in small.outer_iter().enumerate() {
            let max = plane.iter().fold(0.0f64, |m, &v| m.max(v));
            worst_max = worst_max.max((max - y[c]) / max);
        }
    }
    ensure(worst_max <= 0.02, || format!("p=100 deviates from max by {worst_max}"))?;
    Ok(format!("100 regions; p=1 exact, monotone over {{1,2,3,10}}, p=100 within {:.2}% of max", 100.0 * worst_max))
}

fn c6_retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for inst in 0..200 {
        let n = rng.random_range(1..=1000);
        let d = rng.random_range(2..=16);
        let mut x = common::normal(&mut rng, n, d);
        for i in 0..n / 10 {
            let src = x.row(rng.random_range(0..n)).to_owned();
            x.row_mut(i).assign(&src);
        }
        for mut r in x.outer_iter_mut() {
            let norm = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / norm);
        }
        let mut ids: Vec<String> = (0..n).map(|i| format!("id{:05}", i * 7919 % 100_003)).collect();
        ids.shuffle(&mut rng);
        let index = RetrievalIndex::new(x.clone(), ids.clone(), vec![Coord::Utm { easting: 0.0, northing: 0.0 }; n]).unwrap();
        let q = x.row(rng.random_range(0..n)).to_owned();
        let k = rng.random_range(1..=n.min(20));
        let got: Vec<usize> = knn_search(&index, q.view(), k).unwrap().iter().map(|h| h.index).collect();
        let sims = x.dot(&q);
        let mut all: Vec<usize> = (0..n).collect();
        all.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then_with(|| ids[a].cmp(&ids[b])));
        ensure(got == all[..k], || format!("instance {inst}: ranking differs from brute force"))?;
    }

    let db: Vec<String> = (0..20).map(|i| format!("d{i}")).collect();
    let coords: Vec<Coord> = (0..20).map(|i| Coord::Utm { easting: 10.0 * i as f64, northing: 0.0 }).collect();
    let queries: Vec<Coord> = (0..30).map(|_| Coord::Utm { easting: rng.random_range(0.0..200.0), northing: 0.0 }).collect();
    let results: Vec<Vec<String>> = (0..30)
        .map(|_| {
            let mut r = db.clone();
            r.shuffle(&mut rng);
            r
        })
        .collect();
    let truth = GroundTruth::geographic(queries, &db, &coords, 5.0);
    let ns: Vec<usize> = (1..=20).collect();
    let recall = recall_at_n(&results, &truth, &ns).unwrap();
    let values: Vec<f64> = recall.values().copied().collect();
    ensure(values.windows(2).all(|w| w[0] <= w[1]), || format!("recall not monotone: {values:?}"))?;

    let one = vec!["x".to_string()];
    let inclusive = GroundTruth::geographic(vec![Coord::Utm { easting: 0.0, northing: 0.0 }], &one, &[Coord::Utm { easting: 15.0, northing: 20.0 }], 25.0);
    let r = recall_at_n(std::slice::from_ref(&one), &inclusive, &[1]).unwrap();
    ensure(r[&1] == 100.0, || "prediction at exactly 25 m not counted".into())?;
    let outside = GroundTruth::geographic(vec![Coord::Utm { easting: 0.0, northing: 0.0 }], &one, &[Coord::Utm { easting: 25.001, northing: 0.0 }], 25.0);
    ensure(recall_at_n(&[one], &outside, &[1]).unwrap()[&1] == 0.0, || "25.001 m counted".into())?;
    Ok("200 brute-force instances match; recall monotone over N=1..20; 25.0 m counted, 25.001 m not".into())
}

fn orthonormality_error(c: &Array2<f64>) -> f64 {
    let g = c.dot(&c.t());
    g.indexed_iter()
        .map(|((i, j), &v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

fn c7_pca() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = common::normal(&mut rng, 60, 24);
    let pca = fit_pca(x.view(), 12).unwrap();
    let ortho = orthonormality_error(&pca.components);
    ensure(ortho <= 1e-5, || format!("orthonormality error {ortho:e}"))?;
    let eig = pca.eigenvalues.to_vec();
    ensure(eig.windows(2).all(|w| w[0] >= w[1]) && eig.iter().all(|&l| l >= 0.0), || "eigenvalues not descending".into())?;

    let basis = common::normal(&mut rng, 2, 5);
    let offset = common::normal(&mut rng, 1, 5);
    let coeffs = common::normal(&mut rng, 30, 2);
    let plane = coeffs.dot(&basis) + &offset;
    let pca2 = fit_pca(plane.view(), 2).unwrap();
    let centered = &plane - &pca2.mean;
    let recon = centered.dot(&pca2.components.t()).dot(&pca2.components);
    let rec_err = (&centered - &recon).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure(rec_err <= 1e-8, || format!("planted plane reconstruction error {rec_err:e}"))?;

    let full = ModelConfig::teacher(
        BackboneConfig {
            image_size: 224,
            patch_size: 14,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            seed: 0,
        },
        FusionConfig {
            out_channels: 768,
            ..Default::default()
        },
    );
    let dim = full.descriptor_dim();
    ensure(dim == 10752, || format!("descriptor length {dim}"))?;
    let big = common::normal(&mut rng, 100, dim).mapv(|v| v as f32);
    let model = fit_pca(big.view(), 4096).unwrap();
    let total: f64 = {
        let b = big.mapv(|v| v as f64);
        let mean = b.mean_axis(Axis(0)).unwrap();
        let c = &b - &mean;
        c.iter().map(|v| v * v).sum::<f64>() / 99.0
    };
    let captured: f64 = model.eigenvalues.iter().map(|&l| l as f64).sum();
    let rel = (captured - total).abs() / total;
    ensure(rel <= 1e-4, || format!("captured variance {captured} vs trace {total}"))?;
    let y = model.project(big.row(0)).unwrap();
    let norm = y.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    ensure(y.len() == 4096 && (norm - 1.0).abs() <= 1e-6, || format!("projection length {} norm {norm}", y.len()))?;
    let sample = model.components.slice(ndarray::s![..;64, ..]).mapv(|v| v as f64);
    let ortho_big = orthonormality_error(&sample);
    ensure(ortho_big <= 1e-5, || format!("10752→4096 orthonormality error {ortho_big:e}"))?;
    Ok(format!(
        "orthonormality {ortho:.1e}; plane recovery {rec_err:.1e}; 10752→4096 captured/total variance Δ {rel:.1e}"
    ))
}

fn c8_desk_distillation(run: &common::desk::Outcome) -> Outcome {
    let first = run.teacher_losses[0];
    let last = *run.teacher_losses.last().unwrap();
    ensure(last < first, || format!("teacher loss {first} → {last}"))?;
    let ratio = run.kd_after / run.kd_before;
    ensure(ratio <= 0.5, || format!("held-out distill loss ratio {ratio}"))?;
    let (s, t) = (run.student_recall[&1], run.teacher_recall_b1[&1]);
    ensure(s >= t - 2.0, || format!("student R@1 {s} vs teacher(batch 1) R@1 {t}"))?;
    let conv_equal = [CONV_WEIGHT, CONV_BIAS]
        .iter()
        .all(|n| run.teacher.params.get(n).unwrap() == run.student.params.get(n).unwrap());
    ensure(conv_equal, || "student conv(1,1) differs from teacher".into())?;
    Ok(format!(
        "teacher loss {first:.4} → {last:.4}; held-out distill {:.4} → {:.4} ({:.0}%); R@1 student {s:.1} vs teacher(b=1) {t:.1}",
        run.kd_before,
        run.kd_after,
        100.0 * ratio
    ))
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in walk(dir) {
        let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        out.insert(rel, std::fs::read(&entry).unwrap());
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

fn c9_determinism(first: &common::desk::Outcome) -> Outcome {
    let second = common::desk::run(&common::desk::train_config());
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for (i, run) in [first, &second].iter().enumerate() {
        let root = tmp.path().join(format!("run{i}"));
        run.teacher.save(&root.join("teacher")).unwrap();
        run.student.save(&root.join("student")).unwrap();
        run.student_store.write(&root.join("db.scvd")).unwrap();
        trees.push(dir_bytes(&root));
    }
    ensure(trees[0] == trees[1], || "checkpoint or descriptor bytes differ between runs".into())?;
    Ok(format!("{} files bitwise identical across two runs", trees[0].len()))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed: Duration = start.elapsed();
        match result {
            Ok(detail) => println!("criterion {id} PASS {name}: {detail} [{:.1}s]", elapsed.as_secs_f64()),
            Err(why) => {
                failures += 1;
                println!("criterion {id} FAIL {name}: {why} [{:.1}s]", elapsed.as_secs_f64());
            }
        }
    };
    report(1, "student batch invariance", &mut c1_student_batch_invariance);
    report(2, "teacher batch sensitivity", &mut c2_teacher_batch_sensitivity);
    report(3, "gradient suite", &mut c3_gradients);
    report(4, "closed-form losses", &mut c4_closed_form_losses);
    report(5, "GeM properties", &mut c5_gem_properties);
    report(6, "retrieval oracle", &mut c6_retrieval_oracle);
    report(7, "PCA", &mut c7_pca);
    let start = Instant::now();
    let run = catch_unwind(|| common::desk::run(&common::desk::train_config()));
    let desk_time = start.elapsed().as_secs_f64();
    match &run {
        Ok(run) => {
            report(8, "desk-scale distillation", &mut || {
                c8_desk_distillation(run).map(|d| format!("{d}; pipeline {desk_time:.1}s"))
            });
            report(9, "determinism", &mut || c9_determinism(run));
        }
        Err(_) => {
            report(8, "desk-scale distillation", &mut || Err("pipeline panicked".into()));
            report(9, "determinism", &mut || Err("pipeline panicked".into()));
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 9 acceptance criteria passed");
}
