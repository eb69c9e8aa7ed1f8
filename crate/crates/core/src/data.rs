//! Place-labeled datasets, `P × K` batch sampling and a synthetic generator.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::TAU;
use std::path::Path;

use ndarray::Array3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Coord {
    Utm { easting: f64, northing: f64 },
    Wgs84 { lat: f64, lon: f64 },
}

impl Coord {
    pub fn system(&self) -> &'static str {
        match self {
            Self::Utm { .. } => "utm",
            Self::Wgs84 { .. } => "wgs84",
        }
    }

    /// The two stored components in manifest order.
    pub fn components(&self) -> (f64, f64) {
        match *self {
            Self::Utm { easting, northing } => (easting, northing),
            Self::Wgs84 { lat, lon } => (lat, lon),
        }
    }

    pub fn from_parts(system: &str, c1: f64, c2: f64) -> Result<Self> {
        if !c1.is_finite() || !c2.is_finite() {
            return Err(Error::Format("coordinates must be finite".into()));
        }
        match system {
            "utm" => Ok(Self::Utm {
                easting: c1,
                northing: c2,
            }),
            "wgs84" => Ok(Self::Wgs84 { lat: c1, lon: c2 }),
            other => Err(Error::Format(format!("unknown coordinate system {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub image_ref: String,
    pub place_id: i64,
    pub coord: Coord,
}

/// Immutable set of records indexed by place.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlaceDataset {
    records: Vec<Record>,
    places: BTreeMap<i64, Vec<usize>>,
}

impl PlaceDataset {
    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut places: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.image_ref.as_str()) {
                return Err(Error::Format(format!("duplicate image_ref {:?}", r.image_ref)));
            }
            places.entry(r.place_id).or_default().push(i);
        }
        Ok(Self { records, places })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn place_ids(&self) -> impl Iterator<Item = i64> + '_ {
        self.places.keys().copied()
    }

    pub fn place_count(&self) -> usize {
        self.places.len()
    }

    /// Record indices of one place, in dataset order.
    pub fn place(&self, id: i64) -> Option<&[usize]> {
        self.places.get(&id).map(Vec::as_slice)
    }

    pub fn position(&self, image_ref: &str) -> Option<usize> {
        self.records.iter().position(|r| r.image_ref == image_ref)
    }

    /// Places with at least `k` images. Smaller places are reported and skipped.
    pub fn eligible_places(&self, k: usize) -> Vec<i64> {
        let mut ids = Vec::new();
        for (&id, members) in &self.places {
            if members.len() >= k {
                ids.push(id);
            } else {
                log::warn!(
                    "place {id} has {} images, fewer than K={k}; excluded from sampling",
                    members.len()
                );
            }
        }
        ids
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::from_records(indices.iter().map(|&i| self.records[i].clone()).collect())
    }

    /// Splits off the last image of every place as a query set.
    pub fn split_last_per_place(&self) -> Result<(Self, Self)> {
        let mut db = Vec::new();
        let mut queries = Vec::new();
        for members in self.places.values() {
            let (last, rest) = members.split_last().expect("places are non-empty");
            db.extend_from_slice(rest);
            queries.push(*last);
        }
        db.sort_unstable();
        queries.sort_unstable();
        Ok((self.subset(&db)?, self.subset(&queries)?))
    }

    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::parse_manifest(file).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse_manifest(input: impl std::io::Read) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(input);
        let mut records = Vec::new();
        for (n, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::Format(format!("manifest: {e}")))?;
            let line = row.position().map(|p| p.line()).unwrap_or(n as u64 + 1);
            if n == 0 && row.get(0) == Some("image_ref") {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("line {line}: {what}"));
            if row.len() != 5 {
                return Err(bad(&format!("expected 5 fields, found {}", row.len())));
            }
            let place_id = row[1]
                .parse::<i64>()
                .map_err(|_| bad(&format!("invalid place_id {:?}", &row[1])))?;
            let c1 = row[3]
                .parse::<f64>()
                .map_err(|_| bad(&format!("invalid coordinate {:?}", &row[3])))?;
            let c2 = row[4]
                .parse::<f64>()
                .map_err(|_| bad(&format!("invalid coordinate {:?}", &row[4])))?;
            let coord = Coord::from_parts(&row[2], c1, c2).map_err(|e| match e {
                Error::Format(m) => bad(&m),
                other => other,
            })?;
            if row[0].is_empty() {
                return Err(bad("empty image_ref"));
            }
            records.push(Record {
                image_ref: row[0].to_string(),
                place_id,
                coord,
            });
        }
        Self::from_records(records)
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.records {
            let (c1, c2) = r.coord.components();
            w.write_record([
                r.image_ref.clone(),
                r.place_id.to_string(),
                r.coord.system().to_string(),
                c1.to_string(),
                c2.to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `P` places × `K` images, grouped by place.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlaceBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<i64>,
}

impl PlaceBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn sample_batch<R: Rng>(dataset: &PlaceDataset, p: usize, k: usize, rng: &mut R) -> Result<PlaceBatch> {
    sample_from(dataset, &dataset.eligible_places(k), p, k, rng)
}

/// Samples from a precomputed list of eligible places.
pub fn sample_from<R: Rng>(
    dataset: &PlaceDataset,
    eligible: &[i64],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<PlaceBatch> {
    if p == 0 || k == 0 {
        return Err(Error::Sampling("P and K must be positive".into()));
    }
    if eligible.len() < p {
        return Err(Error::Sampling(format!(
            "{p} places requested but only {} have at least {k} images",
            eligible.len()
        )));
    }
    let mut batch = PlaceBatch {
        indices: Vec::with_capacity(p * k),
        labels: Vec::with_capacity(p * k),
    };
    for pi in index::sample(rng, eligible.len(), p) {
        let id = eligible[pi];
        let members = dataset.place(id).expect("eligible places exist");
        for mi in index::sample(rng, members.len(), k) {
            batch.indices.push(members[mi]);
            batch.labels.push(id);
        }
    }
    Ok(batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_places: usize,
    pub per_place: usize,
    pub noise: f64,
    pub drift: f64,
    pub image_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_places: 16,
            per_place: 6,
            noise: 0.3,
            drift: 1.0,
            image_size: 56,
        }
    }
}

pub struct SyntheticDataset<T> {
    pub dataset: PlaceDataset,
    /// `3 × S × S` images aligned with the dataset records.
    pub images: Vec<Array3<T>>,
}

/// Spacing between neighboring synthetic places, meters.
pub const PLACE_SPACING_M: f64 = 150.0;
/// Per-image offsets are drawn within this radius of the place center.
pub const PLACE_JITTER_M: f64 = 2.5;

const WAVES: usize = 4;
const EASTING0: f64 = 500_000.0;
const NORTHING0: f64 = 4_000_000.0;

struct Wave {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

fn place_pattern<R: Rng>(rng: &mut R) -> (Vec<Vec<Wave>>, [f64; 3]) {
    let waves = (0..3)
        .map(|_| {
            (0..WAVES)
                .map(|_| Wave {
                    amp: rng.random_range(0.5..1.0),
                    fx: rng.random_range(-3.0..3.0),
                    fy: rng.random_range(-3.0..3.0),
                    phase: rng.random_range(0.0..TAU),
                })
                .collect()
        })
        .collect();
    let bias = [
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    ];
    (waves, bias)
}

pub fn generate_synthetic<T: Scalar>(cfg: &SyntheticConfig) -> Result<SyntheticDataset<T>> {
    if cfg.n_places < 2 || cfg.per_place < 2 {
        return Err(Error::Config("synthetic data needs at least 2 places and 2 images per place".into()));
    }
    if cfg.image_size == 0 || !(cfg.noise >= 0.0) || !(cfg.drift >= 0.0) {
        return Err(Error::Config("image_size must be positive; noise and drift nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let s = cfg.image_size;
    let inv = 1.0 / s as f64;
    let norm = 1.0 / (WAVES as f64).sqrt();
    let mut records = Vec::with_capacity(cfg.n_places * cfg.per_place);
    let mut images = Vec::with_capacity(records.capacity());
    for place in 0..cfg.n_places {
        let (waves, bias) = place_pattern(&mut rng);
        for j in 0..cfg.per_place {
            let gain = 1.0 + 0.5 * cfg.noise * rng.random_range(-1.0..1.0);
            let shift = cfg.noise * rng.random_range(-1.0..1.0);
            let dx = cfg.drift * std.sample(&mut rng);
            let dy = cfg.drift * std.sample(&mut rng);
            let mut img = Array3::<T>::zeros((3, s, s));
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let (u, v) = ((x as f64 + dx) * inv, (y as f64 + dy) * inv);
                        let base: f64 = waves[c]
                            .iter()
                            .map(|w| w.amp * (TAU * (w.fx * u + w.fy * v) + w.phase).sin())
                            .sum::<f64>()
                            * norm
                            + bias[c];
                        let e = if cfg.noise > 0.0 { cfg.noise * std.sample(&mut rng) } else { 0.0 };
                        img[[c, y, x]] = T::lit(gain * base + shift + e);
                    }
                }
            }
            images.push(img);
            let r = PLACE_JITTER_M * rng.random_range(0.0f64..1.0).sqrt();
            let theta = rng.random_range(0.0..TAU);
            records.push(Record {
                image_ref: format!("p{place:04}_i{j:03}"),
                place_id: place as i64,
                coord: Coord::Utm {
                    easting: EASTING0 + PLACE_SPACING_M * place as f64 + r * theta.cos(),
                    northing: NORTHING0 + r * theta.sin(),
                },
            });
        }
    }
    Ok(SyntheticDataset {
        dataset: PlaceDataset::from_records(records)?,
        images,
    })
}
