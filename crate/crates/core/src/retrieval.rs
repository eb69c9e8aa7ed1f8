//! PCA compression, exhaustive nearest-neighbor search, Recall@N and the
//! `SCVD` descriptor store.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::aggregation::normalize;
use crate::data::Coord;
use crate::format::{read_exact, read_f64, read_matrix, read_u32, read_u64, write_matrix, FORMAT_VERSION};
use crate::ops;
use crate::{Error, Result, Scalar};

/// Mean radius used for haversine distances, meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;
pub const DEFAULT_THRESHOLD_M: f64 = 25.0;
pub const UNIT_ROW_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel<T> {
    pub mean: Array1<T>,
    /// `d_out × D_in`, orthonormal rows.
    pub components: Array2<T>,
    /// Descending, nonnegative.
    pub eigenvalues: Array1<T>,
}

fn to_dmatrix(x: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[[r, c]])
}

/// Eigenpairs of a symmetric matrix, largest eigenvalue first.
fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<_> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &l)| (l.max(0.0), eig.eigenvectors.column(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// Extends `basis` (orthonormal rows) to `target` rows with vectors spanning
/// part of its orthogonal complement, using Householder reflections.
fn complete_basis(basis: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    let r = basis.len();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut work: Vec<Vec<f64>> = basis.clone();
    for k in 0..r {
        for vj in &reflectors {
            let col = &mut work[k];
            let d: f64 = vj.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
            col.iter_mut().zip(vj).for_each(|(c, v)| *c -= 2.0 * d * v);
        }
        let col = &work[k];
        let tail: f64 = col[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        let alpha = if col[k] > 0.0 { -tail } else { tail };
        let mut v = vec![0.0; dim];
        v[k..].copy_from_slice(&col[k..]);
        v[k] -= alpha;
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vn > 0.0 {
            v.iter_mut().for_each(|x| *x /= vn);
        }
        reflectors.push(v);
    }
    let rows: Vec<Vec<f64>> = (r..target)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            for v in reflectors.iter().rev() {
                let d: f64 = v.iter().zip(&e).map(|(a, b)| a * b).sum();
                e.iter_mut().zip(v).for_each(|(x, vi)| *x -= 2.0 * d * vi);
            }
            e
        })
        .collect();
    basis.extend(rows);
}

/// Fits PCA on the rows of `descriptors` and keeps the top `d_out` components.
///
/// When `d_out` exceeds the rank of the centered data, the trailing components
/// are an arbitrary orthonormal completion with eigenvalue zero.
pub fn fit_pca<T: Scalar>(descriptors: ArrayView2<'_, T>, d_out: usize) -> Result<PcaModel<T>> {
    let (n, d_in) = descriptors.dim();
    if d_out == 0 || d_out > d_in {
        return Err(Error::Rank(format!("d_out = {d_out} must lie in [1, {d_in}]")));
    }
    if n < 2 {
        return Err(Error::Rank(format!("PCA needs at least 2 samples, got {n}")));
    }
    let x = descriptors.mapv(|v| v.as_f64());
    let mean = x.mean_axis(Axis(0)).expect("n ≥ 2");
    let xc = &x - &mean;
    let denom = (n - 1) as f64;

    let (values, mut basis): (Vec<f64>, Vec<Vec<f64>>) = if d_in <= n {
        let cov = xc.t().dot(&xc) / denom;
        sorted_eigen(to_dmatrix(&cov)).into_iter().take(d_out).unzip()
    } else {
        let gram = xc.dot(&xc.t()) / denom;
        let pairs = sorted_eigen(to_dmatrix(&gram));
        let top = pairs.first().map(|p| p.0).unwrap_or(0.0);
        let tol = top * 1e-10 * n as f64;
        let mut values = Vec::new();
        let mut basis = Vec::new();
        for (l, u) in pairs.into_iter().take(d_out) {
            if l <= tol {
                break;
            }
            let u = Array1::from(u);
            let mut v = xc.t().dot(&u);
            let vn = v.dot(&v).sqrt();
            v.mapv_inplace(|a| a / vn);
            values.push(l);
            basis.push(v.to_vec());
        }
        (values, basis)
    };
    let mut values = values;
    if basis.len() < d_out {
        log::warn!(
            "PCA: data rank {} below d_out = {d_out}; completing with zero-variance directions",
            basis.len()
        );
        complete_basis(&mut basis, d_in, d_out);
        values.resize(d_out, 0.0);
    }
    let components = Array2::from_shape_fn((d_out, d_in), |(r, c)| T::lit(basis[r][c]));
    Ok(PcaModel {
        mean: mean.mapv(T::lit),
        components,
        eigenvalues: values.into_iter().map(T::lit).collect(),
    })
}

pub const PCA_MEAN: &str = "pca.mean";
pub const PCA_COMPONENTS: &str = "pca.components";
pub const PCA_EIGENVALUES: &str = "pca.eigenvalues";

impl<T: Scalar> PcaModel<T> {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn project(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "descriptor has length {}, PCA expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let centered = &x - &self.mean;
        normalize(self.components.dot(&centered))
    }

    pub fn project_rows(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let mut out = Array2::zeros((x.nrows(), self.output_dim()));
        for (i, row) in x.outer_iter().enumerate() {
            out.row_mut(i).assign(&self.project(row)?);
        }
        Ok(out)
    }

    /// Writes `pca.mean`, `pca.components` and `pca.eigenvalues` tensor files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let row = |a: &Array1<T>| a.clone().insert_axis(Axis(0));
        write_matrix(&dir.join(format!("{PCA_MEAN}.scvf")), &row(&self.mean))?;
        write_matrix(&dir.join(format!("{PCA_COMPONENTS}.scvf")), &self.components)?;
        write_matrix(&dir.join(format!("{PCA_EIGENVALUES}.scvf")), &row(&self.eigenvalues))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mean: Array2<T> = read_matrix(&dir.join(format!("{PCA_MEAN}.scvf")))?;
        let components: Array2<T> = read_matrix(&dir.join(format!("{PCA_COMPONENTS}.scvf")))?;
        let eig: Array2<T> = read_matrix(&dir.join(format!("{PCA_EIGENVALUES}.scvf")))?;
        if mean.nrows() != 1 || eig.nrows() != 1 || components.ncols() != mean.ncols() || components.nrows() != eig.ncols()
        {
            return Err(Error::Format("inconsistent PCA tensor shapes".into()));
        }
        Ok(Self {
            mean: mean.row(0).to_owned(),
            components,
            eigenvalues: eig.row(0).to_owned(),
        })
    }
}

/// Database of unit-norm descriptors with their ids and coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex<T> {
    descriptors: Array2<T>,
    ids: Vec<String>,
    coords: Vec<Coord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit<T> {
    pub index: usize,
    pub similarity: T,
}

impl<T: Scalar> RetrievalIndex<T> {
    pub fn new(descriptors: Array2<T>, ids: Vec<String>, coords: Vec<Coord>) -> Result<Self> {
        if ids.len() != descriptors.nrows() || coords.len() != descriptors.nrows() {
            return Err(Error::Shape(format!(
                "{} descriptors, {} ids, {} coordinates",
                descriptors.nrows(),
                ids.len(),
                coords.len()
            )));
        }
        for (i, row) in descriptors.outer_iter().enumerate() {
            let n = ops::norm(row).as_f64();
            if (n - 1.0).abs() > UNIT_ROW_TOL {
                return Err(Error::Input(format!("database row {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self {
            descriptors,
            ids,
            coords,
        })
    }

    pub fn from_store(store: &DescriptorStore<T>) -> Result<Self> {
        Self::new(store.descriptors.clone(), store.ids.clone(), store.coords.clone())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn descriptors(&self) -> &Array2<T> {
        &self.descriptors
    }
}

fn rank_order<T: Scalar>(ids: &[String]) -> impl Fn(&Hit<T>, &Hit<T>) -> Ordering + '_ {
    move |a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a.index].cmp(&ids[b.index]))
    }
}

/// Top-`n` database entries by dot product, ties broken by ascending id.
pub fn knn_search<T: Scalar>(index: &RetrievalIndex<T>, query: ArrayView1<'_, T>, n: usize) -> Result<Vec<Hit<T>>> {
    if n > index.len() {
        return Err(Error::Query(format!("requested {n} neighbors from an index of {}", index.len())));
    }
    if query.len() != index.dim() {
        return Err(Error::Shape(format!(
            "query has length {}, index dim is {}",
            query.len(),
            index.dim()
        )));
    }
    let sims = index.descriptors.dot(&query);
    let mut hits: Vec<Hit<T>> = sims
        .iter()
        .enumerate()
        .map(|(i, &s)| Hit { index: i, similarity: s })
        .collect();
    let cmp = rank_order(&index.ids);
    if n < hits.len() && n > 0 {
        hits.select_nth_unstable_by(n - 1, &cmp);
        hits.truncate(n);
    } else if n == 0 {
        hits.clear();
    }
    hits.sort_by(&cmp);
    Ok(hits)
}

/// Ranked ids for every row of `queries`; queries run in parallel.
pub fn search_all<T: Scalar>(index: &RetrievalIndex<T>, queries: ArrayView2<'_, T>, n: usize) -> Result<Vec<Vec<String>>> {
    let rows: Vec<_> = queries.outer_iter().collect();
    rows.into_par_iter()
        .map(|q| {
            knn_search(index, q, n).map(|hits| hits.into_iter().map(|h| index.ids[h.index].clone()).collect())
        })
        .collect()
}

pub fn distance_m(a: &Coord, b: &Coord) -> Result<f64> {
    match (a, b) {
        (
            Coord::Utm {
                easting: e1,
                northing: n1,
            },
            Coord::Utm {
                easting: e2,
                northing: n2,
            },
        ) => Ok((e1 - e2).hypot(n1 - n2)),
        (Coord::Wgs84 { lat: la1, lon: lo1 }, Coord::Wgs84 { lat: la2, lon: lo2 }) => {
            let (p1, p2) = (la1.to_radians(), la2.to_radians());
            let dp = p2 - p1;
            let dl = (lo2 - lo1).to_radians();
            let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
            Ok(2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin())
        }
        _ => Err(Error::Evaluation("cannot compare UTM and WGS84 coordinates".into())),
    }
}

pub enum GroundTruth {
    /// Correct iff the prediction lies within `threshold_m` (inclusive) of the query.
    Geographic {
        queries: Vec<Coord>,
        database: HashMap<String, Coord>,
        threshold_m: f64,
    },
    /// Correct iff the prediction is the query's designated counterpart.
    Pairs {
        counterparts: Vec<String>,
        database: HashSet<String>,
    },
}

impl GroundTruth {
    pub fn geographic(queries: Vec<Coord>, ids: &[String], coords: &[Coord], threshold_m: f64) -> Self {
        Self::Geographic {
            queries,
            database: ids.iter().cloned().zip(coords.iter().copied()).collect(),
            threshold_m,
        }
    }

    fn query_count(&self) -> usize {
        match self {
            Self::Geographic { queries, .. } => queries.len(),
            Self::Pairs { counterparts, .. } => counterparts.len(),
        }
    }

    fn is_match(&self, q: usize, id: &str) -> Result<bool> {
        match self {
            Self::Geographic {
                queries,
                database,
                threshold_m,
            } => {
                let c = database
                    .get(id)
                    .ok_or_else(|| Error::Evaluation(format!("unknown database id {id:?}")))?;
                Ok(distance_m(&queries[q], c)? <= *threshold_m)
            }
            Self::Pairs {
                counterparts,
                database,
            } => {
                if !database.contains(id) {
                    return Err(Error::Evaluation(format!("unknown database id {id:?}")));
                }
                Ok(counterparts[q] == id)
            }
        }
    }
}

/// Percentage of queries with a correct prediction in their first `N` results.
pub fn recall_at_n(results: &[Vec<String>], truth: &GroundTruth, ns: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if results.is_empty() {
        return Err(Error::Evaluation("no queries".into()));
    }
    if results.len() != truth.query_count() {
        return Err(Error::Evaluation(format!(
            "{} result lists for {} queries",
            results.len(),
            truth.query_count()
        )));
    }
    let max_n = ns.iter().copied().max().unwrap_or(0);
    if ns.contains(&0) {
        return Err(Error::Evaluation("N must be at least 1".into()));
    }
    let mut first_hit = Vec::with_capacity(results.len());
    for (q, ranked) in results.iter().enumerate() {
        if ranked.len() < max_n {
            return Err(Error::Evaluation(format!(
                "query {q} has {} results, need {max_n}",
                ranked.len()
            )));
        }
        let mut hit = None;
        for (rank, id) in ranked.iter().enumerate() {
            if truth.is_match(q, id)? && hit.is_none() {
                hit = Some(rank);
            }
        }
        first_hit.push(hit);
    }
    let total = results.len() as f64;
    Ok(ns
        .iter()
        .map(|&n| {
            let hits = first_hit.iter().filter(|h| matches!(h, Some(r) if *r < n)).count();
            (n, 100.0 * hits as f64 / total)
        })
        .collect())
}

pub const STORE_MAGIC: &[u8; 4] = b"SCVD";

/// Descriptors with ids and coordinates, persisted in the `SCVD` layout:
///
/// ```text
/// "SCVD"  u32 version=1  u32 dim  u64 count  count·dim × f32
/// count × (u32 id_len, id bytes, f64 c1, f64 c2, u8 coord_system)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorStore<T> {
    pub descriptors: Array2<T>,
    pub ids: Vec<String>,
    pub coords: Vec<Coord>,
}

fn coord_code(c: &Coord) -> u8 {
    match c {
        Coord::Utm { .. } => 0,
        Coord::Wgs84 { .. } => 1,
    }
}

impl<T: Scalar> DescriptorStore<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let (count, dim) = self.descriptors.dim();
        if self.ids.len() != count || self.coords.len() != count {
            return Err(Error::Format("ids and coordinates must match descriptor count".into()));
        }
        let mut out = Vec::with_capacity(20 + 4 * count * dim + count * 32);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for v in self.descriptors.iter() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        for (id, c) in self.ids.iter().zip(&self.coords) {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            let (c1, c2) = c.components();
            out.extend_from_slice(&c1.to_le_bytes());
            out.extend_from_slice(&c2.to_le_bytes());
            out.push(coord_code(c));
        }
        Ok(out)
    }

    pub fn decode(mut bytes: &[u8]) -> Result<Self> {
        let src = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact(src, &mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(Error::Format("bad magic, expected SCVD".into()));
        }
        let version = read_u32(src)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = read_u32(src)? as usize;
        let count = usize::try_from(read_u64(src)?).map_err(|_| Error::Format("count overflows".into()))?;
        let n = count
            .checked_mul(dim)
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= src.len()))
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let mut raw = vec![0u8; 4 * n];
        read_exact(src, &mut raw)?;
        let values: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let mut ids = Vec::with_capacity(count);
        let mut coords = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(src)? as usize;
            if len > src.len() {
                return Err(Error::Format("unexpected end of file".into()));
            }
            let mut id = vec![0u8; len];
            read_exact(src, &mut id)?;
            let id = String::from_utf8(id).map_err(|_| Error::Format("id is not valid UTF-8".into()))?;
            let c1 = read_f64(src)?;
            let c2 = read_f64(src)?;
            let mut code = [0u8; 1];
            read_exact(src, &mut code)?;
            let system = match code[0] {
                0 => "utm",
                1 => "wgs84",
                other => return Err(Error::Format(format!("unknown coordinate system code {other}"))),
            };
            ids.push(id);
            coords.push(Coord::from_parts(system, c1, c2)?);
        }
        if !src.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", src.len())));
        }
        Ok(Self {
            descriptors: Array2::from_shape_vec((count, dim), values).expect("length checked"),
            ids,
            coords,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
