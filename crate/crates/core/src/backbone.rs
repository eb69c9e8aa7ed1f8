//! Frozen multi-layer patch-token features.
//!
//! [`Backbone`] is a small, deterministically initialized ViT used in place of a
//! real foundation model; [`FeatureArchive`] reads and writes precomputed
//! per-layer token maps so exported features from any model can be used instead.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::format::{TensorBlock, TensorFile};
use crate::ops;
use crate::params::{fan_in_uniform, ParamStore};
use crate::{Error, Result, Scalar, ValidationError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 56,
            patch_size: 14,
            embed_dim: 64,
            depth: 6,
            heads: 4,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate_into(&self, prefix: &str, err: &mut ValidationError) {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            err.push(format!("{prefix}.image_size"), "must be a positive multiple of patch_size");
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            err.push(format!("{prefix}.embed_dim"), "must be divisible by heads");
        }
        if self.depth == 0 {
            err.push(format!("{prefix}.depth"), "must be at least 1");
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut err = ValidationError::default();
        self.validate_into("backbone", &mut err);
        err.into_result()
    }
}

/// One layer's patch tokens arranged as a `channels × H × W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMap<T> {
    pub data: Array3<T>,
    pub layer_index: usize,
}

impl<T: Scalar> TokenMap<T> {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Tokens as rows (`H·W × channels`), row-major over the grid.
    pub fn to_token_rows(&self) -> Array2<T> {
        let (c, h, w) = self.data.dim();
        let mut out = Array2::zeros((h * w, c));
        for i in 0..h {
            for j in 0..w {
                out.row_mut(i * w + j).assign(&self.data.slice(s![.., i, j]));
            }
        }
        out
    }

    pub fn from_token_rows(rows: &Array2<T>, h: usize, w: usize, layer_index: usize) -> Self {
        let c = rows.ncols();
        let mut data = Array3::zeros((c, h, w));
        for i in 0..h {
            for j in 0..w {
                data.slice_mut(s![.., i, j]).assign(&rows.row(i * w + j));
            }
        }
        Self { data, layer_index }
    }
}

pub const BACKBONE_LN_EPS: f64 = 1e-6;
const MLP_RATIO: usize = 4;

/// Frozen stand-in vision transformer. Parameters never change after construction.
#[derive(Clone, Debug)]
pub struct Backbone<T: Scalar> {
    cfg: BackboneConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.embed_dim;
        let patch_len = 3 * cfg.patch_size * cfg.patch_size;
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        let mut p = ParamStore::new();
        p.insert("backbone.patch_embed.weight", fan_in_uniform(&mut rng, c, patch_len, patch_len));
        p.insert("backbone.patch_embed.bias", fan_in_uniform(&mut rng, 1, c, patch_len));
        p.insert(
            "backbone.cls_token",
            Array2::from_shape_simple_fn((1, c), || T::lit(small.sample(&mut rng))),
        );
        p.insert(
            "backbone.pos_embed",
            Array2::from_shape_simple_fn((cfg.tokens() + 1, c), || T::lit(small.sample(&mut rng))),
        );
        let hidden = MLP_RATIO * c;
        for l in 0..cfg.depth {
            let pre = format!("backbone.blocks.{l}");
            for ln in ["ln1", "ln2"] {
                p.insert(format!("{pre}.{ln}.gain"), Array2::ones((1, c)));
                p.insert(format!("{pre}.{ln}.bias"), Array2::zeros((1, c)));
            }
            for proj in ["q", "k", "v", "o"] {
                p.insert(format!("{pre}.attn.w{proj}"), fan_in_uniform(&mut rng, c, c, c));
                p.insert(format!("{pre}.attn.b{proj}"), Array2::zeros((1, c)));
            }
            p.insert(format!("{pre}.mlp.w1"), fan_in_uniform(&mut rng, hidden, c, c));
            p.insert(format!("{pre}.mlp.b1"), Array2::zeros((1, hidden)));
            p.insert(format!("{pre}.mlp.w2"), fan_in_uniform(&mut rng, c, hidden, hidden));
            p.insert(format!("{pre}.mlp.b2"), Array2::zeros((1, c)));
        }
        p.insert("backbone.norm.gain", Array2::ones((1, c)));
        p.insert("backbone.norm.bias", Array2::zeros((1, c)));
        Ok(Self { cfg, params: p })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn p(&self, name: &str) -> &Array2<T> {
        self.params.get(name).expect("backbone parameter exists")
    }

    fn patchify(&self, image: ArrayView3<'_, T>) -> Array2<T> {
        let ps = self.cfg.patch_size;
        let g = self.cfg.grid();
        let mut out = Array2::zeros((g * g, 3 * ps * ps));
        for gi in 0..g {
            for gj in 0..g {
                let patch = image.slice(s![.., gi * ps..(gi + 1) * ps, gj * ps..(gj + 1) * ps]);
                for (o, &v) in out.row_mut(gi * g + gj).iter_mut().zip(patch.iter()) {
                    *o = v;
                }
            }
        }
        out
    }

    fn block(&self, l: usize, z: &Array2<T>) -> Array2<T> {
        let pre = format!("backbone.blocks.{l}");
        let p = |n: &str| self.p(&format!("{pre}.{n}"));
        let eps = T::lit(BACKBONE_LN_EPS);
        let h = ops::layer_norm_rows(z.view(), p("ln1.gain").row(0), p("ln1.bias").row(0), eps).y;
        let q = ops::linear(h.view(), p("attn.wq").view(), Some(p("attn.bq").view()));
        let k = ops::linear(h.view(), p("attn.wk").view(), Some(p("attn.bk").view()));
        let v = ops::linear(h.view(), p("attn.wv").view(), Some(p("attn.bv").view()));
        let all: Vec<usize> = (0..z.nrows()).collect();
        let (a, _) = ops::segment_attention(&q, &k, &v, self.cfg.heads, &[all]);
        let z1 = z + &ops::linear(a.view(), p("attn.wo").view(), Some(p("attn.bo").view()));
        let h = ops::layer_norm_rows(z1.view(), p("ln2.gain").row(0), p("ln2.bias").row(0), eps).y;
        let m = ops::gelu(&ops::linear(h.view(), p("mlp.w1").view(), Some(p("mlp.b1").view())));
        z1 + &ops::linear(m.view(), p("mlp.w2").view(), Some(p("mlp.b2").view()))
    }

    /// Runs the encoder and taps the requested layers (1-based), returned in
    /// ascending layer order with the class token dropped.
    pub fn forward_tokens(&self, image: &Array3<T>, layer_indices: &[usize]) -> Result<Vec<TokenMap<T>>> {
        let s = self.cfg.image_size;
        if image.dim() != (3, s, s) {
            return Err(Error::Input(format!(
                "image has shape {:?}, expected (3, {s}, {s})",
                image.dim()
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("image contains non-finite values".into()));
        }
        let layers: BTreeSet<usize> = layer_indices.iter().copied().collect();
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > self.cfg.depth) {
            return Err(Error::Config(format!(
                "layer index {bad} outside [1, {}]",
                self.cfg.depth
            )));
        }
        let Some(&deepest) = layers.iter().next_back() else {
            return Ok(Vec::new());
        };

        let tokens = ops::linear(
            self.patchify(image.view()).view(),
            self.p("backbone.patch_embed.weight").view(),
            Some(self.p("backbone.patch_embed.bias").view()),
        );
        let mut z = ndarray::concatenate(
            ndarray::Axis(0),
            &[self.p("backbone.cls_token").view(), tokens.view()],
        )
        .expect("matching widths");
        z += self.p("backbone.pos_embed");

        let g = self.cfg.grid();
        let eps = T::lit(BACKBONE_LN_EPS);
        let gain: Array1<T> = self.p("backbone.norm.gain").row(0).to_owned();
        let bias: Array1<T> = self.p("backbone.norm.bias").row(0).to_owned();
        let mut out = Vec::with_capacity(layers.len());
        for l in 1..=deepest {
            z = self.block(l - 1, &z);
            if layers.contains(&l) {
                let patches = z.slice(s![1.., ..]);
                let normed = ops::layer_norm_rows(patches, gain.view(), bias.view(), eps).y;
                out.push(TokenMap::from_token_rows(&normed, g, g, l));
            }
        }
        Ok(out)
    }
}

/// Directory of precomputed token maps, one `SCVF` file per image id.
#[derive(Clone, Debug)]
pub struct FeatureArchive {
    root: PathBuf,
}

impl FeatureArchive {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::Lookup(format!("feature archive {} not found", root.display())));
        }
        Ok(Self { root })
    }

    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        fs::create_dir_all(root.as_ref())?;
        Self::open(root)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, image_id: &str) -> Result<PathBuf> {
        if image_id.is_empty() || image_id.contains(['/', '\\']) || image_id.starts_with('.') {
            return Err(Error::Input(format!("invalid image id `{image_id}`")));
        }
        Ok(self.root.join(format!("{image_id}.scvf")))
    }

    pub fn store<T: Scalar>(&self, image_id: &str, maps: &[TokenMap<T>]) -> Result<()> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Input("no token maps to store".into()))?;
        let (c, h, w) = first.data.dim();
        let mut blocks = Vec::with_capacity(maps.len());
        for m in maps {
            if m.data.dim() != (c, h, w) {
                return Err(Error::Shape("token maps in one archive entry must share a shape".into()));
            }
            blocks.push(TensorBlock {
                layer_index: m.layer_index as u32,
                values: m.data.iter().map(|v| v.as_f32()).collect(),
            });
        }
        let file = TensorFile {
            c1: c as u32,
            h: h as u32,
            w: w as u32,
            blocks,
        };
        file.write(&self.path_for(image_id)?)
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.path_for(image_id).map(|p| p.is_file()).unwrap_or(false)
    }

    /// Loads the requested layers in ascending order.
    pub fn load_precomputed<T: Scalar>(&self, image_id: &str, layer_indices: &[usize]) -> Result<Vec<TokenMap<T>>> {
        let path = self.path_for(image_id)?;
        if !path.is_file() {
            return Err(Error::Lookup(format!("image id `{image_id}` not in archive")));
        }
        let file = TensorFile::read(&path)?;
        let wanted: BTreeSet<usize> = layer_indices.iter().copied().collect();
        let shape = (file.c1 as usize, file.h as usize, file.w as usize);
        wanted
            .iter()
            .map(|&l| {
                let block = file
                    .blocks
                    .iter()
                    .find(|b| b.layer_index as usize == l)
                    .ok_or_else(|| Error::Lookup(format!("layer {l} missing for image `{image_id}`")))?;
                let data = Array3::from_shape_vec(shape, block.values.iter().map(|&v| T::lit(v as f64)).collect())
                    .map_err(|e| Error::Format(e.to_string()))?;
                Ok(TokenMap { data, layer_index: l })
            })
            .collect()
    }

    /// Like [`load_precomputed`](Self::load_precomputed) but also checks the stored shape.
    pub fn load_checked<T: Scalar>(
        &self,
        image_id: &str,
        layer_indices: &[usize],
        expected: (usize, usize, usize),
    ) -> Result<Vec<TokenMap<T>>> {
        let maps = self.load_precomputed(image_id, layer_indices)?;
        if let Some(m) = maps.iter().find(|m| m.data.dim() != expected) {
            return Err(Error::Format(format!(
                "image `{image_id}` layer {} has shape {:?}, configuration expects {expected:?}",
                m.layer_index,
                m.data.dim()
            )));
        }
        Ok(maps)
    }
}
