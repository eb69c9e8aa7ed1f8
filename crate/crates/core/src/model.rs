//! The trainable head: fusion, regional GeM and an encoder, producing one
//! L2-normalized global descriptor per image.

use ndarray::{concatenate, Array2, Array3, Axis};
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{gem_regions, partition_regions, RegionPartition, GEM_P_INIT, GEM_P_NAME, REGION_COUNT};
use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, FeatureArchive, TokenMap};
use crate::encoders::{Encoder, EncoderConfig, EncoderVariant};
use crate::fusion::{Fusion, FusionConfig};
use crate::ops;
use crate::params::{ParamStore, ParamVars};
use crate::{Error, Result, Scalar, ValidationError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn teacher(backbone: BackboneConfig, fusion: FusionConfig) -> Self {
        let dim = fusion.out_channels;
        Self {
            backbone,
            fusion,
            encoder: EncoderConfig::teacher(dim),
        }
    }

    pub fn student(backbone: BackboneConfig, fusion: FusionConfig) -> Self {
        let dim = fusion.out_channels;
        Self {
            backbone,
            fusion,
            encoder: EncoderConfig::student(dim),
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        REGION_COUNT * self.fusion.out_channels
    }

    pub fn validate_into(&self, encoder_prefix: &str, err: &mut ValidationError) {
        self.backbone.validate_into("backbone", err);
        self.fusion
            .validate_into(self.backbone.embed_dim, self.backbone.depth, err);
        self.encoder.validate_into(encoder_prefix, err);
        if self.encoder.dim != self.fusion.out_channels {
            err.push(
                format!("{encoder_prefix}.dim"),
                format!("must equal fusion.out_channels = {}", self.fusion.out_channels),
            );
        }
        let grid = self.backbone.grid();
        if grid < 3 {
            err.push(
                "backbone.image_size",
                format!("token grid {grid}×{grid} is too small for a 3×3 region level"),
            );
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    cfg: ModelConfig,
    fusion: Fusion,
    partition: RegionPartition,
    encoder: Encoder,
    layers: Vec<usize>,
}

impl Pipeline {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut err = ValidationError::default();
        cfg.validate_into("encoder", &mut err);
        err.into_result()?;
        let g = cfg.backbone.grid();
        let fusion = Fusion::new(cfg.fusion.clone(), cfg.backbone.embed_dim, (g, g))?;
        let partition = partition_regions(g, g)?;
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let layers = cfg.fusion.layer_indices(cfg.backbone.depth);
        Ok(Self {
            cfg,
            fusion,
            partition,
            encoder,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn variant(&self) -> EncoderVariant {
        self.encoder.variant()
    }

    /// Backbone layers this head consumes, ascending.
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn descriptor_dim(&self) -> usize {
        self.cfg.descriptor_dim()
    }

    /// Width of one stacked input row (`M·C1`).
    pub fn input_width(&self) -> usize {
        self.fusion.in_channels()
    }

    pub fn tokens(&self) -> usize {
        self.fusion.tokens()
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        self.fusion.init_params(&mut params, &mut rng);
        params.insert(GEM_P_NAME, Array2::from_elem((1, 1), T::lit(GEM_P_INIT)));
        self.encoder.init_params(&mut params, &mut rng);
        params
    }

    /// Stacks one image's tapped token maps into `N × M·C1` rows.
    pub fn stack<T: Scalar>(&self, maps: &[TokenMap<T>]) -> Result<Array2<T>> {
        self.fusion.stack_layers(maps)
    }

    fn check_inputs<T: Scalar>(&self, inputs: &[&Array2<T>]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::Input("empty image batch".into()));
        }
        let want = (self.tokens(), self.input_width());
        for (i, x) in inputs.iter().enumerate() {
            if x.dim() != want {
                return Err(Error::Shape(format!(
                    "image {i}: stacked input is {:?}, expected {want:?}",
                    x.dim()
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass for a batch; returns the `B × 14·C2` descriptor rows.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars, inputs: &[&Array2<T>]) -> Result<Var> {
        self.check_inputs(inputs)?;
        let batch = inputs.len();
        let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
        let x = tape.leaf(concatenate(Axis(0), &views).expect("checked shapes"));
        let fused = self.fusion.forward(tape, vars, x, batch);
        let regional = gem_regions(tape, fused, vars.get(GEM_P_NAME), &self.partition);
        let encoded = self.encoder.forward(tape, vars, regional, batch);
        let flat = tape.reshape(encoded, batch, self.descriptor_dim());
        for (b, row) in tape.value(flat).outer_iter().enumerate() {
            let n = ops::norm(row);
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::Normalization(format!("descriptor of image {b} has norm {n:?}")));
            }
        }
        Ok(tape.l2_normalize_rows(flat))
    }

    /// Forward-only descriptors for one batch, `B × 14·C2`.
    pub fn describe<T: Scalar>(&self, params: &ParamStore<T>, inputs: &[&Array2<T>]) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let d = self.forward(&mut tape, &vars, inputs)?;
        Ok(tape.value(d).clone())
    }

    /// Describes images in consecutive chunks of `batch`. A chunk size of one is
    /// the only setting under which teacher descriptors are independent of order.
    pub fn describe_chunked<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        inputs: &[&Array2<T>],
        batch: usize,
    ) -> Result<Array2<T>> {
        if batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut out = Array2::zeros((inputs.len(), self.descriptor_dim()));
        for (c, chunk) in inputs.chunks(batch).enumerate() {
            let d = self.describe(params, chunk)?;
            out.slice_mut(ndarray::s![c * batch..c * batch + chunk.len(), ..])
                .assign(&d);
        }
        Ok(out)
    }

    /// Describes every image on its own, in parallel. Row `i` depends only on
    /// input `i`, whatever the encoder variant.
    pub fn describe_each<T: Scalar>(&self, params: &ParamStore<T>, inputs: &[&Array2<T>]) -> Result<Array2<T>> {
        let rows: Vec<Array2<T>> = inputs
            .par_iter()
            .map(|x| self.describe(params, std::slice::from_ref(x)))
            .collect::<Result<_>>()?;
        let mut out = Array2::zeros((inputs.len(), self.descriptor_dim()));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&r.row(0));
        }
        Ok(out)
    }

    /// Checks that `params` holds every tensor this head needs with the right shape.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        let reference = self.init_params::<T>(0);
        for (name, want) in reference.iter() {
            let got = params.get(name)?;
            if got.dim() != want.dim() {
                return Err(Error::Shape(format!(
                    "parameter {name} is {:?}, expected {:?}",
                    got.dim(),
                    want.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Runs the frozen backbone on every image and stacks the tapped layers.
/// Images are processed in parallel; the result keeps input order.
pub fn stack_images<T: Scalar>(pipeline: &Pipeline, backbone: &Backbone<T>, images: &[Array3<T>]) -> Result<Vec<Array2<T>>> {
    images
        .par_iter()
        .map(|img| pipeline.stack(&backbone.forward_tokens(img, pipeline.layers())?))
        .collect()
}

/// Loads and stacks precomputed token maps for each id.
pub fn stack_archived<T: Scalar, S: AsRef<str> + Sync>(
    pipeline: &Pipeline,
    archive: &FeatureArchive,
    ids: &[S],
) -> Result<Vec<Array2<T>>> {
    let (g, c) = (pipeline.fusion().grid(), pipeline.config().backbone.embed_dim);
    ids.par_iter()
        .map(|id| pipeline.stack(&archive.load_checked(id.as_ref(), pipeline.layers(), (c, g.0, g.1))?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let backbone = BackboneConfig {
            image_size: 42,
            patch_size: 14,
            embed_dim: 8,
            depth: 3,
            heads: 2,
            seed: 1,
        };
        let fusion = FusionConfig {
            tapped_layers: 2,
            in_channels: None,
            out_channels: 8,
            mixer_layers: 1,
            mixer_hidden: 4,
        };
        ModelConfig::teacher(backbone, fusion)
    }

    #[test]
    fn descriptor_rows_are_unit_length() {
        let cfg = small();
        let net = Pipeline::new(cfg.clone()).unwrap();
        let bb = Backbone::<f64>::new(cfg.backbone.clone()).unwrap();
        let params = net.init_params::<f64>(3);
        let inputs: Vec<_> = (0..3)
            .map(|i| {
                let img = Array3::from_shape_fn((3, 42, 42), |(c, y, x)| ((c + y * 2 + x + i) as f64 * 0.1).sin());
                net.stack(&bb.forward_tokens(&img, net.layers()).unwrap()).unwrap()
            })
            .collect();
        let refs: Vec<_> = inputs.iter().collect();
        let d = net.describe(&params, &refs).unwrap();
        assert_eq!(d.dim(), (3, 14 * 8));
        for row in d.outer_iter() {
            assert!((ops::norm(row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_dim_must_match_fusion_output() {
        let mut cfg = small();
        cfg.encoder.dim = 16;
        let err = Pipeline::new(cfg).unwrap_err();
        assert!(format!("{err}").contains("encoder.dim"));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = Pipeline::new(small()).unwrap();
        let params = net.init_params::<f32>(0);
        let bad = Array2::<f32>::ones((5, 16));
        assert!(matches!(net.describe(&params, &[&bad]), Err(Error::Shape(_))));
    }
}
