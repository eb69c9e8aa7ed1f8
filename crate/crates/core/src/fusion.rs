//! Multi-layer feature fusion: channel concatenation of the last `M` token maps,
//! a 1×1 convolution with rectifier, then `G` token-mixing MLP layers whose
//! weights are shared across channels.
//!
//! Inside the tape, feature maps are token-major: `B·N × C` rows, image by image.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::TokenMap;
use crate::params::{fan_in_uniform, ParamStore, ParamVars};
use crate::{Error, Result, Scalar, ValidationError};

pub const FUSION_LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub tapped_layers: usize,
    /// Must equal `tapped_layers × C1` when given; derived otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    pub out_channels: usize,
    pub mixer_layers: usize,
    pub mixer_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tapped_layers: 4,
            in_channels: None,
            out_channels: 64,
            mixer_layers: 2,
            mixer_hidden: 16,
        }
    }
}

impl FusionConfig {
    pub fn validate_into(&self, channels_per_layer: usize, depth: usize, err: &mut ValidationError) {
        if self.tapped_layers == 0 {
            err.push("fusion.tapped_layers", "must be at least 1");
        } else if self.tapped_layers > depth {
            err.push("fusion.tapped_layers", format!("exceeds backbone depth {depth}"));
        }
        if let Some(c) = self.in_channels {
            if c != self.tapped_layers * channels_per_layer {
                err.push(
                    "fusion.in_channels",
                    format!(
                        "must equal tapped_layers × embed_dim = {}",
                        self.tapped_layers * channels_per_layer
                    ),
                );
            }
        }
        if self.out_channels == 0 {
            err.push("fusion.out_channels", "must be at least 1");
        }
        if self.mixer_hidden == 0 {
            err.push("fusion.mixer_hidden", "must be at least 1");
        }
    }

    /// The backbone layers feeding the fusion module, ascending.
    pub fn layer_indices(&self, depth: usize) -> Vec<usize> {
        (depth + 1 - self.tapped_layers..=depth).collect()
    }
}

/// Task-adapted feature map `C2 × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatureMap<T> {
    pub data: Array3<T>,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    cfg: FusionConfig,
    per_layer: usize,
    grid: (usize, usize),
}

impl Fusion {
    pub fn new(cfg: FusionConfig, channels_per_layer: usize, grid: (usize, usize)) -> Result<Self> {
        let mut err = ValidationError::default();
        cfg.validate_into(channels_per_layer, usize::MAX, &mut err);
        err.into_result()?;
        Ok(Self {
            cfg,
            per_layer: channels_per_layer,
            grid,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.cfg.tapped_layers * self.per_layer
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn init_params<T: Scalar, R: Rng>(&self, params: &mut ParamStore<T>, rng: &mut R) {
        self.init_conv(params, rng);
        self.init_mixers(params, rng);
    }

    pub fn init_conv<T: Scalar, R: Rng>(&self, params: &mut ParamStore<T>, rng: &mut R) {
        let (cin, cout) = (self.in_channels(), self.cfg.out_channels);
        params.insert(CONV_WEIGHT, fan_in_uniform(rng, cout, cin, cin));
        params.insert(CONV_BIAS, fan_in_uniform(rng, 1, cout, cin));
    }

    pub fn init_mixers<T: Scalar, R: Rng>(&self, params: &mut ParamStore<T>, rng: &mut R) {
        let (n, p, c) = (self.tokens(), self.cfg.mixer_hidden, self.cfg.out_channels);
        for g in 0..self.cfg.mixer_layers {
            params.insert(format!("fusion.mixer.{g}.ln.gain"), Array2::ones((1, c)));
            params.insert(format!("fusion.mixer.{g}.ln.bias"), Array2::zeros((1, c)));
            params.insert(format!("fusion.mixer.{g}.w1"), fan_in_uniform(rng, p, n, n));
            params.insert(format!("fusion.mixer.{g}.b1"), fan_in_uniform(rng, 1, p, n));
            params.insert(format!("fusion.mixer.{g}.w2"), fan_in_uniform(rng, n, p, p));
            params.insert(format!("fusion.mixer.{g}.b2"), fan_in_uniform(rng, 1, n, p));
        }
    }

    /// Concatenates one image's token maps along channels: `N × M·C1` rows.
    pub fn stack_layers<T: Scalar>(&self, maps: &[TokenMap<T>]) -> Result<Array2<T>> {
        if maps.len() != self.cfg.tapped_layers {
            return Err(Error::Config(format!(
                "fusion expects {} token maps, got {}",
                self.cfg.tapped_layers,
                maps.len()
            )));
        }
        let (h, w) = (maps[0].height(), maps[0].width());
        if maps.iter().any(|m| m.height() != h || m.width() != w) {
            return Err(Error::Shape("token maps have mismatched spatial shapes".into()));
        }
        if (h, w) != self.grid {
            return Err(Error::Shape(format!(
                "token grid {h}×{w} does not match configured {}×{}",
                self.grid.0, self.grid.1
            )));
        }
        if maps.iter().any(|m| m.channels() != self.per_layer) {
            return Err(Error::Shape(format!("token maps must have {} channels", self.per_layer)));
        }
        if maps.windows(2).any(|p| p[0].layer_index >= p[1].layer_index) {
            return Err(Error::Config("token maps must be in ascending layer order".into()));
        }
        let rows: Vec<_> = maps.iter().map(|m| m.to_token_rows()).collect();
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok(ndarray::concatenate(Axis(1), &views).expect("equal token counts"))
    }

    /// 1×1 convolution + rectifier on stacked inputs (`B·N × M·C1` → `B·N × C2`).
    pub fn conv_forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Var {
        let y = tape.linear(x, vars.get(CONV_WEIGHT), Some(vars.get(CONV_BIAS)));
        tape.relu(y)
    }

    /// All mixer layers on a token-major `B·N × C2` map.
    pub fn mix_forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars, y: Var, batch: usize) -> Var {
        let eps = T::lit(FUSION_LN_EPS);
        let mut f = y;
        for g in 0..self.cfg.mixer_layers {
            let v = |n: &str| vars.get(&format!("fusion.mixer.{g}.{n}"));
            let normed = tape.layer_norm(f, v("ln.gain"), v("ln.bias"), eps);
            let per_channel = tape.block_transpose(normed, batch);
            let hidden = tape.linear(per_channel, v("w1"), Some(v("b1")));
            let hidden = tape.relu(hidden);
            let mixed = tape.linear(hidden, v("w2"), Some(v("b2")));
            let back = tape.block_transpose(mixed, batch);
            f = tape.add(f, back);
        }
        f
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var, batch: usize) -> Var {
        let y = self.conv_forward(tape, vars, x);
        self.mix_forward(tape, vars, y, batch)
    }

    /// Fuses one image's tapped maps into `Y` (`C2 × N`).
    pub fn fuse_channels<T: Scalar>(&self, params: &ParamStore<T>, maps: &[TokenMap<T>]) -> Result<Array2<T>> {
        let stacked = self.stack_layers(maps)?;
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.leaf(stacked);
        let y = self.conv_forward(&mut tape, &vars, x);
        Ok(tape.value(y).t().to_owned())
    }

    /// Applies the token mixers to `Y` (`C2 × N`).
    pub fn token_mix<T: Scalar>(&self, params: &ParamStore<T>, y: &Array2<T>) -> Result<FusedFeatureMap<T>> {
        if y.ncols() != self.tokens() {
            return Err(Error::Shape(format!(
                "token_mix expects {} tokens, got {}",
                self.tokens(),
                y.ncols()
            )));
        }
        if y.nrows() != self.cfg.out_channels {
            return Err(Error::Shape(format!(
                "token_mix expects {} channels, got {}",
                self.cfg.out_channels,
                y.nrows()
            )));
        }
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let yv = tape.leaf(y.t().to_owned());
        let f = self.mix_forward(&mut tape, &vars, yv, 1);
        let rows = tape.value(f);
        let (h, w) = self.grid;
        Ok(FusedFeatureMap {
            data: TokenMap::from_token_rows(rows, h, w, 0).data,
        })
    }
}

pub const CONV_WEIGHT: &str = "fusion.conv1x1.weight";
pub const CONV_BIAS: &str = "fusion.conv1x1.bias";

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(values: Array3<f64>, layer: usize) -> TokenMap<f64> {
        TokenMap {
            data: values,
            layer_index: layer,
        }
    }

    #[test]
    fn full_scale_channel_counts() {
        let cfg = FusionConfig {
            tapped_layers: 4,
            in_channels: Some(3072),
            out_channels: 768,
            mixer_layers: 0,
            mixer_hidden: 256,
        };
        let fusion = Fusion::new(cfg, 768, (16, 16)).unwrap();
        assert_eq!(fusion.in_channels(), 3072);
        let mut p = ParamStore::<f32>::new();
        fusion.init_conv(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.get(CONV_WEIGHT).unwrap().dim(), (768, 3072));
    }

    #[test]
    fn rectifier_clips_negative_identity_conv() {
        let cfg = FusionConfig {
            tapped_layers: 1,
            in_channels: None,
            out_channels: 2,
            mixer_layers: 0,
            mixer_hidden: 1,
        };
        let fusion = Fusion::new(cfg, 2, (3, 3)).unwrap();
        let mut p = ParamStore::new();
        p.insert(CONV_WEIGHT, Array2::eye(2));
        p.insert(CONV_BIAS, Array2::zeros((1, 2)));
        let y = fusion
            .fuse_channels(&p, &[map(Array3::from_elem((2, 3, 3), -1.0), 1)])
            .unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_two_layer_conv() {
        let cfg = FusionConfig {
            tapped_layers: 2,
            in_channels: Some(2),
            out_channels: 1,
            mixer_layers: 0,
            mixer_hidden: 1,
        };
        let fusion = Fusion::new(cfg, 1, (1, 1)).unwrap();
        let mut p = ParamStore::new();
        p.insert(CONV_WEIGHT, array![[1.0, 1.0]]);
        p.insert(CONV_BIAS, array![[0.0]]);
        let maps = [
            map(Array3::from_elem((1, 1, 1), 0.5), 3),
            map(Array3::from_elem((1, 1, 1), 0.25), 4),
        ];
        let y = fusion.fuse_channels(&p, &maps).unwrap();
        assert_eq!(y, array![[0.75]]);
    }

    #[test]
    fn fuse_channels_rejects_bad_inputs() {
        let cfg = FusionConfig {
            tapped_layers: 2,
            in_channels: None,
            out_channels: 1,
            mixer_layers: 0,
            mixer_hidden: 1,
        };
        let fusion = Fusion::new(cfg, 1, (2, 2)).unwrap();
        let p = ParamStore::<f64>::new();
        let one = [map(Array3::zeros((1, 2, 2)), 1)];
        assert!(matches!(fusion.fuse_channels(&p, &one), Err(Error::Config(_))));
        let mismatched = [map(Array3::zeros((1, 2, 2)), 1), map(Array3::zeros((1, 3, 2)), 2)];
        assert!(matches!(fusion.fuse_channels(&p, &mismatched), Err(Error::Shape(_))));
    }

    fn one_mixer(n: usize, hidden: usize, channels: usize) -> Fusion {
        let side = (n as f64).sqrt() as usize;
        let grid = if side * side == n { (side, side) } else { (1, n) };
        Fusion::new(
            FusionConfig {
                tapped_layers: 1,
                in_channels: None,
                out_channels: channels,
                mixer_layers: 1,
                mixer_hidden: hidden,
            },
            channels,
            grid,
        )
        .unwrap()
    }

    #[test]
    fn zero_second_mixer_matrix_is_identity() {
        let fusion = one_mixer(4, 3, 2);
        let mut p = ParamStore::<f64>::new();
        fusion.init_mixers(&mut p, &mut ChaCha8Rng::seed_from_u64(1));
        p.insert("fusion.mixer.0.w2", Array2::zeros((4, 3)));
        p.insert("fusion.mixer.0.b2", Array2::zeros((1, 4)));
        let y = array![[0.3, -1.0, 2.0, 0.5], [1.5, 0.25, -0.75, 4.0]];
        let f = fusion.token_mix(&p, &y).unwrap();
        let back = f.data.into_shape_with_order((2, 4)).unwrap();
        assert_eq!(back, y);
    }

    #[test]
    fn zero_input_without_biases_stays_zero() {
        let fusion = one_mixer(4, 3, 2);
        let mut p = ParamStore::<f64>::new();
        fusion.init_mixers(&mut p, &mut ChaCha8Rng::seed_from_u64(2));
        p.insert("fusion.mixer.0.b1", Array2::zeros((1, 3)));
        p.insert("fusion.mixer.0.b2", Array2::zeros((1, 4)));
        let f = fusion.token_mix(&p, &Array2::zeros((2, 4))).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_single_channel_mixer() {
        // One channel, two tokens, one hidden unit. With a single channel the
        // channel-axis norm maps every token to its bias, so LN(Y) = (β, β).
        let fusion = one_mixer(2, 1, 1);
        let mut p = ParamStore::<f64>::new();
        p.insert("fusion.mixer.0.ln.gain", array![[1.0]]);
        p.insert("fusion.mixer.0.ln.bias", array![[0.5]]);
        p.insert("fusion.mixer.0.w1", array![[2.0, -1.0]]);
        p.insert("fusion.mixer.0.b1", array![[0.25]]);
        p.insert("fusion.mixer.0.w2", array![[3.0], [-2.0]]);
        p.insert("fusion.mixer.0.b2", array![[0.1, 0.2]]);
        // hidden = relu(2·0.5 − 1·0.5 + 0.25) = 0.75
        // out = Y + (3·0.75 + 0.1, −2·0.75 + 0.2) = Y + (2.35, −1.3)
        let y = array![[1.0, -4.0]];
        let f = fusion.token_mix(&p, &y).unwrap();
        let got = f.data.into_shape_with_order((1, 2)).unwrap();
        assert!((got[[0, 0]] - 3.35).abs() < 1e-12);
        assert!((got[[0, 1]] - (-5.3)).abs() < 1e-12);
    }

    #[test]
    fn token_count_mismatch_is_shape_error() {
        let fusion = one_mixer(4, 3, 2);
        let mut p = ParamStore::<f64>::new();
        fusion.init_mixers(&mut p, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(matches!(fusion.token_mix(&p, &Array2::zeros((2, 5))), Err(Error::Shape(_))));
    }
}
