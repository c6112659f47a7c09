//! End-to-end model: backbone features, then the implicit upsampler.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BranchMode, StageConfig};
use crate::checkpoint::{self, check_layout};
use crate::coords::output_shape;
use crate::error::{Error, Result};
use crate::grad::{Graph, ParamStore, Var};
use crate::nn::{Initializer, LinearInit, LINEAR_INIT_STD};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::upsampler::{Reweight, Upsampler, UpsamplerConfig, Variant};

/// Largest supported magnification.
pub const MAX_SCALE: f64 = 64.0;

const BACKBONE: &str = "bb";
const UPSAMPLER: &str = "up";

/// Draw of the upsampler's linear weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsamplerInit {
    /// Truncated normal, std 0.02, like every other linear layer.
    #[default]
    TruncNormal,
    /// Uniform `±1/sqrt(fan_in)`.
    FanInUniform,
}

impl UpsamplerInit {
    fn scheme(self) -> LinearInit {
        match self {
            UpsamplerInit::TruncNormal => LinearInit::TruncNormal(LINEAR_INIT_STD),
            UpsamplerInit::FanInUniform => LinearInit::FanInUniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Preset the config was derived from, informational.
    #[serde(default)]
    pub preset: Option<String>,
    pub backbone: BackboneConfig,
    pub c_up: usize,
    pub phi_hidden: usize,
    #[serde(default = "default_reweight")]
    pub reweight: Reweight,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub upsampler_init: UpsamplerInit,
    /// Map input pixels to `[-1, 1]` before the backbone and predictions
    /// back from `[-1, 1]` (default on).
    #[serde(default = "default_true")]
    pub data_norm: bool,
    /// Precision used for training and inference.
    #[serde(default = "default_precision")]
    pub precision: DType,
}

fn default_reweight() -> Reweight {
    Reweight::Sin
}

fn default_variant() -> Variant {
    Variant::Modulation
}

fn default_true() -> bool {
    true
}

fn default_precision() -> DType {
    DType::F32
}

impl ModelConfig {
    /// Full-size network: stages of 2, 8, 8, 16 blocks with widths
    /// 64, 64, 128, 192, window 16, 8 heads, 256-wide upsampler.
    pub fn paper() -> Self {
        let stage = |blocks, dbb_ratio, channels| StageConfig {
            blocks,
            dbb_ratio,
            channels,
        };
        Self {
            preset: Some("paper".into()),
            backbone: BackboneConfig {
                stages: vec![
                    stage(2, 0.0, 64),
                    stage(8, 0.25, 64),
                    stage(8, 0.25, 128),
                    stage(16, 0.75, 192),
                ],
                window: 16,
                heads: 8,
                ffn_ratio: 2,
                branch_mode: BranchMode::Parallel,
                global_residual: true,
            },
            c_up: 256,
            phi_hidden: 256,
            reweight: Reweight::Sin,
            variant: Variant::Modulation,
            upsampler_init: UpsamplerInit::TruncNormal,
            data_norm: true,
            precision: DType::F32,
        }
    }

    /// CPU-sized network: stages of 1 and 2 blocks, width 16, window 4,
    /// 2 heads, 32-wide upsampler.
    pub fn desk() -> Self {
        Self {
            preset: Some("desk".into()),
            backbone: BackboneConfig {
                stages: vec![
                    StageConfig {
                        blocks: 1,
                        dbb_ratio: 0.0,
                        channels: 16,
                    },
                    StageConfig {
                        blocks: 2,
                        dbb_ratio: 1.0,
                        channels: 16,
                    },
                ],
                window: 4,
                heads: 2,
                ffn_ratio: 2,
                branch_mode: BranchMode::Parallel,
                global_residual: true,
            },
            c_up: 32,
            phi_hidden: 32,
            reweight: Reweight::Sin,
            variant: Variant::Modulation,
            upsampler_init: UpsamplerInit::TruncNormal,
            data_norm: true,
            precision: DType::F32,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected `paper` or `desk`)"
            ))),
        }
    }

    pub fn upsampler(&self) -> UpsamplerConfig {
        UpsamplerConfig {
            feat_channels: self.backbone.feat_channels(),
            c_up: self.c_up,
            phi_hidden: self.phi_hidden,
            reweight: self.reweight,
            variant: self.variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.upsampler().validate()
    }
}

/// Parameters plus the handles that address them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub backbone: Backbone,
    pub upsampler: Upsampler,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model; the draw depends only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let backbone = Backbone::init(&mut params, &mut init, config.backbone.clone(), BACKBONE)?;
        let upsampler = Upsampler::init(
            &mut params,
            &mut init,
            config.upsampler(),
            UPSAMPLER,
            config.upsampler_init.scheme(),
        )?;
        Ok(Self {
            config,
            params,
            backbone,
            upsampler,
        })
    }

    /// Wraps existing parameters after checking them against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Model::<f32>::new(config.clone(), 0)?;
        check_layout(&params, &reference.params)?;
        Ok(Self {
            backbone: Backbone::resolve(&params, config.backbone.clone(), BACKBONE)?,
            upsampler: Upsampler::resolve(&params, config.upsampler(), UPSAMPLER)?,
            config,
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Graph-level forward at the HR pixels `queries` of an `h_hr × w_hr`
    /// output, for an LR image node `[3×H×W]`. Returns `[N × 3]`.
    pub fn forward_queries(
        &self,
        g: &mut Graph<T>,
        lr: Var,
        h_hr: usize,
        w_hr: usize,
        queries: &[(usize, usize)],
    ) -> Result<Var> {
        let (h, w) = (g.shape(lr)[1], g.shape(lr)[2]);
        let x = if self.config.data_norm {
            affine(g, lr, T::lit(2.0), T::lit(-1.0))?
        } else {
            lr
        };
        let feats = self.backbone.forward(g, &self.params, x, None)?;
        let y = self
            .upsampler
            .forward_queries(g, &self.params, feats, h, w, h_hr, w_hr, queries)?;
        if self.config.data_norm {
            affine(g, y, T::lit(0.5), T::lit(0.5))
        } else {
            Ok(y)
        }
    }

    pub fn features(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        check_image(lr)?;
        if self.config.data_norm {
            let x = lr.map(|v| v * T::lit(2.0) - T::one());
            self.backbone.extract_features(&self.params, &x)
        } else {
            self.backbone.extract_features(&self.params, lr)
        }
    }

    /// Super-resolves `lr [3×H×W]` by `r`, giving `[3 × floor(rH) × floor(rW)]`.
    pub fn forward(&self, lr: &Tensor<T>, r: f64) -> Result<Tensor<T>> {
        check_scale(r)?;
        check_image(lr)?;
        let (h_hr, w_hr) = output_shape(lr.dim(1), lr.dim(2), r)?;
        self.forward_to(lr, h_hr, w_hr)
    }

    /// Renders `lr` onto an explicit `h_hr × w_hr` grid.
    pub fn forward_to(&self, lr: &Tensor<T>, h_hr: usize, w_hr: usize) -> Result<Tensor<T>> {
        let feats = self.features(lr)?;
        let y = self.upsampler.upsample(&self.params, &feats, h_hr, w_hr)?;
        Ok(if self.config.data_norm {
            y.map(|v| v * T::lit(0.5) + T::lit(0.5))
        } else {
            y
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.config, &serde_json::Value::Null, &[("params", &self.params)])
    }

    /// Loads a checkpoint using the config stored in it.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load::<T>(path)?;
        let params = ck.group("params")?.clone();
        Self::from_params(ck.config, params)
    }

    /// Loads the parameters of a checkpoint under a caller-supplied config.
    pub fn load_with_config(path: &Path, config: ModelConfig) -> Result<Self> {
        let ck = checkpoint::load::<T>(path)?;
        let params = ck.group("params")?.clone();
        Self::from_params(config, params)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            upsampler: self.upsampler.clone(),
        }
    }
}

/// `a·x + b` on the tape.
fn affine<T: Scalar>(g: &mut Graph<T>, x: Var, a: T, b: T) -> Result<Var> {
    let shift = g.constant(Tensor::full(g.shape(x), b));
    let scaled = g.scale(x, a);
    g.add(scaled, shift)
}

pub fn check_scale(r: f64) -> Result<()> {
    if !(1.0..=MAX_SCALE).contains(&r) {
        return Err(Error::contract(format!("scale {r} outside [1, {MAX_SCALE}]")));
    }
    Ok(())
}

fn check_image<T: Scalar>(img: &Tensor<T>) -> Result<()> {
    if img.ndim() != 3 || img.dim(0) != 3 {
        return Err(Error::shape("model input", img.shape(), &[3, 0, 0]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[3, h, w], |i| ((i * 37 % 101) as f32) / 101.0)
    }

    #[test]
    fn scale_one_keeps_shape_and_scale_range_is_checked() {
        let m = Model::<f32>::new(ModelConfig::desk(), 0).unwrap();
        assert_eq!(m.forward(&image(5, 7), 1.0).unwrap().shape(), &[3, 5, 7]);
        assert_eq!(m.forward(&image(3, 4), 2.5).unwrap().shape(), &[3, 7, 10]);
        assert!(m.forward(&image(3, 4), 0.5).is_err());
        assert!(m.forward(&image(3, 4), 64.5).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Model::<f32>::new(ModelConfig::desk(), 3).unwrap();
        let a = m.forward(&image(6, 5), 2.3).unwrap();
        let b = m.forward(&image(6, 5), 2.3).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let m2 = Model::<f32>::new(ModelConfig::desk(), 3).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::new(ModelConfig::desk(), 1).unwrap();
        m.save(&path).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        for ((_, na, a), (_, nb, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_payload_names_the_missing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::new(ModelConfig::desk(), 1).unwrap();
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let last = m.params.iter().last().unwrap().1.to_string();
        match Model::<f32>::load(&path) {
            Err(Error::Integrity { tensor, .. }) => assert_eq!(tensor, format!("params/{last}")),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let m = Model::<f32>::new(ModelConfig::desk(), 1).unwrap();
        let mut bytes = checkpoint::encode(&m.config, &serde_json::Value::Null, &[("params", &m.params)]).unwrap();
        bytes[4] = 9;
        assert!(matches!(checkpoint::decode::<f32>(&bytes), Err(Error::Checkpoint(_))));
        bytes[0] = b'X';
        assert!(matches!(checkpoint::decode::<f32>(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn desk_checkpoint_under_paper_config_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Model::<f32>::new(ModelConfig::desk(), 1).unwrap().save(&path).unwrap();
        match Model::<f32>::load_with_config(&path, ModelConfig::paper()) {
            Err(Error::ParamShape {
                tensor,
                stored,
                expected,
            }) => {
                assert_eq!(tensor, "bb.shallow.w");
                assert_eq!(stored, vec![16, 3, 3, 3]);
                assert_eq!(expected, vec![64, 3, 3, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn paper_preset_is_about_fourteen_million_parameters() {
        let m = Model::<f32>::new(ModelConfig::paper(), 0).unwrap();
        let n = m.num_params();
        assert!((5_000_000..30_000_000).contains(&n), "{n}");
        let blocks: Vec<(usize, usize)> = m
            .config
            .backbone
            .stages
            .iter()
            .map(|s| (s.blocks, s.dual_blocks()))
            .collect();
        assert_eq!(blocks, vec![(2, 0), (8, 2), (8, 2), (16, 12)]);
    }

    #[test]
    fn precision_casts_load_across_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::new(ModelConfig::desk(), 2).unwrap();
        m.save(&path).unwrap();
        let wide = Model::<f64>::load(&path).unwrap();
        assert_eq!(wide, m.cast::<f64>());
    }
}
