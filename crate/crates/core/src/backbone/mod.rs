//! Feature extraction backbone.
//!
//! A shallow 3×3 conv lifts the image to `F_s`; each stage runs its
//! single-branch blocks, then its dual-branch blocks (regular and shifted
//! windows alternating), then a 3×3 conv that also moves to the next stage's
//! width. A final 3×3 conv and a global residual with `F_s` give `F_LR`.

pub mod blocks;
pub mod window;

use serde::{Deserialize, Serialize};

pub use blocks::{Block, BlockDims, BranchMode, BranchTap, DualBranchBlock, SingleBranchBlock};

use crate::error::{Error, Result};
use crate::grad::{Graph, ParamStore, Var};
use crate::nn::{ConvIds, Initializer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    /// Fraction of the stage's blocks that are dual-branch.
    pub dbb_ratio: f64,
    pub channels: usize,
}

impl StageConfig {
    /// `round(α·N)` dual-branch blocks, placed after the single-branch ones.
    pub fn dual_blocks(&self) -> usize {
        ((self.dbb_ratio * self.blocks as f64).round() as usize).min(self.blocks)
    }

    pub fn single_blocks(&self) -> usize {
        self.blocks - self.dual_blocks()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
    pub window: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    #[serde(default)]
    pub branch_mode: BranchMode,
    #[serde(default = "default_true")]
    pub global_residual: bool,
}

fn default_true() -> bool {
    true
}

impl BackboneConfig {
    /// Width of the extracted features (the first stage's width).
    pub fn feat_channels(&self) -> usize {
        self.stages[0].channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || !(0.0..=1.0).contains(&s.dbb_ratio) {
                return Err(Error::Config(format!("stage {i} is invalid: {s:?}")));
            }
            if s.dual_blocks() > 0 && s.channels % self.heads.max(1) != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: {} channels not divisible by {} heads",
                    s.channels, self.heads
                )));
            }
        }
        if self.window == 0 || self.heads == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config(format!(
                "window, heads and ffn_ratio must be positive (got {}, {}, {})",
                self.window, self.heads, self.ffn_ratio
            )));
        }
        Ok(())
    }

    fn dims(&self, stage: usize) -> BlockDims {
        BlockDims {
            channels: self.stages[stage].channels,
            window: self.window,
            heads: self.heads,
            ffn_ratio: self.ffn_ratio,
        }
    }

    /// Cyclic shift of the `j`-th dual-branch block of a stage.
    pub fn shift(&self, j: usize) -> usize {
        if j % 2 == 1 {
            self.window / 2
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub blocks: Vec<Block>,
    pub tail: ConvIds,
}

/// Parameter handles of the backbone; tensors live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub shallow: ConvIds,
    pub stages: Vec<Stage>,
    pub last: ConvIds,
}

fn block_name(prefix: &str, s: usize, b: usize) -> String {
    format!("{prefix}.s{s}.b{b}")
}

impl Backbone {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        config: BackboneConfig,
        prefix: &str,
    ) -> Result<Self> {
        config.validate()?;
        let f = config.feat_channels();
        let shallow = ConvIds::add(store, init, &format!("{prefix}.shallow"), 3, f, 3);
        let mut stages = Vec::with_capacity(config.stages.len());
        for (si, st) in config.stages.iter().enumerate() {
            let dims = config.dims(si);
            let mut blocks = Vec::with_capacity(st.blocks);
            for b in 0..st.blocks {
                let name = block_name(prefix, si, b);
                blocks.push(if b < st.single_blocks() {
                    Block::Single(SingleBranchBlock::add(store, init, &name, dims))
                } else {
                    let shift = config.shift(b - st.single_blocks());
                    Block::Dual(DualBranchBlock::add(store, init, &name, dims, shift, config.branch_mode)?)
                });
            }
            let next = config.stages.get(si + 1).map_or(f, |n| n.channels);
            let tail = ConvIds::add(store, init, &format!("{prefix}.s{si}.tail"), st.channels, next, 3);
            stages.push(Stage { blocks, tail });
        }
        let last = ConvIds::add(store, init, &format!("{prefix}.last"), f, f, 3);
        Ok(Self {
            config,
            shallow,
            stages,
            last,
        })
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, config: BackboneConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let shallow = ConvIds::resolve(store, &format!("{prefix}.shallow"), false)?;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (si, st) in config.stages.iter().enumerate() {
            let dims = config.dims(si);
            let mut blocks = Vec::with_capacity(st.blocks);
            for b in 0..st.blocks {
                let name = block_name(prefix, si, b);
                blocks.push(if b < st.single_blocks() {
                    Block::Single(SingleBranchBlock::resolve(store, &name)?)
                } else {
                    let shift = config.shift(b - st.single_blocks());
                    Block::Dual(DualBranchBlock::resolve(store, &name, dims, shift, config.branch_mode)?)
                });
            }
            let tail = ConvIds::resolve(store, &format!("{prefix}.s{si}.tail"), false)?;
            stages.push(Stage { blocks, tail });
        }
        let last = ConvIds::resolve(store, &format!("{prefix}.last"), false)?;
        Ok(Self {
            config,
            shallow,
            stages,
            last,
        })
    }

    /// Image `[3×H×W]` to feature tokens `[H·W × C_feat]`. Branch outputs are
    /// appended to `taps` when given.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        img: Var,
        mut taps: Option<&mut Vec<BranchTap>>,
    ) -> Result<Var> {
        let s = g.shape(img).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("backbone input", &s, &[3, 0, 0]));
        }
        let (h, w) = (s[1], s[2]);
        let f_s = self.shallow.apply(g, store, img)?;
        let mut map = f_s;
        for (si, stage) in self.stages.iter().enumerate() {
            let mut x = g.chw_to_tokens(map)?;
            for (bi, block) in stage.blocks.iter().enumerate() {
                let (y, f_mhsa, f_conv) = block.forward(g, store, x, h, w)?;
                if let Some(t) = taps.as_deref_mut() {
                    t.push(BranchTap {
                        stage: si,
                        block: bi,
                        f_mhsa,
                        f_conv,
                    });
                }
                x = y;
            }
            let m = g.tokens_to_chw(x, h, w)?;
            map = stage.tail.apply(g, store, m)?;
        }
        let mut out = self.last.apply(g, store, map)?;
        if self.config.global_residual {
            out = g.add(out, f_s)?;
        }
        g.chw_to_tokens(out)
    }

    /// Tensor-level features `[C_feat×H×W]`.
    pub fn extract_features<T: Scalar>(&self, store: &ParamStore<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let t = self.forward(&mut g, store, x, None)?;
        let (h, w) = (img.dim(1), img.dim(2));
        let m = g.tokens_to_chw(t, h, w)?;
        Ok(g.value(m).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    pub(crate) fn desk() -> BackboneConfig {
        BackboneConfig {
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
        }
    }

    #[test]
    fn stage_block_counts_round() {
        let counts: Vec<(usize, usize)> = [(2, 0.0), (8, 0.25), (8, 0.25), (16, 0.75)]
            .iter()
            .map(|&(n, a)| {
                let s = StageConfig {
                    blocks: n,
                    dbb_ratio: a,
                    channels: 8,
                };
                (s.blocks, s.dual_blocks())
            })
            .collect();
        assert_eq!(counts, vec![(2, 0), (8, 2), (8, 2), (16, 12)]);
    }

    #[test]
    fn output_shape_for_awkward_sizes() {
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::init(&mut store, &mut Initializer::new(0), desk(), "bb").unwrap();
        for &(h, w) in &[(1, 1), (1, 5), (3, 2), (7, 9), (4, 4)] {
            let img = Tensor::from_fn(&[3, h, w], |i| (i as f32 * 0.1).sin().abs());
            let f = bb.extract_features(&store, &img).unwrap();
            assert_eq!(f.shape(), &[16, h, w]);
            assert!(f.all_finite());
        }
    }

    #[test]
    fn shifts_alternate_and_resolve_round_trips() {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::init(&mut store, &mut Initializer::new(1), desk(), "bb").unwrap();
        let shifts: Vec<usize> = bb.stages[1]
            .blocks
            .iter()
            .map(|b| match b {
                Block::Dual(d) => d.shift,
                Block::Single(_) => usize::MAX,
            })
            .collect();
        assert_eq!(shifts, vec![0, 2]);
        assert!(matches!(bb.stages[0].blocks[0], Block::Single(_)));
        assert_eq!(Backbone::resolve(&store, desk(), "bb").unwrap(), bb);
    }

    #[test]
    fn desk_forward_is_fast() {
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::init(&mut store, &mut Initializer::new(2), desk(), "bb").unwrap();
        let img = Tensor::from_fn(&[3, 48, 48], |i| ((i % 97) as f32) / 97.0);
        let t = Instant::now();
        bb.extract_features(&store, &img).unwrap();
        assert!(t.elapsed().as_secs_f64() < 1.0, "{:?}", t.elapsed());
    }

    #[test]
    fn taps_record_every_block() {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::init(&mut store, &mut Initializer::new(3), desk(), "bb").unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 5, 6], |i| (i as f64 * 0.3).cos()));
        let mut taps = Vec::new();
        bb.forward(&mut g, &store, x, Some(&mut taps)).unwrap();
        assert_eq!(taps.len(), 3);
        assert!(taps[0].f_mhsa.is_none() && taps[0].f_conv.is_some());
        assert!(taps[1..].iter().all(|t| t.f_mhsa.is_some() && t.f_conv.is_some()));
    }
}
