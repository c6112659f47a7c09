//! Dual-branch (attention + depth-wise conv) and single-branch blocks.
//!
//! Blocks operate on `H·W×C` token matrices; the convolutional parts move to
//! `C×H×W` and back.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::window::{AttentionLayout, WindowLayout};
use crate::error::{Error, Result};
use crate::grad::{Graph, ParamId, ParamStore, Var};
use crate::nn::{ConvIds, Initializer, LinearIds, LinearInit, NormIds, LINEAR_INIT_STD};
use crate::numerics::Activation;
use crate::scalar::Scalar;

/// Squeeze-and-excitation reduction ratio of channel attention.
pub const CA_REDUCTION: usize = 4;

/// How the attention and convolution branches of a dual-branch block combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    /// `attention(V) + conv(V)`, conv on the unpartitioned value map.
    #[default]
    Parallel,
    /// `a + conv(a)` with `a = attention(V)`: conv stacked after attention.
    Sequential,
    AttentionOnly,
    ConvOnly,
    /// Parallel, but the conv branch reads the normalized block input.
    ParallelOnInput,
}

impl BranchMode {
    pub const ALL: [BranchMode; 5] = [
        BranchMode::Parallel,
        BranchMode::Sequential,
        BranchMode::AttentionOnly,
        BranchMode::ConvOnly,
        BranchMode::ParallelOnInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BranchMode::Parallel => "parallel",
            BranchMode::Sequential => "sequential",
            BranchMode::AttentionOnly => "attention_only",
            BranchMode::ConvOnly => "conv_only",
            BranchMode::ParallelOnInput => "parallel_on_input",
        }
    }

    pub fn has_attention(self) -> bool {
        self != BranchMode::ConvOnly
    }

    pub fn has_conv(self) -> bool {
        self != BranchMode::AttentionOnly
    }
}

impl std::str::FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown branch mode `{s}`")))
    }
}

/// Shape parameters shared by every block of one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDims {
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
}

/// Squeeze-and-excitation channel attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelAttention {
    pub squeeze: LinearIds,
    pub excite: LinearIds,
}

impl ChannelAttention {
    pub fn reduced(c: usize) -> usize {
        (c / CA_REDUCTION).max(1)
    }

    pub fn add<T: Scalar>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, c: usize) -> Self {
        let r = Self::reduced(c);
        let scheme = LinearInit::TruncNormal(LINEAR_INIT_STD);
        Self {
            squeeze: LinearIds::add(store, init, &format!("{name}.squeeze"), c, r, scheme),
            excite: LinearIds::add(store, init, &format!("{name}.excite"), r, c, scheme),
        }
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            squeeze: LinearIds::resolve(store, &format!("{name}.squeeze"))?,
            excite: LinearIds::resolve(store, &format!("{name}.excite"))?,
        })
    }

    /// Rescales every channel of tokens `[N×C]` by a gate from the channel means.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let m = g.mean_rows(x)?;
        let s = self.squeeze.apply(g, store, m)?;
        let s = g.relu(s);
        let e = self.excite.apply(g, store, s)?;
        let gate = g.act(e, Activation::Sigmoid);
        g.mul_row(x, gate)
    }
}

/// Position-wise feed-forward `Linear(C→eC) - ReLU - Linear(eC→C)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ffn {
    pub up: LinearIds,
    pub down: LinearIds,
}

impl Ffn {
    fn add<T: Scalar>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, c: usize, e: usize) -> Self {
        let scheme = LinearInit::TruncNormal(LINEAR_INIT_STD);
        Self {
            up: LinearIds::add(store, init, &format!("{name}.up"), c, e * c, scheme),
            down: LinearIds::add(store, init, &format!("{name}.down"), e * c, c, scheme),
        }
    }

    fn resolve<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            up: LinearIds::resolve(store, &format!("{name}.up"))?,
            down: LinearIds::resolve(store, &format!("{name}.down"))?,
        })
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.apply(g, store, x)?;
        let h = g.relu(h);
        self.down.apply(g, store, h)
    }
}

/// Attention-branch parameters of a dual-branch block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowAttnParams {
    pub q: LinearIds,
    pub k: LinearIds,
    pub o: LinearIds,
    /// Relative position bias `[(2M-1)² × heads]`.
    pub table: ParamId,
}

/// `DWConv(5) - ReLU - Conv(1) - CA` or `Conv(3) - ReLU - Conv(3) - CA`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBranch {
    pub first: ConvIds,
    pub second: ConvIds,
    pub ca: ChannelAttention,
}

impl ConvBranch {
    fn add_dw<T: Scalar>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, c: usize) -> Self {
        Self {
            first: ConvIds::add_depthwise(store, init, &format!("{name}.dw"), c, 5),
            second: ConvIds::add(store, init, &format!("{name}.pw"), c, c, 1),
            ca: ChannelAttention::add(store, init, &format!("{name}.ca"), c),
        }
    }

    fn add_dense<T: Scalar>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, c: usize) -> Self {
        Self {
            first: ConvIds::add(store, init, &format!("{name}.conv1"), c, c, 3),
            second: ConvIds::add(store, init, &format!("{name}.conv2"), c, c, 3),
            ca: ChannelAttention::add(store, init, &format!("{name}.ca"), c),
        }
    }

    fn resolve<T: Scalar>(store: &ParamStore<T>, name: &str, depthwise: bool) -> Result<Self> {
        let (a, b) = if depthwise { ("dw", "pw") } else { ("conv1", "conv2") };
        Ok(Self {
            first: ConvIds::resolve(store, &format!("{name}.{a}"), depthwise)?,
            second: ConvIds::resolve(store, &format!("{name}.{b}"), false)?,
            ca: ChannelAttention::resolve(store, &format!("{name}.ca"))?,
        })
    }

    /// Tokens `[H·W×C]` in, tokens out.
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let map = g.tokens_to_chw(x, h, w)?;
        let y = self.first.apply(g, store, map)?;
        let y = g.relu(y);
        let y = self.second.apply(g, store, y)?;
        let t = g.chw_to_tokens(y)?;
        self.ca.apply(g, store, t)
    }
}

/// Branch outputs recorded during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BranchTap {
    pub stage: usize,
    pub block: usize,
    /// `H·W×C` tokens.
    pub f_mhsa: Option<Var>,
    pub f_conv: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Single(SingleBranchBlock),
    Dual(DualBranchBlock),
}

impl Block {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        match self {
            Block::Single(b) => b.forward(g, store, x, h, w).map(|(y, c)| (y, None, Some(c))),
            Block::Dual(b) => b.forward(g, store, x, h, w),
        }
    }
}

/// `y = x + post(ConvBlock(LN(x)))`, then `y + FFN(LN(y))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleBranchBlock {
    pub ln1: NormIds,
    pub conv: ConvBranch,
    pub post: LinearIds,
    pub ln2: NormIds,
    pub ffn: Ffn,
}

impl SingleBranchBlock {
    pub fn add<T: Scalar>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, dims: BlockDims) -> Self {
        let c = dims.channels;
        Self {
            ln1: NormIds::add(store, &format!("{name}.ln1"), c),
            conv: ConvBranch::add_dense(store, init, &format!("{name}.conv"), c),
            post: LinearIds::add(store, init, &format!("{name}.post"), c, c, LinearInit::TruncNormal(LINEAR_INIT_STD)),
            ln2: NormIds::add(store, &format!("{name}.ln2"), c),
            ffn: Ffn::add(store, init, &format!("{name}.ffn"), c, dims.ffn_ratio),
        }
    }

    pub fn resolve<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            ln1: NormIds::resolve(store, &format!("{name}.ln1"))?,
            conv: ConvBranch::resolve(store, &format!("{name}.conv"), false)?,
            post: LinearIds::resolve(store, &format!("{name}.post"))?,
            ln2: NormIds::resolve(store, &format!("{name}.ln2"))?,
            ffn: Ffn::resolve(store, &format!("{name}.ffn"))?,
        })
    }

    /// Returns the block output and the conv-branch features.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<(Var, Var)> {
        let xn = self.ln1.apply(g, store, x)?;
        let f_conv = self.conv.apply(g, store, xn, h, w)?;
        let p = self.post.apply(g, store, f_conv)?;
        let y = g.add(x, p)?;
        let y = feed_forward(g, store, y, self.ln2, self.ffn)?;
        Ok((y, f_conv))
    }
}

fn feed_forward<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, y: Var, ln: NormIds, ffn: Ffn) -> Result<Var> {
    let yn = ln.apply(g, store, y)?;
    let f = ffn.apply(g, store, yn)?;
    g.add(y, f)
}

/// `y = x + post(F_MHSA + F_conv)`, then `y + FFN(LN(y))`, where both branches
/// read the projections of `LN(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchBlock {
    pub mode: BranchMode,
    pub dims: BlockDims,
    pub shift: usize,
    pub ln1: NormIds,
    pub v: LinearIds,
    pub attn: Option<WindowAttnParams>,
    pub conv: Option<ConvBranch>,
    pub post: LinearIds,
    pub ln2: NormIds,
    pub ffn: Ffn,
}

impl DualBranchBlock {
    pub fn add<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        dims: BlockDims,
        shift: usize,
        mode: BranchMode,
    ) -> Result<Self> {
        check_dims(dims, shift)?;
        let c = dims.channels;
        let scheme = LinearInit::TruncNormal(LINEAR_INIT_STD);
        let ln1 = NormIds::add(store, &format!("{name}.ln1"), c);
        let attn = mode.has_attention().then(|| {
            let rows = (2 * dims.window - 1) * (2 * dims.window - 1);
            WindowAttnParams {
                q: LinearIds::add(store, init, &format!("{name}.attn.q"), c, c, scheme),
                k: LinearIds::add(store, init, &format!("{name}.attn.k"), c, c, scheme),
                o: LinearIds::add(store, init, &format!("{name}.attn.o"), c, c, scheme),
                table: store.add(
                    format!("{name}.attn.table"),
                    init.trunc_normal(&[rows, dims.heads], LINEAR_INIT_STD),
                ),
            }
        });
        let v = LinearIds::add(store, init, &format!("{name}.v"), c, c, scheme);
        let conv = mode
            .has_conv()
            .then(|| ConvBranch::add_dw(store, init, &format!("{name}.conv"), c));
        Ok(Self {
            mode,
            dims,
            shift,
            ln1,
            v,
            attn,
            conv,
            post: LinearIds::add(store, init, &format!("{name}.post"), c, c, scheme),
            ln2: NormIds::add(store, &format!("{name}.ln2"), c),
            ffn: Ffn::add(store, init, &format!("{name}.ffn"), c, dims.ffn_ratio),
        })
    }

    pub fn resolve<T: Scalar>(
        store: &ParamStore<T>,
        name: &str,
        dims: BlockDims,
        shift: usize,
        mode: BranchMode,
    ) -> Result<Self> {
        check_dims(dims, shift)?;
        let attn = if mode.has_attention() {
            Some(WindowAttnParams {
                q: LinearIds::resolve(store, &format!("{name}.attn.q"))?,
                k: LinearIds::resolve(store, &format!("{name}.attn.k"))?,
                o: LinearIds::resolve(store, &format!("{name}.attn.o"))?,
                table: store.require(&format!("{name}.attn.table"))?,
            })
        } else {
            None
        };
        let conv = if mode.has_conv() {
            Some(ConvBranch::resolve(store, &format!("{name}.conv"), true)?)
        } else {
            None
        };
        Ok(Self {
            mode,
            dims,
            shift,
            ln1: NormIds::resolve(store, &format!("{name}.ln1"))?,
            v: LinearIds::resolve(store, &format!("{name}.v"))?,
            attn,
            conv,
            post: LinearIds::resolve(store, &format!("{name}.post"))?,
            ln2: NormIds::resolve(store, &format!("{name}.ln2"))?,
            ffn: Ffn::resolve(store, &format!("{name}.ffn"))?,
        })
    }

    /// Multi-head window attention of `LN(x)` projections, output projected
    /// by `W_o`. `xn` and `v` are `H·W×C` tokens.
    pub fn attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xn: Var,
        v: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let p = self
            .attn
            .ok_or_else(|| Error::contract("block has no attention branch"))?;
        let layout = WindowLayout::new(h, w, self.dims.window, self.shift);
        let att = Arc::new(AttentionLayout::from_windows(&layout, self.dims.heads, self.dims.channels));
        let q = p.q.apply(g, store, xn)?;
        let k = p.k.apply(g, store, xn)?;
        let [qw, kw, vw] = [q, k, v].map(|t| g.gather_rows_dense(t, &layout.gather));
        let table = g.param(store, p.table);
        let a = g.window_attention(qw?, kw?, vw?, table, att)?;
        let a = g.gather_rows_dense(a, &layout.scatter)?;
        p.o.apply(g, store, a)
    }

    /// Returns the block output, `F_MHSA`, and `F_conv`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        let xn = self.ln1.apply(g, store, x)?;
        let v = self.v.apply(g, store, xn)?;
        let f_mhsa = match self.mode.has_attention() {
            true => Some(self.attention(g, store, xn, v, h, w)?),
            false => None,
        };
        let f_conv = match self.conv {
            Some(conv) => {
                let input = match self.mode {
                    BranchMode::ParallelOnInput => xn,
                    BranchMode::Sequential => f_mhsa.expect("sequential mode has attention"),
                    _ => v,
                };
                Some(conv.apply(g, store, input, h, w)?)
            }
            None => None,
        };
        let mixed = match (f_mhsa, f_conv) {
            (Some(a), Some(c)) => g.add(a, c)?,
            (Some(a), None) => a,
            (None, Some(c)) => c,
            (None, None) => unreachable!("every mode keeps a branch"),
        };
        let p = self.post.apply(g, store, mixed)?;
        let y = g.add(x, p)?;
        let y = feed_forward(g, store, y, self.ln2, self.ffn)?;
        Ok((y, f_mhsa, f_conv))
    }
}

fn check_dims(dims: BlockDims, shift: usize) -> Result<()> {
    if dims.heads == 0 || dims.channels % dims.heads != 0 {
        return Err(Error::Config(format!(
            "channels {} not divisible by {} heads",
            dims.channels, dims.heads
        )));
    }
    if dims.window == 0 || (shift > 0 && shift >= dims.window) {
        return Err(Error::Config(format!(
            "window {} with shift {shift} is invalid",
            dims.window
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    const DIMS: BlockDims = BlockDims {
        channels: 4,
        window: 2,
        heads: 2,
        ffn_ratio: 2,
    };

    fn randomize_biases(store: &mut ParamStore<f64>) {
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, n, _)| n.ends_with(".b") || n.ends_with(".beta"))
            .map(|(id, _, _)| id)
            .collect();
        for (i, id) in ids.into_iter().enumerate() {
            let t = store.get_mut(id);
            *t = Tensor::from_fn(t.shape(), |j| 0.1 * ((i * 7 + j) as f64).sin());
        }
    }

    fn tokens(n: usize, c: usize, seed: f64) -> Tensor<f64> {
        Tensor::from_fn(&[n, c], |i| (i as f64 * 0.57 + seed).sin())
    }

    fn run_dual(store: &ParamStore<f64>, b: &DualBranchBlock, x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, _, _) = b.forward(&mut g, store, xv, h, w).unwrap();
        g.value(y).clone()
    }

    fn zero_params(store: &mut ParamStore<f64>, prefix: &str) {
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
    }

    #[test]
    fn zeroed_conv_branch_equals_attention_only() {
        let mut init = Initializer::new(1);
        let mut store = ParamStore::new();
        let dual = DualBranchBlock::add(&mut store, &mut init, "b", DIMS, 1, BranchMode::Parallel).unwrap();
        randomize_biases(&mut store);
        zero_params(&mut store, "b.conv.");
        let attn_only = DualBranchBlock::resolve(&store, "b", DIMS, 1, BranchMode::AttentionOnly).unwrap();
        let x = tokens(5 * 3, 4, 0.3);
        assert_eq!(run_dual(&store, &dual, &x, 5, 3), run_dual(&store, &attn_only, &x, 5, 3));
    }

    #[test]
    fn zero_input_and_biases_give_zero_output() {
        for mode in BranchMode::ALL {
            let mut init = Initializer::new(2);
            let mut store = ParamStore::new();
            let b = DualBranchBlock::add(&mut store, &mut init, "b", DIMS, 0, mode).unwrap();
            let y = run_dual(&store, &b, &Tensor::zeros(&[16, 4]), 4, 4);
            assert!(y.data().iter().all(|&v| v == 0.0), "{mode:?}");
        }
    }

    #[test]
    fn conv_branch_leaks_across_windows() {
        let (h, w) = (4, 4);
        let mut init = Initializer::new(3);
        let mut store = ParamStore::new();
        let par = DualBranchBlock::add(&mut store, &mut init, "b", DIMS, 0, BranchMode::Parallel).unwrap();
        randomize_biases(&mut store);
        let att = DualBranchBlock::resolve(&store, "b", DIMS, 0, BranchMode::AttentionOnly).unwrap();
        let x = tokens(h * w, 4, 0.9);
        // Perturb token (0, 2), outside the top-left 2×2 window; the change
        // must vary across channels or layer norm removes it.
        let mut x2 = x.clone();
        for c in 0..4 {
            let v = x2.at(&[2, c]);
            x2.set(&[2, c], v + c as f64 - 1.5);
        }
        let window_tokens = [0usize, 1, 4, 5];
        let moved = |b: &DualBranchBlock| {
            let (a, c) = (run_dual(&store, b, &x, h, w), run_dual(&store, b, &x2, h, w));
            window_tokens
                .iter()
                .flat_map(|&t| (0..4).map(move |ch| (t, ch)))
                .map(|(t, ch)| (a.at(&[t, ch]) - c.at(&[t, ch])).abs())
                .fold(0.0, f64::max)
        };
        assert_eq!(moved(&att), 0.0);
        assert!(moved(&par) > 0.0);
    }

    #[test]
    fn single_window_token_reduces_to_value_projection() {
        let dims = BlockDims {
            channels: 4,
            window: 1,
            heads: 2,
            ffn_ratio: 2,
        };
        let mut init = Initializer::new(4);
        let mut store = ParamStore::new();
        let b = DualBranchBlock::add(&mut store, &mut init, "b", dims, 0, BranchMode::AttentionOnly).unwrap();
        randomize_biases(&mut store);
        let xn = tokens(6, 4, 0.1);
        let mut g = Graph::new();
        let xv = g.constant(xn.clone());
        let v = b.v.apply(&mut g, &store, xv).unwrap();
        let a = b.attention(&mut g, &store, xv, v, 2, 3).unwrap();
        let o = b.attn.unwrap().o.apply(&mut g, &store, v).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(o)) < 1e-14);
    }

    #[test]
    fn single_branch_receptive_field_is_five_by_five() {
        let dims = BlockDims {
            channels: 3,
            window: 1,
            heads: 1,
            ffn_ratio: 2,
        };
        let (h, w) = (9, 9);
        let mut init = Initializer::new(5);
        let mut store = ParamStore::new();
        let b = SingleBranchBlock::add(&mut store, &mut init, "s", dims);
        // Random gate so channel attention is not uniform.
        randomize_biases(&mut store);
        for name in ["s.conv.conv1.b", "s.conv.conv2.b", "s.post.b", "s.ffn.up.b", "s.ffn.down.b", "s.ln1.beta", "s.ln2.beta"] {
            let id = store.require(name).unwrap();
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut x = Tensor::zeros(&[h * w, 3]);
        let center = 4 * w + 4;
        for c in 0..3 {
            x.set(&[center, c], [1.0, -2.0, 0.5][c]);
        }
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (y, _) = b.forward(&mut g, &store, xv, h, w).unwrap();
        let y = g.value(y);
        let mut hit = 0;
        for t in 0..h * w {
            let (ty, tx) = (t / w, t % w);
            let nonzero = (0..3).any(|c| y.at(&[t, c]) != 0.0);
            if nonzero {
                hit += 1;
                assert!(ty.abs_diff(4) <= 2 && tx.abs_diff(4) <= 2, "token ({ty},{tx})");
            }
        }
        assert!(hit > 1);
    }

    #[test]
    fn zero_weights_make_single_branch_identity() {
        let dims = BlockDims {
            channels: 4,
            window: 1,
            heads: 1,
            ffn_ratio: 2,
        };
        let mut init = Initializer::new(6);
        let mut store = ParamStore::new();
        let b = SingleBranchBlock::add(&mut store, &mut init, "s", dims);
        zero_params(&mut store, "s.post");
        zero_params(&mut store, "s.ffn.down");
        let x = tokens(12, 4, 1.3);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, _) = b.forward(&mut g, &store, xv, 3, 4).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn uniform_channel_statistics_gate_equally() {
        let mut init = Initializer::new(7);
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::add(&mut store, &mut init, "ca", 8);
        // Equal excite rows and equal channel means give one shared gate.
        let e = ca.excite.w;
        let shape = store.get(e).shape().to_vec();
        *store.get_mut(e) = Tensor::from_fn(&shape, |i| 0.3 * (i / shape[1]) as f64 + 0.1);
        let x = Tensor::from_fn(&[5, 8], |i| 1.0 + ((i / 8) as f64 * 0.7).sin());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = ca.apply(&mut g, &store, xv).unwrap();
        let ratio = g.value(y).at(&[0, 0]) / x.at(&[0, 0]);
        for r in 0..5 {
            for c in 0..8 {
                assert!((g.value(y).at(&[r, c]) - ratio * x.at(&[r, c])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_heads_not_dividing_channels() {
        let mut init = Initializer::new(0);
        let mut store = ParamStore::<f64>::new();
        let dims = BlockDims {
            channels: 6,
            window: 2,
            heads: 4,
            ffn_ratio: 2,
        };
        assert!(DualBranchBlock::add(&mut store, &mut init, "b", dims, 0, BranchMode::Parallel).is_err());
        assert_eq!("conv_only".parse::<BranchMode>().unwrap(), BranchMode::ConvOnly);
    }
}
