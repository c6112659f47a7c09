//! Implicit transformer upsampler.
//!
//! Each HR query `p` looks up its LR neighbor `p*`: the query is the linear
//! projection of the offset `p - p*`, key and value are projections of the
//! LR feature at `p*`. The value is re-weighted by `σ(K ⊙ Q + W_s·S)`, where
//! `S` is the HR cell size, and rendered to RGB by the MLP `Φ`. Predictions
//! from the four surrounding LR cells are blended with bilinear weights.
//!
//! Keys and values are projected on the LR grid once and gathered per query,
//! which is equivalent to projecting the gathered features.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coords::{query_stencils, CellSize, OffsetField, QueryStencil};
use crate::error::{Error, Result};
use crate::grad::{Graph, ParamStore, Var};
use crate::nn::{Initializer, LinearIds, LinearInit, Mlp};
use crate::numerics::Activation;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Queries evaluated per tape during full-grid inference.
pub const QUERY_CHUNK: usize = 4096;

/// Nonlinearity `σ` applied to `K ⊙ Q + W_s·S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reweight {
    Sin,
    Tanh,
    Sigmoid,
    /// Softmax over the channel axis of each query.
    Softmax,
}

impl Reweight {
    pub const ALL: [Reweight; 4] = [Reweight::Sin, Reweight::Tanh, Reweight::Sigmoid, Reweight::Softmax];

    pub fn name(self) -> &'static str {
        match self {
            Reweight::Sin => "sin",
            Reweight::Tanh => "tanh",
            Reweight::Sigmoid => "sigmoid",
            Reweight::Softmax => "softmax",
        }
    }
}

impl std::str::FromStr for Reweight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown reweight function `{s}`")))
    }
}

/// How per-query features are formed before rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `σ(K ⊙ Q + W_s·S) ⊙ V`.
    Modulation,
    /// `concat(Q, unfold3x3(V))`.
    LiifConcat,
    /// Bilinearly interpolated `V`, no coordinate input and no ensemble.
    BilinearOnly,
    /// `H(offset) ⊙ V` with a two-layer offset MLP `H`.
    ItsrnOffset,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Modulation,
        Variant::LiifConcat,
        Variant::BilinearOnly,
        Variant::ItsrnOffset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Modulation => "modulation",
            Variant::LiifConcat => "liif_concat",
            Variant::BilinearOnly => "bilinear_only",
            Variant::ItsrnOffset => "itsrn_offset",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown upsampler variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsamplerConfig {
    pub feat_channels: usize,
    pub c_up: usize,
    pub phi_hidden: usize,
    pub reweight: Reweight,
    pub variant: Variant,
}

impl UpsamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_channels == 0 || self.c_up == 0 || self.phi_hidden == 0 {
            return Err(Error::Config(format!("upsampler widths must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Input width of `Φ`.
    pub fn phi_input(&self) -> usize {
        match self.variant {
            Variant::LiifConcat => self.c_up + 9 * self.c_up,
            _ => self.c_up,
        }
    }

    fn phi_widths(&self) -> [usize; 5] {
        let h = self.phi_hidden;
        [self.phi_input(), h, h, h, 3]
    }
}

/// LR-grid projections shared by every query of one image.
#[derive(Clone, Copy, Debug)]
pub struct GridVars {
    /// Keys `[H·W × C_up]` (modulation only).
    pub k: Option<Var>,
    /// Values `[H·W × C_up]`, or `[H·W × 9·C_up]` unfolded for `LiifConcat`.
    pub v: Var,
}

/// Parameter handles of the upsampler; the tensors live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampler {
    pub config: UpsamplerConfig,
    q: Option<LinearIds>,
    k: Option<LinearIds>,
    v: LinearIds,
    s: Option<LinearIds>,
    h: Option<Mlp>,
    phi: Mlp,
}

impl Upsampler {
    /// Registers freshly initialized parameters under `prefix`.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        config: UpsamplerConfig,
        prefix: &str,
        scheme: LinearInit,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.c_up;
        let uses = Uses::of(config.variant);
        let mut lin = |name: &str, i, o| LinearIds::add(store, init, &format!("{prefix}.{name}"), i, o, scheme);
        let q = uses.q.then(|| lin("q", 2, c));
        let k = uses.k.then(|| lin("k", config.feat_channels, c));
        let v = lin("v", config.feat_channels, c);
        let s = uses.k.then(|| lin("s", 2, c));
        let h = uses
            .h
            .then(|| Mlp::add(store, init, &format!("{prefix}.h"), &[2, c, c], scheme));
        let phi = Mlp::add(store, init, &format!("{prefix}.phi"), &config.phi_widths(), scheme);
        Ok(Self { config, q, k, v, s, h, phi })
    }

    /// Looks up existing parameters under `prefix`.
    pub fn resolve<T: Scalar>(store: &ParamStore<T>, config: UpsamplerConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let uses = Uses::of(config.variant);
        let lin = |name: &str| LinearIds::resolve(store, &format!("{prefix}.{name}"));
        let opt = |on: bool, name: &str| on.then(|| lin(name)).transpose();
        Ok(Self {
            config,
            q: opt(uses.q, "q")?,
            k: opt(uses.k, "k")?,
            v: lin("v")?,
            s: opt(uses.k, "s")?,
            h: uses
                .h
                .then(|| Mlp::resolve(store, &format!("{prefix}.h"), 2))
                .transpose()?,
            phi: Mlp::resolve(store, &format!("{prefix}.phi"), 4)?,
        })
    }

    fn need<'a>(&self, ids: &'a Option<LinearIds>, what: &str) -> Result<&'a LinearIds> {
        ids.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "variant {} has no {what} projection",
                self.config.variant.name()
            ))
        })
    }

    /// Projects LR tokens `[H·W × C_feat]` to keys and values.
    pub fn project_grid<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feats: Var,
        h_lr: usize,
        w_lr: usize,
    ) -> Result<GridVars> {
        let want = [h_lr * w_lr, self.config.feat_channels];
        if g.shape(feats) != want {
            return Err(Error::shape("upsampler features", g.shape(feats), &want));
        }
        let k = self.k.map(|k| k.apply(g, store, feats)).transpose()?;
        let mut v = self.v.apply(g, store, feats)?;
        if self.config.variant == Variant::LiifConcat {
            v = unfold3x3(g, v, h_lr, w_lr)?;
        }
        Ok(GridVars { k, v })
    }

    /// `σ(K ⊙ Q + W_s·S) ⊙ V` for aligned `[N × C_up]` rows.
    pub fn modulate_vars<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        k: Var,
        v: Var,
        cell: CellSize,
    ) -> Result<Var> {
        let s_ids = self.need(&self.s, "scale")?;
        let s_in = g.constant(Tensor::from_vec(&[1, 2], vec![T::lit(cell.s_h), T::lit(cell.s_w)]));
        let s_row = s_ids.apply(g, store, s_in)?;
        let kq = g.mul(k, q)?;
        let pre = g.add_row(kq, s_row)?;
        let weight = match self.config.reweight {
            Reweight::Sin => g.act(pre, Activation::Sin),
            Reweight::Tanh => g.act(pre, Activation::Tanh),
            Reweight::Sigmoid => g.act(pre, Activation::Sigmoid),
            Reweight::Softmax => g.softmax_rows(pre)?,
        };
        g.mul(weight, v)
    }

    /// `Φ` applied row-wise.
    pub fn render_var<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.phi.apply(g, store, x)
    }

    /// RGB rows `[N × 3]` for queries with precomputed stencils.
    ///
    /// `rows[i][n]` is the row of `grid` holding neighbor `n` of query `i`.
    pub fn query_path<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        grid: &GridVars,
        stencils: &[QueryStencil],
        rows: &[[usize; 4]],
        cell: CellSize,
    ) -> Result<Var> {
        if stencils.len() != rows.len() || stencils.is_empty() {
            return Err(Error::contract(format!(
                "{} stencils for {} row sets",
                stencils.len(),
                rows.len()
            )));
        }
        if self.config.variant == Variant::BilinearOnly {
            let mut acc = None;
            for n in 0..4 {
                let idx: Vec<usize> = rows.iter().map(|r| r[n]).collect();
                let vq = g.gather_rows_dense(grid.v, &idx)?;
                let w = Arc::new(stencils.iter().map(|s| T::lit(s.weights[n])).collect());
                let term = g.scale_rows(vq, w)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            let blended = acc.expect("four neighbors");
            return self.render_var(g, store, blended);
        }

        let mut out: Option<Var> = None;
        for n in 0..4 {
            let active: Vec<usize> = (0..stencils.len()).filter(|&i| stencils[i].weights[n] > 0.0).collect();
            if active.is_empty() {
                continue;
            }
            let idx: Vec<usize> = active.iter().map(|&i| rows[i][n]).collect();
            let offsets = Tensor::from_vec(
                &[active.len(), 2],
                active
                    .iter()
                    .flat_map(|&i| {
                        let (dy, dx) = stencils[i].offsets[n];
                        [T::lit(dy), T::lit(dx)]
                    })
                    .collect(),
            );
            let offsets = g.constant(offsets);
            let vq = g.gather_rows_dense(grid.v, &idx)?;
            let feat = match self.config.variant {
                Variant::Modulation => {
                    let q = self.need(&self.q, "query")?.apply(g, store, offsets)?;
                    let k = grid.k.ok_or_else(|| Error::contract("modulation needs projected keys"))?;
                    let kq = g.gather_rows_dense(k, &idx)?;
                    self.modulate_vars(g, store, q, kq, vq, cell)?
                }
                Variant::LiifConcat => {
                    let q = self.need(&self.q, "query")?.apply(g, store, offsets)?;
                    g.concat_cols(q, vq)?
                }
                Variant::ItsrnOffset => {
                    let h = self.h.as_ref().expect("offset MLP present for this variant");
                    let hq = h.apply(g, store, offsets)?;
                    g.mul(hq, vq)?
                }
                Variant::BilinearOnly => unreachable!("handled above"),
            };
            let rgb = self.render_var(g, store, feat)?;
            let w = Arc::new(active.iter().map(|&i| T::lit(stencils[i].weights[n])).collect());
            let mut term = g.scale_rows(rgb, w)?;
            if active.len() != stencils.len() {
                let mut slot = vec![None; stencils.len()];
                for (pos, &i) in active.iter().enumerate() {
                    slot[i] = Some(pos);
                }
                term = g.gather_rows(term, Arc::new(slot))?;
            }
            out = Some(match out {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        out.ok_or_else(|| Error::contract("no query has a positive ensemble weight"))
    }

    /// Query-sparse forward: RGB rows `[N × 3]` at HR pixels `queries` of an
    /// `h_hr × w_hr` grid, from LR tokens `[h_lr·w_lr × C_feat]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_queries<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feats: Var,
        h_lr: usize,
        w_lr: usize,
        h_hr: usize,
        w_hr: usize,
        queries: &[(usize, usize)],
    ) -> Result<Var> {
        let stencils = query_stencils(h_lr, w_lr, h_hr, w_hr, queries)?;
        let grid = self.project_grid(g, store, feats, h_lr, w_lr)?;
        let rows: Vec<[usize; 4]> = stencils
            .iter()
            .map(|s| s.neighbors.map(|(y, x)| y * w_lr + x))
            .collect();
        self.query_path(g, store, &grid, &stencils, &rows, CellSize::for_grid(h_hr, w_hr))
    }

    /// Full-grid inference: `feats[C_feat × H × W]` to `[3 × h_hr × w_hr]`.
    ///
    /// Queries are processed in independent chunks of [`QUERY_CHUNK`], in
    /// parallel; each chunk only copies the LR rows its stencils touch.
    pub fn upsample<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        feats: &Tensor<T>,
        h_hr: usize,
        w_hr: usize,
    ) -> Result<Tensor<T>> {
        if feats.ndim() != 3 || feats.dim(0) != self.config.feat_channels {
            return Err(Error::shape(
                "upsample features",
                feats.shape(),
                &[self.config.feat_channels, 0, 0],
            ));
        }
        let (h_lr, w_lr) = (feats.dim(1), feats.dim(2));
        // Validates the grids before any work.
        query_stencils(h_lr, w_lr, h_hr, w_hr, &[])?;

        let (k_grid, v_grid) = {
            let mut g = Graph::new();
            let x = g.constant(feats.clone());
            let tokens = g.chw_to_tokens(x)?;
            let grid = self.project_grid(&mut g, store, tokens, h_lr, w_lr)?;
            (grid.k.map(|k| g.value(k).clone()), g.value(grid.v).clone())
        };
        let cell = CellSize::for_grid(h_hr, w_hr);
        let total = h_hr * w_hr;
        let starts: Vec<usize> = (0..total).step_by(QUERY_CHUNK).collect();
        let chunks: Vec<Tensor<T>> = starts
            .par_iter()
            .map(|&start| {
                let end = (start + QUERY_CHUNK).min(total);
                let queries: Vec<(usize, usize)> = (start..end).map(|i| (i / w_hr, i % w_hr)).collect();
                let stencils = query_stencils(h_lr, w_lr, h_hr, w_hr, &queries)?;
                let mut compact: HashMap<usize, usize> = HashMap::new();
                let mut order = Vec::new();
                let rows: Vec<[usize; 4]> = stencils
                    .iter()
                    .map(|s| {
                        s.neighbors.map(|(y, x)| {
                            let cell = y * w_lr + x;
                            *compact.entry(cell).or_insert_with(|| {
                                order.push(cell);
                                order.len() - 1
                            })
                        })
                    })
                    .collect();
                let mut g = Graph::new();
                let grid = GridVars {
                    k: k_grid.as_ref().map(|k| g.constant(take_rows(k, &order))),
                    v: g.constant(take_rows(&v_grid, &order)),
                };
                let rgb = self.query_path(&mut g, store, &grid, &stencils, &rows, cell)?;
                Ok(g.value(rgb).clone())
            })
            .collect::<Result<_>>()?;

        let mut out = vec![T::zero(); 3 * total];
        for (&start, rgb) in starts.iter().zip(&chunks) {
            for (i, px) in rgb.data().chunks(3).enumerate() {
                for (c, &v) in px.iter().enumerate() {
                    out[c * total + start + i] = v;
                }
            }
        }
        let img = Tensor::from_vec(&[3, h_hr, w_hr], out);
        img.debug_check_finite("upsample");
        Ok(img)
    }

    /// Per-query `Q`, `K`, `V` at the nearest LR cell of every query in `field`.
    pub fn project_qkv<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        field: &OffsetField,
        feats: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (q_ids, k_ids) = (self.need(&self.q, "query")?, self.need(&self.k, "key")?);
        if feats.ndim() != 3 || feats.dim(1) != field.h_lr || feats.dim(2) != field.w_lr {
            return Err(Error::shape(
                "project_qkv",
                feats.shape(),
                &[self.config.feat_channels, field.h_lr, field.w_lr],
            ));
        }
        let mut g = Graph::new();
        let x = g.constant(feats.clone());
        let tokens = g.chw_to_tokens(x)?;
        let idx: Vec<usize> = field.nn_index.iter().map(|&(y, x)| y * field.w_lr + x).collect();
        let picked = g.gather_rows_dense(tokens, &idx)?;
        let offsets = g.constant(Tensor::from_vec(
            &[idx.len(), 2],
            field.offsets.data().iter().map(|&v| T::lit(v)).collect(),
        ));
        let q = q_ids.apply(&mut g, store, offsets)?;
        let k = k_ids.apply(&mut g, store, picked)?;
        let v = self.v.apply(&mut g, store, picked)?;
        Ok((g.value(q).clone(), g.value(k).clone(), g.value(v).clone()))
    }

    /// Tensor-level [`Upsampler::modulate_vars`].
    pub fn modulate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        cell: CellSize,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let y = self.modulate_vars(&mut g, store, q, k, v, cell)?;
        Ok(g.value(y).clone())
    }

    /// Tensor-level [`Upsampler::render_var`] on rows `[N × phi_input]`.
    pub fn render<T: Scalar>(&self, store: &ParamStore<T>, vp: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(vp.clone());
        let y = self.render_var(&mut g, store, x)?;
        Ok(g.value(y).clone())
    }

    /// Parameter handles of `Φ`, first layer first.
    pub fn phi(&self) -> &Mlp {
        &self.phi
    }
}

struct Uses {
    q: bool,
    k: bool,
    h: bool,
}

impl Uses {
    fn of(v: Variant) -> Self {
        match v {
            Variant::Modulation => Uses { q: true, k: true, h: false },
            Variant::LiifConcat => Uses { q: true, k: false, h: false },
            Variant::BilinearOnly => Uses { q: false, k: false, h: false },
            Variant::ItsrnOffset => Uses { q: false, k: false, h: true },
        }
    }
}

/// Concatenates the 3×3 neighborhood of every grid row, zero outside the grid.
/// Column block `(dy+1)·3 + (dx+1)` holds the neighbor at `(y+dy, x+dx)`.
fn unfold3x3<T: Scalar>(g: &mut Graph<T>, v: Var, h: usize, w: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let idx: Vec<Option<usize>> = (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as i64 + dy, (i % w) as i64 + dx);
                    (y >= 0 && x >= 0 && y < h as i64 && x < w as i64).then(|| y as usize * w + x as usize)
                })
                .collect();
            let shifted = g.gather_rows(v, Arc::new(idx))?;
            acc = Some(match acc {
                None => shifted,
                Some(a) => g.concat_cols(a, shifted)?,
            });
        }
    }
    Ok(acc.expect("nine taps"))
}

fn take_rows<T: Scalar>(x: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let c = x.dim(1);
    let mut out = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        out.extend_from_slice(&x.data()[r * c..(r + 1) * c]);
    }
    Tensor::from_vec(&[rows.len(), c], out)
}
