//! Continuous coordinates shared by the LR feature grid and HR queries.
//!
//! Pixel `i` of an `n`-cell axis sits at `-1 + (2i+1)/n`. Query geometry is
//! evaluated in exact integer arithmetic: HR center `j` lands at LR index
//! coordinate `((2j+1)·n_lr - n_hr) / (2·n_hr)`, so coinciding grids give
//! offsets and ensemble weights that are exactly 0 and 1.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cell centers of an `n`-cell axis in `[-1, 1]`.
pub fn center_coords<T: Scalar>(n: usize) -> Result<Tensor<T>> {
    if n == 0 {
        return Err(Error::contract("center_coords needs n >= 1"));
    }
    Ok(Tensor::from_fn(&[n], |i| {
        T::lit(-1.0 + (2 * i + 1) as f64 / n as f64)
    }))
}

/// HR extents for an LR image magnified by `r`: `floor(r·h)`, `floor(r·w)`.
pub fn output_shape(h_lr: usize, w_lr: usize, r: f64) -> Result<(usize, usize)> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::contract(format!("scale {r} must be a finite value >= 1")));
    }
    Ok((
        (r * h_lr as f64).floor() as usize,
        (r * w_lr as f64).floor() as usize,
    ))
}

/// Extent of one HR cell in normalized coordinates; fed to the upsampler as
/// the scale bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellSize {
    pub s_h: f64,
    pub s_w: f64,
}

impl CellSize {
    pub fn for_grid(h_hr: usize, w_hr: usize) -> Self {
        Self {
            s_h: 2.0 / h_hr as f64,
            s_w: 2.0 / w_hr as f64,
        }
    }
}

/// Geometry of one HR query along one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisStencil {
    pub nearest: usize,
    /// `(x_q - x_nearest)·n_lr`: one LR half-cell maps to 1.
    pub nearest_offset: f64,
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
    pub off_lo: f64,
    pub off_hi: f64,
}

/// Stencil of HR center `j` (of `n_hr`) over an `n_lr`-cell axis.
pub fn axis_stencil(j: usize, n_lr: usize, n_hr: usize) -> AxisStencil {
    debug_assert!(n_lr >= 1 && n_hr >= 1 && j < n_hr);
    let num = (2 * j as i64 + 1) * n_lr as i64 - n_hr as i64;
    let den = 2 * n_hr as i64;
    let last = n_lr as i64 - 1;
    // Offset of the query from LR center `i`, in units where a half-cell is 1.
    let offset = |i: i64| (num - i * den) as f64 / n_hr as f64;

    // Nearest center: ceil(pos - 1/2), so exact ties resolve to the smaller index.
    let nearest = (-(-(num - n_hr as i64)).div_euclid(den)).clamp(0, last);
    let lo = num.div_euclid(den);
    let (lo, hi, w_lo, w_hi) = if lo < 0 {
        (0, 0, 1.0, 0.0)
    } else if lo >= last {
        (last, last, 1.0, 0.0)
    } else {
        let t = (num - lo * den) as f64 / den as f64;
        (lo, lo + 1, 1.0 - t, t)
    };
    AxisStencil {
        nearest: nearest as usize,
        nearest_offset: offset(nearest),
        lo: lo as usize,
        hi: hi as usize,
        w_lo,
        w_hi,
        off_lo: offset(lo),
        off_hi: offset(hi),
    }
}

/// Offsets of every HR query to its nearest LR center.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    pub h_lr: usize,
    pub w_lr: usize,
    /// `H_hr×W_hr×2`, (row, column) components.
    pub offsets: Tensor<f64>,
    /// Nearest LR cell `(row, col)` per query, row-major over the HR grid.
    pub nn_index: Vec<(usize, usize)>,
    pub cell: CellSize,
}

impl OffsetField {
    pub fn h_hr(&self) -> usize {
        self.offsets.dim(0)
    }

    pub fn w_hr(&self) -> usize {
        self.offsets.dim(1)
    }
}

fn check_grids(h_lr: usize, w_lr: usize, h_hr: usize, w_hr: usize) -> Result<()> {
    if h_lr == 0 || w_lr == 0 || h_hr < h_lr || w_hr < w_lr {
        return Err(Error::contract(format!(
            "query grid {h_hr}x{w_hr} must be at least the LR grid {h_lr}x{w_lr} (>= 1)"
        )));
    }
    Ok(())
}

pub fn project_queries(
    h_lr: usize,
    w_lr: usize,
    h_hr: usize,
    w_hr: usize,
) -> Result<(OffsetField, CellSize)> {
    check_grids(h_lr, w_lr, h_hr, w_hr)?;
    let rows: Vec<AxisStencil> = (0..h_hr).map(|j| axis_stencil(j, h_lr, h_hr)).collect();
    let cols: Vec<AxisStencil> = (0..w_hr).map(|j| axis_stencil(j, w_lr, w_hr)).collect();
    let mut offsets = Vec::with_capacity(h_hr * w_hr * 2);
    let mut nn_index = Vec::with_capacity(h_hr * w_hr);
    for r in &rows {
        for c in &cols {
            offsets.push(r.nearest_offset);
            offsets.push(c.nearest_offset);
            nn_index.push((r.nearest, c.nearest));
        }
    }
    let cell = CellSize::for_grid(h_hr, w_hr);
    let field = OffsetField {
        h_lr,
        w_lr,
        offsets: Tensor::from_vec(&[h_hr, w_hr, 2], offsets),
        nn_index,
        cell,
    };
    Ok((field, cell))
}

/// Bilinear blend weights of the four LR centers around each HR query.
///
/// Neighbor order is `(lo,lo)`, `(lo,hi)`, `(hi,lo)`, `(hi,hi)`. Clamped
/// duplicate neighbors at the border carry the merged weight on the `lo` slot.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleWeights {
    pub weights: [Tensor<f64>; 4],
    pub index: [Vec<(usize, usize)>; 4],
}

/// Full per-query stencil used by the upsampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryStencil {
    pub neighbors: [(usize, usize); 4],
    pub weights: [f64; 4],
    /// Cell-normalized `(row, col)` offset from each neighbor.
    pub offsets: [(f64, f64); 4],
}

impl QueryStencil {
    pub fn new(row: &AxisStencil, col: &AxisStencil) -> Self {
        let ys = [(row.lo, row.w_lo, row.off_lo), (row.hi, row.w_hi, row.off_hi)];
        let xs = [(col.lo, col.w_lo, col.off_lo), (col.hi, col.w_hi, col.off_hi)];
        let mut neighbors = [(0, 0); 4];
        let mut weights = [0.0; 4];
        let mut offsets = [(0.0, 0.0); 4];
        for (a, &(yi, yw, yo)) in ys.iter().enumerate() {
            for (b, &(xi, xw, xo)) in xs.iter().enumerate() {
                neighbors[a * 2 + b] = (yi, xi);
                weights[a * 2 + b] = yw * xw;
                offsets[a * 2 + b] = (yo, xo);
            }
        }
        Self {
            neighbors,
            weights,
            offsets,
        }
    }
}

pub fn ensemble_weights(h_lr: usize, w_lr: usize, h_hr: usize, w_hr: usize) -> Result<EnsembleWeights> {
    check_grids(h_lr, w_lr, h_hr, w_hr)?;
    let rows: Vec<AxisStencil> = (0..h_hr).map(|j| axis_stencil(j, h_lr, h_hr)).collect();
    let cols: Vec<AxisStencil> = (0..w_hr).map(|j| axis_stencil(j, w_lr, w_hr)).collect();
    let mut weights: [Vec<f64>; 4] = Default::default();
    let mut index: [Vec<(usize, usize)>; 4] = Default::default();
    for r in &rows {
        for c in &cols {
            let s = QueryStencil::new(r, c);
            for k in 0..4 {
                weights[k].push(s.weights[k]);
                index[k].push(s.neighbors[k]);
            }
        }
    }
    Ok(EnsembleWeights {
        weights: weights.map(|w| Tensor::from_vec(&[h_hr, w_hr], w)),
        index,
    })
}

/// Stencils for arbitrary HR pixel positions `(row, col)` of an `h_hr×w_hr` grid.
pub fn query_stencils(
    h_lr: usize,
    w_lr: usize,
    h_hr: usize,
    w_hr: usize,
    queries: &[(usize, usize)],
) -> Result<Vec<QueryStencil>> {
    check_grids(h_lr, w_lr, h_hr, w_hr)?;
    queries
        .iter()
        .map(|&(y, x)| {
            if y >= h_hr || x >= w_hr {
                return Err(Error::contract(format!(
                    "query ({y},{x}) outside {h_hr}x{w_hr} grid"
                )));
            }
            Ok(QueryStencil::new(
                &axis_stencil(y, h_lr, h_hr),
                &axis_stencil(x, w_lr, w_hr),
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers() {
        assert_eq!(center_coords::<f64>(1).unwrap().data(), &[0.0]);
        assert_eq!(center_coords::<f64>(2).unwrap().data(), &[-0.5, 0.5]);
        assert_eq!(
            center_coords::<f64>(4).unwrap().data(),
            &[-0.75, -0.25, 0.25, 0.75]
        );
        assert!(center_coords::<f64>(0).is_err());
    }

    #[test]
    fn output_shapes() {
        assert_eq!(output_shape(180, 320, 2.1).unwrap(), (378, 672));
        assert_eq!(output_shape(180, 320, 1.0).unwrap(), (180, 320));
        assert_eq!(output_shape(180, 320, 4.2).unwrap(), (756, 1344));
        assert!(output_shape(180, 320, 0.99).is_err());
        assert!(output_shape(4, 4, f64::NAN).is_err());
    }

    #[test]
    fn two_to_four_offsets() {
        let (field, cell) = project_queries(2, 1, 4, 1).unwrap();
        let rows: Vec<f64> = (0..4).map(|j| field.offsets.at(&[j, 0, 0])).collect();
        assert_eq!(rows, vec![-0.5, 0.5, -0.5, 0.5]);
        assert_eq!(
            field.nn_index.iter().map(|p| p.0).collect::<Vec<_>>(),
            vec![0, 0, 1, 1]
        );
        assert_eq!(cell, CellSize { s_h: 0.5, s_w: 2.0 });
    }

    #[test]
    fn ties_go_to_smaller_index() {
        // 2 -> 3: the middle HR center sits exactly between the two LR centers.
        let s = axis_stencil(1, 2, 3);
        assert_eq!(s.nearest, 0);
        assert_eq!(s.nearest_offset, 1.0);
        assert_eq!((s.w_lo, s.w_hi), (0.5, 0.5));
    }

    #[test]
    fn midpoint_query_weights_quarter() {
        let e = ensemble_weights(2, 2, 3, 3).unwrap();
        for k in 0..4 {
            assert_eq!(e.weights[k].at(&[1, 1]), 0.25);
        }
    }

    #[test]
    fn coinciding_grid_is_exact() {
        let e = ensemble_weights(5, 3, 5, 3).unwrap();
        for q in 0..15 {
            assert_eq!(e.weights[0].data()[q], 1.0);
            assert_eq!(e.index[0][q], (q / 3, q % 3));
            for k in 1..4 {
                assert_eq!(e.weights[k].data()[q], 0.0);
            }
        }
    }

    #[test]
    fn rejects_shrinking_grids() {
        assert!(project_queries(4, 4, 3, 4).is_err());
        assert!(ensemble_weights(0, 4, 3, 4).is_err());
        assert!(query_stencils(2, 2, 4, 4, &[(4, 0)]).is_err());
    }
}
