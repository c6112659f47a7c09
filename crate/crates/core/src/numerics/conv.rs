//! Same-padded 2-D cross-correlation, dense and depth-wise.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of one same-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        (self.k - 1) / 2
    }

    /// Output rows `y` whose input row `y + ky - pad` is in range; `None`
    /// when the tap never overlaps the input.
    #[inline]
    fn span(&self, kk: usize, extent: usize) -> Option<(usize, usize)> {
        let p = self.pad();
        let lo = p.saturating_sub(kk);
        let hi = (extent + p).saturating_sub(kk).min(extent);
        (lo < hi).then_some((lo, hi))
    }
}

/// Dense `C_out×C_in×k×k` kernel, zero padding `(k-1)/2`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = check_conv(x, w, b, false)?;
    let mut out = vec![T::zero(); d.cout * d.h * d.w];
    conv2d_into(x.data(), w.data(), Some(b.data()), d, &mut out);
    let y = Tensor::from_vec(&[d.cout, d.h, d.w], out);
    y.debug_check_finite("conv2d");
    Ok(y)
}

/// Channel-independent `C×k×k` kernel, zero padding `(k-1)/2`.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = check_conv(x, w, b, true)?;
    let mut out = vec![T::zero(); d.cout * d.h * d.w];
    depthwise_into(x.data(), w.data(), Some(b.data()), d, &mut out);
    let y = Tensor::from_vec(&[d.cout, d.h, d.w], out);
    y.debug_check_finite("depthwise_conv2d");
    Ok(y)
}

pub(crate) fn check_conv<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    depthwise: bool,
) -> Result<ConvDims> {
    if x.ndim() != 3 {
        return Err(Error::shape("conv2d input", x.shape(), &[0, 0, 0]));
    }
    let (cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let ok = if depthwise {
        w.ndim() == 3 && w.dim(0) == cin && w.dim(1) == w.dim(2)
    } else {
        w.ndim() == 4 && w.dim(1) == cin && w.dim(2) == w.dim(3)
    };
    if !ok {
        return Err(Error::shape("conv2d weight", x.shape(), w.shape()));
    }
    let k = *w.shape().last().unwrap();
    if k % 2 == 0 {
        return Err(Error::contract(format!("conv kernel size {k} must be odd")));
    }
    let cout = w.dim(0);
    if b.len() != cout {
        return Err(Error::shape("conv2d bias", w.shape(), b.shape()));
    }
    Ok(ConvDims {
        cin,
        cout,
        h,
        w: wd,
        k,
    })
}

pub(crate) fn conv2d_into<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: ConvDims,
    out: &mut [T],
) {
    let (h, wd, k, p) = (d.h, d.w, d.k, d.pad());
    let hw = h * wd;
    for o in 0..d.cout {
        let plane = &mut out[o * hw..(o + 1) * hw];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..d.cin {
            let src = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                let Some((ylo, yhi)) = d.span(ky, h) else { continue };
                for kx in 0..k {
                    let wv = w[((o * d.cin + c) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let Some((xlo, xhi)) = d.span(kx, wd) else { continue };
                    for y in ylo..yhi {
                        let sy = y + ky - p;
                        let dst = &mut plane[y * wd + xlo..y * wd + xhi];
                        let s = &src[sy * wd + xlo + kx - p..sy * wd + xhi + kx - p];
                        for (o, &v) in dst.iter_mut().zip(s) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients of [`conv2d_into`].
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    d: ConvDims,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (h, wd, k, p) = (d.h, d.w, d.k, d.pad());
    let hw = h * wd;
    if let Some(gb) = gb {
        for o in 0..d.cout {
            gb[o] += gy[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
    }
    for o in 0..d.cout {
        let g = &gy[o * hw..(o + 1) * hw];
        for c in 0..d.cin {
            let src = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                let Some((ylo, yhi)) = d.span(ky, h) else { continue };
                for kx in 0..k {
                    let widx = ((o * d.cin + c) * k + ky) * k + kx;
                    let Some((xlo, xhi)) = d.span(kx, wd) else { continue };
                    let mut acc = T::zero();
                    for y in ylo..yhi {
                        let sy = y + ky - p;
                        let gr = &g[y * wd + xlo..y * wd + xhi];
                        let so = sy * wd + xlo + kx - p;
                        if gw.is_some() {
                            let s = &src[so..so + (xhi - xlo)];
                            for (&a, &b) in gr.iter().zip(s) {
                                acc += a * b;
                            }
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let wv = w[widx];
                            let dst = &mut gx[c * hw + so..c * hw + so + (xhi - xlo)];
                            for (o, &a) in dst.iter_mut().zip(gr) {
                                *o += wv * a;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_into<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: ConvDims,
    out: &mut [T],
) {
    let (h, wd, k, p) = (d.h, d.w, d.k, d.pad());
    let hw = h * wd;
    for c in 0..d.cout {
        let plane = &mut out[c * hw..(c + 1) * hw];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[c]);
        }
        let src = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            let Some((ylo, yhi)) = d.span(ky, h) else { continue };
            for kx in 0..k {
                let wv = w[(c * k + ky) * k + kx];
                let Some((xlo, xhi)) = d.span(kx, wd) else { continue };
                for y in ylo..yhi {
                    let sy = y + ky - p;
                    let dst = &mut plane[y * wd + xlo..y * wd + xhi];
                    let s = &src[sy * wd + xlo + kx - p..sy * wd + xhi + kx - p];
                    for (o, &v) in dst.iter_mut().zip(s) {
                        *o += wv * v;
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    d: ConvDims,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (h, wd, k, p) = (d.h, d.w, d.k, d.pad());
    let hw = h * wd;
    if let Some(gb) = gb {
        for c in 0..d.cout {
            gb[c] += gy[c * hw..(c + 1) * hw].iter().copied().sum::<T>();
        }
    }
    for c in 0..d.cout {
        let g = &gy[c * hw..(c + 1) * hw];
        let src = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            let Some((ylo, yhi)) = d.span(ky, h) else { continue };
            for kx in 0..k {
                let widx = (c * k + ky) * k + kx;
                let Some((xlo, xhi)) = d.span(kx, wd) else { continue };
                let mut acc = T::zero();
                for y in ylo..yhi {
                    let sy = y + ky - p;
                    let gr = &g[y * wd + xlo..y * wd + xhi];
                    let so = sy * wd + xlo + kx - p;
                    let s = &src[so..so + (xhi - xlo)];
                    for (&a, &b) in gr.iter().zip(s) {
                        acc += a * b;
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let dst = &mut gx[c * hw + so..c * hw + so + (xhi - xlo)];
                        for (o, &a) in dst.iter_mut().zip(gr) {
                            *o += w[widx] * a;
                        }
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[widx] += acc;
                }
            }
        }
    }
}
