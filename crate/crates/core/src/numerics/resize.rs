//! Separable bicubic resampling (Keys kernel, `a = -0.5`).

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((KEYS_A + 2.0) * x - (KEYS_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((KEYS_A * x - 5.0 * KEYS_A) * x + 8.0 * KEYS_A) * x - 4.0 * KEYS_A
    } else {
        0.0
    }
}

/// Taps for one output sample: `(input index, weight)`, reference tap first.
struct Taps {
    taps: Vec<Vec<(usize, f64)>>,
}

impl Taps {
    /// Cell-center aligned taps; the kernel is stretched by the scale factor
    /// when downscaling, and out-of-range taps clamp to the edge.
    fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let stretch = scale.max(1.0);
        let support = 2.0 * stretch;
        let taps = (0..n_out)
            .map(|o| {
                let src = (o as f64 + 0.5) * scale - 0.5;
                let lo = (src - support).floor() as isize;
                let hi = (src + support).ceil() as isize;
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for i in lo..=hi {
                    let wgt = cubic_weight((i as f64 - src) / stretch);
                    if wgt == 0.0 {
                        continue;
                    }
                    let idx = i.clamp(0, n_in as isize - 1) as usize;
                    match acc.iter_mut().find(|(j, _)| *j == idx) {
                        Some(slot) => slot.1 += wgt,
                        None => acc.push((idx, wgt)),
                    }
                }
                let total: f64 = acc.iter().map(|t| t.1).sum();
                for t in acc.iter_mut() {
                    t.1 /= total;
                }
                // Largest weight first: it serves as the reference sample.
                acc.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                acc
            })
            .collect();
        Self { taps }
    }

    /// `out = x_ref + Σ w_i (x_i - x_ref)`, which equals `Σ w_i x_i` when the
    /// weights sum to one and is exact on constant input.
    #[inline]
    fn apply<T: Scalar>(&self, o: usize, fetch: impl Fn(usize) -> T) -> T {
        let taps = &self.taps[o];
        let reference = fetch(taps[0].0);
        let mut acc = T::zero();
        for &(i, w) in &taps[1..] {
            acc += T::lit(w) * (fetch(i) - reference);
        }
        reference + acc
    }
}

/// Resizes a `C×H×W` image to `C×out_h×out_w`.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    assert_eq!(img.ndim(), 3, "bicubic_resize expects C×H×W");
    assert!(out_h >= 1 && out_w >= 1, "output extents must be positive");
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }

    let horizontal = if w == out_w {
        img.clone()
    } else {
        let taps = Taps::new(w, out_w);
        let src = img.data();
        let mut out = vec![T::zero(); c * h * out_w];
        for ch in 0..c {
            for y in 0..h {
                let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
                for x in 0..out_w {
                    out[(ch * h + y) * out_w + x] = taps.apply(x, |i| row[i]);
                }
            }
        }
        Tensor::from_vec(&[c, h, out_w], out)
    };

    let resized = if h == out_h {
        horizontal
    } else {
        let taps = Taps::new(h, out_h);
        let src = horizontal.data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * out_w..(ch + 1) * h * out_w];
            for y in 0..out_h {
                for x in 0..out_w {
                    out[(ch * out_h + y) * out_w + x] = taps.apply(y, |i| plane[i * out_w + x]);
                }
            }
        }
        Tensor::from_vec(&[c, out_h, out_w], out)
    };
    resized.debug_check_finite("bicubic_resize");
    resized
}
