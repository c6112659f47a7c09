//! Brute-force reference implementations, written directly from the
//! definitions and sharing no code with the kernels they check.

#![allow(dead_code)]

use itsr_core::numerics::cubic_weight;
use itsr_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Triple loop.
pub fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

/// Six nested loops, zero padding `(k-1)/2`.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, k) = (w.dim(0), w.dim(2));
    let p = (k as isize - 1) / 2;
    let mut out = vec![0.0; cout * h * wd];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b.data()[o];
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - p;
                            let sx = xx as isize + kx as isize - p;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                acc += w.at(&[o, i, ky, kx]) * x.at(&[i, sy as usize, sx as usize]);
                            }
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

/// Dense convolution with a block-diagonal kernel built from `w [C×k×k]`.
pub fn depthwise_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (c, k) = (w.dim(0), w.dim(1));
    let mut dense = Tensor::zeros(&[c, c, k, k]);
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                dense.set(&[ch, ch, ky, kx], w.at(&[ch, ky, kx]));
            }
        }
    }
    conv2d(x, &dense, b)
}

/// `exp(x) / Σ exp(x)` along `axis`, no max shift.
pub fn softmax(x: &Tensor<f64>, axis: usize) -> Vec<f64> {
    let shape = x.shape();
    let strides = x.strides();
    let mut out = vec![0.0; x.len()];
    for flat in 0..x.len() {
        let along = (flat / strides[axis]) % shape[axis];
        let base = flat - along * strides[axis];
        let denom: f64 = (0..shape[axis]).map(|j| x.data()[base + j * strides[axis]].exp()).sum();
        out[flat] = x.data()[flat].exp() / denom;
    }
    out
}

/// Direct `O(N⁴)` DFT magnitude with DC at `(H/2, W/2)`.
pub fn fft2_magnitude(x: &Tensor<f64>) -> Vec<f64> {
    let (h, w) = (x.dim(0), x.dim(1));
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    re += x.at(&[y, xx]) * phase.cos();
                    im += x.at(&[y, xx]) * phase.sin();
                }
            }
            out[((u + h / 2) % h) * w + (v + w / 2) % w] = re.hypot(im);
        }
    }
    out
}

/// Normalized Keys weights of every input sample for output `o`, with the
/// kernel stretched by the downscale factor and edge-clamped taps.
fn cubic_row(o: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let src = (o as f64 + 0.5) * scale - 0.5;
    let mut wts = vec![0.0; n_in];
    let reach = (2.0 * stretch).ceil() as isize + 2;
    for i in (src.floor() as isize - reach)..=(src.ceil() as isize + reach) {
        let idx = i.clamp(0, n_in as isize - 1) as usize;
        wts[idx] += cubic_weight((i as f64 - src) / stretch);
    }
    let total: f64 = wts.iter().sum();
    wts.iter().map(|w| w / total).collect()
}

/// Non-separable evaluation: every output pixel sums over every input pixel.
pub fn bicubic_resize(img: &Tensor<f64>, out_h: usize, out_w: usize) -> Vec<f64> {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    if (h, w) == (out_h, out_w) {
        return img.data().to_vec();
    }
    let rows: Vec<Vec<f64>> = (0..out_h).map(|o| cubic_row(o, h, out_h)).collect();
    let cols: Vec<Vec<f64>> = (0..out_w).map(|o| cubic_row(o, w, out_w)).collect();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += rows[oy][y] * cols[ox][x] * img.at(&[ch, y, x]);
                    }
                }
                out[(ch * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    out
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let mut i = i as isize;
    let last = n as isize - 1;
    loop {
        if i > last {
            i = 2 * last - i;
        } else if i < 0 {
            i = -i;
        } else {
            return i as usize;
        }
    }
}

/// Region of a coordinate in the shifted map: blocks straddling the wrap
/// seam of the cyclic shift are split into independent regions.
fn region(s: usize, extent: usize, m: usize, shift: usize) -> usize {
    if s < extent - m {
        0
    } else if s < extent - shift {
        1
    } else {
        2
    }
}

/// Shifted-window attention in image order, one query pixel at a time.
///
/// The map is reflection-padded to window multiples and cyclically shifted
/// by `shift`; each pixel attends over its window (same-region tokens only
/// when shifted), with a learned bias per relative offset and head.
#[allow(clippy::too_many_arguments)]
pub fn window_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    table: &Tensor<f64>,
    h: usize,
    w: usize,
    m: usize,
    shift: usize,
    heads: usize,
) -> Vec<f64> {
    let c = q.dim(1);
    let d = c / heads;
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    let side = 2 * m - 1;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let ys = (y + ph - shift % ph) % ph;
            let xs = (x + pw - shift % pw) % pw;
            let (wy, wx) = (ys / m * m, xs / m * m);
            let mut keys = Vec::new();
            for ky in wy..wy + m {
                for kx in wx..wx + m {
                    let same = shift == 0
                        || (region(ky, ph, m, shift) == region(ys, ph, m, shift)
                            && region(kx, pw, m, shift) == region(xs, pw, m, shift));
                    if same {
                        let src = reflect((ky + shift) % ph, h) * w + reflect((kx + shift) % pw, w);
                        let rel = (ys - wy + m - 1 - (ky - wy)) * side + (xs - wx + m - 1 - (kx - wx));
                        keys.push((src, rel));
                    }
                }
            }
            let p = y * w + x;
            for hd in 0..heads {
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|&(src, rel)| {
                        let dot: f64 = (0..d).map(|j| q.at(&[p, hd * d + j]) * k.at(&[src, hd * d + j])).sum();
                        dot / (d as f64).sqrt() + table.at(&[rel, hd])
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for (&(src, _), l) in keys.iter().zip(&logits) {
                    let prob = l.exp() / z;
                    for j in 0..d {
                        out[p * c + hd * d + j] += prob * v.at(&[src, hd * d + j]);
                    }
                }
            }
        }
    }
    out
}
