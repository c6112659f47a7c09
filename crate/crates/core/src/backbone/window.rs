//! Window partitioning and windowed multi-head self-attention.
//!
//! Tokens live in an `N×C` matrix with `N = H·W` in row-major pixel order.
//! A [`WindowLayout`] maps that matrix onto `nW·M²` window slots after
//! reflection padding to window multiples and a cyclic shift.

use crate::scalar::Scalar;

/// Index `y` of a padded axis folded back into `[0, n)` by mirror reflection
/// (edge sample not repeated).
pub fn reflect_index(y: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = y % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Token permutation for one (size, window, shift) configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowLayout {
    pub h: usize,
    pub w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub window: usize,
    pub shift: usize,
    /// Window slot -> source token.
    pub gather: Vec<usize>,
    /// Source token -> window slot holding its unpadded copy.
    pub scatter: Vec<usize>,
    /// Region label per slot; tokens attend only within their own label.
    pub labels: Option<Vec<u8>>,
}

impl WindowLayout {
    pub fn new(h: usize, w: usize, window: usize, shift: usize) -> Self {
        assert!(window >= 1 && shift < window, "shift must be below window size");
        let padded_h = h.div_ceil(window) * window;
        let padded_w = w.div_ceil(window) * window;
        let (nwy, nwx) = (padded_h / window, padded_w / window);
        let tokens = window * window;
        let mut gather = vec![0; nwy * nwx * tokens];
        let mut scatter = vec![0; h * w];
        let mut labels = (shift > 0).then(|| vec![0u8; gather.len()]);

        let region = |s: usize, extent: usize| -> u8 {
            if s < extent - window {
                0
            } else if s < extent - shift {
                1
            } else {
                2
            }
        };

        for ys in 0..padded_h {
            for xs in 0..padded_w {
                let slot = ((ys / window) * nwx + xs / window) * tokens
                    + (ys % window) * window
                    + xs % window;
                let py = (ys + shift) % padded_h;
                let px = (xs + shift) % padded_w;
                gather[slot] = reflect_index(py, h) * w + reflect_index(px, w);
                if py < h && px < w {
                    scatter[py * w + px] = slot;
                }
                if let Some(l) = labels.as_mut() {
                    l[slot] = region(ys, padded_h) * 3 + region(xs, padded_w);
                }
            }
        }
        Self {
            h,
            w,
            padded_h,
            padded_w,
            window,
            shift,
            gather,
            scatter,
            labels,
        }
    }

    pub fn num_windows(&self) -> usize {
        (self.padded_h / self.window) * (self.padded_w / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }
}

/// Rearranges `N×C` tokens into window order, `nW·M²×C`.
pub fn window_partition<T: Scalar>(tokens: &[T], channels: usize, layout: &WindowLayout) -> Vec<T> {
    let mut out = Vec::with_capacity(layout.gather.len() * channels);
    for &src in &layout.gather {
        out.extend_from_slice(&tokens[src * channels..(src + 1) * channels]);
    }
    out
}

/// Inverse of [`window_partition`]: drops padding and undoes the shift.
pub fn window_reverse<T: Scalar>(windows: &[T], channels: usize, layout: &WindowLayout) -> Vec<T> {
    let mut out = Vec::with_capacity(layout.scatter.len() * channels);
    for &slot in &layout.scatter {
        out.extend_from_slice(&windows[slot * channels..(slot + 1) * channels]);
    }
    out
}

/// Static description of one windowed attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub window: usize,
    pub n_windows: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Relative-position row in the bias table for each `(i, j)` token pair.
    pub rel_index: Vec<usize>,
    pub labels: Option<Vec<u8>>,
}

impl AttentionLayout {
    pub fn new(window: usize, n_windows: usize, heads: usize, channels: usize, labels: Option<Vec<u8>>) -> Self {
        assert!(heads > 0 && channels % heads == 0, "channels must divide into heads");
        Self {
            window,
            n_windows,
            heads,
            head_dim: channels / heads,
            rel_index: relative_position_index(window),
            labels,
        }
    }

    pub fn from_windows(layout: &WindowLayout, heads: usize, channels: usize) -> Self {
        Self::new(layout.window, layout.num_windows(), heads, channels, layout.labels.clone())
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn table_rows(&self) -> usize {
        (2 * self.window - 1) * (2 * self.window - 1)
    }

    #[inline]
    fn allowed(&self, win: usize, i: usize, j: usize) -> bool {
        match &self.labels {
            None => true,
            Some(l) => {
                let t = self.tokens();
                l[win * t + i] == l[win * t + j]
            }
        }
    }
}

/// Row of the `(2M-1)²` bias table addressed by each token pair of an `M×M` window.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let t = m * m;
    let side = 2 * m - 1;
    let mut idx = vec![0; t * t];
    for i in 0..t {
        let (yi, xi) = (i / m, i % m);
        for j in 0..t {
            let (yj, xj) = (j / m, j % m);
            idx[i * t + j] = (yi + m - 1 - yj) * side + (xi + m - 1 - xj);
        }
    }
    idx
}

/// `softmax(q·kᵀ/√D + B)·v` per window and head. Returns the head-concatenated
/// output and the attention probabilities `[nW, heads, M², M²]`.
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    table: &[T],
    lay: &AttentionLayout,
) -> (Vec<T>, Vec<T>) {
    let t = lay.tokens();
    let c = lay.channels();
    let d = lay.head_dim;
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    let mut out = vec![T::zero(); lay.n_windows * t * c];
    let mut probs = vec![T::zero(); lay.n_windows * lay.heads * t * t];
    let mut row = vec![T::zero(); t];
    for win in 0..lay.n_windows {
        let base = win * t;
        for hd in 0..lay.heads {
            let off = hd * d;
            for i in 0..t {
                let qi = &q[(base + i) * c + off..(base + i) * c + off + d];
                let mut m = T::neg_infinity();
                for j in 0..t {
                    if !lay.allowed(win, i, j) {
                        continue;
                    }
                    let kj = &k[(base + j) * c + off..(base + j) * c + off + d];
                    let mut s = T::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        s += a * b;
                    }
                    let s = s * scale + table[lay.rel_index[i * t + j] * lay.heads + hd];
                    row[j] = s;
                    m = m.max(s);
                }
                let mut z = T::zero();
                for j in 0..t {
                    if lay.allowed(win, i, j) {
                        row[j] = (row[j] - m).exp();
                        z += row[j];
                    } else {
                        row[j] = T::zero();
                    }
                }
                let p = &mut probs[((win * lay.heads + hd) * t + i) * t..][..t];
                for j in 0..t {
                    p[j] = row[j] / z;
                }
                let o = &mut out[(base + i) * c + off..(base + i) * c + off + d];
                for j in 0..t {
                    let pj = p[j];
                    if pj == T::zero() {
                        continue;
                    }
                    let vj = &v[(base + j) * c + off..(base + j) * c + off + d];
                    for (o, &b) in o.iter_mut().zip(vj) {
                        *o += pj * b;
                    }
                }
            }
        }
    }
    (out, probs)
}

pub(crate) struct AttentionGrads<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub table: Vec<T>,
}

pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gout: &[T],
    lay: &AttentionLayout,
) -> AttentionGrads<T> {
    let t = lay.tokens();
    let c = lay.channels();
    let d = lay.head_dim;
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let mut gt = vec![T::zero(); lay.table_rows() * lay.heads];
    let mut dp = vec![T::zero(); t];
    for win in 0..lay.n_windows {
        let base = win * t;
        for hd in 0..lay.heads {
            let off = hd * d;
            for i in 0..t {
                let p = &probs[((win * lay.heads + hd) * t + i) * t..][..t];
                let go = &gout[(base + i) * c + off..(base + i) * c + off + d];
                // dV_j += p_ij · dO_i ; dP_ij = dO_i · V_j
                let mut dot = T::zero();
                for j in 0..t {
                    if !lay.allowed(win, i, j) {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &v[(base + j) * c + off..(base + j) * c + off + d];
                    let gvj = &mut gv[(base + j) * c + off..(base + j) * c + off + d];
                    let mut s = T::zero();
                    for ((g, &o), &b) in gvj.iter_mut().zip(go).zip(vj) {
                        *g += p[j] * o;
                        s += o * b;
                    }
                    dp[j] = s;
                    dot += s * p[j];
                }
                for j in 0..t {
                    if !lay.allowed(win, i, j) {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot);
                    if ds == T::zero() {
                        continue;
                    }
                    gt[lay.rel_index[i * t + j] * lay.heads + hd] += ds;
                    let dss = ds * scale;
                    for e in 0..d {
                        gq[(base + i) * c + off + e] += dss * k[(base + j) * c + off + e];
                        gk[(base + j) * c + off + e] += dss * q[(base + i) * c + off + e];
                    }
                }
            }
        }
    }
    AttentionGrads {
        q: gq,
        k: gk,
        v: gv,
        table: gt,
    }
}
