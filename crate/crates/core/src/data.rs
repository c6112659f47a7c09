//! Image I/O, synthetic screen content, degradation and the multi-scale
//! batch sampler.
//!
//! Images are `Tensor[3×H×W]` with values in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::thread::{self, JoinHandle};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coords::{center_coords, output_shape};
use crate::error::{Error, Result};
use crate::numerics::bicubic_resize;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest LR extent produced by [`make_pair`].
pub const MIN_LR: usize = 8;
/// Smallest extent accepted by [`synth_sci`].
pub const MIN_SYNTH: usize = 16;

// ---------------------------------------------------------------------------
// PPM

/// Reads a binary `P6` PPM with maxval 255.
pub fn load_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

/// Writes a binary `P6` PPM; values are clamped to `[0, 1]` and rounded half up.
pub fn save_ppm<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let bytes = encode_ppm(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    check_rgb(img)?;
    let (h, w) = (img.dim(1), img.dim(2));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = img.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_u8(d[c * h * w + p].as_f64()));
        }
    }
    Ok(out)
}

/// Quantizes `[0, 1]` to a byte, rounding half up; NaN maps to 0.
pub fn to_u8(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected binary PPM \"P6\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported (only 255)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("empty image {w}×{h}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = 3 * w * h;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < need {
        return Err(Error::Format(format!(
            "truncated payload: {} of {need} raster bytes",
            raster.len()
        )));
    }
    let mut data = vec![T::zero(); need];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = T::lit(raster[3 * p + c] as f64 / 255.0);
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad {what} {:?}", String::from_utf8_lossy(tok))))
}

fn check_rgb<T: Scalar>(img: &Tensor<T>) -> Result<()> {
    if img.ndim() != 3 || img.dim(0) != 3 {
        return Err(Error::shape("image", img.shape(), &[3, 0, 0]));
    }
    Ok(())
}

/// All `.ppm` files of `dir`, sorted by file name.
pub fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// File names listed one per line in `manifest` (blank lines and `#`
/// comments skipped), resolved against `dir`.
pub fn read_split(dir: &Path, manifest: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| dir.join(l))
        .collect())
}

pub fn load_pool<T: Scalar>(paths: &[PathBuf]) -> Result<Vec<Tensor<T>>> {
    paths.iter().map(|p| load_ppm(p)).collect()
}

// ---------------------------------------------------------------------------
// Synthetic screen content

/// 5×7 glyph-like bitmaps.
const GLYPHS: [[u8; 7]; 8] = [
    [0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
    [0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e],
    [0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e],
    [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f],
    [0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
    [0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
    [0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11],
    [0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
];

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<[u8; 3]>,
}

impl Canvas {
    fn fill(&mut self, y0: usize, x0: usize, y1: usize, x1: usize, c: [u8; 3]) {
        for y in y0..y1.min(self.h) {
            for x in x0..x1.min(self.w) {
                self.px[y * self.w + x] = c;
            }
        }
    }

    fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.h * self.w;
        Tensor::from_fn(&[3, self.h, self.w], |i| {
            T::lit(self.px[i % hw][i / hw] as f64 / 255.0)
        })
    }
}

fn color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Deterministic synthetic screen-content image: flat background, a smooth
/// gradient panel, flat rectangles, glyph blocks and 1-px rules. At least one
/// black 1-px horizontal rule on a white band is always present. Values lie
/// on the 8-bit grid, so PPM round trips are lossless.
pub fn synth_sci<T: Scalar>(seed: u64, h: usize, w: usize) -> Result<Tensor<T>> {
    if h < MIN_SYNTH || w < MIN_SYNTH {
        return Err(Error::TooSmall(format!(
            "synthetic images need at least {MIN_SYNTH}×{MIN_SYNTH}, got {h}×{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = if rng.random_bool(0.5) {
        [rng.random_range(200..=255); 3]
    } else {
        color(&mut rng)
    };
    let mut cv = Canvas {
        h,
        w,
        px: vec![bg; h * w],
    };

    // Smooth gradient panel.
    let (gy0, gx0) = (rng.random_range(0..h / 2), rng.random_range(0..w / 2));
    let (gy1, gx1) = (rng.random_range(gy0 + h / 4..=h), rng.random_range(gx0 + w / 4..=w));
    let (ca, cb) = (color(&mut rng), color(&mut rng));
    let horizontal = rng.random_bool(0.5);
    for y in gy0..gy1 {
        for x in gx0..gx1 {
            let t = if horizontal {
                (x - gx0) as f64 / (gx1 - gx0).max(2) as f64
            } else {
                (y - gy0) as f64 / (gy1 - gy0).max(2) as f64
            };
            let mut c = [0u8; 3];
            for k in 0..3 {
                c[k] = (ca[k] as f64 * (1.0 - t) + cb[k] as f64 * t).round() as u8;
            }
            cv.px[y * w + x] = c;
        }
    }

    // Flat rectangles.
    for _ in 0..rng.random_range(2..6) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (rh, rw) = (rng.random_range(2..=h / 2), rng.random_range(2..=w / 2));
        let c = color(&mut rng);
        cv.fill(y0, x0, y0 + rh, x0 + rw, c);
    }

    // Glyph rows.
    for _ in 0..rng.random_range(1..4) {
        let s = rng.random_range(1..=2usize);
        let (gh, gw) = (7 * s, 6 * s);
        if gh + 1 > h || gw > w {
            continue;
        }
        let y0 = rng.random_range(0..=h - gh);
        let mut x = rng.random_range(0..w / 2);
        let ink = if rng.random_bool(0.7) { [0, 0, 0] } else { color(&mut rng) };
        while x + gw <= w && rng.random_bool(0.85) {
            let g = &GLYPHS[rng.random_range(0..GLYPHS.len())];
            for (r, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits >> (4 - col) & 1 == 1 {
                        cv.fill(y0 + r * s, x + col * s, y0 + (r + 1) * s, x + (col + 1) * s, ink);
                    }
                }
            }
            x += gw;
        }
    }

    // Random 1-px rules.
    for _ in 0..rng.random_range(1..4) {
        let c = color(&mut rng);
        if rng.random_bool(0.5) {
            let y = rng.random_range(0..h);
            let (x0, len) = (rng.random_range(0..w), rng.random_range(4..=w));
            cv.fill(y, x0, y + 1, x0 + len, c);
        } else {
            let x = rng.random_range(0..w);
            let (y0, len) = (rng.random_range(0..h), rng.random_range(4..=h));
            cv.fill(y0, x, y0 + len, x + 1, c);
        }
    }

    // Guaranteed full-contrast rule: black row inside a 3-row white band.
    let y = rng.random_range(1..h - 1);
    let x0 = rng.random_range(0..w / 2);
    let x1 = rng.random_range(x0 + 4..=w);
    cv.fill(y - 1, x0, y + 2, x1, [255; 3]);
    cv.fill(y, x0, y + 1, x1, [0; 3]);

    Ok(cv.to_tensor())
}

/// True when some pixel is black on all channels with white pixels directly
/// above and below, or directly left and right.
pub fn has_full_contrast_rule<T: Scalar>(img: &Tensor<T>) -> bool {
    let (h, w) = (img.dim(1), img.dim(2));
    let is = |y: usize, x: usize, v: f64| (0..3).all(|c| img.at(&[c, y, x]).as_f64() == v);
    (0..h).any(|y| {
        (0..w).any(|x| {
            is(y, x, 0.0)
                && ((y > 0 && y + 1 < h && is(y - 1, x, 1.0) && is(y + 1, x, 1.0))
                    || (x > 0 && x + 1 < w && is(y, x - 1, 1.0) && is(y, x + 1, 1.0)))
        })
    })
}

// ---------------------------------------------------------------------------
// Degradation

/// Crops `[3×h×w]` at `(y0, x0)`.
pub fn crop<T: Scalar>(img: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let (src_h, src_w) = (img.dim(1), img.dim(2));
    assert!(y0 + h <= src_h && x0 + w <= src_w, "crop out of bounds");
    let d = img.data();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), i / w % h, i % w);
        d[(c * src_h + y0 + y) * src_w + x0 + x]
    })
}

/// LR extents for an HR image of `h × w` at scale `r`: the largest grid
/// whose `output_shape` fits inside the HR image.
pub fn lr_shape(h: usize, w: usize, r: f64) -> Result<(usize, usize)> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::contract(format!("scale {r} must be a finite value >= 1")));
    }
    let fit = |n: usize| -> Result<usize> {
        let mut m = (n as f64 / r).floor() as usize;
        while m > 0 && output_shape(m, 1, r)?.0 > n {
            m -= 1;
        }
        Ok(m)
    };
    Ok((fit(h)?, fit(w)?))
}

/// Bicubic LR/HR pair: the LR image has `floor(H/r) × floor(W/r)` pixels and
/// the HR image is center-cropped to the `output_shape` of that grid.
pub fn make_pair<T: Scalar>(hr: &Tensor<T>, r: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    check_rgb(hr)?;
    let (h, w) = (hr.dim(1), hr.dim(2));
    let (lh, lw) = lr_shape(h, w, r)?;
    if lh < MIN_LR || lw < MIN_LR {
        return Err(Error::TooSmall(format!(
            "{h}×{w} at scale {r} gives a {lh}×{lw} LR image (minimum {MIN_LR})"
        )));
    }
    let (ch, cw) = output_shape(lh, lw, r)?;
    let hr = crop(hr, (h - ch) / 2, (w - cw) / 2, ch, cw);
    let lr = bicubic_resize(&hr, lh, lw);
    Ok((lr, hr))
}

// ---------------------------------------------------------------------------
// Batches

/// Sampling parameters of one training batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchSpec {
    pub batch: usize,
    /// LR patch extent (square).
    pub patch: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub augment: bool,
}

/// One training sample: LR patch, its scale and the sampled HR pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub lr: Tensor<T>,
    pub r: f64,
    /// HR crop extents, equal to `output_shape(patch, patch, r)`.
    pub hr_shape: (usize, usize),
    /// Sampled HR pixel indices `(row, col)` inside the crop, distinct.
    pub gt_index: Vec<(usize, usize)>,
    /// `[N×3]` RGB values at `gt_index`.
    pub gt: Tensor<T>,
}

impl<T: Scalar> Sample<T> {
    /// Continuous `(y, x)` coordinates of the sampled pixels in `[-1, 1]²`.
    pub fn gt_coords(&self) -> Result<Vec<(f64, f64)>> {
        let ys = center_coords::<f64>(self.hr_shape.0)?;
        let xs = center_coords::<f64>(self.hr_shape.1)?;
        Ok(self
            .gt_index
            .iter()
            .map(|&(y, x)| (ys.data()[y], xs.data()[x]))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch<T> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> TrainBatch<T> {
    /// LR patches stacked as `[b×3×h×w]`.
    pub fn lr_patches(&self) -> Tensor<T> {
        let (h, w) = (self.samples[0].lr.dim(1), self.samples[0].lr.dim(2));
        let data = self.samples.iter().flat_map(|s| s.lr.data().iter().copied()).collect();
        Tensor::from_vec(&[self.samples.len(), 3, h, w], data)
    }

    /// GT pixels stacked as `[b×(h·w)×3]`.
    pub fn gt_pixels(&self) -> Tensor<T> {
        let n = self.samples[0].gt.dim(0);
        let data = self.samples.iter().flat_map(|s| s.gt.data().iter().copied()).collect();
        Tensor::from_vec(&[self.samples.len(), n, 3], data)
    }
}

/// Random flips and transposition of a square-or-rectangular crop window;
/// each applied independently with probability 0.5.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub flip_h: bool,
    pub flip_v: bool,
    pub transpose: bool,
}

impl Augment {
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
            transpose: rng.random_bool(0.5),
        }
    }

    /// Source extents needed to produce an `h × w` result.
    pub fn source_shape(self, h: usize, w: usize) -> (usize, usize) {
        if self.transpose {
            (w, h)
        } else {
            (h, w)
        }
    }

    pub fn apply<T: Scalar>(self, img: &Tensor<T>) -> Tensor<T> {
        let (sh, sw) = (img.dim(1), img.dim(2));
        let (h, w) = self.source_shape(sh, sw);
        let d = img.data();
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, mut y, mut x) = (i / (h * w), i / w % h, i % w);
            if self.transpose {
                std::mem::swap(&mut y, &mut x);
            }
            if self.flip_v {
                y = sh - 1 - y;
            }
            if self.flip_h {
                x = sw - 1 - x;
            }
            d[(c * sh + y) * sw + x]
        })
    }
}

/// Draws one batch. Every sample picks an image (without replacement while
/// the pool lasts), a scale `r ~ U(r_min, r_max)`, an HR crop of
/// `output_shape(patch, patch, r)`, bicubic-downsamples it to the patch and
/// samples `patch²` distinct HR pixels.
pub fn make_batch<T: Scalar>(pool: &[Tensor<T>], spec: &BatchSpec, rng: &mut ChaCha8Rng) -> Result<TrainBatch<T>> {
    if pool.is_empty() {
        return Err(Error::contract("empty image pool"));
    }
    if spec.batch == 0 || spec.patch == 0 {
        return Err(Error::Config("batch and patch must be positive".into()));
    }
    if !(spec.r_min >= 1.0 && spec.r_max >= spec.r_min && spec.r_max.is_finite()) {
        return Err(Error::Config(format!(
            "scale range [{}, {}] must satisfy 1 <= r_min <= r_max",
            spec.r_min, spec.r_max
        )));
    }
    let order = index::sample(rng, pool.len(), spec.batch.min(pool.len())).into_vec();
    let mut samples = Vec::with_capacity(spec.batch);
    for i in 0..spec.batch {
        let img = match order.get(i) {
            Some(&k) => &pool[k],
            None => &pool[rng.random_range(0..pool.len())],
        };
        let r = if spec.r_max > spec.r_min {
            rng.random_range(spec.r_min..=spec.r_max)
        } else {
            spec.r_min
        };
        let (ch, cw) = output_shape(spec.patch, spec.patch, r)?;
        let aug = if spec.augment { Augment::draw(rng) } else { Augment::default() };
        let (sh, sw) = aug.source_shape(ch, cw);
        let (h, w) = (img.dim(1), img.dim(2));
        if sh > h || sw > w {
            return Err(Error::TooSmall(format!(
                "a {h}×{w} pool image cannot hold a {sh}×{sw} crop (scale {r:.3})"
            )));
        }
        let (y0, x0) = (rng.random_range(0..=h - sh), rng.random_range(0..=w - sw));
        let hr = aug.apply(&crop(img, y0, x0, sh, sw));
        let lr = bicubic_resize(&hr, spec.patch, spec.patch);
        let n = spec.patch * spec.patch;
        let picks = index::sample(rng, ch * cw, n).into_vec();
        let gt_index: Vec<(usize, usize)> = picks.iter().map(|&p| (p / cw, p % cw)).collect();
        let hd = hr.data();
        let gt = Tensor::from_fn(&[n, 3], |j| {
            let (y, x) = gt_index[j / 3];
            hd[((j % 3) * ch + y) * cw + x]
        });
        samples.push(Sample {
            lr,
            r,
            hr_shape: (ch, cw),
            gt_index,
            gt,
        });
    }
    Ok(TrainBatch { samples })
}

/// Reproducible per-step generator: stream `step` of the seeded ChaCha8, so
/// any step can be regenerated without replaying earlier ones.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Background batch producer feeding a bounded queue; the worker blocks
/// while the queue is full. Batches for steps `start..end` are produced in
/// order from [`step_rng`], so the sequence equals inline generation.
pub struct BatchProducer<T> {
    rx: Receiver<Result<TrainBatch<T>>>,
    handle: Option<JoinHandle<()>>,
}

impl<T: Scalar> BatchProducer<T> {
    pub fn spawn(
        pool: std::sync::Arc<Vec<Tensor<T>>>,
        spec: BatchSpec,
        seed: u64,
        steps: std::ops::Range<u64>,
        capacity: usize,
    ) -> Self {
        let (tx, rx): (SyncSender<_>, _) = mpsc::sync_channel(capacity.max(1));
        let handle = thread::spawn(move || {
            for step in steps {
                let batch = make_batch(&pool, &spec, &mut step_rng(seed, step));
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        Self {
            rx,
            handle: Some(handle),
        }
    }

    /// Next batch, or `None` once the range is exhausted.
    pub fn next_batch(&mut self) -> Option<Result<TrainBatch<T>>> {
        self.rx.recv().ok()
    }
}

impl<T> Drop for BatchProducer<T> {
    fn drop(&mut self) {
        // Unblock a worker waiting on a full queue before joining it.
        let (_, dead) = mpsc::sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
