//! Image quality metrics, evaluation reports, the ablation runner and the
//! branch-spectrum diagnostic.
//!
//! Metrics use full RGB in `[0, 1]` without border cropping.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::backbone::{Block, BranchMode, BranchTap};
use crate::data::make_pair;
use crate::error::{Error, Result};
use crate::grad::Graph;
use crate::model::{Model, ModelConfig};
use crate::numerics::{bicubic_resize, fft2_magnitude};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, Trainer};
use crate::upsampler::{Reweight, Variant};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `10·log10(1/MSE)`; `+∞` for identical images.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    if se == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (a.len() as f64 / se).log10())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut t = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable Gaussian filter over valid windows of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = taps.iter().enumerate().map(|(k, t)| t * x[y * w + x0 + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = taps.iter().enumerate().map(|(k, t)| t * rows[(y0 + k) * ow + x0]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ 1.5, K1 0.01, K2 0.03,
/// L 1), computed per channel and averaged.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() || a.ndim() != 3 {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let taps = gaussian_taps();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let hw = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * hw..(ch + 1) * hw].iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.data()[ch * hw..(ch + 1) * hw].iter().map(|v| v.as_f64()).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let sxx = filter_valid(&prod(&x, &x), h, w, &taps);
        let syy = filter_valid(&prod(&y, &y), h, w, &taps);
        let sxy = filter_valid(&prod(&x, &y), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Clamps predictions to the displayable range.
pub fn clamp_unit<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|v| v.max(T::zero()).min(T::one()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub image: String,
    pub scale: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores plus per-scale means.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub variant: Variant,
    pub reweight: Reweight,
    pub branch_mode: BranchMode,
    pub rows: Vec<ImageScore>,
}

impl MetricReport {
    pub fn scales(&self) -> Vec<f64> {
        let mut s: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !s.contains(&r.scale) {
                s.push(r.scale);
            }
        }
        s
    }

    /// Mean PSNR and SSIM at `scale`; an infinite PSNR propagates.
    pub fn mean(&self, scale: f64) -> Option<(f64, f64)> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.scale == scale).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        ))
    }

    /// Aligned table of per-scale means, split into scales up to
    /// `in_scale_max` and beyond it.
    pub fn to_table(&self, in_scale_max: f64) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "model: variant={} reweight={} branch={}",
            self.variant.name(),
            self.reweight.name(),
            self.branch_mode.name()
        );
        let _ = writeln!(out, "{:<24} {:>7} {:>9} {:>8} {:>7}", "split", "scale", "PSNR", "SSIM", "images");
        for (label, inside) in [("in-training-scale", true), ("out-of-training-scale", false)] {
            for s in self.scales().into_iter().filter(|&s| (s <= in_scale_max) == inside) {
                let (p, q) = self.mean(s).expect("scale present");
                let n = self.rows.iter().filter(|r| r.scale == s).count();
                let _ = writeln!(out, "{label:<24} {:>7} {:>9.3} {q:>8.4} {n:>7}", format!("×{s}"), p);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,scale,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", r.image, r.scale, r.psnr, r.ssim);
        }
        out
    }
}

/// Super-resolves bicubic-degraded versions of every image at every scale.
/// Predictions are clamped to `[0, 1]` before scoring. Images too small for
/// a scale are an error.
pub fn evaluate<T: Scalar>(model: &Model<T>, images: &[(String, Tensor<T>)], scales: &[f64]) -> Result<MetricReport> {
    let jobs: Vec<(usize, f64)> = (0..images.len())
        .flat_map(|i| scales.iter().map(move |&r| (i, r)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(i, r)| {
            let (name, img) = &images[i];
            let (lr, hr) = make_pair(img, r)?;
            let sr = clamp_unit(&model.forward(&lr, r)?);
            Ok(ImageScore {
                image: name.clone(),
                scale: r,
                psnr: psnr(&sr, &hr)?,
                ssim: ssim(&sr, &hr)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        variant: model.config.variant,
        reweight: model.config.reweight,
        branch_mode: model.config.backbone.branch_mode,
        rows,
    })
}

/// Bicubic baseline scored like [`evaluate`].
pub fn evaluate_bicubic<T: Scalar>(images: &[(String, Tensor<T>)], scales: &[f64]) -> Result<Vec<ImageScore>> {
    let mut rows = Vec::new();
    for (name, img) in images {
        for &r in scales {
            let (lr, hr) = make_pair(img, r)?;
            let up = clamp_unit(&bicubic_resize(&lr, hr.dim(1), hr.dim(2)));
            rows.push(ImageScore {
                image: name.clone(),
                scale: r,
                psnr: psnr(&up, &hr)?,
                ssim: ssim(&up, &hr)?,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Ablation

/// Published full-scale numbers (×4): label, SCI2K PSNR/SSIM, SCID PSNR/SSIM.
pub type ReferenceRow = (&'static str, Option<(f64, f64)>, (f64, f64));

pub const UPSAMPLER_REFERENCE: &[ReferenceRow] = &[
    ("only V (bilinear)", Some((28.03, 0.9275)), (24.35, 0.8498)),
    ("concatenation (LIIF)", Some((31.25, 0.9571)), (27.37, 0.9073)),
    ("modulation", Some((31.66, 0.9597)), (27.84, 0.9149)),
];

pub const REWEIGHT_REFERENCE: &[ReferenceRow] = &[
    ("sin", Some((31.66, 0.9597)), (27.84, 0.9149)),
    ("tanh", Some((31.42, 0.9587)), (27.67, 0.9135)),
    ("sigmoid", Some((31.36, 0.9585)), (27.58, 0.9120)),
    ("softmax", Some((31.29, 0.9578)), (27.52, 0.9113)),
];

/// SCID only for the block ablation.
pub const BRANCH_REFERENCE: &[ReferenceRow] = &[
    ("sequential", None, (26.92, 0.9033)),
    ("attention only", None, (27.38, 0.9099)),
    ("conv only", None, (26.24, 0.8942)),
    ("parallel, conv on input", None, (27.63, 0.9133)),
    ("parallel, conv on V", None, (27.84, 0.9149)),
];

/// The three ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Variant,
    Reweight,
    Branch,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Variant, Axis::Reweight, Axis::Branch];

    pub fn title(self) -> &'static str {
        match self {
            Axis::Variant => "upsampler variant",
            Axis::Reweight => "reweighting function",
            Axis::Branch => "dual-branch block structure",
        }
    }

    pub fn reference(self) -> &'static [ReferenceRow] {
        match self {
            Axis::Variant => UPSAMPLER_REFERENCE,
            Axis::Reweight => REWEIGHT_REFERENCE,
            Axis::Branch => BRANCH_REFERENCE,
        }
    }

    /// `(label, config)` for every setting on this axis, derived from `base`.
    pub fn configs(self, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
        match self {
            Axis::Variant => Variant::ALL
                .iter()
                .map(|&v| {
                    let mut c = base.clone();
                    c.variant = v;
                    (v.name().to_string(), c)
                })
                .collect(),
            Axis::Reweight => Reweight::ALL
                .iter()
                .map(|&r| {
                    let mut c = base.clone();
                    c.variant = Variant::Modulation;
                    c.reweight = r;
                    (r.name().to_string(), c)
                })
                .collect(),
            Axis::Branch => BranchMode::ALL
                .iter()
                .map(|&m| {
                    let mut c = base.clone();
                    c.backbone.branch_mode = m;
                    (m.name().to_string(), c)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: &'static str,
    pub setting: String,
    pub params: usize,
    pub final_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub scale: f64,
    pub images: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// One aligned table per axis: the desk rows measured here, then the
    /// published full-scale reference rows for comparison.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for axis in Axis::ALL {
            let rows: Vec<_> = self.rows.iter().filter(|r| r.axis == axis.title()).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(
                out,
                "== Ablation: {} (desk scale, ×{} on {} image(s)) ==",
                axis.title(),
                self.scale,
                self.images.len()
            );
            let _ = writeln!(out, "{:<26} {:>9} {:>11} {:>9} {:>8}", "setting", "params", "final loss", "PSNR", "SSIM");
            for r in rows {
                let _ = writeln!(
                    out,
                    "{:<26} {:>9} {:>11.5} {:>9.3} {:>8.4}",
                    r.setting, r.params, r.final_loss, r.psnr, r.ssim
                );
            }
            let _ = writeln!(out, "-- published full-scale reference (×4) --");
            let _ = writeln!(out, "{:<26} {:>20} {:>20}", "setting", "SCI2K PSNR/SSIM", "SCID PSNR/SSIM");
            for (label, sci2k, scid) in axis.reference() {
                let a = sci2k.map_or("-".to_string(), |(p, s)| format!("{p:.2} / {s:.4}"));
                let _ = writeln!(out, "{label:<26} {a:>20} {:>20}", format!("{:.2} / {:.4}", scid.0, scid.1));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,setting,params,final_loss,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                r.axis, r.setting, r.params, r.final_loss, r.psnr, r.ssim
            );
        }
        out
    }
}

/// Trains every configuration on each requested axis with the same seed,
/// pool and schedule, then scores each on the same images at `scale`.
pub fn run_ablation<T: Scalar>(
    base: &ModelConfig,
    train: &TrainConfig,
    pool: &[Tensor<T>],
    eval_images: &[(String, Tensor<T>)],
    axes: &[Axis],
    scale: f64,
    seed: u64,
) -> Result<AblationReport> {
    if pool.is_empty() || eval_images.is_empty() {
        return Err(Error::contract("ablation needs training and evaluation images"));
    }
    let mut rows = Vec::new();
    for &axis in axes {
        for (setting, config) in axis.configs(base) {
            let model = Model::<T>::new(config, seed)?;
            let params = model.num_params();
            let mut trainer = Trainer::new(model, train.clone(), seed)?;
            let records = trainer.run(pool, None, &mut std::io::sink())?;
            let report = evaluate(&trainer.model, eval_images, &[scale])?;
            let (psnr, ssim) = report.mean(scale).expect("one scale evaluated");
            rows.push(AblationRow {
                axis: axis.title(),
                setting,
                params,
                final_loss: records.last().map_or(f64::NAN, |r| r.loss),
                psnr,
                ssim,
            });
        }
    }
    Ok(AblationReport {
        scale,
        images: eval_images.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Branch spectrum

/// Channel-averaged centered DFT magnitudes of both branch outputs of one
/// dual-branch block, with their high-frequency energy ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSpectrum<T> {
    pub conv: Tensor<T>,
    pub attention: Tensor<T>,
    pub hf_conv: f64,
    pub hf_attention: f64,
}

/// Share of spectral energy outside the central `H/2 × W/2` region of a
/// centered magnitude map; 0 for an all-zero map.
pub fn high_frequency_ratio<T: Scalar>(mag: &Tensor<T>) -> f64 {
    let (h, w) = (mag.dim(0), mag.dim(1));
    let (y0, x0) = (h / 2 - h / 4, w / 2 - w / 4);
    let (y1, x1) = (y0 + h / 2, x0 + w / 2);
    let (mut total, mut low) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let e = mag.at(&[y, x]).as_f64().powi(2);
            total += e;
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                low += e;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        (total - low) / total
    }
}

fn channel_mean_spectrum<T: Scalar>(tokens: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let c = tokens.dim(1);
    let mut acc = vec![0.0f64; h * w];
    for ch in 0..c {
        let plane = Tensor::<T>::from_fn(&[h, w], |i| tokens.data()[i * c + ch]);
        for (a, v) in acc.iter_mut().zip(fft2_magnitude(&plane).data()) {
            *a += v.as_f64();
        }
    }
    Tensor::from_fn(&[h, w], |i| T::lit(acc[i] / c as f64))
}

/// Spectra of the conv and attention branches of block `block` in stage
/// `stage` for input `img [3×H×W]`.
pub fn branch_spectrum<T: Scalar>(model: &Model<T>, img: &Tensor<T>, stage: usize, block: usize) -> Result<BranchSpectrum<T>> {
    let blocks = &model
        .backbone
        .stages
        .get(stage)
        .ok_or_else(|| Error::contract(format!("no stage {stage}")))?
        .blocks;
    match blocks.get(block) {
        None => return Err(Error::contract(format!("stage {stage} has no block {block}"))),
        Some(Block::Single(_)) => {
            return Err(Error::contract(format!(
                "block {block} of stage {stage} is a single-branch block and has no attention branch"
            )))
        }
        Some(Block::Dual(d)) if !(d.mode.has_attention() && d.mode.has_conv()) => {
            return Err(Error::contract(format!(
                "block {block} of stage {stage} runs in {} mode and lacks a branch",
                d.mode.name()
            )))
        }
        Some(Block::Dual(_)) => {}
    }
    if img.ndim() != 3 || img.dim(0) != 3 {
        return Err(Error::shape("branch_spectrum input", img.shape(), &[3, 0, 0]));
    }
    let (h, w) = (img.dim(1), img.dim(2));
    let x = if model.config.data_norm {
        img.map(|v| v * T::lit(2.0) - T::one())
    } else {
        img.clone()
    };
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut taps: Vec<BranchTap> = Vec::new();
    model.backbone.forward(&mut g, &model.params, xv, Some(&mut taps))?;
    let tap = taps
        .iter()
        .find(|t| t.stage == stage && t.block == block)
        .expect("addressed block was run");
    let (fc, fa) = (tap.f_conv.expect("conv branch"), tap.f_mhsa.expect("attention branch"));
    let conv = channel_mean_spectrum(g.value(fc), h, w);
    let attention = channel_mean_spectrum(g.value(fa), h, w);
    Ok(BranchSpectrum {
        hf_conv: high_frequency_ratio(&conv),
        hf_attention: high_frequency_ratio(&attention),
        conv,
        attention,
    })
}

/// Log-magnitude map scaled to `[0, 1]` and replicated over RGB, for saving.
pub fn spectrum_image<T: Scalar>(mag: &Tensor<T>) -> Tensor<T> {
    let logs: Vec<f64> = mag.data().iter().map(|v| v.as_f64().ln_1p()).collect();
    let max = logs.iter().cloned().fold(0.0, f64::max);
    let hw = logs.len();
    let (h, w) = (mag.dim(0), mag.dim(1));
    Tensor::from_fn(&[3, h, w], |i| {
        T::lit(if max > 0.0 { logs[i % hw] / max } else { 0.0 })
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::synth_sci;

    fn noise(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, h, w], |_| rng.random::<f64>())
    }

    #[test]
    fn psnr_closed_forms() {
        let a = noise(0, 12, 13).map(|v| v * 0.8);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&a, &b).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
        let c = a.map(|v| v + 0.1);
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &c).unwrap(), psnr(&c, &a).unwrap());
        assert!(psnr(&a, &Tensor::zeros(&[3, 13, 12])).is_err());
    }

    /// Direct per-window SSIM with 2-D weights.
    fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let t = gaussian_taps();
        let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for ch in 0..c {
            let mut acc = 0.0;
            let mut n = 0;
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut ux, mut uy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = t[i] * t[j];
                            let (p, q) = (a.at(&[ch, y0 + i, x0 + j]), b.at(&[ch, y0 + i, x0 + j]));
                            ux += wt * p;
                            uy += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    let (vx, vy, cov) = (sxx - ux * ux, syy - uy * uy, sxy - ux * uy);
                    acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
            total += acc / n as f64;
        }
        total / c as f64
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        for seed in 0..4 {
            let a = noise(seed, 14 + seed as usize, 17);
            let b = a.zip_map(&noise(seed + 10, 14 + seed as usize, 17), |x, y| 0.7 * x + 0.3 * y).unwrap();
            let fast = ssim(&a, &b).unwrap();
            assert!((fast - ssim_oracle(&a, &b)).abs() < 1e-8);
            assert!((fast - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_identity_inversion_and_size() {
        let a: Tensor<f64> = synth_sci(3, 24, 24).unwrap();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let bin = noise(1, 16, 16).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        assert!(ssim(&bin, &bin.map(|v| 1.0 - v)).unwrap() <= 0.0);
        assert!(matches!(ssim(&noise(0, 10, 20), &noise(1, 10, 20)), Err(Error::TooSmall(_))));
    }

    #[test]
    fn hf_ratio_of_impulse_and_constant() {
        let mut dc = Tensor::<f64>::zeros(&[8, 8]);
        dc.set(&[4, 4], 3.0);
        assert_eq!(high_frequency_ratio(&dc), 0.0);
        let flat = Tensor::<f64>::ones(&[8, 8]);
        assert!((high_frequency_ratio(&flat) - 0.75).abs() < 1e-12);
        assert_eq!(high_frequency_ratio(&Tensor::<f64>::zeros(&[6, 6])), 0.0);
    }

    #[test]
    fn spectrum_of_constant_input_is_dc_only_and_sbb_is_rejected() {
        let model = Model::<f64>::new(ModelConfig::desk(), 0).unwrap();
        let img = Tensor::<f64>::full(&[3, 12, 10], 0.5);
        let s = branch_spectrum(&model, &img, 1, 0).unwrap();
        assert_eq!(s.conv.shape(), &[12, 10]);
        assert_eq!(s.attention.shape(), &[12, 10]);
        assert_eq!((s.hf_conv, s.hf_attention), (0.0, 0.0));
        let textured: Tensor<f64> = synth_sci(0, 16, 16).unwrap();
        let t = branch_spectrum(&model, &textured, 1, 1).unwrap();
        assert!(t.hf_conv > 0.0 && t.hf_attention > 0.0);
        assert!(branch_spectrum(&model, &img, 0, 0).is_err());
    }

    #[test]
    fn evaluation_report_format() {
        let model = Model::<f32>::new(ModelConfig::desk(), 0).unwrap();
        let images = vec![("a".to_string(), synth_sci::<f32>(1, 48, 48).unwrap())];
        let report = evaluate(&model, &images, &[2.0, 6.0]).unwrap();
        let table = report.to_table(4.0);
        assert!(table.contains("in-training-scale") && table.contains("out-of-training-scale"));
        assert_eq!(report.to_csv().lines().count(), 3);
        assert_eq!(evaluate_bicubic(&images, &[2.0]).unwrap().len(), 1);
    }

    #[test]
    fn ablation_tables_are_complete_and_reproducible() {
        let pool = vec![synth_sci::<f32>(0, 32, 32).unwrap()];
        let eval = vec![("e".to_string(), synth_sci::<f32>(1, 40, 40).unwrap())];
        let mut train = TrainConfig::desk(2);
        train.batch = 1;
        train.patch = 8;
        let run = || run_ablation(&ModelConfig::desk(), &train, &pool, &eval, &Axis::ALL, 2.0, 3).unwrap();
        let a = run();
        assert_eq!(a.rows.len(), Variant::ALL.len() + Reweight::ALL.len() + BranchMode::ALL.len());
        let text = a.to_text();
        for axis in Axis::ALL {
            assert!(text.contains(axis.title()));
        }
        assert!(text.contains("31.66 / 0.9597") && text.contains("28.03 / 0.9275"));
        let csv = a.to_csv();
        assert_eq!(csv.lines().count(), a.rows.len() + 1);
        assert_eq!(csv, run().to_csv());
    }
}
