//! ℓ1 training with Adam and a step-decay schedule.
//!
//! Each step draws a batch from [`step_rng`] stream `step`, runs the backbone
//! on every LR patch and the upsampler only at the sampled HR pixels, and
//! averages the per-sample ℓ1 losses. Per-sample tapes run in parallel; their
//! gradients are summed in sample order, so results do not depend on the
//! thread count.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{make_batch, step_rng, BatchProducer, BatchSpec, Sample, TrainBatch};
use crate::error::{Error, Result};
use crate::grad::{Graph, ParamStore};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean absolute error between equal-shaped tensors.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("l1_loss", pred.shape(), gt.shape()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a - b).abs().as_f64())
        .sum();
    Ok(s / pred.len() as f64)
}

fn default_lr() -> f64 {
    2e-4
}
fn default_decay_at() -> Vec<f64> {
    vec![0.4, 0.8, 0.9, 0.95]
}
fn default_decay_factor() -> f64 {
    0.5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

/// Optimization settings; every field has a documented default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimizer steps.
    pub steps: u64,
    /// Samples per batch (default 4).
    #[serde(default = "TrainConfig::default_batch")]
    pub batch: usize,
    /// LR patch extent (default 24).
    #[serde(default = "TrainConfig::default_patch")]
    pub patch: usize,
    /// Scale range, `r ~ U(r_min, r_max)` (default 1..2).
    #[serde(default = "TrainConfig::default_r_min")]
    pub r_min: f64,
    #[serde(default = "TrainConfig::default_r_max")]
    pub r_max: f64,
    /// Random flips and transposition (default on).
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Base learning rate (default 2e-4).
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Fractions of `steps` at which the rate is multiplied by `decay_factor`.
    #[serde(default = "default_decay_at")]
    pub decay_at: Vec<f64>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Write a numbered checkpoint every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Record measured step time in the log; off by default so fixed-seed
    /// logs are byte-identical (the field is then written as 0).
    #[serde(default)]
    pub log_wall_time: bool,
    /// Depth of the background batch queue; 0 builds batches inline.
    #[serde(default)]
    pub prefetch: usize,
}

impl TrainConfig {
    fn default_batch() -> usize {
        4
    }
    fn default_patch() -> usize {
        24
    }
    fn default_r_min() -> f64 {
        1.0
    }
    fn default_r_max() -> f64 {
        2.0
    }

    /// Desk budget: batch 4, patch 24, `r ~ U(1, 2)`.
    pub fn desk(steps: u64) -> Self {
        Self {
            steps,
            batch: Self::default_batch(),
            patch: Self::default_patch(),
            r_min: Self::default_r_min(),
            r_max: Self::default_r_max(),
            augment: true,
            lr: default_lr(),
            decay_at: default_decay_at(),
            decay_factor: default_decay_factor(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            checkpoint_every: 0,
            log_wall_time: false,
            prefetch: 0,
        }
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch: self.batch,
            patch: self.patch,
            r_min: self.r_min,
            r_max: self.r_max,
            augment: self.augment,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base: self.lr,
            factor: self.decay_factor,
            milestones: self.decay_at.clone(),
            total: self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch == 0 || self.patch == 0 {
            return bad("steps, batch and patch must be positive".into());
        }
        if !(self.r_min >= 1.0 && self.r_max >= self.r_min && self.r_max <= crate::model::MAX_SCALE) {
            return bad(format!("scale range [{}, {}] invalid", self.r_min, self.r_max));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor {} must lie in (0, 1]", self.decay_factor));
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("decay_at fractions must lie in [0, 1]".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam needs 0 <= beta < 1 and eps > 0".into());
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `base · factor^k` after `k` milestones.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub factor: f64,
    /// Fractions of `total`.
    pub milestones: Vec<f64>,
    pub total: u64,
}

impl Schedule {
    /// Rate for the 1-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let done = step.saturating_sub(1);
        let k = self
            .milestones
            .iter()
            .filter(|&&f| done >= (f * self.total as f64).floor() as u64)
            .count();
        self.base * self.factor.powi(k as i32)
    }
}

/// Bias-corrected Adam; moments mirror the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &ParamStore<T>| {
            let mut s = ParamStore::new();
            for (_, name, t) in p.iter() {
                s.add(name, Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One update; `grads[i]` belongs to the parameter with index `i`, and
    /// `None` means a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let ids: Vec<_> = params.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let p = params.get_mut(id);
            let (m, v) = (self.m.get_mut(id), self.v.get_mut(id));
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adam gradient", g.shape(), p.shape()));
                }
            }
            let gd = g.as_ref().map(|g| g.data());
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = gd.map_or(T::zero(), |g| g[i]);
                md[i] = b1 * md[i] + (T::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Loss and summed gradients of one sample: ℓ1 between the prediction at
/// the sampled pixels and their GT values.
fn sample_loss<T: Scalar>(model: &Model<T>, s: &Sample<T>, with_grad: bool) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut g = Graph::new();
    let lr = g.constant(s.lr.clone());
    let pred = model.forward_queries(&mut g, lr, s.hr_shape.0, s.hr_shape.1, &s.gt_index)?;
    let loss = g.l1_loss(pred, Arc::new(s.gt.clone()))?;
    let value = g.value(loss).data()[0].as_f64();
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.params.len()];
    if with_grad {
        for (id, t) in g.backward(loss)?.iter() {
            grads[id.index()] = Some(t.clone());
        }
    }
    Ok((value, grads))
}

/// Mean per-sample loss over a batch and, optionally, its gradient.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    batch: &TrainBatch<T>,
    with_grad: bool,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let per: Vec<_> = batch
        .samples
        .par_iter()
        .map(|s| sample_loss(model, s, with_grad))
        .collect::<Result<_>>()?;
    let scale = T::lit(1.0 / per.len() as f64);
    let mut loss = 0.0;
    let mut total: Vec<Option<Tensor<T>>> = vec![None; model.params.len()];
    for (l, grads) in per {
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                None => *acc = Some(g),
            }
        }
    }
    for t in total.iter_mut().flatten() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss / batch.samples.len() as f64, total))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

impl StepRecord {
    /// Newline-terminated JSON with fields in the order step, lr, loss, wall_ms.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("record serializes");
        s.push('\n');
        s
    }
}

/// Training state: model, optimizer, completed step count and seed.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub config: TrainConfig,
    pub seed: u64,
    /// Number of completed steps.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    step: u64,
    adam_t: u64,
    seed: u64,
    train: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.params, config.beta1, config.beta2, config.eps);
        Ok(Self {
            model,
            adam,
            config,
            seed,
            step: 0,
        })
    }

    /// Restores a training checkpoint (parameters, moments, step, seed).
    /// `config` overrides the stored training settings when given, e.g. to
    /// extend the run.
    pub fn resume(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let ck = checkpoint::load::<T>(path)?;
        let meta: TrainMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: not a training checkpoint ({e})", path.display())))?;
        let model = Model::from_params(ck.config.clone(), ck.group("params")?.clone())?;
        let config = config.unwrap_or(meta.train);
        config.validate()?;
        let (m, v) = (ck.group("adam.m")?.clone(), ck.group("adam.v")?.clone());
        checkpoint::check_layout(&m, &model.params)?;
        checkpoint::check_layout(&v, &model.params)?;
        Ok(Self {
            adam: Adam {
                m,
                v,
                t: meta.adam_t,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.eps,
            },
            model,
            config,
            seed: meta.seed,
            step: meta.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(TrainMeta {
            step: self.step,
            adam_t: self.adam.t,
            seed: self.seed,
            train: self.config.clone(),
        })
        .expect("meta serializes");
        checkpoint::save(
            path,
            &self.model.config,
            &meta,
            &[("params", &self.model.params), ("adam.m", &self.adam.m), ("adam.v", &self.adam.v)],
        )
    }

    /// Batch used by the 1-based `step`.
    pub fn batch_for(&self, pool: &[Tensor<T>], step: u64) -> Result<TrainBatch<T>> {
        make_batch(pool, &self.config.batch_spec(), &mut step_rng(self.seed, step))
    }

    /// Applies the next step to `batch`, returning its record.
    pub fn apply(&mut self, batch: &TrainBatch<T>) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.step + 1;
        // Non-finite parameters can only yield a non-finite loss; catching
        // them here also keeps debug-build finiteness checks from firing.
        if self.model.params.iter().any(|(_, _, t)| !t.all_finite()) {
            return Err(Error::NonFinite { step: step as usize, loss: f64::NAN });
        }
        let (loss, grads) = batch_loss(&self.model, batch, true)?;
        let grads_finite = grads.iter().flatten().all(|g| g.all_finite());
        if !loss.is_finite() || !grads_finite {
            return Err(Error::NonFinite { step: step as usize, loss });
        }
        let lr = self.config.schedule().lr(step);
        self.adam.step(&mut self.model.params, &grads, lr)?;
        self.step = step;
        let wall_ms = if self.config.log_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        Ok(StepRecord { step, lr, loss, wall_ms })
    }

    /// Runs the remaining steps, appending one record per step to `log`.
    pub fn run(&mut self, pool: &[Tensor<T>], out: Option<&Path>, log: &mut dyn Write) -> Result<Vec<StepRecord>> {
        self.run_until(self.config.steps, pool, out, log)
    }

    /// Like [`Trainer::run`] but stops after step `stop` (capped at the
    /// configured total), e.g. to interrupt a run and resume it later.
    /// With `out`, numbered checkpoints are written every
    /// `checkpoint_every` steps and the final state is saved to `out`. A
    /// non-finite loss saves the pre-step state next to `out` (suffix
    /// `.nonfinite`) before returning the error.
    pub fn run_until(
        &mut self,
        stop: u64,
        pool: &[Tensor<T>],
        out: Option<&Path>,
        log: &mut dyn Write,
    ) -> Result<Vec<StepRecord>> {
        let total = self.config.steps;
        let stop = stop.min(total);
        let mut records = Vec::new();
        let mut producer = (self.config.prefetch > 0).then(|| {
            BatchProducer::spawn(
                Arc::new(pool.to_vec()),
                self.config.batch_spec(),
                self.seed,
                self.step + 1..stop + 1,
                self.config.prefetch,
            )
        });
        while self.step < stop {
            let batch = match producer.as_mut() {
                Some(p) => p
                    .next_batch()
                    .ok_or_else(|| Error::contract("batch producer stopped early"))??,
                None => self.batch_for(pool, self.step + 1)?,
            };
            let rec = match self.apply(&batch) {
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(out) = out {
                        self.save(&with_suffix(out, "nonfinite"))?;
                    }
                    return Err(e);
                }
                r => r?,
            };
            log.write_all(rec.to_line().as_bytes())
                .map_err(|e| Error::io("metrics log", e))?;
            records.push(rec);
            if let Some(out) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 && self.step < total {
                    self.save(&with_suffix(out, &format!("step{:06}", self.step)))?;
                }
            }
        }
        if let Some(out) = out {
            self.save(out)?;
        }
        log.flush().map_err(|e| Error::io("metrics log", e))?;
        Ok(records)
    }
}

/// `dir/name.ckpt` → `dir/name.<tag>.ckpt`.
pub fn with_suffix(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned());
    let name = match ext {
        Some(ext) => format!("{stem}.{tag}.{ext}"),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}
