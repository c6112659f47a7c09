//! Subcommand bodies. Input problems (paths, formats, configs, scales) are
//! usage failures; anything that goes wrong once work is underway is a
//! runtime failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use itsr_core::backbone::Block;
use itsr_core::checkpoint;
use itsr_core::data::{list_ppm, load_pool, load_ppm, read_split, save_ppm, synth_sci};
use itsr_core::eval::{
    branch_spectrum, evaluate, evaluate_bicubic, run_ablation, spectrum_image, Axis, ImageScore,
};
use itsr_core::gradcheck::{format_reports, run_all, GRAD_TOL};
use itsr_core::model::check_scale;
use itsr_core::train::{TrainConfig, Trainer};
use itsr_core::{DType, Error, Model, ModelConfig, Scalar, Tensor};

use crate::config::RunConfig;
use crate::{AblateArgs, EvalArgs, Failure, GradcheckArgs, SpectrumArgs, SrArgs, SynthArgs, TrainArgs};

type Outcome<T = ()> = Result<T, Failure>;

/// Divergence and internal shape faults are runtime failures; every other
/// core error traces back to an input.
fn classify(e: Error) -> Failure {
    match e {
        Error::NonFinite { .. } | Error::Shape { .. } => Failure::Runtime(e.into()),
        _ => Failure::Usage(e.into()),
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

macro_rules! with_model {
    ($model:expr, $m:ident => $body:expr) => {
        match $model {
            AnyModel::F32($m) => $body,
            AnyModel::F64($m) => $body,
        }
    };
}

/// Loads a model or training checkpoint in its configured precision.
fn load_model(path: &Path) -> Outcome<AnyModel> {
    let ck = checkpoint::load::<f64>(path).map_err(classify)?;
    let params = ck.group("params").map_err(classify)?.clone();
    let model = Model::from_params(ck.config, params).map_err(classify)?;
    Ok(match model.config.precision {
        DType::F32 => AnyModel::F32(model.cast()),
        DType::F64 => AnyModel::F64(model),
    })
}

fn require_dir(dir: &Path, what: &str) -> Outcome {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(usage(anyhow!("{what} directory {} does not exist", dir.display())))
    }
}

fn image_paths(dir: &Path, manifest: Option<&Path>) -> Outcome<Vec<PathBuf>> {
    require_dir(dir, "data")?;
    let paths = match manifest {
        Some(m) => read_split(dir, m),
        None => list_ppm(dir),
    }
    .map_err(classify)?;
    if paths.is_empty() {
        return Err(usage(anyhow!("no .ppm images in {}", dir.display())));
    }
    Ok(paths)
}

fn named_images<T: Scalar>(paths: &[PathBuf]) -> Outcome<Vec<(String, Tensor<T>)>> {
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into());
            Ok((name, load_ppm(p).map_err(classify)?))
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

pub fn sr(a: &SrArgs) -> Outcome {
    check_scale(a.scale).map_err(classify)?;
    let model = load_model(&a.model)?;
    with_model!(model, m => sr_as(&m, a))
}

fn sr_as<T: Scalar>(model: &Model<T>, a: &SrArgs) -> Outcome {
    let lr: Tensor<T> = load_ppm(&a.input).map_err(classify)?;
    let start = Instant::now();
    let out = model.forward(&lr, a.scale).map_err(classify)?;
    let secs = start.elapsed().as_secs_f64();
    save_ppm(&out, &a.out).map_err(|e| runtime(anyhow::Error::from(e)))?;
    println!(
        "{}×{} -> {}×{} (×{}) in {secs:.2}s: {}",
        lr.dim(1),
        lr.dim(2),
        out.dim(1),
        out.dim(2),
        a.scale,
        a.out.display()
    );
    Ok(())
}

pub fn train(a: &TrainArgs, seed: u64) -> Outcome {
    let run = RunConfig::load(&a.config).map_err(usage)?;
    let train = run.require_train().map_err(usage)?.clone();
    let paths = image_paths(&a.data, a.manifest.as_deref())?;
    if let Some(r) = &a.resume {
        if !r.is_file() {
            return Err(usage(anyhow!("checkpoint {} does not exist", r.display())));
        }
    }
    match run.model.precision {
        DType::F32 => train_as::<f32>(run.model, train, &paths, a, seed),
        DType::F64 => train_as::<f64>(run.model, train, &paths, a, seed),
    }
}

fn train_as<T: Scalar>(model: ModelConfig, train: TrainConfig, paths: &[PathBuf], a: &TrainArgs, seed: u64) -> Outcome {
    let pool: Vec<Tensor<T>> = load_pool(paths).map_err(classify)?;
    let mut trainer = match &a.resume {
        Some(ck) => Trainer::resume(ck, Some(train)).map_err(classify)?,
        None => Trainer::new(Model::new(model, seed).map_err(classify)?, train, seed).map_err(classify)?,
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".metrics.jsonl");
        s.into()
    });
    let file = File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))
        .map_err(usage)?;
    let mut log = BufWriter::new(file);
    let start = Instant::now();
    let records = trainer.run(&pool, Some(&a.out), &mut log).map_err(classify);
    log.flush().map_err(runtime)?;
    let records = records?;
    println!(
        "{} steps on {} image(s) in {:.1}s, final loss {}; checkpoint {}, log {}",
        records.len(),
        pool.len(),
        start.elapsed().as_secs_f64(),
        records.last().map_or("-".into(), |r| format!("{:.5}", r.loss)),
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn parse_scales(s: &str) -> Outcome<Vec<f64>> {
    let scales: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| usage(anyhow!("bad scale `{t}` in `{s}`"))))
        .collect::<Outcome<_>>()?;
    for &r in &scales {
        check_scale(r).map_err(classify)?;
    }
    Ok(scales)
}

pub fn eval(a: &EvalArgs) -> Outcome {
    let scales = parse_scales(&a.scales)?;
    let paths = image_paths(&a.data, None)?;
    let model = load_model(&a.model)?;
    with_model!(model, m => eval_as(&m, &paths, &scales, a))
}

fn eval_as<T: Scalar>(model: &Model<T>, paths: &[PathBuf], scales: &[f64], a: &EvalArgs) -> Outcome {
    let images = named_images::<T>(paths)?;
    let report = evaluate(model, &images, scales).map_err(classify)?;
    let bicubic = evaluate_bicubic(&images, scales).map_err(classify)?;
    print!("{}", report.to_table(a.in_scale_max));
    for &s in scales {
        let rows: Vec<&ImageScore> = bicubic.iter().filter(|r| r.scale == s).collect();
        let n = rows.len() as f64;
        let (p, q) = rows.iter().fold((0.0, 0.0), |(p, q), r| (p + r.psnr / n, q + r.ssim / n));
        println!("{:<24} {:>7} {p:>9.3} {q:>8.4} {:>7}", "bicubic", format!("×{s}"), rows.len());
    }
    if let Some(csv) = &a.csv {
        write_text(csv, &report.to_csv())?;
    }
    Ok(())
}

fn parse_axes(s: &str) -> Outcome<Vec<Axis>> {
    s.split(',')
        .map(|t| match t.trim() {
            "variant" => Ok(Axis::Variant),
            "reweight" => Ok(Axis::Reweight),
            "branch" => Ok(Axis::Branch),
            other => Err(usage(anyhow!("unknown ablation axis `{other}` (expected variant, reweight, branch)"))),
        })
        .collect()
}

pub fn ablate(a: &AblateArgs, seed: u64) -> Outcome {
    let axes = parse_axes(&a.axes)?;
    check_scale(a.scale).map_err(classify)?;
    let run = match &a.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig {
            model: ModelConfig::desk(),
            train: None,
        },
    };
    let mut train = run.train.clone().unwrap_or_else(|| TrainConfig::desk(50));
    if let Some(steps) = a.steps {
        train.steps = steps;
    }
    train.validate().map_err(classify)?;
    let paths = image_paths(&a.data, None)?;
    let eval_paths = match &a.eval_data {
        Some(d) => image_paths(d, None)?,
        None => paths.clone(),
    };
    match run.model.precision {
        DType::F32 => ablate_as::<f32>(&run.model, &train, &paths, &eval_paths, &axes, a, seed),
        DType::F64 => ablate_as::<f64>(&run.model, &train, &paths, &eval_paths, &axes, a, seed),
    }
}

#[allow(clippy::too_many_arguments)]
fn ablate_as<T: Scalar>(
    base: &ModelConfig,
    train: &TrainConfig,
    paths: &[PathBuf],
    eval_paths: &[PathBuf],
    axes: &[Axis],
    a: &AblateArgs,
    seed: u64,
) -> Outcome {
    let pool: Vec<Tensor<T>> = load_pool(paths).map_err(classify)?;
    let images = named_images::<T>(eval_paths)?;
    let report = run_ablation(base, train, &pool, &images, axes, a.scale, seed).map_err(classify)?;
    print!("{}", report.to_text());
    if let Some(csv) = &a.csv {
        write_text(csv, &report.to_csv())?;
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, seed: u64) -> Outcome {
    if a.seeds == 0 {
        return Err(usage(anyhow!("--seeds must be at least 1")));
    }
    let seeds: Vec<u64> = (0..a.seeds).map(|i| seed.wrapping_add(i)).collect();
    let start = Instant::now();
    let reports = run_all(&seeds).map_err(runtime)?;
    print!("{}", format_reports(&reports));
    let failed = reports.iter().filter(|r| !r.passes(GRAD_TOL)).count();
    println!(
        "{} cases, {} seed(s), {:.1}s, tolerance {GRAD_TOL:e}",
        reports.len(),
        seeds.len(),
        start.elapsed().as_secs_f64()
    );
    match failed {
        0 => Ok(()),
        n => Err(runtime(anyhow!("{n} case(s) exceed relative error {GRAD_TOL:e}"))),
    }
}

pub fn spectrum(a: &SpectrumArgs) -> Outcome {
    let model = load_model(&a.model)?;
    with_model!(model, m => spectrum_as(&m, a))
}

/// Last stage holding a dual-branch block, and that block's index.
fn default_block<T>(model: &Model<T>) -> Option<(usize, usize)> {
    model.backbone.stages.iter().enumerate().rev().find_map(|(s, stage)| {
        stage
            .blocks
            .iter()
            .position(|b| matches!(b, Block::Dual(_)))
            .map(|b| (s, b))
    })
}

fn spectrum_as<T: Scalar>(model: &Model<T>, a: &SpectrumArgs) -> Outcome {
    let img: Tensor<T> = load_ppm(&a.input).map_err(classify)?;
    let (stage, block) = match (a.stage, a.block, default_block(model)) {
        (Some(s), Some(b), _) => (s, b),
        (s, b, Some((ds, db))) => (s.unwrap_or(ds), b.unwrap_or(db)),
        (s, b, None) => (s.unwrap_or(0), b.unwrap_or(0)),
    };
    let spec = branch_spectrum(model, &img, stage, block).map_err(classify)?;
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))
        .map_err(usage)?;
    for (name, mag) in [("conv_spectrum.ppm", &spec.conv), ("attention_spectrum.ppm", &spec.attention)] {
        save_ppm(&spectrum_image(mag), &a.out_dir.join(name)).map_err(|e| runtime(anyhow::Error::from(e)))?;
    }
    println!("stage {stage} block {block}");
    println!("high-frequency energy ratio  conv {:.4}  attention {:.4}", spec.hf_conv, spec.hf_attention);
    println!("spectra written to {}", a.out_dir.display());
    Ok(())
}

pub fn synth(a: &SynthArgs, seed: u64) -> Outcome {
    if a.n == 0 {
        return Err(usage(anyhow!("--n must be at least 1")));
    }
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))
        .map_err(usage)?;
    for i in 0..a.n {
        let img = synth_sci::<f32>(seed.wrapping_add(i as u64), a.height, a.width).map_err(classify)?;
        let path = a.out_dir.join(format!("synth_{i:04}.ppm"));
        save_ppm(&img, &path).map_err(|e| runtime(anyhow::Error::from(e)))?;
        println!("{}", path.display());
    }
    Ok(())
}
