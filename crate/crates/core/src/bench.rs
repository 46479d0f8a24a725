//! Desk-scale experiment scaffolding: resizing, the runtime-vs-pixels
//! benchmark, and a noise/denoise/report runner over a directory of images.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::energy::{energy, EnergyError, Problem};
use crate::image::{
    add_gaussian_noise, clamp_round, psnr, read_pgm, write_pgm, Image, ImageError, NoiseSpec,
};
use crate::model::FoeModel;
use crate::optimizer::{lm_denoise, LmOptions, OptimizeError, Termination};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error("scale must be positive and finite, got {0}")]
    BadScale(f64),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Resamples one axis: nearest neighbour when growing, area-weighted box
/// average when shrinking.
fn resample_axis(src: &[f64], old: usize, new: usize) -> Vec<f64> {
    if new >= old {
        (0..new)
            .map(|j| {
                let s = ((j as f64 + 0.5) * old as f64 / new as f64).floor() as usize;
                src[s.min(old - 1)]
            })
            .collect()
    } else {
        let ratio = old as f64 / new as f64;
        (0..new)
            .map(|j| {
                let (lo, hi) = (j as f64 * ratio, (j + 1) as f64 * ratio);
                let mut acc = 0.0;
                let mut k = lo.floor() as usize;
                while (k as f64) < hi && k < old {
                    let overlap = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                    acc += overlap * src[k];
                    k += 1;
                }
                acc / ratio
            })
            .collect()
    }
}

/// Scales both axes by `scale`; output sides are `max(1, round(side * scale))`.
pub fn resize(img: &Image, scale: f64) -> Result<Image, BenchError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(BenchError::BadScale(scale));
    }
    let (w, h) = (img.width(), img.height());
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let rows: Vec<Vec<f64>> = img
        .data()
        .chunks_exact(w)
        .map(|row| resample_axis(row, w, nw))
        .collect();
    let mut out = vec![0.0; nw * nh];
    let mut column = vec![0.0; h];
    for c in 0..nw {
        for (r, row) in rows.iter().enumerate() {
            column[r] = row[c];
        }
        for (r, v) in resample_axis(&column, h, nh).into_iter().enumerate() {
            out[r * nw + c] = v;
        }
    }
    Ok(Image::new(nw, nh, out)?)
}

/// One scale of the runtime benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub scale: f64,
    pub width: usize,
    pub height: usize,
    pub pixels: usize,
    pub seconds: f64,
    pub final_objective: f64,
    pub iterations: usize,
}

impl ScalingRow {
    pub const CSV_HEADER: &'static str = "pixels,seconds,final_objective,iterations";
}

/// Least-squares slope of seconds against pixels, and max/min of seconds per pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingSummary {
    pub slope_seconds_per_pixel: f64,
    pub per_pixel_ratio: f64,
}

/// For each scale: resize `base`, add noise with `seed`, and denoise from the
/// noisy image. Solve time excludes resizing and noise generation.
pub fn run_scaling(
    base: &Image,
    model: &FoeModel,
    sigma: f64,
    seed: u64,
    scales: &[f64],
    opts: &LmOptions,
) -> Result<Vec<ScalingRow>, BenchError> {
    let noise = NoiseSpec::new(sigma, seed)?;
    scales
        .iter()
        .map(|&scale| {
            let clean = resize(base, scale)?;
            let noisy = add_gaussian_noise(&clean, &noise);
            let problem = Problem::new(noisy.clone(), model.clone(), sigma)?;
            let (_, report) = lm_denoise(&problem, &noisy, opts)?;
            Ok(ScalingRow {
                scale,
                width: clean.width(),
                height: clean.height(),
                pixels: clean.len(),
                seconds: report.wall_seconds,
                final_objective: report.final_objective,
                iterations: report.iterations.len() - 1,
            })
        })
        .collect()
}

pub fn summarize_scaling(rows: &[ScalingRow]) -> ScalingSummary {
    let n = rows.len() as f64;
    let mx = rows.iter().map(|r| r.pixels as f64).sum::<f64>() / n;
    let my = rows.iter().map(|r| r.seconds).sum::<f64>() / n;
    let sxy: f64 = rows
        .iter()
        .map(|r| (r.pixels as f64 - mx) * (r.seconds - my))
        .sum();
    let sxx: f64 = rows.iter().map(|r| (r.pixels as f64 - mx).powi(2)).sum();
    let per_pixel: Vec<f64> = rows.iter().map(|r| r.seconds / r.pixels as f64).collect();
    let max = per_pixel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = per_pixel.iter().cloned().fold(f64::INFINITY, f64::min);
    ScalingSummary {
        slope_seconds_per_pixel: if sxx > 0.0 { sxy / sxx } else { f64::NAN },
        per_pixel_ratio: max / min,
    }
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = format!("{}\n", ScalingRow::CSV_HEADER);
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.12e},{}",
            r.pixels, r.seconds, r.final_objective, r.iterations
        );
    }
    out
}

/// A named filter bank entering the suite.
#[derive(Clone, Debug)]
pub struct SuiteModel {
    pub id: String,
    pub model: FoeModel,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub sigma: f64,
    pub seed: u64,
    pub lm: LmOptions,
    /// Where noisy inputs and rounded outputs are written, if anywhere.
    pub output_dir: Option<PathBuf>,
}

/// One (image, model) result. Numeric fields are NaN on failed rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub image_id: String,
    pub model_id: String,
    pub patch_size: usize,
    pub experts: usize,
    pub pixels: usize,
    pub sigma: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Objective after rounding the solution to `{0, ..., 255}`.
    pub rounded_objective: f64,
    /// `(rounded - final) / final`.
    pub rounding_gap: f64,
    pub seconds: f64,
    pub iterations: usize,
    pub termination: Option<Termination>,
    pub psnr_noisy: f64,
    pub psnr_denoised: f64,
    pub error: Option<String>,
}

impl BenchRow {
    fn failed(image_id: &str, model: &SuiteModel, sigma: f64, error: String) -> Self {
        Self {
            image_id: image_id.to_string(),
            model_id: model.id.clone(),
            patch_size: model.model.patch_size(),
            experts: model.model.num_experts(),
            pixels: 0,
            sigma,
            initial_objective: f64::NAN,
            final_objective: f64::NAN,
            rounded_objective: f64::NAN,
            rounding_gap: f64::NAN,
            seconds: f64::NAN,
            iterations: 0,
            termination: None,
            psnr_noisy: f64::NAN,
            psnr_denoised: f64::NAN,
            error: Some(error),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Noisy image of the suite for `image` at position `index` in the sorted list.
///
/// Noise uses seed `seed + index`, then is clamped and rounded to 8 bits so the
/// noisy input can be stored as PGM and re-read exactly.
pub fn suite_noisy(
    clean: &Image,
    sigma: f64,
    seed: u64,
    index: usize,
) -> Result<Image, BenchError> {
    let spec = NoiseSpec::new(sigma, seed.wrapping_add(index as u64))?;
    Ok(clamp_round(&add_gaussian_noise(clean, &spec)))
}

pub fn noisy_file_name(image_id: &str) -> String {
    format!("{image_id}__noisy.pgm")
}

pub fn denoised_file_name(image_id: &str, model_id: &str) -> String {
    format!("{image_id}__{model_id}__denoised.pgm")
}

/// PGM files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let is_pgm = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        if is_pgm && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn run_one(
    index: usize,
    path: &Path,
    model: &SuiteModel,
    opts: &SuiteOptions,
) -> Result<BenchRow, BenchError> {
    let image_id = image_id(path);
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let clean = read_pgm(&bytes)?;
    let noisy = suite_noisy(&clean, opts.sigma, opts.seed, index)?;
    let problem = Problem::new(noisy.clone(), model.model.clone(), opts.sigma)?;
    let (solution, report) = lm_denoise(&problem, &noisy, &opts.lm)?;
    let rounded = clamp_round(&solution);
    let rounded_objective = energy(&problem, &rounded)?.total;
    if let Some(dir) = &opts.output_dir {
        let noisy_path = dir.join(noisy_file_name(&image_id));
        std::fs::write(&noisy_path, write_pgm(&noisy, false)?).map_err(io_err(&noisy_path))?;
        let out_path = dir.join(denoised_file_name(&image_id, &model.id));
        std::fs::write(&out_path, write_pgm(&rounded, false)?).map_err(io_err(&out_path))?;
    }
    Ok(BenchRow {
        image_id,
        model_id: model.id.clone(),
        patch_size: model.model.patch_size(),
        experts: model.model.num_experts(),
        pixels: clean.len(),
        sigma: opts.sigma,
        initial_objective: report.initial_objective,
        final_objective: report.final_objective,
        rounded_objective,
        rounding_gap: (rounded_objective - report.final_objective) / report.final_objective,
        seconds: report.wall_seconds,
        iterations: report.iterations.len() - 1,
        termination: Some(report.termination),
        psnr_noisy: psnr(&clean, &noisy)?,
        psnr_denoised: psnr(&clean, &rounded)?,
        error: None,
    })
}

fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Runs every (image, model) pair in `images_dir`. Pairs run concurrently on
/// the current rayon pool; a failing pair becomes a row with `error` set.
/// Rows come back sorted by image id, then model id.
pub fn run_suite(
    images_dir: &Path,
    models: &[SuiteModel],
    opts: &SuiteOptions,
) -> Result<Vec<BenchRow>, BenchError> {
    let images = list_images(images_dir)?;
    if let Some(dir) = &opts.output_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let jobs: Vec<(usize, &PathBuf, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..models.len()).map(move |k| (i, p, k)))
        .collect();
    let mut rows: Vec<(usize, BenchRow)> = jobs
        .par_iter()
        .map(|&(i, path, k)| {
            let row = run_one(i, path, &models[k], opts).unwrap_or_else(|e| {
                BenchRow::failed(&image_id(path), &models[k], opts.sigma, e.to_string())
            });
            (k, row)
        })
        .collect();
    rows.sort_by(|(ka, a), (kb, b)| {
        (&a.image_id, &a.model_id, ka).cmp(&(&b.image_id, &b.model_id, kb))
    });
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub const SUITE_CSV_HEADER: &str = "image,model,m,K,pixels,sigma,initial_objective,final_objective,rounded_objective,rounding_gap,seconds,iterations,termination,psnr_noisy,psnr_denoised,error";

pub fn suite_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{SUITE_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.12e},{:.12e},{:.12e},{:.6e},{:.6},{},{},{:.4},{:.4},{}",
            r.image_id,
            r.model_id,
            r.patch_size,
            r.experts,
            r.pixels,
            r.sigma,
            r.initial_objective,
            r.final_objective,
            r.rounded_objective,
            r.rounding_gap,
            r.seconds,
            r.iterations,
            r.termination.map(|t| t.to_string()).unwrap_or_default(),
            r.psnr_noisy,
            r.psnr_denoised,
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        );
    }
    out
}

pub fn suite_markdown(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "| image | model | obj. | rounded obj. | gap | time (s) | iters | PSNR in | PSNR out |\n\
         |---|---|---:|---:|---:|---:|---:|---:|---:|\n",
    );
    for r in rows {
        if let Some(e) = &r.error {
            let _ = writeln!(
                out,
                "| {} | {} | failed: {} | | | | | | |",
                r.image_id,
                r.model_id,
                e.replace('|', "/")
            );
            continue;
        }
        let _ = writeln!(
            out,
            "| {} | {} | {:.1} | {:.1} | {:.3}% | {:.2} | {} | {:.2} | {:.2} |",
            r.image_id,
            r.model_id,
            r.final_objective,
            r.rounded_objective,
            100.0 * r.rounding_gap,
            r.seconds,
            r.iterations,
            r.psnr_noisy,
            r.psnr_denoised
        );
    }
    out
}
