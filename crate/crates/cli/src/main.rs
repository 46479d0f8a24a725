use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use foe_core::bench::{self, SuiteModel, SuiteOptions};
use foe_core::energy::{self, Problem};
use foe_core::image::{self, Image, NoiseSpec, SplitMix64};
use foe_core::model::{self, FoeModel};
use foe_core::optimizer::{self, LmOptions};

/// Fields-of-Experts MAP denoising with Levenberg–Marquardt.
///
/// LM defaults: 100 iterations, function tolerance 1e-6 (relative decrease of
/// an accepted step), gradient tolerance 1e-10 (max-norm relative to the
/// start), initial damping 1e-4, linear solve tolerance 1e-9.
#[derive(Parser, Debug)]
#[command(name = "foe", version, about, long_about)]
struct Cli {
    /// Worker threads for commands that run independent solves in parallel.
    /// Single solves are always single-threaded.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Add seeded Gaussian noise to a PGM image.
    AddNoise(AddNoiseArgs),
    /// Denoise a PGM image, starting from the noisy image itself.
    Denoise(DenoiseArgs),
    /// Print the data, prior and total energy of a candidate image.
    Energy(EnergyArgs),
    /// Peak signal-to-noise ratio between two PGM images.
    Psnr(PsnrArgs),
    /// Time denoising at several scales of one image.
    Benchmark(BenchmarkArgs),
    /// Compare the analytic gradient with central differences on random instances.
    CheckGrad(CheckGradArgs),
    /// Noise, denoise and report over every PGM in a directory.
    BenchSuite(BenchSuiteArgs),
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
struct ModelSource {
    /// FOE text model file.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Built-in model name (diff2x2).
    #[arg(long, value_name = "NAME")]
    builtin: Option<String>,
    /// Random zero-mean model `M:K` (patch side, expert count), seeded by --model-seed.
    #[arg(long, value_name = "M:K")]
    random_model: Option<String>,
}

fn parse_random_spec(spec: &str) -> Result<(usize, usize)> {
    let (m, k) = spec
        .split_once(':')
        .with_context(|| format!("random model spec {spec:?} must look like M:K"))?;
    Ok((m.trim().parse()?, k.trim().parse()?))
}

impl ModelSource {
    fn load(&self, model_seed: u64) -> Result<FoeModel> {
        if let Some(path) = &self.model {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading model {}", path.display()))?;
            return model::parse_model(&text)
                .with_context(|| format!("parsing model {}", path.display()));
        }
        if let Some(name) = &self.builtin {
            return Ok(model::builtin_model(name)?);
        }
        if let Some(spec) = &self.random_model {
            let (m, k) = parse_random_spec(spec)?;
            return Ok(model::random_model(m, k, model_seed)?);
        }
        bail!("one of --model, --builtin or --random-model is required")
    }
}

#[derive(Args, Debug, Clone)]
struct LmArgs {
    #[arg(long, value_name = "N")]
    max_iters: Option<usize>,
    #[arg(long, value_name = "REAL")]
    function_tol: Option<f64>,
    #[arg(long, value_name = "REAL")]
    gradient_tol: Option<f64>,
    #[arg(long, value_name = "REAL")]
    initial_damping: Option<f64>,
}

impl LmArgs {
    fn options(&self) -> LmOptions {
        let mut o = LmOptions::default();
        if let Some(v) = self.max_iters {
            o.max_iterations = v;
        }
        if let Some(v) = self.function_tol {
            o.function_tolerance = v;
        }
        if let Some(v) = self.gradient_tol {
            o.gradient_tolerance = v;
        }
        if let Some(v) = self.initial_damping {
            o.initial_damping = v;
        }
        o
    }
}

#[derive(Args, Debug)]
struct AddNoiseArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clamp to [0, 255] without a warning.
    #[arg(long)]
    clamp: bool,
    /// Write ASCII (P2) instead of binary (P5).
    #[arg(long)]
    ascii: bool,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    input: PathBuf,
    output: PathBuf,
    #[command(flatten)]
    source: ModelSource,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[arg(long)]
    sigma: f64,
    /// Round the solution to {0..255} before writing and report the objective change.
    #[arg(long)]
    round: bool,
    #[command(flatten)]
    lm: LmArgs,
    /// Per-iteration CSV trace.
    #[arg(long, alias = "csv", value_name = "PATH")]
    report: Option<PathBuf>,
    #[arg(long)]
    ascii: bool,
}

#[derive(Args, Debug)]
struct EnergyArgs {
    noisy: PathBuf,
    candidate: PathBuf,
    #[command(flatten)]
    source: ModelSource,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[arg(long)]
    sigma: f64,
}

#[derive(Args, Debug)]
struct PsnrArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    input: PathBuf,
    #[command(flatten)]
    source: ModelSource,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[arg(long)]
    sigma: f64,
    /// Comma-separated scale factors.
    #[arg(long, default_value = "0.5,1,2,4")]
    scales: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
    #[command(flatten)]
    lm: LmArgs,
}

#[derive(Args, Debug)]
struct CheckGradArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Instance size as WxH.
    #[arg(long, default_value = "8x8")]
    size: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20.0)]
    sigma: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Exit nonzero when the worst relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Scale the analytic gradient by (1 + value) to exercise the failure path.
    #[arg(long, hide = true, default_value_t = 0.0)]
    inject_gradient_error: f64,
}

#[derive(Args, Debug)]
struct BenchSuiteArgs {
    /// Directory of clean PGM images.
    #[arg(long)]
    images: PathBuf,
    /// Comma-separated models: builtin names, `random:M:K`, or FOE file paths.
    #[arg(long, default_value = "diff2x2")]
    models: String,
    #[arg(long, default_value_t = 20.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Consolidated CSV table.
    #[arg(long, alias = "csv")]
    out: PathBuf,
    /// Markdown copy of the table.
    #[arg(long)]
    markdown: Option<PathBuf>,
    /// Directory for noisy inputs and rounded outputs.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[command(flatten)]
    lm: LmArgs,
}

/// Formats with 12 significant digits, positional where readable.
fn sig12(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..=15).contains(&exp) {
        format!("{:.*}", (11 - exp).max(0) as usize, v)
    } else {
        format!("{v:.11e}")
    }
}

fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    image::read_pgm(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Writes a PGM, clamping with a warning when values fall outside [0, 255].
fn write_image(path: &Path, img: &Image, ascii: bool, warn: bool) -> Result<()> {
    let (clamped, moved) = image::clamp(img);
    if moved > 0 && warn {
        eprintln!("warning: {moved} pixel(s) outside [0, 255] clamped to fit the PGM format");
    }
    let bytes = image::write_pgm(&clamped, ascii)?;
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_add_noise(args: &AddNoiseArgs) -> Result<ExitCode> {
    let img = read_image(&args.input)?;
    let spec = NoiseSpec::new(args.sigma, args.seed)?;
    let noisy = image::add_gaussian_noise(&img, &spec);
    write_image(&args.output, &noisy, args.ascii, !args.clamp)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_denoise(args: &DenoiseArgs) -> Result<ExitCode> {
    let noisy = read_image(&args.input)?;
    let model = args.source.load(args.model_seed)?;
    let problem = Problem::new(noisy.clone(), model, args.sigma)?;
    let opts = args.lm.options();
    let (solution, report) = optimizer::lm_denoise(&problem, &noisy, &opts)?;
    println!("initial objective: {}", sig12(report.initial_objective));
    println!("final objective: {}", sig12(report.final_objective));
    println!("iterations: {}", report.iterations.len() - 1);
    println!("accepted steps: {}", report.accepted_steps());
    println!("termination: {}", report.termination);
    println!("wall seconds: {:.6}", report.wall_seconds);
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if args.round {
        let rounded = image::clamp_round(&solution);
        let rounded_objective = energy::energy(&problem, &rounded)?.total;
        let gap = (rounded_objective - report.final_objective) / report.final_objective;
        println!("rounded objective: {}", sig12(rounded_objective));
        println!("rounding gap: {}", sig12(gap));
        write_image(&args.output, &rounded, args.ascii, false)?;
    } else {
        write_image(&args.output, &solution, args.ascii, true)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_energy(args: &EnergyArgs) -> Result<ExitCode> {
    let noisy = read_image(&args.noisy)?;
    let candidate = read_image(&args.candidate)?;
    let model = args.source.load(args.model_seed)?;
    let problem = Problem::new(noisy, model, args.sigma)?;
    let e = energy::energy(&problem, &candidate)?;
    println!("data: {}", sig12(e.data_term));
    println!("prior: {}", sig12(e.prior_term));
    println!("total: {}", sig12(e.total));
    Ok(ExitCode::SUCCESS)
}

fn cmd_psnr(args: &PsnrArgs) -> Result<ExitCode> {
    let a = read_image(&args.a)?;
    let b = read_image(&args.b)?;
    let v = image::psnr(&a, &b)?;
    if v.is_infinite() {
        println!("psnr: inf");
    } else {
        println!("psnr: {v:.6}");
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_scales(text: &str) -> Result<Vec<f64>> {
    let scales = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad scale {s:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    if scales.is_empty() {
        bail!("at least one scale is required");
    }
    Ok(scales)
}

fn cmd_benchmark(args: &BenchmarkArgs) -> Result<ExitCode> {
    let base = read_image(&args.input)?;
    let model = args.source.load(args.model_seed)?;
    let scales = parse_scales(&args.scales)?;
    let rows = bench::run_scaling(
        &base,
        &model,
        args.sigma,
        args.seed,
        &scales,
        &args.lm.options(),
    )?;
    for r in &rows {
        println!(
            "scale {} ({}x{}): {} pixels, {:.6} s, objective {}, {} iterations",
            r.scale,
            r.width,
            r.height,
            r.pixels,
            r.seconds,
            sig12(r.final_objective),
            r.iterations
        );
    }
    let summary = bench::summarize_scaling(&rows);
    println!(
        "slope seconds per pixel: {:.6e}",
        summary.slope_seconds_per_pixel
    );
    println!(
        "per-pixel time ratio max/min: {:.4}",
        summary.per_pixel_ratio
    );
    if let Some(path) = &args.csv {
        std::fs::write(path, bench::scaling_csv(&rows))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let (w, h) = text
        .split_once(['x', 'X'])
        .with_context(|| format!("size {text:?} must look like WxH"))?;
    Ok((w.trim().parse()?, h.trim().parse()?))
}

fn cmd_check_grad(args: &CheckGradArgs) -> Result<ExitCode> {
    let model = args.source.load(args.model_seed)?;
    let (w, h) = parse_size(&args.size)?;
    let mut rng = SplitMix64::new(args.seed);
    let mut worst: f64 = 0.0;
    for trial in 0..args.trials {
        let clean: Vec<f64> = (0..w * h).map(|_| 255.0 * rng.next_f64()).collect();
        let u = Image::new(w, h, clean)?;
        let x = image::add_gaussian_noise(&u, &NoiseSpec::new(args.sigma, rng.next_u64())?);
        let problem = Problem::new(u, model.clone(), args.sigma)?;
        let mut analytic = energy::gradient(&problem, &x)?;
        for g in &mut analytic {
            *g *= 1.0 + args.inject_gradient_error;
        }
        let err = optimizer::compare_gradient(&problem, &x, args.step, &analytic)?;
        println!("trial {trial}: max relative error {err:.3e}");
        worst = worst.max(err);
    }
    println!("worst relative error: {worst:.6e}");
    if worst > args.threshold {
        eprintln!(
            "gradient check failed: {worst:.3e} exceeds {:.1e}",
            args.threshold
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn suite_models(list: &str, seed: u64) -> Result<Vec<SuiteModel>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            if model::BUILTIN_NAMES.contains(&entry) {
                return Ok(SuiteModel {
                    id: entry.to_string(),
                    model: model::builtin_model(entry)?,
                });
            }
            if let Some(spec) = entry.strip_prefix("random:") {
                let (m, k) = parse_random_spec(spec)?;
                return Ok(SuiteModel {
                    id: format!("random{m}x{m}k{k}"),
                    model: model::random_model(m, k, seed)?,
                });
            }
            let path = Path::new(entry);
            let text =
                std::fs::read_to_string(path).with_context(|| format!("reading model {entry}"))?;
            Ok(SuiteModel {
                id: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| entry.to_string()),
                model: model::parse_model(&text)
                    .with_context(|| format!("parsing model {entry}"))?,
            })
        })
        .collect()
}

fn cmd_bench_suite(args: &BenchSuiteArgs) -> Result<ExitCode> {
    let models = suite_models(&args.models, args.seed)?;
    let opts = SuiteOptions {
        sigma: args.sigma,
        seed: args.seed,
        lm: args.lm.options(),
        output_dir: args.output_dir.clone(),
    };
    let rows = bench::run_suite(&args.images, &models, &opts)?;
    std::fs::write(&args.out, bench::suite_csv(&rows))
        .with_context(|| format!("writing {}", args.out.display()))?;
    let table = bench::suite_markdown(&rows);
    if let Some(path) = &args.markdown {
        std::fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{table}");
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    println!("rows: {} ({} failed)", rows.len(), failed);
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::AddNoise(a) => cmd_add_noise(a),
        Command::Denoise(a) => cmd_denoise(a),
        Command::Energy(a) => cmd_energy(a),
        Command::Psnr(a) => cmd_psnr(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::CheckGrad(a) => cmd_check_grad(a),
        Command::BenchSuite(a) => cmd_bench_suite(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
