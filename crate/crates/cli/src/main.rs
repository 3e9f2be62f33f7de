use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use vcamba_core::diagnostics::{block_gradcheck, BLOCKS};
use vcamba_core::freq::{amplitude_only, fft2_centered, phase_only};
use vcamba_core::io::{read_pgm, write_csv, write_pgm};
use vcamba_core::model::Variant;
use vcamba_core::scan::{
    cross_scan_paths, dual_domain_paths, spatiotemporal_paths, spiral_scan_path, ScanPath, SpiralDirection,
};
use vcamba_core::synth::{load_dataset, make_dataset, save_dataset, DatasetSpec};
use vcamba_core::timing::{bench, doubling_lengths, ratios, Kernel};
use vcamba_core::train::{
    ablate, evaluate_dirs, format_table, load_checkpoint, predict_with, train, write_ablation, write_results,
    TrainConfig,
};
use vcamba_core::{Error, Result, Tensor};

/// Largest gradient error `gradcheck` accepts.
const GRADCHECK_LIMIT: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "vcamba", version, about = "Video camouflaged object detection toolkit")]
struct Cli {
    /// Seed for every random choice the subcommand makes (default 0; for
    /// `train` and `ablate` it overrides the config's seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic camouflage dataset.
    Gen(GenArgs),
    /// Train a model from a key=value config file.
    Train(TrainArgs),
    /// Write per-clip predictions of a trained checkpoint.
    Predict(PredictArgs),
    /// Score PGM predictions against ground-truth masks.
    Eval(EvalArgs),
    /// Train variants side by side over several seeds.
    Ablate(AblateArgs),
    /// Dump a scan order as CSV and as a rank image.
    ScanViz(ScanVizArgs),
    /// Amplitude and phase maps with single-component reconstructions.
    FftViz(FftVizArgs),
    /// Time the selective scan or the attention baseline against length.
    Bench(BenchArgs),
    /// Finite-difference gradient check of one block.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 40)]
    clips: usize,
    /// Camouflage strength in [0, 1].
    #[arg(long, default_value_t = 0.9)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory written by `gen`; its validation clips are used.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Variants to compare with the full model (repeat or comma-separate).
    #[arg(long = "variant", value_delimiter = ',', required = true)]
    variants: Vec<Variant>,
    /// Base config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScanKind {
    Cross,
    Spiral,
    Spatiotemporal,
    Dualdomain,
}

#[derive(Args)]
struct ScanVizArgs {
    #[arg(long, value_enum)]
    kind: ScanKind,
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    /// Frames, for the spatio-temporal scan.
    #[arg(long, default_value_t = 2)]
    n: usize,
    /// Output stem; `.csv` and `.pgm` are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FftVizArgs {
    /// PGM or PPM input; color is converted to luma.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    kernel: Kernel,
    #[arg(long, default_value_t = 1024)]
    lmin: usize,
    #[arg(long, default_value_t = 16384)]
    lmax: usize,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// One of rfvss, dse, afe, slmp, flmp, mfm, sfmf, loss, model, or all.
    #[arg(long)]
    block: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    let fixed = seed.unwrap_or(0);
    match cli.command {
        Command::Gen(a) => gen(a, fixed)?,
        Command::Train(a) => train_cmd(a, seed)?,
        Command::Predict(a) => predict_cmd(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Ablate(a) => ablate_cmd(a, seed)?,
        Command::ScanViz(a) => scan_viz(a)?,
        Command::FftViz(a) => fft_viz(a)?,
        Command::Bench(a) => bench_cmd(a, fixed)?,
        Command::Gradcheck(a) => return gradcheck(a, fixed),
    }
    Ok(ExitCode::SUCCESS)
}

fn gen(a: GenArgs, seed: u64) -> Result<()> {
    let spec = DatasetSpec { clips: a.clips, camouflage: a.lambda, ..DatasetSpec::default() };
    let ds = make_dataset(&spec, seed)?;
    save_dataset(&ds, &a.out)?;
    info!("wrote {} train and {} val clips to {}", ds.train.len(), ds.val.len(), a.out.display());
    Ok(())
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_text(&fs::read_to_string(path)?)
}

fn seeded(mut cfg: TrainConfig, seed: Option<u64>) -> TrainConfig {
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.data_seed = s;
    }
    cfg
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = seeded(read_config(&a.config)?, seed);
    let outcome = train(&cfg, &a.out)?;
    let v = outcome.val;
    println!("val mDice {:.4} mIoU {:.4} MAE {:.4}", v.mdice, v.miou, v.mae);
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let (_, model) = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    for (i, clip) in ds.val.iter().enumerate() {
        predict_with(&model, clip, a.out.join(format!("clip_{i:04}")))?;
    }
    info!("wrote predictions for {} clips to {}", ds.val.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let rows = evaluate_dirs(&a.pred, &a.gt)?;
    write_results(&a.out, &rows)?;
    print!("{}", format_table(&rows));
    Ok(())
}

fn ablate_cmd(a: AblateArgs, seed: Option<u64>) -> Result<()> {
    let base = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    let seed = seed.unwrap_or(base.seed);
    let mut variants = vec![Variant::Full];
    variants.extend(a.variants.into_iter().filter(|v| *v != Variant::Full));
    let seeds: Vec<u64> = (seed..seed + a.seeds).collect();
    let rows = ablate(&base, &variants, &seeds)?;
    write_ablation(&a.out, &rows)?;
    for v in &variants {
        let mine: Vec<f64> = rows.iter().filter(|r| r.variant == *v).map(|r| r.val.mdice).collect();
        println!("{v:<16} mean mDice {:.4}", mine.iter().sum::<f64>() / mine.len() as f64);
    }
    Ok(())
}

type NamedPaths = Vec<(&'static str, ScanPath)>;

/// Named paths plus the `(rows, cols)` grid their indices live on.
fn scan_paths(a: &ScanVizArgs) -> Result<(NamedPaths, usize, usize)> {
    if a.h == 0 || a.w == 0 || a.n == 0 {
        return Err(Error::Config("scan sizes must be positive".into()));
    }
    Ok(match a.kind {
        ScanKind::Cross => {
            let names = ["row", "column", "row_reversed", "column_reversed"];
            (names.into_iter().zip(cross_scan_paths(a.h, a.w)).collect(), a.h, a.w)
        }
        ScanKind::Spiral => (
            vec![
                ("low_to_high", spiral_scan_path(a.h, a.w, SpiralDirection::LowToHigh)),
                ("high_to_low", spiral_scan_path(a.h, a.w, SpiralDirection::HighToLow)),
            ],
            a.h,
            a.w,
        ),
        ScanKind::Spatiotemporal => {
            let names = ["frame_major", "position_major", "frame_major_reversed", "position_major_reversed"];
            let paths = spatiotemporal_paths(a.n, a.h * a.w);
            (names.into_iter().zip(paths).collect(), a.n * a.h, a.w)
        }
        ScanKind::Dualdomain => {
            let p = dual_domain_paths(a.h * a.w);
            (vec![("seq2seq", p.seq2seq), ("point2point", p.point2point)], 2 * a.h, a.w)
        }
    })
}

fn scan_viz(a: ScanVizArgs) -> Result<()> {
    let (paths, rows, cols) = scan_paths(&a)?;
    let mut table = Vec::new();
    for (name, p) in &paths {
        for (step, &idx) in p.order().iter().enumerate() {
            table.push(vec![
                name.to_string(),
                step.to_string(),
                idx.to_string(),
                (idx / cols).to_string(),
                (idx % cols).to_string(),
            ]);
        }
    }
    write_csv(a.out.with_extension("csv"), &["path", "step", "index", "row", "col"], &table)?;
    // paths side by side; brightness is the visiting step
    let total = rows * cols;
    let width = cols * paths.len();
    let mut img = vec![0.0; rows * width];
    for (k, (_, p)) in paths.iter().enumerate() {
        for (step, &idx) in p.order().iter().enumerate() {
            let v = if total > 1 { step as f64 / (total - 1) as f64 } else { 1.0 };
            img[(idx / cols) * width + k * cols + idx % cols] = v;
        }
    }
    write_pgm(a.out.with_extension("pgm"), &img, rows, width)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn fft_viz(a: FftVizArgs) -> Result<()> {
    let (gray, h, w) = read_pgm(&a.image)?;
    let x = Tensor::new(gray, &[1, h, w])?;
    let spec = fft2_centered(&x)?;
    fs::create_dir_all(&a.out)?;
    let log_amp: Vec<f64> = spec.amplitude.data().iter().map(|v| v.ln_1p()).collect();
    write_pgm(a.out.join("amplitude.pgm"), &normalized(&log_amp), h, w)?;
    let phase: Vec<f64> =
        spec.phase.data().iter().map(|p| (p + std::f64::consts::PI) / std::f64::consts::TAU).collect();
    write_pgm(a.out.join("phase.pgm"), &phase, h, w)?;
    write_pgm(a.out.join("amplitude_only.pgm"), &normalized(amplitude_only(&x)?.data()), h, w)?;
    write_pgm(a.out.join("phase_only.pgm"), &normalized(phase_only(&x)?.data()), h, w)?;
    info!("wrote spectra and reconstructions to {}", a.out.display());
    Ok(())
}

fn bench_cmd(a: BenchArgs, seed: u64) -> Result<()> {
    let lengths = doubling_lengths(a.lmin, a.lmax)?;
    let rows = bench(a.kernel, &lengths, a.reps, seed)?;
    let ratio = ratios(&rows);
    let table: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(i, (l, t))| {
            let r = if i == 0 { String::new() } else { format!("{:.4}", ratio[i - 1]) };
            vec![a.kernel.to_string(), l.to_string(), format!("{t:.9}"), r]
        })
        .collect();
    write_csv(&a.out, &["kernel", "L", "median_s", "ratio"], &table)?;
    for r in &table {
        println!("{} L={} median {}s ratio {}", r[0], r[1], r[2], r[3]);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, seed: u64) -> Result<ExitCode> {
    let names: Vec<&str> = if a.block == "all" { BLOCKS.to_vec() } else { vec![a.block.as_str()] };
    let mut worst: f64 = 0.0;
    for name in names {
        let r = block_gradcheck(name, seed)?;
        println!("{name}: input {:.3e} params {:.3e}", r.input, r.params);
        worst = worst.max(r.input);
    }
    if worst > GRADCHECK_LIMIT {
        eprintln!("gradient error {worst:.3e} exceeds {GRADCHECK_LIMIT:e}");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
