use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use cra_pcn::checkpoint;
use cra_pcn::config::{Preset, RunConfig};
use cra_pcn::data::{self, io, DatasetSpec, DifficultyChoice, Format, Primitive};
use cra_pcn::geometry::{chamfer, fscore};
use cra_pcn::gradcheck::{self, GradcheckOptions};
use cra_pcn::{ChamferVariant, Error, Model, Point};

#[derive(Parser)]
#[command(
    name = "cra-pcn",
    version,
    about = "Point cloud completion with cross-resolution transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of (partial, complete) pairs and a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// simple, moderate, hard or mixed.
        #[arg(long, default_value = "mixed")]
        difficulty: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// A primitive name, or `all` to cycle through every kind.
        #[arg(long, default_value = "composite")]
        primitive: String,
        /// Points per complete cloud.
        #[arg(long, default_value_t = data::DEFAULT_COMPLETE_POINTS)]
        points: usize,
        /// Points per partial cloud after occlusion and resampling.
        #[arg(long, default_value_t = data::DEFAULT_PARTIAL_POINTS)]
        partial_points: usize,
        #[arg(long, value_enum, default_value_t = FileFormat::Xyz)]
        format: FileFormat,
    },
    /// Train on a generated dataset, reporting held-out CD-L1 per epoch.
    TrainToy {
        #[arg(long)]
        data: PathBuf,
        /// Run configuration file; the toy preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Complete one partial cloud with a trained checkpoint.
    Complete {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write seeds, P0, P1 and P2 next to the output.
        #[arg(long)]
        stages: bool,
    },
    /// Score completions (or, without --ckpt, the ground truth itself)
    /// against the complete clouds of a dataset.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::CdL1)]
        metric: Metric,
        /// F-Score distance threshold.
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        /// Run configuration file; the tiny preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates sampled per parameter block; all when omitted.
        #[arg(long)]
        per_block: Option<usize>,
        /// Number of worst blocks to list.
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Forward latency and peak memory at a given input size.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Preset used when no --config is given.
        #[arg(long, value_enum, default_value_t = PresetArg::Default)]
        preset: PresetArg,
        #[arg(long, default_value_t = 2048)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FileFormat {
    Xyz,
    Ply,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    CdL1,
    CdL2,
    Fscore,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Default,
    Toy,
    Tiny,
}

fn load_config(path: Option<&Path>, fallback: Preset) -> cra_pcn::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::preset(fallback)),
    }
}

fn gen_data(
    out: &Path,
    count: usize,
    difficulty: &str,
    seed: u64,
    primitive: &str,
    points: usize,
    partial_points: usize,
    format: FileFormat,
) -> anyhow::Result<()> {
    let spec = DatasetSpec {
        count,
        difficulty: DifficultyChoice::parse(difficulty)?,
        primitive: match primitive {
            "all" => None,
            name => Some(Primitive::from_name(name)?),
        },
        complete_points: points,
        partial_points,
        seed,
    };
    let format = match format {
        FileFormat::Xyz => Format::Xyz,
        FileFormat::Ply => Format::Ply,
    };
    let entries = data::write_dataset(out, &spec, format)?;
    println!("wrote {} examples to {}", entries.len(), out.display());
    Ok(())
}

fn train_toy(
    data_dir: &Path,
    config: Option<&Path>,
    epochs: usize,
    out: &Path,
    seed: u64,
) -> anyhow::Result<()> {
    let run = load_config(config, Preset::Toy)?;
    let examples = data::load_dataset(data_dir)?;
    let mut model = Model::new(run.model.clone(), seed)?;
    println!(
        "params={} train={} heldout={} variant={}",
        model.params().numel(),
        examples.len().saturating_sub(run.train.holdout),
        run.train.holdout,
        run.model.variant.letter()
    );
    let report = cra_pcn::train::train(&mut model, &run, &examples, epochs, seed, |r| {
        let loss = r.train_loss.map_or("-".to_string(), |l| format!("{l:.9e}"));
        println!(
            "epoch={} steps={} train_loss={} heldout_cd_l1={:.9e} heldout_cd_l1_x1e3={:.6}",
            r.epoch,
            r.steps,
            loss,
            r.heldout_cd_l1,
            r.heldout_cd_l1 * 1e3
        );
    })?;
    checkpoint::save(out, &model, &run)?;
    if let (Some(first), Some(last)) = (report.initial(), report.last()) {
        println!(
            "initial={first:.9e} final={last:.9e} ratio={:.6}",
            last / first
        );
    }
    Ok(())
}

/// Resamples `points` to the model's input size and runs inference.
fn infer(model: &Model, points: &[Point]) -> cra_pcn::Result<cra_pcn::CompletionOutput> {
    let input = data::resample(points, model.config().input_points)?;
    model.infer(&input)
}

fn complete(ckpt: &Path, input: &Path, out: &Path, stages: bool) -> anyhow::Result<()> {
    let (model, _) = checkpoint::load::<f64>(ckpt)?;
    let cloud = io::read_cloud(input)?;
    let result = infer(&model, cloud.points())?;
    let p3 = result.completion().to_points()?;
    io::write_cloud(out, &p3)?;
    println!("P3 {} points -> {}", p3.len(), out.display());
    if stages {
        let stem = out
            .file_stem()
            .and_then(|s| s.to_str())
            .context("output path has no file name")?;
        let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("xyz");
        let sets = [
            ("seeds", &result.seeds),
            ("p0", &result.start),
            ("p1", &result.stages[0]),
            ("p2", &result.stages[1]),
        ];
        for (tag, t) in sets {
            let path = out.with_file_name(format!("{stem}_{tag}.{ext}"));
            let pts = t.to_points()?;
            io::write_cloud(&path, &pts)?;
            println!("{} {} points -> {}", tag, pts.len(), path.display());
        }
    }
    Ok(())
}

fn eval(
    ckpt: Option<&Path>,
    data_dir: &Path,
    metric: Metric,
    threshold: f64,
) -> anyhow::Result<()> {
    let model = ckpt
        .map(checkpoint::load::<f64>)
        .transpose()?
        .map(|(m, _)| m);
    let examples = data::load_dataset(data_dir)?;
    let mut per_category: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ex in &examples {
        let gt = ex.complete.points();
        let pred = match &model {
            Some(m) => infer(m, ex.partial.points())?.completion().to_points()?,
            None => gt.to_vec(),
        };
        let v = match metric {
            Metric::CdL1 => chamfer(&pred, gt, ChamferVariant::L1)?,
            Metric::CdL2 => chamfer(&pred, gt, ChamferVariant::L2)?,
            Metric::Fscore => fscore(&pred, gt, threshold)?,
        };
        per_category.entry(ex.category.clone()).or_default().push(v);
    }
    let (name, scale) = match metric {
        Metric::CdL1 => ("cd-l1", 1e3),
        Metric::CdL2 => ("cd-l2", 1e3),
        Metric::Fscore => ("fscore", 1.0),
    };
    let scaled = if scale == 1.0 {
        name.to_string()
    } else {
        format!("{name}_x1e3")
    };
    println!(
        "{:<20} {:>5} {:>14} {:>18}",
        "category", "count", scaled, name
    );
    let mut means = Vec::new();
    for (cat, vals) in &per_category {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        means.push(mean);
        println!(
            "{:<20} {:>5} {:>14.6} {:>18.9e}",
            cat,
            vals.len(),
            mean * scale,
            mean
        );
    }
    let avg = means.iter().sum::<f64>() / means.len() as f64;
    println!(
        "{:<20} {:>5} {:>14.6} {:>18.9e}",
        "average",
        examples.len(),
        avg * scale,
        avg
    );
    Ok(())
}

/// Exit code 0 iff the check passed.
fn run_gradcheck(
    config: Option<&Path>,
    seed: u64,
    per_block: Option<usize>,
    top: usize,
    corrupt: bool,
) -> anyhow::Result<ExitCode> {
    let run = load_config(config, Preset::Tiny)?;
    let opts = GradcheckOptions {
        per_block: per_block.unwrap_or(usize::MAX),
        corrupt,
        ..GradcheckOptions::default()
    };
    let report = gradcheck::run(&run.model, seed, &opts)?;
    println!(
        "blocks={} checked={} skipped={} max_rel={:.3e} tolerance={:.0e}",
        report.blocks.len(),
        report.checked(),
        report.skipped(),
        report.max_rel(),
        report.tolerance
    );
    let mut worst: Vec<_> = report.blocks.iter().collect();
    worst.sort_by(|a, b| {
        b.max_rel
            .total_cmp(&a.max_rel)
            .then_with(|| a.name.cmp(&b.name))
    });
    for b in worst.iter().take(top) {
        let (j, a, n) = b.worst.unwrap_or((0, 0.0, 0.0));
        println!(
            "worst {} max_rel={:.3e} index={} analytic={:.9e} numeric={:.9e}",
            b.name, b.max_rel, j, a, n
        );
    }
    if report.passed() {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Ok(ExitCode::from(3))
    }
}

/// Peak resident set size in KiB, from `/proc/self/status`.
fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn bench(
    config: Option<&Path>,
    preset: PresetArg,
    n: usize,
    repeats: usize,
    seed: u64,
) -> anyhow::Result<()> {
    if repeats == 0 {
        bail!(Error::Contract("--repeats must be positive".into()));
    }
    let preset = match preset {
        PresetArg::Default => Preset::Default,
        PresetArg::Toy => Preset::Toy,
        PresetArg::Tiny => Preset::Tiny,
    };
    let mut run = load_config(config, preset)?;
    run.model.input_points = n;
    let model = Model::new(run.model.clone(), seed)?;
    let spec = DatasetSpec {
        count: 1,
        complete_points: n.max(8),
        partial_points: n,
        seed,
        ..DatasetSpec::default()
    };
    let ex = data::make_example(&spec, 0)?;
    let input = ex.partial.points();
    // Warm-up pass.
    let out = model.infer(input)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(model.infer(input)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    println!("n={n}");
    println!("output_points={}", out.completion().shape()[0]);
    println!("params={}", model.params().numel());
    println!("repeats={repeats}");
    println!("latency_ms_min={min:.3}");
    println!("latency_ms_mean={mean:.3}");
    match peak_rss_kib() {
        Some(kib) => println!("peak_rss_kib={kib}"),
        None => println!("peak_rss_kib=unavailable"),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData {
            out,
            count,
            difficulty,
            seed,
            primitive,
            points,
            partial_points,
            format,
        } => gen_data(
            &out,
            count,
            &difficulty,
            seed,
            &primitive,
            points,
            partial_points,
            format,
        )?,
        Command::TrainToy {
            data,
            config,
            epochs,
            out,
            seed,
        } => train_toy(&data, config.as_deref(), epochs, &out, seed)?,
        Command::Complete {
            ckpt,
            input,
            out,
            stages,
        } => complete(&ckpt, &input, &out, stages)?,
        Command::Eval {
            ckpt,
            data,
            metric,
            threshold,
        } => eval(ckpt.as_deref(), &data, metric, threshold)?,
        Command::Gradcheck {
            config,
            seed,
            per_block,
            top,
            corrupt,
        } => return run_gradcheck(config.as_deref(), seed, per_block, top, corrupt),
        Command::Bench {
            config,
            preset,
            n,
            repeats,
            seed,
        } => bench(config.as_deref(), preset, n, repeats, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let numerical = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::NonFinite(_))));
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}
