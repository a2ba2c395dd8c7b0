use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use sclm::glle::{Topology, DEFAULT_POOL_K};
use sclm::io::{
    bench, count_flops, count_macs, count_params, dataset_stats, format_gflops, is_image_path,
    load_image, pointwise_ops_per_pixel, save_image, synth_pair, FlopConvention, LossLog,
    ModelData, ModelFile, Provenance, SynthConfig,
};
use sclm::local_adapt::enhance;
use sclm::tensor::Shape;
use sclm::training::gradcheck::{check_topology, GradCheckConfig};
use sclm::training::{train, Pair, TrainConfig};
use sclm::verify::{compare_fused, fusion_equivalence};

/// Largest fused-vs-branch discrepancy accepted by `fuse` and `verify`.
const FUSE_TOL_F32: f64 = 1e-4;
const FUSE_TOL_F64: f64 = 1e-10;

#[derive(Parser)]
#[command(
    name = "sclm",
    version,
    about = "Single-convolution low-light enhancement"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a multi-branch model and write a branch checkpoint.
    Train(TrainArgs),
    /// Collapse a branch checkpoint into a single-conv model.
    Fuse(FuseArgs),
    /// Enhance an image or every image in a directory.
    Enhance(EnhanceArgs),
    /// Time branch and fused inference and report parameters and FLOPs.
    Bench(BenchArgs),
    /// Mean Y (0-255) of the images in each directory.
    Stats { dir: PathBuf },
    /// Run the gradient-check and fusion-equivalence suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of well-exposed PNG/PPM images; synthetic scenes if omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of synthetic scenes when no data directory is given.
    #[arg(long, default_value_t = 200)]
    synth: usize,
    /// Side of each synthetic scene.
    #[arg(long, default_value_t = 96)]
    synth_size: usize,
    #[arg(long, default_value = "db")]
    topology: Topology,
    #[arg(long, default_value_t = DEFAULT_POOL_K)]
    pool_k: usize,
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial learning rate (cosine-annealed to 1e-6).
    #[arg(long)]
    lr: Option<f64>,
    /// Exposure tiers in EV used to darken the training images.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-1.5,-1.0"
    )]
    ev: Vec<f64>,
    /// Loss CSV (`step,lr,loss`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Output branch checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    /// Branch checkpoint to collapse.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Random images used to measure the discrepancy.
    #[arg(long, default_value_t = 16)]
    probes: usize,
    #[arg(long, default_value_t = 32)]
    probe_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Branch or fused model file.
    #[arg(long)]
    model: PathBuf,
    /// Input image or directory.
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Flops {
    /// One FLOP per multiply-accumulate.
    #[value(name = "1x")]
    One,
    /// Two FLOPs per multiply-accumulate.
    #[value(name = "2x")]
    Two,
}

#[derive(Args)]
struct BenchArgs {
    /// Branch checkpoint; a freshly initialised model if omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "db")]
    topology: Topology,
    #[arg(long, default_value_t = 1080)]
    height: usize,
    #[arg(long, default_value_t = 1920)]
    width: usize,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, value_enum, default_value = "1x")]
    flops: Flops,
}

#[derive(Args)]
struct VerifyArgs {
    /// Random points per topology for the gradient check.
    #[arg(long, default_value_t = 20)]
    points: usize,
    /// Random 32x32 images per topology for fusion equivalence.
    #[arg(long, default_value_t = 100)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.cmd {
        Cmd::Train(a) => run_train(a),
        Cmd::Fuse(a) => run_fuse(a),
        Cmd::Enhance(a) => run_enhance(a),
        Cmd::Bench(a) => run_bench(a),
        Cmd::Stats { dir } => run_stats(&dir),
        Cmd::Verify(a) => run_verify(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Worker cap from `SCLM_THREADS`, if set.
fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("SCLM_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("SCLM_THREADS={v} is not a count"))?;
            if n == 0 {
                bail!("SCLM_THREADS must be at least 1");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn configure_threads() -> Result<()> {
    if let Some(n) = thread_cap()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.retain(|p| p.is_file() && is_image_path(p));
    v.sort();
    Ok(v)
}

fn run_train(a: TrainArgs) -> Result<bool> {
    let synth = SynthConfig {
        exposure_tiers: a.ev.clone(),
        ..SynthConfig::default()
    };
    synth.validate()?;
    let data: Vec<Pair> = match &a.data {
        Some(dir) => images_in(dir)?
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let img = load_image(p).with_context(|| format!("loading {}", p.display()))?;
                Ok(synth_pair(&img, &synth, a.seed.wrapping_add(i as u64))?)
            })
            .collect::<Result<_>>()?,
        None => sclm::io::synth_dataset(a.synth, a.synth_size, a.synth_size, &synth, a.seed)?,
    };
    if data.is_empty() {
        bail!("no training images");
    }
    let mut cfg = TrainConfig {
        topology: a.topology,
        pool_k: a.pool_k,
        crop: a.crop,
        batch: a.batch,
        steps: a.steps,
        seed: a.seed,
        ..TrainConfig::default()
    };
    if let Some(lr) = a.lr {
        cfg.lr_init = lr;
    }
    let mut log = a.log.as_ref().map(LossLog::create).transpose()?;
    let mut log_err = None;
    let every = (a.steps / 20).max(1);
    let model = train(&data, &cfg, |s| {
        if let Some(l) = log.as_mut() {
            if let Err(e) = l.append(s) {
                log_err.get_or_insert(e);
            }
        }
        if s.step % every == 0 || s.step == a.steps {
            println!("step {:>6}  lr {:.3e}  loss {:.5}", s.step, s.lr, s.loss);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    if let Some(l) = log {
        l.finish()?;
    }
    let file = ModelFile::branch(
        model,
        Provenance {
            seed: a.seed,
            steps: a.steps as u64,
        },
    );
    file.save(&a.out)?;
    println!(
        "wrote {} ({} topology, {} pairs)",
        a.out.display(),
        a.topology,
        data.len()
    );
    Ok(true)
}

fn load_model(p: &Path) -> Result<ModelFile> {
    ModelFile::load(p).with_context(|| format!("loading model {}", p.display()))
}

fn run_fuse(a: FuseArgs) -> Result<bool> {
    let file = load_model(&a.model)?;
    let ModelData::Branch(m) = &file.model else {
        bail!("{} is already fused", a.model.display());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let shape = Shape::new(1, 3, a.probe_size, a.probe_size);
    let report = compare_fused(&m.glle, m.curve, m.pool_k, a.probes, shape, &mut rng)?;
    let fused = m.fuse()?;
    let params = count_params(&fused);
    ModelFile::fused(fused, file.topology, file.provenance).save(&a.out)?;
    println!(
        "max discrepancy over {} probes: {:.3e} (logits {:.3e}, output {:.3e})",
        a.probes,
        report.max_diff(),
        report.max_logit_diff,
        report.max_output_diff
    );
    println!("wrote {} ({params} parameters)", a.out.display());
    let ok = report.max_diff() < FUSE_TOL_F32;
    if !ok {
        eprintln!("discrepancy exceeds {FUSE_TOL_F32:e}");
    }
    Ok(ok)
}

fn run_enhance(a: EnhanceArgs) -> Result<bool> {
    let model = load_model(&a.model)?.to_fused()?;
    let inputs = if a.input.is_dir() {
        images_in(&a.input)?
    } else {
        vec![a.input.clone()]
    };
    if inputs.is_empty() {
        bail!("no PNG or PPM images in {}", a.input.display());
    }
    std::fs::create_dir_all(&a.out)?;
    inputs.par_iter().try_for_each(|p| -> Result<()> {
        let name = p.file_name().context("input has no file name")?;
        let img = load_image(p).with_context(|| format!("loading {}", p.display()))?;
        let out = enhance(&img, &model).with_context(|| format!("enhancing {}", p.display()))?;
        save_image(a.out.join(name), &out)?;
        Ok(())
    })?;
    println!(
        "enhanced {} image(s) into {}",
        inputs.len(),
        a.out.display()
    );
    Ok(true)
}

fn run_bench(a: BenchArgs) -> Result<bool> {
    let model = match &a.model {
        Some(p) => match load_model(p)?.model {
            ModelData::Branch(m) => m,
            ModelData::Fused(_) => bail!("bench needs a branch checkpoint to compare against"),
        },
        None => sclm::training::TrainModel::new(
            sclm::glle::build_topology(a.topology, 0),
            sclm::local_adapt::CurveParams::init(),
            DEFAULT_POOL_K,
        ),
    };
    let fused = model.fuse()?;
    let conv = match a.flops {
        Flops::One => FlopConvention::Mac,
        Flops::Two => FlopConvention::TwoPerMac,
    };
    let g = count_flops(&fused, a.height, a.width, conv);
    println!(
        "params: {} (conv {} + curve 3)",
        count_params(&fused),
        fused.kernel.scalar_count()
    );
    println!(
        "conv MACs at {}x{}: {} ({:.3} G); GFLOPs ({}): {}",
        a.height,
        a.width,
        count_macs(&fused.kernel, a.height, a.width),
        count_macs(&fused.kernel, a.height, a.width) as f64 / 1e9,
        match a.flops {
            Flops::One => "1 per MAC",
            Flops::Two => "2 per MAC",
        },
        format_gflops(g)
    );
    println!(
        "pointwise ops per pixel (reported separately): {}",
        pointwise_ops_per_pixel(fused.pool_k)
    );

    let image = bench::bench_image(a.height, a.width);
    let multi = thread_cap()?
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let mut counts = vec![1];
    if multi > 1 {
        counts.push(multi);
    }
    println!("{}", bench::CSV_HEADER);
    for t in counts {
        let rows = bench::inference_rows(
            &model.glle,
            model.curve,
            &fused,
            &image,
            a.warmup,
            a.repeats,
            t,
        )?;
        for r in &rows {
            println!("{}", r.csv(a.height, a.width));
        }
        if let Some(s) = bench::speedup(&rows, "branch-logits", "fused-logits", t) {
            println!("# speedup (logits, {t} thread(s)): {s:.2}x");
        }
        if let Some(s) = bench::speedup(&rows, "branch-enhance", "fused-enhance", t) {
            println!("# speedup (full pipeline, {t} thread(s)): {s:.2}x");
        }
    }
    Ok(true)
}

fn run_stats(dir: &Path) -> Result<bool> {
    let stats = dataset_stats(dir)?;
    println!("directory,images,mean_y");
    for s in &stats {
        println!("{},{},{:.2}", s.dir.display(), s.images, s.mean_y);
    }
    Ok(true)
}

fn run_verify(a: VerifyArgs) -> Result<bool> {
    let mut ok = true;
    let gc = GradCheckConfig {
        points: a.points,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    for t in Topology::ALL {
        let r = check_topology(t, &gc)?;
        let worst = r.worst.as_ref().map_or(0.0, |w| w.rel_err);
        let pass = r.passed();
        ok &= pass;
        println!(
            "gradcheck {t:<5} {}  points {} (rejected {})  checks {}  worst rel err {worst:.2e}",
            if pass { "PASS" } else { "FAIL" },
            r.points,
            r.rejected,
            r.checks
        );
        for f in r.failures.iter().take(5) {
            println!(
                "  {} at point {}: analytic {:.6e} numeric {:.6e}",
                f.label, f.point, f.analytic, f.numeric
            );
        }
    }
    for t in Topology::ALL {
        let r32 = fusion_equivalence::<f32>(t, a.probes, 32, a.seed)?;
        let r64 = fusion_equivalence::<f64>(t, a.probes, 32, a.seed)?;
        let pass = r32.max_diff() < FUSE_TOL_F32 && r64.max_diff() < FUSE_TOL_F64;
        ok &= pass;
        println!(
            "fusion    {t:<5} {}  probes {}  f32 {:.2e}  f64 {:.2e}",
            if pass { "PASS" } else { "FAIL" },
            a.probes,
            r32.max_diff(),
            r64.max_diff()
        );
    }
    Ok(ok)
}
