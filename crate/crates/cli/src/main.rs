//! `lesionsyn`: every pipeline stage from phantom generation to the
//! segmentation benchmark. Exit codes: 0 success, 1 user error, 2 internal
//! error.

mod args;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lesionsyn::dataset::{directory_digest, read_dataset, write_dataset, write_lesion_samples, SampleRecord};
use lesionsyn::export::{write_lsf, write_png};
use lesionsyn::implant::{build_synthetic_dataset, write_synthetic_dataset, BuildOptions, ImplantSpec, SynthesisMode};
use lesionsyn::nn::{DiscriminatorConfig, GeneratorConfig};
use lesionsyn::phantom::{generate_healthy, generate_phantom, PhantomConfig};
use lesionsyn::seg_eval::{run_experiment, SegConfig};
use lesionsyn::synthesis::{render_grid, Synthesizer};
use lesionsyn::train::{checkpoint_digest, load_checkpoint, resume, train, TrainConfig, TrainingBatch};
use lesionsyn::{Error, Grid, HuWindow, HIST_BINS};

#[derive(Parser)]
#[command(name = "lesionsyn", version, about = "Shape and density controllable liver lesion synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Mask-only baseline.
    Mask,
    /// Mask plus density histogram.
    #[value(name = "mask+density")]
    MaskDensity,
}

impl ModeArg {
    fn synthesis(self) -> SynthesisMode {
        match self {
            ModeArg::Mask => SynthesisMode::MaskOnly,
            ModeArg::MaskDensity => SynthesisMode::MaskPlusDensity,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural phantom slices in the dataset layout.
    GenPhantoms {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Lesion-free slices (implant targets).
        #[arg(long)]
        healthy: bool,
        /// Phantom parameters as TOML; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Square slice size, overriding the config.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Decompose every lesion of a dataset into (patch, mask, histogram).
    PrepareData {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// HU window lo,hi; defaults to each record's stored window.
        #[arg(long, value_parser = args::parse_window)]
        window: Option<HuWindow>,
        #[arg(long, default_value_t = 64)]
        patch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert a CT volume and its label volume into the dataset layout.
    ImportNifti {
        #[arg(long)]
        ct: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = args::parse_window, default_value = "-100,400")]
        window: HuWindow,
        /// Skip slices with fewer liver pixels.
        #[arg(long, default_value_t = 1)]
        min_liver_pixels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the generator and discriminator on a prepared lesion set.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "mask+density")]
        mode: ModeArg,
        #[arg(long, default_value_t = 150)]
        epochs: u32,
        #[arg(long, default_value_t = 0.0002)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        /// First-level channel width of both networks.
        #[arg(long, default_value_t = 64)]
        base_channels: usize,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
        /// Continue from the checkpoint already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Synthesize one lesion patch.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mask file (.lsf or .png) or lesion sample directory.
        #[arg(long)]
        mask: PathBuf,
        /// Preset (uniform, delta:B, unimodal:M,W, bimodal:M1,M2,W) or file.
        #[arg(long)]
        hist: String,
        /// Output path; .lsf writes floats, anything else PNG.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a grid: one row per histogram, one column per mask.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true)]
        mask: Vec<PathBuf>,
        #[arg(long, required = true)]
        hist: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Implant synthesized lesions into healthy slices.
    BuildDataset {
        #[arg(long)]
        healthy: PathBuf,
        /// Lesion sample directory supplying masks.
        #[arg(long)]
        shapes: PathBuf,
        /// Lesion sample directory supplying histograms.
        #[arg(long)]
        hists: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        feather_sigma: f64,
    },
    /// Segmentation benchmark over real and synthetic training sets.
    EvalSeg {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth_mask: PathBuf,
        #[arg(long)]
        synth_density: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_parser = args::parse_seeds, default_value = "0,1,2")]
        seeds: args::Seeds,
        #[arg(long, default_value_t = 30)]
        epochs: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        base_channels: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Writes the JSON report here as well as printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-run training logs.
        #[arg(long)]
        logs: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        shapes: Option<PathBuf>,
        #[arg(long)]
        slices: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure split by exit code.
enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } | Error::Io(_) => Failure::Internal(e.to_string()),
            _ => Failure::User(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenPhantoms { out, n, seed, healthy, config, size } => gen_phantoms(&out, n, seed, healthy, config, size),
        Command::PrepareData { input, output, window, patch_size, .. } => prepare_data(&input, &output, window, patch_size),
        Command::ImportNifti { ct, labels, out, window, min_liver_pixels, .. } => {
            import_nifti(&ct, &labels, &out, window, min_liver_pixels)
        }
        Command::Train { dataset, mode, epochs, lr, seed, out, batch_size, base_channels, max_steps, checkpoint_every, resume } => {
            let config = TrainConfig {
                epochs,
                learning_rate: lr,
                batch_size,
                seed,
                checkpoint_every,
                max_steps,
                ..TrainConfig::default()
            };
            train_cmd(&dataset, mode, &config, base_channels, &out, resume)
        }
        Command::Synthesize { checkpoint, mask, hist, out, .. } => {
            let synth = Synthesizer::load(&checkpoint)?;
            let patch = synth.synthesize_normalized(&args::load_mask(&mask)?, &args::parse_histogram(&hist)?)?;
            write_image(&out, &patch)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Grid { checkpoint, mask, hist, out, .. } => {
            let synth = Synthesizer::load(&checkpoint)?;
            let masks = mask.iter().map(|m| args::load_mask(m)).collect::<lesionsyn::Result<Vec<_>>>()?;
            let hists = hist.iter().map(|h| args::parse_histogram(h)).collect::<lesionsyn::Result<Vec<_>>>()?;
            let grid = render_grid(&synth, &masks, &hists)?;
            write_image(&out, &grid)?;
            println!("wrote {} ({} x {} tiles)", out.display(), hists.len(), masks.len());
            Ok(())
        }
        Command::BuildDataset { healthy, shapes, hists, checkpoint, n, mode, seed, out, feather_sigma } => {
            build_dataset(&healthy, &shapes, hists.as_deref(), &checkpoint, n, mode, seed, &out, feather_sigma)
        }
        Command::EvalSeg { real, synth_mask, synth_density, test, seeds, epochs, lr, base_channels, batch_size, out, logs, .. } => {
            let config = SegConfig { base_channels, epochs, learning_rate: lr, batch_size, ..SegConfig::default() };
            let load = |p: &Path| read_dataset(p);
            let report = run_experiment(
                &load(&real)?,
                &load(&synth_mask)?,
                &load(&synth_density)?,
                &load(&test)?,
                &config,
                &seeds.0,
                logs.as_deref(),
            )?;
            print!("{}", report.to_table());
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report.to_json()).expect("json"))?;
            }
            Ok(())
        }
        Command::Serve { addr, checkpoints, shapes, slices, .. } => {
            let addr: SocketAddr = addr.parse().map_err(|_| Failure::User(format!("bad listen address {addr:?}")))?;
            let config = lesionsyn_service::ServiceConfig { checkpoints, shapes, slices };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime
                .block_on(lesionsyn_service::serve(addr, &config))
                .map_err(|e| Failure::User(format!("cannot serve on {addr}: {e}")))
        }
    }
}

fn write_image(path: &Path, grid: &Grid) -> lesionsyn::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    if path.extension().is_some_and(|e| e == "lsf") {
        write_lsf(path, grid)
    } else {
        write_png(path, grid)
    }
}

fn gen_phantoms(out: &Path, n: usize, seed: u64, healthy: bool, config: Option<PathBuf>, size: Option<usize>) -> CliResult {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?
        }
        None => PhantomConfig::default(),
    };
    if let Some(s) = size {
        let k = s as f64 / cfg.rows as f64;
        cfg.rows = s;
        cfg.cols = s;
        cfg.liver_semi_axis = (cfg.liver_semi_axis.0 * k, cfg.liver_semi_axis.1 * k);
        cfg.lesion_radius = (cfg.lesion_radius.0 * k, cfg.lesion_radius.1 * k);
    }
    let records = (0..n as u64)
        .map(|i| {
            let s = lesionsyn::rng::derive_seed(seed, "phantom", i);
            let ph = if healthy { generate_healthy(s, &cfg)? } else { generate_phantom(s, &cfg)? };
            Ok(SampleRecord::from_phantom(&ph))
        })
        .collect::<lesionsyn::Result<Vec<_>>>()?;
    write_dataset(out, &records)?;
    let lesions: usize = records.iter().map(|r| r.lesions.len()).sum();
    println!("{}", serde_json::json!({ "slices": records.len(), "lesions": lesions, "digest": directory_digest(out)? }));
    Ok(())
}

fn prepare_data(input: &Path, output: &Path, window: Option<HuWindow>, patch_size: usize) -> CliResult {
    let records = read_dataset(input)?;
    let mut samples = Vec::new();
    for r in &records {
        let r = match window {
            Some(w) => SampleRecord { window: w, ..r.clone() },
            None => r.clone(),
        };
        samples.extend(r.lesion_samples(patch_size)?);
    }
    if samples.is_empty() {
        return Err(Failure::User(format!("no lesions found in {}", input.display())));
    }
    write_lesion_samples(output, &samples)?;
    let rescaled = samples.iter().filter(|s| s.rescaled).count();
    println!(
        "{}",
        serde_json::json!({
            "slices": records.len(),
            "samples": samples.len(),
            "rescaled": rescaled,
            "patch_size": patch_size,
            "digest": directory_digest(output)?,
        })
    );
    Ok(())
}

#[cfg(feature = "nifti")]
fn import_nifti(ct: &Path, labels: &Path, out: &Path, window: HuWindow, min_liver_pixels: usize) -> CliResult {
    let options = lesionsyn::nifti_import::ImportOptions { window, min_liver_pixels, ..Default::default() };
    let records = lesionsyn::nifti_import::import_volume(ct, labels, &options)?;
    write_dataset(out, &records)?;
    let lesions: usize = records.iter().map(|r| r.lesions.len()).sum();
    println!("{}", serde_json::json!({ "slices": records.len(), "lesions": lesions }));
    Ok(())
}

#[cfg(not(feature = "nifti"))]
fn import_nifti(_: &Path, _: &Path, _: &Path, _: HuWindow, _: usize) -> CliResult {
    Err(Failure::User("this build has no NIfTI support; rebuild with --features nifti".into()))
}

fn train_cmd(dataset: &Path, mode: ModeArg, config: &TrainConfig, base: usize, out: &Path, resume_run: bool) -> CliResult {
    let stored = lesionsyn::dataset::read_lesion_samples(dataset)?;
    if stored.is_empty() {
        return Err(Failure::User(format!("no lesion samples in {}", dataset.display())));
    }
    let refs: Vec<_> = stored.iter().map(|s| &s.sample).collect();
    let batch = TrainingBatch::from_samples(&refs, HIST_BINS)?;
    let patch = refs[0].patch.rows();
    let gen = GeneratorConfig { conditioning: mode.synthesis().conditioning(), ..GeneratorConfig::for_patch(patch).with_base_channels(base) };
    let disc = DiscriminatorConfig::with_base(patch, base);
    println!(
        "training {:?}: {} samples, patch {patch}, epochs {}, lr {}, beta1 {}, batch {}, seed {}",
        mode.synthesis(),
        batch.len(),
        config.epochs,
        config.learning_rate,
        config.adam_beta1,
        config.batch_size,
        config.seed
    );
    let outcome = if resume_run {
        let (state, _) = load_checkpoint(out)?;
        if state.generator.config() != &gen {
            return Err(Failure::User("checkpoint in --out does not match the requested model".into()));
        }
        resume(state, &batch, config, Some(out))?
    } else {
        train(&batch, &gen, &disc, config, Some(out))?
    };
    if let Some(last) = outcome.metrics.last() {
        println!("step {} d {:.4} gan {:.4} l1 {:.4}", last.step, last.d_loss, last.g_gan, last.g_l1);
    }
    println!(
        "{}",
        serde_json::json!({ "checkpoint": out.display().to_string(), "step": outcome.state.step, "digest": checkpoint_digest(out)? })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_dataset(
    healthy: &Path,
    shapes: &Path,
    hists: Option<&Path>,
    checkpoint: &Path,
    n: usize,
    mode: ModeArg,
    seed: u64,
    out: &Path,
    feather_sigma: f64,
) -> CliResult {
    let healthy = read_dataset(healthy)?;
    let shapes = args::load_shape_pool(shapes)?;
    let hists = match hists {
        Some(dir) => args::load_histogram_pool(dir)?,
        None => Vec::new(),
    };
    let synth = Synthesizer::load(checkpoint)?;
    let options = BuildOptions {
        implant: ImplantSpec { feather_sigma, ..ImplantSpec::default() },
        ..BuildOptions::new(n, mode.synthesis(), seed)
    };
    let dataset = build_synthetic_dataset(&healthy, &shapes, &hists, &synth, &options)?;
    write_synthetic_dataset(out, &dataset)?;
    println!(
        "{}",
        serde_json::json!({
            "samples": dataset.records.len(),
            "placement_failures": dataset.manifest.placement_failures,
            "transform_failures": dataset.manifest.transform_failures,
            "digest": directory_digest(out)?,
        })
    );
    Ok(())
}
