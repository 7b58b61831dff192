//! `pcn` — command-line front end for the parallel-clone denoising toolkit.
//!
//! Subcommands: `gen-data` (synthetic paired dataset), `train` (fit a model,
//! optionally resuming), `denoise` (apply a checkpoint), `eval` (quality
//! metrics CSV), and `ablate` (train and score a whole configuration grid).
//! Every failure prints one `error: ...` line to stderr and exits nonzero.

use clap::{Parser, Subcommand};
use pcn_core::ablate::{parse_grid, summary_csv, AblationRun, RunOutcome};
use pcn_core::data::{extract_patches, generate_pair, ImagePair, PatchSet, PhantomSpec};
use pcn_core::io::{
    read_eval_manifest, read_grid, read_manifest, write_grid, write_manifest, Checkpoint,
    ManifestEntry, TrainSpec,
};
use pcn_core::metrics::{psnr, score_image, MetricsReport};
use pcn_core::net::{denoise, denoise_all_clones};
use pcn_core::tensor::Grid4;
use pcn_core::train::{train, ConvergenceLog};
use pcn_core::{Error, Result};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "pcn",
    version,
    about = "Train and run parallel-clone convolutional denoisers on synthetic low-dose data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset (phantoms + simulated low dose).
    GenData {
        /// Output directory for tensors and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Number of image pairs.
        #[arg(long = "n-images")]
        n_images: usize,
        /// Square image side in pixels (minimum 64).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Standard deviation of the additive Gaussian noise.
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        /// Base seed; every image derives its own stream from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model described by a key=value config file.
    Train {
        /// Run configuration file (key=value lines).
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest (id<TAB>low<TAB>normal).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint instead of initialising fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Convergence log CSV (default: the checkpoint path with a .csv extension).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Stop after this many total epochs (for later resuming); the
        /// learning-rate schedule still spans the configured epoch count.
        #[arg(long = "stop-after")]
        stop_after: Option<usize>,
    },
    /// Apply a trained checkpoint to one image tensor.
    Denoise {
        /// Checkpoint to apply.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image tensor (1, 1, h, w) in [0, 1].
        #[arg(long = "in")]
        input: PathBuf,
        /// Output tensor path; with --all-clones, the stem gains _clone{t} suffixes.
        #[arg(long)]
        out: PathBuf,
        /// Write every clone's output, not just the final one.
        #[arg(long = "all-clones")]
        all_clones: bool,
    },
    /// Score predictions against references and write a metrics CSV.
    Eval {
        /// Predictions manifest (id<TAB>path, or a 3-column dataset manifest).
        #[arg(long)]
        pred: PathBuf,
        /// References manifest (same id set).
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Metrics CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Peak intensity used by PSNR and SSIM.
        #[arg(long, default_value_t = 1.0)]
        imax: f64,
    },
    /// Train and evaluate every configuration in a grid file.
    Ablate {
        /// Grid file: blank-line-separated key=value blocks with config_id.
        #[arg(long)]
        grid: PathBuf,
        /// Dataset manifest used for training and evaluation.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (checkpoints, logs, predictions, summary.csv).
        #[arg(long)]
        out: PathBuf,
        /// Run up to this many configurations concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData {
            out,
            n_images,
            size,
            sigma,
            seed,
        } => gen_data(&out, n_images, size, sigma, seed),
        Cmd::Train {
            config,
            data,
            out,
            resume,
            log,
            stop_after,
        } => cmd_train(&config, &data, &out, resume.as_deref(), log, stop_after),
        Cmd::Denoise {
            ckpt,
            input,
            out,
            all_clones,
        } => cmd_denoise(&ckpt, &input, &out, all_clones),
        Cmd::Eval {
            pred,
            reference,
            out,
            imax,
        } => cmd_eval(&pred, &reference, &out, imax),
        Cmd::Ablate {
            grid,
            data,
            out,
            jobs,
        } => cmd_ablate(&grid, &data, &out, jobs),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::File {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::File {
        path: path.display().to_string(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::File {
        path: path.display().to_string(),
        source: e,
    })
}

// ============================================================================
// gen-data
// ============================================================================

fn gen_data(out: &Path, n_images: usize, size: usize, sigma: f64, seed: u64) -> Result<()> {
    if n_images == 0 {
        return Err(Error::Config("--n-images must be at least 1".into()));
    }
    create_dir(out)?;
    let mut rows = Vec::new();
    for i in 0..n_images {
        let id = format!("img{i:03}");
        let spec = PhantomSpec {
            size: (size, size),
            // Vary the scene complexity deterministically across the set.
            n_ellipses: 4 + (i % 5),
            noise_sigma: sigma,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            ..PhantomSpec::default()
        };
        let pair = generate_pair(&spec, id.clone())?;
        let low_name = format!("{id}_low.pcnt");
        let nd_name = format!("{id}_nd.pcnt");
        write_grid(&out.join(&low_name), &pair.low)?;
        write_grid(&out.join(&nd_name), &pair.normal)?;
        rows.push((id, low_name, nd_name));
    }
    write_manifest(&out.join("manifest.tsv"), &rows)
}

// ============================================================================
// train
// ============================================================================

fn load_patches(entries: &[ManifestEntry], patch: usize, stride: usize) -> Result<PatchSet<f64>> {
    let mut sets = Vec::with_capacity(entries.len());
    for e in entries {
        let pair = ImagePair {
            id: e.id.clone(),
            low: read_grid::<f64>(&e.low)?,
            normal: read_grid::<f64>(&e.normal)?,
        };
        sets.push(extract_patches(&pair, patch, stride)?);
    }
    PatchSet::merge(&sets)
}

fn train_run(
    mut ckpt: Checkpoint,
    entries: &[ManifestEntry],
    stop_after: Option<usize>,
) -> Result<(Checkpoint, ConvergenceLog)> {
    let patches = load_patches(entries, ckpt.spec.patch, ckpt.spec.stride)?;
    let mut log = ConvergenceLog::default();
    let spec = ckpt.spec.clone();
    train(
        &spec.config,
        &mut ckpt.state,
        &patches.low,
        &patches.normal,
        &spec.train,
        stop_after,
        |stats| log.entries.push(stats.clone()),
    )?;
    Ok((ckpt, log))
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    log: Option<PathBuf>,
    stop_after: Option<usize>,
) -> Result<()> {
    let spec = TrainSpec::parse(&read_text(config)?)?;
    let ckpt = match resume {
        Some(prev) => {
            let ckpt = Checkpoint::load(prev)?;
            if ckpt.spec != spec {
                return Err(Error::Config(
                    "--resume checkpoint was trained under a different configuration; \
                     pass the original config file"
                        .into(),
                ));
            }
            ckpt
        }
        None => Checkpoint::fresh(spec)?,
    };
    let entries = read_manifest(data)?;
    let (ckpt, log_data) = train_run(ckpt, &entries, stop_after)?;
    ckpt.save(out)?;
    let log_path = log.unwrap_or_else(|| out.with_extension("csv"));
    write_text(&log_path, &log_data.to_csv())
}

// ============================================================================
// denoise
// ============================================================================

fn clone_suffixed(out: &Path, t: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut name = format!("{stem}_clone{t}");
    if let Some(ext) = out.extension() {
        name.push('.');
        name.push_str(&ext.to_string_lossy());
    }
    out.with_file_name(name)
}

fn cmd_denoise(ckpt_path: &Path, input: &Path, out: &Path, all_clones: bool) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let image: Grid4<f64> = read_grid(input)?;
    if all_clones {
        let outputs = denoise_all_clones(&image, &ckpt.spec.config, &ckpt.state.params)?;
        for (t, x) in outputs.iter().enumerate() {
            write_grid(&clone_suffixed(out, t + 1), x)?;
        }
        Ok(())
    } else {
        let x = denoise(&image, &ckpt.spec.config, &ckpt.state.params)?;
        write_grid(out, &x)
    }
}

// ============================================================================
// eval
// ============================================================================

fn cmd_eval(pred: &Path, reference: &Path, out: &Path, imax: f64) -> Result<()> {
    let preds = read_eval_manifest(pred)?;
    let refs = read_eval_manifest(reference)?;
    if preds.len() != refs.len() {
        return Err(Error::Config(format!(
            "prediction and reference manifests list {} vs {} images",
            preds.len(),
            refs.len()
        )));
    }
    let mut report = MetricsReport::default();
    for p in &preds {
        let r = refs.iter().find(|r| r.id == p.id).ok_or_else(|| {
            Error::Config(format!(
                "id '{}' appears in the predictions but not the references",
                p.id
            ))
        })?;
        let pg: Grid4<f64> = read_grid(&p.path)?;
        let rg: Grid4<f64> = read_grid(&r.path)?;
        report.rows.push(score_image(p.id.clone(), &pg, &rg, imax)?);
    }
    write_text(out, &report.to_csv())
}

// ============================================================================
// ablate
// ============================================================================

fn ablate_one(
    run: &AblationRun,
    entries: &[ManifestEntry],
    out: &Path,
    imax: f64,
) -> Result<RunOutcome> {
    let id = &run.config_id;
    let (ckpt, log) = train_run(Checkpoint::fresh(run.spec.clone())?, entries, None)?;
    ckpt.save(&out.join(format!("{id}.pcnc")))?;
    write_text(&out.join(format!("{id}_log.csv")), &log.to_csv())?;

    let n_clones = run.spec.config.n_clones;
    let mut outcome = RunOutcome {
        config_id: id.clone(),
        rmse: Vec::new(),
        psnr: Vec::new(),
        ssim: Vec::new(),
        psnr_per_clone: vec![Vec::new(); n_clones],
    };
    let mut pred_lines = String::new();
    for e in entries {
        let low: Grid4<f64> = read_grid(&e.low)?;
        let normal: Grid4<f64> = read_grid(&e.normal)?;
        let outputs = denoise_all_clones(&low, &run.spec.config, &ckpt.state.params)?;
        for (t, x) in outputs.iter().enumerate() {
            outcome.psnr_per_clone[t].push(psnr(x, &normal, imax)?);
        }
        let last = outputs.last().expect("at least one clone");
        let score = score_image(e.id.clone(), last, &normal, imax)?;
        outcome.rmse.push(score.rmse);
        outcome.psnr.push(score.psnr_db);
        outcome.ssim.push(score.ssim);
        let pred_name = format!("{id}_{}.pcnt", e.id);
        write_grid(&out.join(&pred_name), last)?;
        pred_lines.push_str(&format!("{}\t{pred_name}\n", e.id));
    }
    write_text(&out.join(format!("{id}_pred.tsv")), &pred_lines)?;
    Ok(outcome)
}

fn cmd_ablate(grid: &Path, data: &Path, out: &Path, jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let runs = parse_grid(&read_text(grid)?)?;
    let entries = read_manifest(data)?;
    create_dir(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {jobs}-thread pool: {e}")))?;
    let outcomes: Result<Vec<RunOutcome>> = pool.install(|| {
        runs.par_iter()
            .map(|run| ablate_one(run, &entries, out, 1.0))
            .collect()
    });
    write_text(&out.join("summary.csv"), &summary_csv(&outcomes?))
}
