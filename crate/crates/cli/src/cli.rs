//! Batch front door for the two-stage pipeline. Every interaction is
//! file-in/file-out: configs and manifests are JSON, image exports are
//! 16-bit PGM, volumes are OVOL. Exit codes: 0 success, 1 usage error,
//! 2 data/format error, 3 internal invariant violation.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use rnvkit_core::error::{Error, Result};
use rnvkit_core::pipeline::{
    run_eval, run_infer, run_phantom_gen, run_track, run_train_rnv, run_train_vri, DatasetSpec,
    InferOptions, SurfaceMode, TrainRnvOptions,
};
use rnvkit_core::rnv::RnvNetConfig;
use rnvkit_core::vri::VriNetConfig;

#[derive(Parser)]
#[command(
    name = "rnvkit",
    version,
    about = "Detection, segmentation and tracking of retinal neovascularization in widefield OCT/OCTA volumes",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset utilities
    Phantom {
        #[command(subcommand)]
        cmd: PhantomCmd,
    },
    /// Train one pipeline stage on a dataset
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Run the full pipeline on one OCT/OCTA pair
    Infer(InferArgs),
    /// Score predictions against dataset truth
    Eval(EvalArgs),
    /// Quantify lesion progression across visits
    Track(TrackArgs),
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Generate a train/test phantom dataset with exact ground truth
    Gen {
        /// Dataset spec JSON: {n_train, n_test, seed, template}
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train the stage-1 interface segmentation net
    Vri(TrainVriArgs),
    /// Train the stage-2 lesion segmentation net
    Rnv(TrainRnvArgs),
}

#[derive(Args)]
struct TrainVriArgs {
    /// Dataset manifest JSON (case files are resolved next to it)
    #[arg(long)]
    manifest: PathBuf,
    /// Net/training config JSON; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the checkpoint and log
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainRnvArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Projection surface source: truth | predicted
    #[arg(long, default_value = "truth")]
    surface: String,
    /// Stage-1 checkpoint (required with --surface predicted)
    #[arg(long)]
    vri_ckpt: Option<PathBuf>,
    /// Subtraction coefficient for the inner-slab flow channel
    #[arg(long, default_value_t = 0.8)]
    k: f32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    /// Structural volume (OVOL, modality oct)
    #[arg(long)]
    oct: PathBuf,
    /// Flow volume (OVOL, modality octa)
    #[arg(long)]
    octa: PathBuf,
    /// Stage-1 checkpoint (required with --surface predicted)
    #[arg(long)]
    vri_ckpt: Option<PathBuf>,
    /// Stage-2 checkpoint
    #[arg(long)]
    rnv_ckpt: PathBuf,
    /// Projection surface source: truth | predicted
    #[arg(long, default_value = "predicted")]
    surface: String,
    /// Truth interface mask volume (required with --surface truth)
    #[arg(long)]
    truth_vri: Option<PathBuf>,
    /// Subtraction coefficient for the inner-slab flow channel
    #[arg(long, default_value_t = 0.8)]
    k: f32,
    /// Output directory for all artifacts
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Root holding one inference directory per case id
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory containing manifest.json and truth files
    #[arg(long)]
    truth: PathBuf,
    /// Output directory for per_case.csv and summary.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    /// Directory of per-visit subdirectories (visit.json + masks)
    #[arg(long)]
    case_dir: PathBuf,
    /// Output directory for progression.csv/json
    #[arg(long)]
    out: PathBuf,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = worker_cap() {
        eprintln!("rnvkit: {e}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("rnvkit: {e}");
            match e {
                Error::Config(_) => 1,
                Error::Internal(_) => 3,
                _ => 2,
            }
        }
    }
}

/// `RNVKIT_THREADS` caps the worker count; every command currently runs on
/// one worker, so any positive cap is honored. Default 1 for determinism.
fn worker_cap() -> Result<usize> {
    match std::env::var("RNVKIT_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "RNVKIT_THREADS must be a positive integer, got '{s}'"
            ))),
        },
    }
}

fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom {
            cmd: PhantomCmd::Gen { config, out },
        } => {
            let text = std::fs::read_to_string(&config)?;
            let spec: DatasetSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", config.display())))?;
            let manifest = run_phantom_gen(&spec, &out)?;
            println!(
                "wrote {} cases ({} train / {} test) to {}",
                manifest.cases.len(),
                manifest.n_train,
                manifest.n_test,
                out.display()
            );
            Ok(())
        }
        Command::Train { cmd } => match cmd {
            TrainCmd::Vri(a) => {
                let cfg: VriNetConfig = load_config(&a.config)?;
                let (ckpt, log) = run_train_vri(&a.manifest, &cfg, a.seed, &a.out)?;
                let last = log.last().expect("training produces at least one epoch");
                println!(
                    "trained {} epochs; val bce {:.6}, val dice {:.6}; checkpoint {}",
                    log.len(),
                    last.val_bce,
                    last.val_dice,
                    ckpt.display()
                );
                Ok(())
            }
            TrainCmd::Rnv(a) => {
                let cfg: RnvNetConfig = load_config(&a.config)?;
                let opts = TrainRnvOptions {
                    surface: a.surface.parse::<SurfaceMode>()?,
                    vri_ckpt: a.vri_ckpt,
                    k: a.k,
                };
                let (ckpt, log) = run_train_rnv(&a.manifest, &cfg, a.seed, &opts, &a.out)?;
                let last = log.last().expect("training produces at least one epoch");
                println!(
                    "trained {} epochs; val loss {:.6}; checkpoint {}",
                    log.len(),
                    last.val_loss,
                    ckpt.display()
                );
                Ok(())
            }
        },
        Command::Infer(a) => {
            let opts = InferOptions {
                surface: a.surface.parse::<SurfaceMode>()?,
                vri_ckpt: a.vri_ckpt,
                truth_vri: a.truth_vri,
                k: a.k,
            };
            let report = run_infer(&a.oct, &a.octa, &a.rnv_ckpt, &opts, &a.out)?;
            println!(
                "{}: {} (score {:.4}, {} lesion(s), {:.4} mm2)",
                report.case_id,
                if report.is_rnv { "RNV detected" } else { "no RNV" },
                report.score,
                report.lesions.len(),
                report.total_area_mm2
            );
            Ok(())
        }
        Command::Eval(a) => {
            let (rows, summary) = run_eval(&a.pred, &a.truth, &a.out)?;
            let auc = summary
                .case_auc
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "n/a".into());
            println!(
                "evaluated {} cases: auc {}, mean iou (pos) {:.4}, case f1 {:.4}",
                rows.len(),
                auc,
                summary.mean_iou_positive,
                summary.case_f1
            );
            Ok(())
        }
        Command::Track(a) => {
            let series = run_track(&a.case_dir, &a.out)?;
            let last = series.visits.last().expect("series has >= 2 visits");
            println!(
                "tracked {} visits over {} months; final membrane {:.4} mm2 (delta {:+.4})",
                series.visits.len(),
                last.visit_time_months - series.visits[0].visit_time_months,
                last.membrane_area_mm2,
                last.delta_area_mm2
            );
            Ok(())
        }
    }
}
