//! `bcpt`: generate synthetic folds, pre-train embedders and compare them.
//!
//! Every command writes its outputs plus a `<command>.manifest.json` into
//! `--out`. Exit codes: 0 success, 2 usage or configuration error (including
//! missing inputs), 3 training divergence, 4 I/O failure.

mod config;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bcpt_core::eval::{compare_report, NamedCheckpoint, Report};
use bcpt_core::synth::{decode_fold, encode_fold, make_fold, Fold};
use bcpt_core::trainer::{pretrain, Checkpoint, EpochLog, TrainConfig};
use clap::{Args, Parser, Subcommand};

use config::{RunConfig, TrainFlags};
use error::CliError;
use manifest::ManifestBuilder;

#[derive(Parser)]
#[command(name = "bcpt", version, about = "Background clustering pre-training on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// JSON run config; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed of the command
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fold of training and evaluation scenes
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_base: Option<usize>,
        #[arg(long)]
        n_novel: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_eval: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Pre-train an embedder on a fold
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate one checkpoint on the held-out novel classes
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "checkpoint")]
        label: String,
        /// Foreground threshold on the normalised similarity map
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Compare checkpoints side by side, or train and compare a sweep over K
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: PathBuf,
        #[arg(long, value_delimiter = ',', required_unless_present = "sweep_k", conflicts_with = "sweep_k")]
        checkpoints: Vec<PathBuf>,
        /// Column labels, defaulting to the checkpoint paths
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        /// Train one checkpoint per cluster count and compare them
        #[arg(long, value_delimiter = ',')]
        sweep_k: Vec<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        train: TrainFlags,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData {
            common,
            n_base,
            n_novel,
            noise_sigma,
            n_train,
            n_eval,
            height,
            width,
        } => {
            let mut m = ManifestBuilder::new("gen-data");
            let mut cfg = RunConfig::load(&mut m, common.config.as_deref())?;
            let scene = &mut cfg.scene;
            for (flag, field) in [(n_base, &mut scene.n_base), (n_novel, &mut scene.n_novel), (height, &mut scene.height), (width, &mut scene.width)] {
                if let Some(v) = flag {
                    *field = v;
                }
            }
            if let Some(v) = noise_sigma {
                scene.noise_sigma = v;
            }
            if let Some(v) = n_train {
                cfg.n_train = v;
            }
            if let Some(v) = n_eval {
                cfg.n_eval = v;
            }
            if let Some(s) = common.seed {
                cfg.fold_seed = s;
            }
            gen_data(m, &cfg, &common.out)
        }
        Command::Pretrain { common, fold, train } => {
            let mut m = ManifestBuilder::new("pretrain");
            let mut cfg = RunConfig::load(&mut m, common.config.as_deref())?;
            train.apply(&mut cfg.train);
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            cmd_pretrain(m, cfg, &fold, &common.out)
        }
        Command::Eval {
            common,
            fold,
            checkpoint,
            label,
            tau,
        } => {
            let mut m = ManifestBuilder::new("eval");
            let mut cfg = RunConfig::load(&mut m, common.config.as_deref())?;
            if let Some(t) = tau {
                cfg.eval.tau = t;
            }
            if let Some(s) = common.seed {
                cfg.shift_eval_seeds(s);
            }
            let seed = cfg.eval.eval_seeds.first().copied().unwrap_or(0);
            compare(m, cfg, seed, &fold, &[checkpoint], &[label], &common.out)
        }
        Command::Compare {
            common,
            fold,
            checkpoints,
            labels,
            sweep_k,
            tau,
            train,
        } => {
            let mut m = ManifestBuilder::new("compare");
            let mut cfg = RunConfig::load(&mut m, common.config.as_deref())?;
            train.apply(&mut cfg.train);
            if let Some(t) = tau {
                cfg.eval.tau = t;
            }
            if let Some(s) = common.seed {
                cfg.train.seed = s;
                cfg.shift_eval_seeds(s);
            }
            if sweep_k.is_empty() {
                let seed = cfg.eval.eval_seeds.first().copied().unwrap_or(0);
                compare(m, cfg, seed, &fold, &checkpoints, &labels, &common.out)
            } else {
                sweep(m, cfg, &fold, &sweep_k, &common.out)
            }
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Reads a fold and makes the config echo describe it.
fn load_fold(m: &mut ManifestBuilder, path: &Path, cfg: &mut RunConfig) -> Result<Fold, CliError> {
    let bytes = m.read_input(path)?;
    let fold = decode_fold(&bytes)?;
    cfg.scene = fold.config.clone();
    cfg.fold_seed = fold.seed;
    cfg.n_train = fold.train_scenes.len();
    cfg.n_eval = fold.eval_scenes.len();
    Ok(fold)
}

fn log_lines(log: &[EpochLog]) -> String {
    log.iter()
        .map(|l| serde_json::to_string(l).expect("log serialises") + "\n")
        .collect()
}

fn gen_data(mut m: ManifestBuilder, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.scene.validate()?;
    let fold = make_fold(&cfg.scene, cfg.n_train, cfg.n_eval, cfg.fold_seed)?;
    ensure_dir(out)?;
    let path = out.join("fold.bin");
    m.write_output(&path, &encode_fold(&fold)?)?;
    let manifest = m.finish(out, cfg, cfg.fold_seed)?;
    println!(
        "fold: {} train / {} eval scenes, base {:?}, novel {:?}",
        fold.train_scenes.len(),
        fold.eval_scenes.len(),
        fold.base_class_ids,
        fold.novel_class_ids
    );
    println!("wrote {} and {}", path.display(), manifest.display());
    Ok(())
}

fn train_one(fold: &Fold, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<EpochLog>), CliError> {
    cfg.validate(fold.base_class_ids.len())?;
    let out = pretrain(fold, cfg)?;
    Ok((out.checkpoint, out.log))
}

fn cmd_pretrain(mut m: ManifestBuilder, mut cfg: RunConfig, fold_path: &Path, out: &Path) -> Result<(), CliError> {
    let fold = load_fold(&mut m, fold_path, &mut cfg)?;
    let (ckpt, log) = train_one(&fold, &cfg.train)?;
    ensure_dir(out)?;
    let ckpt_path = out.join("checkpoint.bin");
    m.write_output(&ckpt_path, &ckpt.encode()?)?;
    m.write_output(&out.join("train_log.jsonl"), log_lines(&log).as_bytes())?;
    let manifest = m.finish(out, &cfg, cfg.train.seed)?;
    if let Some(last) = log.last() {
        println!(
            "epoch {} iteration {}: loss {:.6} (base {:.6}, bm {:.6}), {} clusters used",
            last.epoch, last.iteration, last.mean_total, last.mean_base, last.mean_bm, last.clusters_used
        );
    }
    println!("checkpoint {} digest {}", ckpt_path.display(), ckpt.digest()?);
    println!("manifest {}", manifest.display());
    Ok(())
}

fn write_report(m: &mut ManifestBuilder, report: &Report, out: &Path) -> Result<(), CliError> {
    m.write_output(&out.join("report.json"), report.to_json()?.as_bytes())?;
    m.write_output(&out.join("report.csv"), report.to_csv().as_bytes())?;
    println!("{:<24} {:>8} {:>8} {:>8} {:>8}", "column", "mIoU", "FB-IoU", "NMI", "purity");
    for c in &report.columns {
        println!(
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            c.label, c.mean.mean_iou, c.mean.fb_iou, c.mean.nmi, c.mean.purity
        );
    }
    Ok(())
}

fn compare(
    mut m: ManifestBuilder,
    mut cfg: RunConfig,
    seed: u64,
    fold_path: &Path,
    paths: &[PathBuf],
    labels: &[String],
    out: &Path,
) -> Result<(), CliError> {
    if !labels.is_empty() && labels.len() != paths.len() {
        return Err(CliError::Usage(format!("{} labels for {} checkpoints", labels.len(), paths.len())));
    }
    cfg.eval.validate()?;
    let fold = load_fold(&mut m, fold_path, &mut cfg)?;
    let mut named = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let bytes = m.read_input(p)?;
        named.push(NamedCheckpoint {
            label: labels.get(i).cloned().unwrap_or_else(|| p.display().to_string()),
            checkpoint: Checkpoint::decode(&bytes)?,
        });
    }
    let report = compare_report(&named, &fold, &cfg.eval)?;
    ensure_dir(out)?;
    write_report(&mut m, &report, out)?;
    println!("manifest {}", m.finish(out, &cfg, seed)?.display());
    Ok(())
}

fn sweep(mut m: ManifestBuilder, mut cfg: RunConfig, fold_path: &Path, ks: &[usize], out: &Path) -> Result<(), CliError> {
    cfg.eval.validate()?;
    let fold = load_fold(&mut m, fold_path, &mut cfg)?;
    // reject a bad K before spending time on the others
    let configs: Vec<TrainConfig> = ks
        .iter()
        .map(|&k| {
            let c = TrainConfig { k, ..cfg.train.clone() };
            c.validate(fold.base_class_ids.len()).map(|_| c)
        })
        .collect::<Result<_, _>>()?;
    ensure_dir(out)?;
    let mut named = Vec::with_capacity(ks.len());
    for c in configs {
        let t0 = Instant::now();
        let (ckpt, log) = train_one(&fold, &c)?;
        m.stage(format!("pretrain k={}", c.k), t0.elapsed().as_secs_f64());
        m.write_output(&out.join(format!("checkpoint_k{}.bin", c.k)), &ckpt.encode()?)?;
        m.write_output(&out.join(format!("train_log_k{}.jsonl", c.k)), log_lines(&log).as_bytes())?;
        named.push(NamedCheckpoint {
            label: format!("k={}", c.k),
            checkpoint: ckpt,
        });
    }
    let report = compare_report(&named, &fold, &cfg.eval)?;
    write_report(&mut m, &report, out)?;
    println!("manifest {}", m.finish(out, &cfg, cfg.train.seed)?.display());
    Ok(())
}
