use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ssan::autodiff::fault;
use ssan::config::RunConfig;
use ssan::data::{self, Sample};
use ssan::eval::{self, MetricReport, DEFAULT_FPR_TARGETS};
use ssan::gradcheck::{self, TOLERANCE};
use ssan::model::{self, HeadVariant};
use ssan::training::{fit, FitOutput, TrainError, TrainState};

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_GRADCHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "ssan", version, about = "Shuffled style assembly networks for face anti-spoofing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset directory.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// Config whose [data] and [model] sections describe the dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        /// Overrides data.synth_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoints, loss and metric logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides optim.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a saved training state (e.g. OUT/epoch_002).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save the full training state after every epoch.
        #[arg(long)]
        checkpoint_every_epoch: bool,
    },
    /// Score a manifest with a checkpoint and report metrics.
    Eval {
        /// Checkpoint directory, or a training state directory containing one.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FPR_TARGETS)]
        fpr: Vec<f64>,
        /// Directory for scores.tsv and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Compute metrics from a score file (`score live dataset` per line).
    Report {
        scores: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FPR_TARGETS)]
        fpr: Vec<f64>,
        /// Write the CSV report here instead of after the table on stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
    },
}

/// Error carrying its process exit code.
struct Failure {
    code: u8,
    msg: String,
}

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    fail(EXIT_CONFIG, e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData { out, config, overrides, seed } => synth_data(&out, config.as_deref(), &overrides, seed),
        Command::Train { config, out, seed, overrides, resume, checkpoint_every_epoch } => {
            train(&config, &out, seed, &overrides, resume.as_deref(), checkpoint_every_epoch)
        }
        Command::Eval { checkpoint, manifest, fpr, out, batch_size } => evaluate(&checkpoint, &manifest, &fpr, out.as_deref(), batch_size),
        Command::Report { scores, fpr, csv } => report(&scores, &fpr, csv.as_deref()),
        Command::Gradcheck { seed, seeds, corrupt_backward } => run_gradcheck(seed, seeds, corrupt_backward),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p).map_err(config_err)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o).map_err(config_err)?;
    }
    Ok(cfg)
}

fn dataset(cfg: &RunConfig) -> Result<Vec<Sample>, Failure> {
    let with_depth = cfg.model.variant == HeadVariant::DepthHead;
    let shape = [cfg.model.in_channels, cfg.model.input_size, cfg.model.input_size];
    let samples = match &cfg.data.manifest {
        Some(m) => data::load_manifest(m, Some(shape)).map_err(config_err)?,
        None => {
            let spec = cfg.data.synth_spec(with_depth);
            if [spec.channels, spec.side, spec.side] != shape {
                return Err(fail(EXIT_CONFIG, format!("synthetic images are {:?} but the model expects {shape:?}", [spec.channels, spec.side, spec.side])));
            }
            data::synth_dataset(&spec, cfg.data.n_per_class).map_err(config_err)?
        }
    };
    if samples.is_empty() {
        return Err(fail(EXIT_CONFIG, "no samples"));
    }
    if with_depth && samples.iter().any(|s| s.depth_target.is_none()) {
        return Err(fail(EXIT_CONFIG, "depth_head needs a depth target for every sample"));
    }
    Ok(samples)
}

fn synth_data(out: &Path, config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config, overrides)?;
    if let Some(s) = seed {
        cfg.data.synth_seed = s;
    }
    cfg.data.manifest = None;
    let samples = dataset(&cfg)?;
    let manifest = data::write_dataset(out, &samples).map_err(config_err)?;
    println!("wrote {} samples to {}", samples.len(), manifest.display());
    Ok(())
}

fn train(config: &Path, out: &Path, seed: Option<u64>, overrides: &[String], resume: Option<&Path>, every_epoch: bool) -> Result<(), Failure> {
    let mut cfg = load_config(Some(config), overrides)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let samples = dataset(&cfg)?;
    let (train_set, test_set) = data::make_splits(&samples, cfg.data.protocol).map_err(config_err)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(fail(EXIT_CONFIG, format!("protocol {} leaves an empty split", cfg.data.protocol)));
    }
    fs::create_dir_all(out).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", out.display())))?;
    fs::write(out.join("config.ini"), cfg.to_text()).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", out.display())))?;
    let state = match resume {
        Some(dir) => TrainState::<f64>::load(&cfg.model, dir).map_err(config_err)?,
        None => TrainState::new(&cfg.model, cfg.train.seed).map_err(config_err)?,
    };
    log::info!("training on {} samples, testing on {} ({})", train_set.len(), test_set.len(), cfg.data.protocol);
    let output = FitOutput { dir: out, checkpoint_every_epoch: every_epoch };
    match fit(state, &cfg.model, &train_set, &test_set, &cfg.train, Some(output)) {
        Ok((_, metrics)) => {
            if let Some(m) = metrics.last() {
                println!("final epoch {}: hter {:.4} auc {:.4} domain accuracy {:.4}", m.epoch, m.hter, m.auc, m.domain_accuracy);
            }
            Ok(())
        }
        Err(e @ TrainError::Divergence { .. }) => {
            let b = e.divergence().copied().unwrap_or_default();
            Err(fail(
                EXIT_DIVERGED,
                format!("{e}\nlast losses: l_cls {} l_adv {} l_contra {} l_overall {}", b.l_cls, b.l_adv, b.l_contra, b.l_overall),
            ))
        }
        Err(e) => Err(config_err(e)),
    }
}

fn evaluate(checkpoint: &Path, manifest: &Path, fpr: &[f64], out: Option<&Path>, batch_size: usize) -> Result<(), Failure> {
    let dir = if checkpoint.join("params").is_dir() { checkpoint.join("params") } else { checkpoint.to_path_buf() };
    let cfg = model::checkpoint_config(&dir).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", dir.display())))?;
    let params = model::load_checkpoint::<f64>(&dir, &cfg).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", dir.display())))?;
    let samples = data::load_manifest(manifest, Some([cfg.in_channels, cfg.input_size, cfg.input_size])).map_err(config_err)?;
    if samples.is_empty() {
        return Err(fail(EXIT_CONFIG, format!("{}: no samples", manifest.display())));
    }
    let scored = eval::score_samples(&params, &cfg, &samples, batch_size.max(1)).map_err(config_err)?;
    let report = eval::single_side_report(&scored, fpr).map_err(config_err)?;
    print!("{}", report.to_table());
    if let Some(dir) = out {
        let io = |e: std::io::Error| fail(EXIT_CONFIG, format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("scores.tsv"), eval::format_scores(&scored)).map_err(io)?;
        fs::write(dir.join("report.csv"), report.to_csv()).map_err(io)?;
    } else {
        print!("\n{}", report.to_csv());
    }
    Ok(())
}

fn report(scores: &Path, fpr: &[f64], csv: Option<&Path>) -> Result<(), Failure> {
    let scored = eval::read_scores(scores).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", scores.display())))?;
    let report: MetricReport = eval::single_side_report(&scored, fpr).map_err(config_err)?;
    print!("{}", report.to_table());
    match csv {
        Some(p) => fs::write(p, report.to_csv()).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", p.display())))?,
        None => print!("\n{}", report.to_csv()),
    }
    Ok(())
}

fn run_gradcheck(seed: u64, seeds: u64, corrupt: Option<String>) -> Result<(), Failure> {
    if let Some(op) = corrupt {
        fault::corrupt_backward(Some(Box::leak(op.into_boxed_str())));
    }
    let mut failed: Vec<&'static str> = Vec::new();
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for s in seed..seed + seeds.max(1) {
        let reports = gradcheck::check_all(s).map_err(|e| fail(EXIT_GRADCHECK, format!("seed {s}: {e}")))?;
        for r in reports {
            match worst.iter_mut().find(|(op, _)| *op == r.op) {
                Some((_, w)) => *w = w.max(r.worst),
                None => worst.push((r.op, r.worst)),
            }
        }
    }
    println!("{:<20} {:>12}", "op", "worst_rel_err");
    for (op, w) in &worst {
        let flag = if *w < TOLERANCE { "ok" } else { "FAIL" };
        println!("{op:<20} {w:>12.3e} {flag}");
        if *w >= TOLERANCE {
            failed.push(op);
        }
    }
    println!("{} operations checked over {} seed(s)", worst.len(), seeds.max(1));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(fail(EXIT_GRADCHECK, format!("gradient check failed for: {}", failed.join(", "))))
    }
}
