//! Command implementations behind the `chebyodo` binary.
//!
//! Sequence files end in `.imu.csv`. Every command logs its resolved
//! configuration before doing any work, and commands that write a directory
//! also save it there as `run.cfg`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{
    make_windows, read_sequence, remove_gravity, suite_specs, synthesize, to_world_frame,
    write_sequence, ImuSequence, WindowBatch,
};
use crate::eksa::{complexity_bench, write_bench_csv, BenchRow};
use crate::error::{Error, Result};
use crate::eval::{evaluate_sequence, zero_velocity_report, TrajectoryReport};
use crate::gradcheck::{run_gradcheck, GradcheckReport};
use crate::nn::Module;
use crate::training::{load_checkpoint, save_checkpoint, train, worker_threads, TrainOutcome};

/// File suffix of sequence files.
pub const SEQUENCE_SUFFIX: &str = ".imu.csv";

#[derive(Debug, Parser)]
#[command(name = "chebyodo", version, about = "Inertial odometry with Chebyshev KAN convolutions")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the model, the synthetic suite, the benchmark and the gradient check.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, or file for `bench` and `gradcheck`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Subtract gravity during `preprocess`.
    #[arg(long, global = true)]
    pub remove_gravity: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic suite.
    Synth,
    /// Rotate sequences into the world frame, optionally removing gravity.
    Preprocess { input: PathBuf },
    /// Train on every sequence in a directory.
    Train { data: PathBuf },
    /// Score a checkpoint on every sequence in a directory.
    Eval { checkpoint: PathBuf, data: PathBuf },
    /// Time softmax attention against the linearized kernel.
    Bench,
    /// Compare every backward rule with finite differences.
    Gradcheck,
}

impl Cli {
    /// Config file, then flags.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if self.remove_gravity {
            cfg.pipeline.remove_gravity = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run(&self) -> Result<()> {
        let cfg = self.resolve_config()?;
        log::info!("resolved configuration:\n{}", cfg.render());
        let out = |default: &str| self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        match &self.command {
            Command::Synth => {
                let files = cmd_synth(&cfg, &out("data"))?;
                println!("wrote {} sequences to {}", files.len(), out("data").display());
            }
            Command::Preprocess { input } => {
                let files = cmd_preprocess(&cfg, input, &out("processed"))?;
                println!("wrote {} sequences to {}", files.len(), out("processed").display());
            }
            Command::Train { data } => {
                let outcome = cmd_train(&cfg, data, &out("run"))?;
                let best = &outcome.history[outcome.best_epoch - 1];
                println!(
                    "best epoch {} (train {:.5}, val {:.5}); checkpoint in {}",
                    outcome.best_epoch,
                    best.train_mse,
                    best.val_mse,
                    out("run").display()
                );
            }
            Command::Eval { checkpoint, data } => {
                let reports = cmd_eval(&cfg, checkpoint, data, &out("eval"))?;
                for (name, r) in &reports {
                    println!("{name}: ate {:.3} m, rte {:.3} m, pde {:.4}", r.ate, r.rte.value, r.pde);
                }
            }
            Command::Bench => {
                let rows = cmd_bench(&cfg, &out("bench.csv"))?;
                write_bench_csv(&rows, &mut std::io::stdout())?;
            }
            Command::Gradcheck => {
                let report = cmd_gradcheck(&cfg, self.out.as_deref())?;
                report.write_table(&mut std::io::stdout())?;
                gradcheck_verdict(&report)?;
            }
        }
        Ok(())
    }
}

fn write_run_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.cfg"), cfg.render())?;
    Ok(())
}

/// Sequence files in `dir`, sorted by name.
pub fn list_sequences(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.to_str().is_some_and(|s| s.ends_with(SEQUENCE_SUFFIX)));
    files.sort();
    if files.is_empty() {
        return Err(Error::contract(format!(
            "no *{SEQUENCE_SUFFIX} files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("sequence");
    name.strip_suffix(SEQUENCE_SUFFIX).unwrap_or(name).to_string()
}

/// Writes one file per suite trajectory plus `manifest.csv`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    write_run_config(cfg, out)?;
    let specs = suite_specs(&cfg.suite);
    let mut manifest = csv::Writer::from_path(out.join("manifest.csv"))
        .map_err(|e| Error::Io(e.into()))?;
    let header = ["file", "shape", "speed", "duration_s", "sample_rate_hz", "heading", "seed"];
    manifest.write_record(header).map_err(|e| Error::Io(e.into()))?;
    let mut files = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let name = format!("{i:02}_{}{SEQUENCE_SUFFIX}", spec.shape.name());
        let path = out.join(&name);
        write_sequence(&synthesize(spec)?, &path)?;
        manifest
            .write_record([
                name,
                spec.shape.name().to_string(),
                format!("{:?}", spec.speed),
                format!("{:?}", spec.duration),
                format!("{:?}", spec.sample_rate_hz),
                format!("{:?}", spec.heading),
                spec.seed.to_string(),
            ])
            .map_err(|e| Error::Io(e.into()))?;
        files.push(path);
    }
    manifest.flush()?;
    Ok(files)
}

/// World-frame rotation, then gravity removal when configured.
pub fn preprocess_sequence(cfg: &RunConfig, seq: &ImuSequence) -> Result<ImuSequence> {
    if cfg.pipeline.remove_gravity && seq.gravity_removed {
        return Err(Error::contract("gravity has already been removed from this sequence"));
    }
    let world = to_world_frame(seq);
    if cfg.pipeline.remove_gravity {
        remove_gravity(&world, cfg.pipeline.gravity)
    } else {
        Ok(world)
    }
}

pub fn cmd_preprocess(cfg: &RunConfig, input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let inputs = list_sequences(input)?;
    write_run_config(cfg, out)?;
    let mut files = Vec::with_capacity(inputs.len());
    for path in inputs {
        let seq = read_sequence(&path)?;
        let processed = preprocess_sequence(cfg, &seq).map_err(|e| match e {
            Error::Contract(msg) => Error::Contract(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let dest = out.join(path.file_name().expect("listed files have names"));
        write_sequence(&processed, &dest)?;
        files.push(dest);
    }
    Ok(files)
}

/// Splits the sorted sequence list into training and validation windows.
pub fn load_training_windows(cfg: &RunConfig, data: &Path) -> Result<(WindowBatch, WindowBatch)> {
    let files = list_sequences(data)?;
    let held = cfg.pipeline.val_sequences;
    if held == 0 || held >= files.len() {
        return Err(Error::contract(format!(
            "{} sequences cannot be split with {held} held out for validation",
            files.len()
        )));
    }
    let p = &cfg.pipeline;
    let w = cfg.model.window_size;
    let windows = |paths: &[PathBuf], stride: usize| -> Result<WindowBatch> {
        let batches = paths
            .iter()
            .map(|f| make_windows(&read_sequence(f)?, w, stride, p.policy()))
            .collect::<Result<Vec<_>>>()?;
        WindowBatch::concat(&batches)
    };
    let (tr, va) = files.split_at(files.len() - held);
    Ok((windows(tr, p.train_stride)?, windows(va, p.val_stride)?))
}

/// Writes `model.ckpt`, `train_log.csv` and `run.cfg` into `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutcome> {
    let (tr, va) = load_training_windows(cfg, data)?;
    write_run_config(cfg, out)?;
    let outcome = train(&cfg.model, &tr, &va)?;
    log::info!(
        "attention {}, {} parameters",
        if cfg.model.eksa_enabled { "enabled" } else { "disabled" },
        outcome.model.param_count()
    );
    save_checkpoint(&outcome.checkpoint, &out.join("model.ckpt"))?;
    let mut log = std::io::BufWriter::new(fs::File::create(out.join("train_log.csv"))?);
    outcome.write_log(&mut log)?;
    log.flush()?;
    Ok(outcome)
}

/// One report bundle per sequence plus `summary.csv` with the zero-velocity
/// baseline alongside.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
) -> Result<Vec<(String, TrajectoryReport)>> {
    let model = load_checkpoint(checkpoint)?.to_model()?;
    let files = list_sequences(data)?;
    write_run_config(cfg, out)?;
    let ecfg = cfg.pipeline.eval_config(model.config.window_size);
    let threads = worker_threads();
    let mut summary = fs::File::create(out.join("summary.csv"))?;
    writeln!(summary, "sequence,ate,rte,pde,traj_len_m,zero_velocity_ate")?;
    let mut reports = Vec::with_capacity(files.len());
    for path in files {
        let name = stem(&path);
        let seq = read_sequence(&path)?;
        let report = evaluate_sequence(&model, &seq, &ecfg, threads)?;
        let zero = zero_velocity_report(&seq, &ecfg)?;
        report.write_bundle(&out.join(&name))?;
        writeln!(
            summary,
            "{name},{:?},{:?},{:?},{:?},{:?}",
            report.ate, report.rte.value, report.pde, report.traj_length, zero.ate
        )?;
        reports.push((name, report));
    }
    Ok(reports)
}

pub fn cmd_bench(cfg: &RunConfig, out_csv: &Path) -> Result<Vec<BenchRow>> {
    let rows = complexity_bench(&cfg.bench)?;
    if let Some(dir) = out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(out_csv)?;
    write_bench_csv(&rows, &mut f)?;
    Ok(rows)
}

/// Runs the check and, when `out` is given, writes the table there.
pub fn cmd_gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<GradcheckReport> {
    let report = run_gradcheck(&cfg.gradcheck)?;
    if let Some(path) = out {
        let mut f = fs::File::create(path)?;
        report.write_table(&mut f)?;
    }
    Ok(report)
}

/// Numerical error naming failing ops and families, if any.
pub fn gradcheck_verdict(report: &GradcheckReport) -> Result<()> {
    if report.passed() {
        return Ok(());
    }
    let ops = report.failing_ops();
    let families = report.failing_families();
    Err(Error::Numerical(format!(
        "gradient check failed; ops: [{}]; families: [{}]",
        ops.join(", "),
        families.join(", ")
    )))
}
