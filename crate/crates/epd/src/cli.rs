//! The `epd` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use epd_core::config::TrainConfig;
use epd_core::pipeline::{eval_stream, EpdModel, StageLog};

use crate::bench::{ablation_records, bench_relative, evaluate_timed, metrics_csv, timing_csv, train_ablation, MetricRecord};
use crate::checkpoint;
use crate::dataset::{load_dir, load_splits, Split, WindowCache};
use crate::error::{exit, Error, Result};
use crate::export::{gaussian_csv, svg_plot, PlotInput};

#[derive(Debug, Parser)]
#[command(name = "epd", version, about = "Pedestrian trajectory prediction with an energy plan and a short denoising chain")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a dataset directory and cache its windows.
    Ingest {
        dir: PathBuf,
        /// Column order of the tracking files.
        #[arg(long, default_value = "frame,id,x,y")]
        format: String,
        /// Cache directory (default: <dir>/.epd-cache).
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        t_past: usize,
        #[arg(long, default_value_t = 12)]
        t_future: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Train every stage, writing a checkpoint after each one.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Best-of-K metrics of a checkpoint on one split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for metrics.csv and timing.csv; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the trained model against the full reverse chain from noise.
    Bench {
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model with both single-component variants and evaluate all three.
    Ablate {
        config: PathBuf,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw one test window as SVG and dump its distribution as CSV.
    Plot {
        checkpoint: PathBuf,
        #[arg(long)]
        window_id: usize,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => exit::OK,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, text).map_err(Error::io(path))
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    Ok(TrainConfig::parse(&text)?)
}

fn out_line(stdout: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(stdout, "{line}").map_err(Error::io("<stdout>"))
}

fn losses_csv(log: &StageLog) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in log.step_losses.iter().enumerate() {
        s.push_str(&format!("{i},{l:?}\n"));
    }
    s
}

fn emit_records(records: &[MetricRecord], out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(dir) => {
            write_file(&dir.join("metrics.csv"), &metrics_csv(records))?;
            write_file(&dir.join("timing.csv"), &timing_csv(records))?;
            out_line(stdout, &format!("wrote {}", dir.join("metrics.csv").display()))
        }
        None => {
            stdout.write_all(metrics_csv(records).as_bytes()).map_err(Error::io("<stdout>"))?;
            for r in records {
                log::info!("{} {}: {:.3}s, {} denoiser rows", r.dataset, r.variant, r.wall_time_s, r.invocations);
            }
            Ok(())
        }
    }
}

fn model_windows(model: &EpdModel, split: &str) -> Result<(String, Vec<epd_core::data::SceneWindow>)> {
    let split: Split = split.parse()?;
    let splits = load_splits(&model.config, None)?;
    let windows = splits.get(split).to_vec();
    if windows.is_empty() {
        return Err(Error::Core(epd_core::error::Error::Data(format!("split {split:?} has no windows"))));
    }
    Ok((splits.dataset, windows))
}

pub fn execute(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::Ingest {
            dir,
            format,
            cache,
            t_past,
            t_future,
            stride,
        } => {
            if t_past < 2 || t_future < 1 || stride < 1 {
                return Err(Error::Usage("need t_past >= 2, t_future >= 1 and stride >= 1".into()));
            }
            let ds = load_dir(&dir, &format)?;
            for w in &ds.warnings {
                log::warn!("{w}");
            }
            let cache = WindowCache::new(cache.unwrap_or_else(|| dir.join(".epd-cache")));
            let (scenes, hit) = cache.load_or_build(&ds, t_past, t_future, stride)?;
            out_line(stdout, &format!("dataset {} ({} scenes, cache {})", ds.hash, ds.scenes.len(), if hit { "hit" } else { "built" }))?;
            for s in &scenes {
                out_line(stdout, &format!("{}\t{}\t{} windows", s.group, s.scene, s.windows.len()))?;
            }
            Ok(())
        }
        Command::Train { config, out } => {
            let cfg = read_config(&config)?;
            let splits = load_splits(&cfg, None)?;
            log::info!("training on {} windows of {}", splits.train.len(), splits.dataset);
            let mut model = EpdModel::new(cfg)?;
            let mut failure = None;
            model.train(&splits.train, &mut |m, log| {
                let dir = out.join(log.stage.name());
                let res = checkpoint::save(m, &dir).and_then(|_| write_file(&dir.join("losses.csv"), &losses_csv(log)));
                if let Err(e) = res {
                    failure = Some(e);
                    return Err(epd_core::error::Error::Data("checkpoint write failed".into()));
                }
                log::info!(
                    "stage {} done: loss {:.4} -> {:.4}",
                    log.stage.name(),
                    log.epoch_losses.first().copied().unwrap_or(f64::NAN),
                    log.epoch_losses.last().copied().unwrap_or(f64::NAN)
                );
                Ok(())
            })
            .map_err(|e| failure.take().unwrap_or(Error::Core(e)))?;
            out_line(stdout, &format!("checkpoint {}", out.join(model.stage.name()).display()))
        }
        Command::Eval {
            checkpoint: ck,
            split,
            k,
            seed,
            out,
        } => {
            let model = checkpoint::load(&ck)?;
            let (dataset, windows) = model_windows(&model, &split)?;
            let (e, t) = evaluate_timed(&model, &windows, k, seed, model.default_mode())?;
            let rec = MetricRecord::from_evaluation(&dataset, model.config.ablation.label(), &e, t);
            emit_records(&[rec], out.as_deref(), stdout)
        }
        Command::Bench {
            checkpoint: ck,
            split,
            k,
            seed,
            out,
        } => {
            let model = checkpoint::load(&ck)?;
            let (dataset, windows) = model_windows(&model, &split)?;
            let report = bench_relative(&model, &dataset, &windows, k, seed)?;
            let (a, b) = report.invocations_per_window();
            out_line(
                stdout,
                &format!("denoiser rows per window: {a} vs {b}; wall time ratio {:.2}", report.speedup()),
            )?;
            emit_records(&[report.full, report.from_noise], out.as_deref(), stdout)
        }
        Command::Ablate { config, out, k, seed } => {
            let cfg = read_config(&config)?;
            let splits = load_splits(&cfg, None)?;
            let models = train_ablation(&cfg, &splits.train)?;
            for m in [&models.full, &models.sc_only, &models.pd_only] {
                checkpoint::save(m, &out.join(m.config.ablation.label()))?;
            }
            let records = ablation_records(&models, &splits.dataset, &splits.test, k, seed)?;
            for r in &records {
                out_line(stdout, &format!("{:8} minADE {:.4} minFDE {:.4}", r.variant, r.min_ade, r.min_fde))?;
            }
            emit_records(&records, Some(&out), stdout)
        }
        Command::Plot {
            checkpoint: ck,
            window_id,
            split,
            k,
            seed,
            out,
        } => {
            let model = checkpoint::load(&ck)?;
            let (dataset, windows) = model_windows(&model, &split)?;
            let w = windows
                .get(window_id)
                .ok_or_else(|| Error::Usage(format!("window id {window_id} out of range (split has {})", windows.len())))?;
            let past = w.past();
            let mut rng = [eval_stream(seed, window_id)];
            let pred = model.predict_batch(&[&past], k, model.default_mode(), &mut rng)?.remove(0);
            let title = format!("{dataset} {split} window {window_id}");
            let svg = svg_plot(&PlotInput {
                title: &title,
                past: &w.ego_past,
                truth: Some(&w.ego_future),
                plan: pred.plan.as_ref(),
                denoised: &pred.distribution,
                samples: &pred.samples,
            });
            let svg_path = out.join(format!("window-{window_id}.svg"));
            write_file(&svg_path, &svg)?;
            write_file(&out.join(format!("window-{window_id}.csv")), &gaussian_csv(&pred.distribution))?;
            if let Some(plan) = &pred.plan {
                write_file(&out.join(format!("window-{window_id}-plan.csv")), &gaussian_csv(plan))?;
            }
            out_line(stdout, &format!("wrote {}", svg_path.display()))
        }
    }
}
