use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use msl_core::conformal::write_cp_report;
use msl_core::harness::{
    self, config_from_report, session_batches, session_config, ExperimentConfig, SweepKind,
};
use msl_core::meta::write_training_log;
use msl_core::nn::{grad_check_with, GradCheckOptions, ModelConfig};
use msl_core::split::{save_params, Half};
use msl_core::transport::{run_aggregator, run_device, TcpEndpoint};

#[derive(Parser)]
#[command(name = "msl", version, about = "Meta split learning over a simulated wireless link")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Starting point: `full` or `desk`.
    #[arg(long, default_value = "full")]
    preset: String,
    /// Config file (`key = value` lines with `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Take the configuration echoed in an earlier run report.
    #[arg(long, conflicts_with_all = ["preset", "config"])]
    replay: Option<PathBuf>,
    /// `synth` or `omniglot:<path>`.
    #[arg(long)]
    data: Option<String>,
    /// `dnn`, `sl` or `msl`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    cut: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any key, e.g. `--set meta.shots=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.replay {
            Some(p) => config_from_report(File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
            None => ExperimentConfig::preset(&self.preset)?,
        };
        if let Some(p) = &self.config {
            cfg.apply_file(p).with_context(|| format!("reading config {}", p.display()))?;
        }
        for (key, value) in [
            ("run.data", self.data.clone()),
            ("run.mode", self.mode.clone()),
            ("run.cut", self.cut.map(|c| c.to_string())),
            ("run.seed", self.seed.map(|s| s.to_string())),
        ] {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration; writes a run report CSV.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Report destination (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch meta-training log CSV.
        #[arg(long)]
        training_log: Option<PathBuf>,
        /// Save the initialization used at meta-test time as a checkpoint.
        #[arg(long)]
        save_init: Option<PathBuf>,
    },
    /// Train over a grid of one parameter and several seeds.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// shots, tasks, cut or snr.
        #[arg(long)]
        kind: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, then write per-task conformal prediction results.
    Conformal {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Override the miscoverage level.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregator: accept device sessions on a TCP port (0 picks a free
    /// port; the bound address is printed).
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Sessions to serve before exiting.
        #[arg(long, default_value_t = 1)]
        sessions: usize,
        /// Read timeout in seconds.
        #[arg(long, default_value_t = 30)]
        timeout: u64,
        /// Session log CSV (last session).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Device: connect to an aggregator and run split training.
    Device {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "HOST:PORT")]
        connect: String,
        /// Training steps (defaults to meta.test_steps).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 30)]
        timeout: u64,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Finite-difference check of the backward pass in 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        ways: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Exit nonzero if the worst relative error exceeds this.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            cfg,
            out,
            training_log,
            save_init,
        } => {
            let cfg = cfg.resolve()?;
            let report = harness::train(&cfg)?;
            report.write_csv(output(&out)?)?;
            if let Some(p) = training_log {
                write_training_log(create(&p)?, &report.meta_log)?;
            }
            if let Some(p) = save_init {
                save_params(&p, &cfg.model(), &report.init_params)?;
            }
            log::info!(
                "{} accuracy {:.4} after {} steps",
                cfg.mode,
                report.final_accuracy(),
                cfg.meta.test_steps
            );
        }
        Command::Sweep {
            cfg,
            kind,
            grid,
            seeds,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let kind: SweepKind = kind.parse()?;
            harness::sweep(kind, &grid, &seeds, &cfg, output(&out)?)?;
        }
        Command::Conformal { cfg, alpha, out } => {
            let mut cfg = cfg.resolve()?;
            if let Some(a) = alpha {
                cfg.cp.alpha = a;
                cfg.validate()?;
            }
            let report = harness::train(&cfg)?;
            write_cp_report(output(&out)?, &report.cp)?;
            log::info!(
                "mean coverage {:.4}, inefficiency {:.3} at alpha {}",
                report.coverage,
                report.inefficiency,
                cfg.cp.alpha
            );
        }
        Command::Serve {
            cfg,
            port,
            host,
            sessions,
            timeout,
            log,
        } => {
            let cfg = cfg.resolve()?;
            let session = session_config(&cfg)?;
            let listener = TcpListener::bind((host.as_str(), port)).with_context(|| format!("binding {host}:{port}"))?;
            let addr = listener.local_addr()?;
            println!("listening on {addr}");
            io::stdout().flush()?;
            for n in 0..sessions {
                let mut ep = TcpEndpoint::accept(&listener, Duration::from_secs(timeout))?;
                let mut half = Half::<f32>::init_aggregator(&session.model, session.cut, session.seed)?;
                let slog = run_aggregator(&mut ep, &mut half, session.lr)?;
                log::info!(
                    "session {n}: {} steps, {} bytes in, {} bytes out",
                    slog.steps.len(),
                    slog.bytes_received,
                    slog.bytes_sent
                );
                if let Some(p) = &log {
                    slog.write_csv(create(p)?)?;
                }
            }
        }
        Command::Device {
            cfg,
            connect,
            steps,
            timeout,
            log,
        } => {
            let cfg = cfg.resolve()?;
            let session = session_config(&cfg)?;
            let data = harness::prepare_data(&cfg)?;
            let batches = session_batches(&cfg, &data)?;
            let mut ep = TcpEndpoint::connect(connect.as_str(), Duration::from_secs(timeout))?;
            let mut half = Half::<f32>::init_device(&session.model, session.cut, session.seed)?;
            let steps = steps.unwrap_or(cfg.meta.test_steps);
            let slog = run_device(&mut ep, &mut half, &batches, steps, session.lr, &session.channel)?;
            if let Some(last) = slog.steps.last() {
                log::info!("{} steps, last loss {:.4}", slog.steps.len(), last.loss);
            }
            slog.write_csv(output(&log)?)?;
        }
        Command::Gradcheck {
            ways,
            seed,
            eps,
            batch,
            samples,
            tolerance,
        } => {
            let model = ModelConfig::default_cnn(ways);
            let r = grad_check_with(&model, seed, eps, GradCheckOptions { batch, samples })?;
            println!("max_rel_err,checked,skipped_kinks");
            println!("{},{},{}", r.max_rel_err, r.checked, r.skipped_kinks);
            if r.max_rel_err.is_nan() || r.max_rel_err >= tolerance {
                bail!("gradient check failed: {} >= {tolerance}", r.max_rel_err);
            }
        }
    }
    Ok(())
}
