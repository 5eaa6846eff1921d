use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sparsify::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sparsify::config::{parse_config, parse_config_str, ExperimentConfig};
use sparsify::emit::{truncate_convergence, write_convergence, write_layers, write_summary, write_tradeoff, Summary};
use sparsify::equiv::tradeoff_curve;
use sparsify::error::ConfigError;
use sparsify::export::{sparse_layers, write_sparse};
use sparsify::gradcheck::run_suite;
use sparsify::train::{Mode, Trainer};
use sparsify::{Error, Result};

const CHECKPOINT: &str = "checkpoint.bin";

#[derive(Parser)]
#[command(name = "sparsify", version, about = "Train networks with learned magnitude-pruning thresholds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the configured one, then `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Arithmetic precision in bits.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration, checkpointing after every epoch.
    Run {
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs are complete, leaving a checkpoint to
        /// resume from.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Trade-off curve: dense equivalents against pruned runs per ratio.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Per-layer sparsity and accuracy of a checkpoint.
    Report { checkpoint: PathBuf },
    /// Writes the pruned weights of a checkpoint in CSR form.
    ExportSparse { checkpoint: PathBuf },
    /// Runs the finite-difference gradient suite.
    Gradcheck,
}

impl Cli {
    fn apply(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.precision {
            cfg.precision = p.parse().expect("validated by clap");
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn init_threads(n: usize) {
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::warn!("thread pool already initialized: {e}");
    }
}

/// The configuration as echoed into output files. The output directory is
/// left out so identical runs produce identical bytes wherever they write.
fn echo(cfg: &ExperimentConfig) -> String {
    ExperimentConfig { out: None, ..cfg.clone() }.to_toml()
}

fn run(cli: &Cli, config: &Path, resume: bool, stop_after: Option<usize>) -> Result<()> {
    let cfg = cli.apply(parse_config(config)?)?;
    let dir = out_dir(&cfg)?;
    let echo = echo(&cfg);
    write_text(&dir.join("config.toml"), &echo)?;
    let data = cfg.load_dataset()?;
    let spec = cfg.network_spec(&data)?;
    let tc = cfg.train_config();
    let conv = dir.join("convergence.csv");
    let ckpt = dir.join(CHECKPOINT);

    let mut trainer = if resume {
        let ck = load_checkpoint(&ckpt)?;
        if ck.config != echo {
            return Err(ConfigError::Inconsistent {
                key: "resume".into(),
                msg: format!("{} was written with a different configuration", ckpt.display()),
            }
            .into());
        }
        truncate_convergence(&conv, ck.iter)?;
        log::info!("resuming at epoch {}, iteration {}", ck.epoch, ck.iter);
        ck.trainer(tc, data.train.len())?
    } else {
        write_convergence(&conv, &[], false)?;
        Trainer::new(tc, spec, data.train.len())?
    };

    let mut written = 0;
    let last = stop_after.map_or(trainer.config().epochs, |n| n.min(trainer.config().epochs));
    while trainer.epoch < last {
        let h = trainer.run_epoch(&data)?;
        write_convergence(&conv, &trainer.log[written..], true)?;
        written = trainer.log.len();
        save_checkpoint(&ckpt, &Checkpoint::from_trainer(&trainer, echo.clone()))?;
        log::info!(
            "epoch {}: loss {:.4}, test accuracy {:.4}, sparsity {:.4}, lr {:.5}",
            h.epoch,
            h.train_loss,
            h.test_accuracy,
            h.param_sparsity,
            h.lr
        );
    }
    if trainer.epoch < trainer.config().epochs {
        log::info!("stopped after epoch {}; continue with --resume", trainer.epoch);
        return Ok(());
    }
    let epochs = trainer.epoch;
    let method = trainer.config().mode.name();
    let out = trainer.finish(&data)?;
    finish_report(&dir, method, out.net.spec().param_count(), &out.report, out.test_accuracy, epochs)
}

fn finish_report(
    dir: &Path,
    method: &str,
    params: usize,
    report: &sparsify::nn::SparsityReport,
    accuracy: f64,
    epochs: usize,
) -> Result<()> {
    write_layers(&dir.join("layers.csv"), report)?;
    let summary = Summary::new(method, params, report, accuracy, epochs);
    write_summary(&dir.join("summary.txt"), &summary)?;
    print!("{}", summary.render());
    Ok(())
}

/// Rebuilds a trainer and its dataset from the configuration stored in a
/// checkpoint. Output goes next to the checkpoint unless `--out` is given.
fn restore(cli: &Cli, path: &Path) -> Result<(Trainer, sparsify::data::Dataset, PathBuf)> {
    let ck = load_checkpoint(path)?;
    let mut cfg = parse_config_str(&ck.config)?;
    cfg.out = Some(cli.out.clone().unwrap_or_else(|| path.parent().map_or_else(|| ".".into(), Path::to_path_buf)));
    let data = cfg.load_dataset()?;
    let trainer = ck.trainer(cfg.train_config(), data.train.len())?;
    let dir = out_dir(&cfg)?;
    Ok((trainer, data, dir))
}

fn report(cli: &Cli, path: &Path) -> Result<()> {
    let (mut t, data, dir) = restore(cli, path)?;
    let accuracy = t.evaluate(&data.test)?;
    let report = t.report()?;
    for l in &report.layers {
        println!("{:<24} {:>10} {:>8.4}", l.name, l.weights, l.sparsity);
    }
    let params = t.net.spec().param_count();
    finish_report(&dir, t.config().mode.name(), params, &report, accuracy, t.epoch)
}

fn export(cli: &Cli, path: &Path) -> Result<()> {
    let (mut t, _, dir) = restore(cli, path)?;
    t.refresh_bounds()?;
    let layers = sparse_layers(&mut t.net);
    let target = dir.join("weights.csr");
    let bytes = write_sparse(&target, &layers)?;
    let nnz: usize = layers.iter().map(|l| l.nnz()).sum();
    let total: usize = t.net.params.weights.iter().map(|p| p.weights.len()).sum();
    println!("{}: {nnz} of {total} weights, {bytes} bytes (dense f32: {} bytes)", target.display(), 4 * total);
    Ok(())
}

fn sweep(cli: &Cli, config: &Path, ratios: Option<&[f64]>) -> Result<()> {
    let mut cfg = parse_config(config)?;
    if let Some(r) = ratios {
        cfg.sweep.ratios = r.to_vec();
    }
    let cfg = cli.apply(cfg)?;
    if cfg.sweep.ratios.is_empty() {
        return Err(ConfigError::Missing { key: "sweep.ratios".into() }.into());
    }
    init_threads(cfg.threads);
    let dir = out_dir(&cfg)?;
    write_text(&dir.join("config.toml"), &echo(&cfg))?;
    let data = cfg.load_dataset()?;
    let spec = cfg.network_spec(&data)?;
    let modes = if cfg.sweep.modes.is_empty() { vec![Mode::Adaptive] } else { cfg.sweep.modes.clone() };
    let rows = tradeoff_curve(&spec, &cfg.sweep.ratios, &modes, &cfg.train_config(), &data, cfg.sweep.parallel)?;
    write_tradeoff(&dir.join("tradeoff.csv"), &rows)?;
    for r in &rows {
        println!("{:<6} {:<18} {:>10} {:.4}", r.ratio, r.mode, r.params, r.error);
    }
    Ok(())
}

fn gradcheck(cli: &Cli) -> Result<bool> {
    let checks = run_suite(cli.seed.unwrap_or(0))?;
    for c in &checks {
        println!("{} {:<26} error {:.3e} (tol {:.0e})", if c.passed() { "PASS" } else { "FAIL" }, c.name, c.error, c.tol);
    }
    Ok(checks.iter().all(|c| c.passed()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, resume, stop_after } => run(&cli, config, *resume, *stop_after),
        Command::Sweep { config, ratios } => sweep(&cli, config, ratios.as_deref()),
        Command::Report { checkpoint } => report(&cli, checkpoint),
        Command::ExportSparse { checkpoint } => export(&cli, checkpoint),
        Command::Gradcheck => match gradcheck(&cli) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
