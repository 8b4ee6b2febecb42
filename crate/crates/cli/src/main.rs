use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scaledvr::data::{corrupt_features, write_libsvm};
use scaledvr::harness::{self, RecordFormat, Settings, TrajectoryRecord};
use scaledvr::{Dataset, Objective};

#[derive(Parser)]
#[command(
    name = "scaledvr",
    version,
    about = "Scaled variance-reduced optimizers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration over its seeds and write the trajectories.
    Run(Common),
    /// Run a hyperparameter grid; list-valued flags are comma separated.
    Grid(Common),
    /// Write a copy of the dataset with feature scales spread over 10^kmin..10^kmax.
    Corrupt(Common),
    /// Relative error of the warm-up diagonal against the exact Hessian diagonal.
    DiagD0(Common),
    /// Compare analytic gradients and Hessian-vector products with finite differences.
    CheckGrad(Common),
    /// Check the clipped preconditioner bounds at every step.
    Audit(Common),
}

/// Flags shared by all subcommands. Anything given here overrides the
/// same key in `--config`.
#[derive(Args, Default)]
struct Common {
    /// Flat `key = value` file with the same keys as the long flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// LibSVM dataset.
    #[arg(long)]
    dataset: Option<String>,
    /// logistic | nllsq
    #[arg(long)]
    loss: Option<String>,
    /// sarah | lsvrg | sgd | adam
    #[arg(long)]
    method: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    scaled: Option<String>,
    /// Step size; `2^k` is accepted.
    #[arg(long, allow_hyphen_values = true)]
    eta: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// A constant in [0, 1] or `avg`.
    #[arg(long)]
    beta: Option<String>,
    /// Refresh probability; defaults to batch / n.
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    /// Number of warm-up probes.
    #[arg(long)]
    warmup: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    kmin: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    kmax: Option<String>,
    /// Seed of the feature-scale permutation.
    #[arg(long)]
    scale_seed: Option<String>,
    /// Budget in effective data passes.
    #[arg(long)]
    passes: Option<String>,
    /// `0,1,2` or `0..10`.
    #[arg(long)]
    seeds: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<String>,
    /// csv | jsonl
    #[arg(long)]
    format: Option<String>,
    /// Grid objective: loss | grad_norm_sq | error
    #[arg(long)]
    objective: Option<String>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut settings = match &self.config {
            Some(path) => Settings::read(path)?,
            None => Settings::default(),
        };
        let mut flags = Settings::default();
        let pairs = [
            ("dataset", &self.dataset),
            ("loss", &self.loss),
            ("method", &self.method),
            ("scaled", &self.scaled),
            ("eta", &self.eta),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("p", &self.p),
            ("batch", &self.batch),
            ("warmup", &self.warmup),
            ("kmin", &self.kmin),
            ("kmax", &self.kmax),
            ("scale-seed", &self.scale_seed),
            ("passes", &self.passes),
            ("seeds", &self.seeds),
            ("out", &self.out),
            ("format", &self.format),
            ("objective", &self.objective),
        ];
        for (key, value) in pairs {
            if let Some(value) = value {
                flags.set(key, value)?;
            }
        }
        settings.merge(&flags);
        Ok(settings)
    }
}

fn load(settings: &Settings) -> Result<Dataset> {
    let path = settings
        .dataset_path()
        .context("no dataset given (use --dataset or `dataset =` in --config)")?;
    Ok(harness::load_dataset(path)?)
}

fn output(settings: &Settings) -> Result<Box<dyn Write>> {
    Ok(match settings.output_path() {
        Some(path) => Box::new(BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_records<'r>(
    settings: &Settings,
    records: impl IntoIterator<Item = &'r TrajectoryRecord>,
) -> Result<()> {
    let format: RecordFormat = settings.format()?;
    harness::write_records(records, output(settings)?, format)?;
    Ok(())
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Run(common) => {
            let settings = common.settings()?;
            let cfg = settings.experiment()?;
            let records = harness::run_experiment(&cfg, &load(&settings)?)?;
            for r in &records {
                if let Some(last) = r.rows.last() {
                    log::info!(
                        "seed {}: {} after {:.2} passes, loss {:.6e}, |grad|^2 {:.3e}",
                        r.seed,
                        r.status.name(),
                        last.effective_passes,
                        last.loss,
                        last.grad_norm_sq
                    );
                }
            }
            write_records(&settings, &records)?;
        }
        Command::Grid(common) => {
            let settings = common.settings()?;
            let template = settings.experiment()?;
            let axes = settings.axes()?;
            let result =
                harness::grid_search(&template, &axes, settings.objective()?, &load(&settings)?)?;
            let failed = result.cells.iter().filter(|c| c.score.is_none()).count();
            eprintln!("{} cells, {} failed", result.cells.len(), failed);
            match result.best {
                Some(i) => {
                    let cell = &result.cells[i];
                    let o = &cell.config.optimizer;
                    eprintln!(
                        "best: eta={} alpha={} beta={} batch={} score={:.6e}",
                        o.eta,
                        o.precond.alpha,
                        o.precond.beta,
                        o.batch_size,
                        cell.score.unwrap_or(f64::NAN)
                    );
                }
                None => eprintln!("no cell survived"),
            }
            write_records(&settings, result.records())?;
        }
        Command::Corrupt(common) => {
            let settings = common.settings()?;
            let cfg = settings.experiment()?;
            let corrupted = corrupt_features(&load(&settings)?, &cfg.scaling()?)?;
            let mut out = output(&settings)?;
            write_libsvm(&corrupted, &mut out)?;
            out.flush()?;
        }
        Command::DiagD0(common) => {
            let settings = common.settings()?;
            let cfg = settings.experiment()?;
            let errors = harness::d0_diagnostic(&cfg, &load(&settings)?)?;
            let mut out = output(&settings)?;
            for (seed, err) in cfg.seeds.iter().zip(&errors) {
                writeln!(out, "seed {seed}: relative error {err:.6e}")?;
            }
            let mean = errors.iter().sum::<f64>() / errors.len() as f64;
            writeln!(out, "mean relative error {mean:.6e}")?;
            out.flush()?;
        }
        Command::CheckGrad(common) => {
            let settings = common.settings()?;
            let cfg = settings.experiment()?;
            let data = cfg.prepare(&load(&settings)?)?;
            let obj = Objective::new(cfg.loss, &data)?;
            let mut ok = true;
            let mut out = output(&settings)?;
            for &seed in &cfg.seeds {
                let check = harness::gradient_check(&obj, 0.1, seed)?;
                let pass = check.grad_rel_err < 1e-5 && check.hvp_rel_err < 1e-5;
                ok &= pass;
                writeln!(
                    out,
                    "seed {seed}: gradient {:.3e}, hessian-vector {:.3e} {}",
                    check.grad_rel_err,
                    check.hvp_rel_err,
                    if pass { "ok" } else { "MISMATCH" }
                )?;
            }
            out.flush()?;
            return Ok(ok);
        }
        Command::Audit(common) => {
            let settings = common.settings()?;
            let cfg = settings.experiment()?;
            if !cfg.optimizer.scaled {
                bail!("audit needs a scaled run (pass --scaled)");
            }
            let reports = harness::audit_experiment(&cfg, &load(&settings)?)?;
            let mut out = output(&settings)?;
            let mut ok = true;
            for (seed, report) in cfg.seeds.iter().zip(&reports) {
                ok &= report.violations.is_empty();
                writeln!(
                    out,
                    "seed {seed}: {} steps, alpha {:.3e}, ceiling {:.3e}, max entry {:.3e}, {} violations",
                    report.steps_checked,
                    report.alpha,
                    report.alpha.max(report.gamma),
                    report.max_entry,
                    report.violations.len()
                )?;
                for v in report.violations.iter().take(10) {
                    writeln!(
                        out,
                        "  step {} index {} value {:e}",
                        v.step, v.index, v.value
                    )?;
                }
            }
            out.flush()?;
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            // library errors already embed their causes
            if e.downcast_ref::<scaledvr::Error>().is_some() {
                eprintln!("error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
