use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use invgap_core::bnn::{Activation, Dataset};
use invgap_core::experiments::{
    bnn_check, elbo_sweep, gap_sweep, parse_real, write_elbo_csv, write_gap_csv, BnnCheckConfig, SweepConfig,
};
use invgap_core::verification::{run_suite, Suite, VerifyOptions};

#[derive(Parser, Debug)]
#[command(name = "invgap", version, about = "Invariance-gap sweeps and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Invariance gap at both optima and the data-related bound, per K.
    GapSweep(SweepArgs),
    /// ELBO terms and predictive variance for q0 and qmix at both optima.
    ElboSweep(SweepArgs),
    /// Run a verification suite and print a JSON report.
    Verify(VerifyArgs),
    /// Network invariance checks, permutation gap and optional layer-wise fit.
    BnnCheck(BnnArgs),
}

fn real(s: &str) -> std::result::Result<f64, String> {
    parse_real(s).map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// JSON file with any SweepConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_obs: Option<usize>,
    #[arg(long, value_parser = real)]
    y: Option<f64>,
    /// Accepts expressions such as `1/(2*pi*e)`.
    #[arg(long = "sigma2-y", value_parser = real)]
    sigma2_y: Option<f64>,
    #[arg(long = "sigma2-0", value_parser = real)]
    sigma2_0: Option<f64>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    k_step: Option<usize>,
    #[arg(long, env = "INVGAP_SEED")]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SweepArgs {
    fn resolve(&self) -> Result<SweepConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => SweepConfig::default(),
        };
        if let Some(v) = self.n_obs {
            cfg.n_obs = v;
        }
        if let Some(v) = self.y {
            cfg.y_value = v;
        }
        if let Some(v) = self.sigma2_y {
            cfg.sigma2_y = v;
        }
        if let Some(v) = self.sigma2_0 {
            cfg.sigma2_0 = v;
        }
        if self.k_min.is_some() || self.k_max.is_some() || self.k_step.is_some() {
            let lo = self.k_min.unwrap_or(1);
            let hi = self.k_max.unwrap_or(lo);
            let step = self.k_step.unwrap_or(1);
            if step == 0 || hi < lo {
                bail!("empty K range {lo}..={hi} step {step}");
            }
            cfg.k_values = (lo..=hi).step_by(step).collect();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(p) = &self.out {
            cfg.output = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(default_value = "all", value_parser = |s: &str| s.parse::<Suite>().map_err(|e| e.to_string()))]
    suite: Suite,
    #[arg(long, env = "INVGAP_SEED", default_value_t = 0)]
    seed: u64,
    /// Hidden widths of the network in the bnn suite, e.g. `2,2`.
    #[arg(long, value_delimiter = ',', default_value = "2,2")]
    widths: Vec<usize>,
    /// Mutation test: flip the sign of the rank-1 covariance term.
    #[arg(long, hide = true)]
    inject_fault: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BnnArgs {
    /// Hidden widths, e.g. `2,2`.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    input_dim: usize,
    #[arg(long, default_value = "tanh", value_parser = |s: &str| s.parse::<Activation>().map_err(|e| e.to_string()))]
    activation: Activation,
    #[arg(long, env = "INVGAP_SEED", default_value_t = 0)]
    seed: u64,
    /// CSV with a header row; the last column is the target.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Size of the synthetic dataset used when `--data` is absent.
    #[arg(long, default_value_t = 20)]
    n_data: usize,
    #[arg(long = "sigma2-y", value_parser = real, default_value = "0.1")]
    sigma2_y: f64,
    /// Run the layer-wise fit and include its trace.
    #[arg(long)]
    fit: bool,
    #[arg(long, default_value_t = 64)]
    samples_per_layer: usize,
    #[arg(long, default_value_t = 50)]
    max_sweeps: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot write {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut out = open_out(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .with_context(|| format!("row {} of {}", i + 1, path.display()))?;
        let Some((y, x)) = vals.split_last() else {
            bail!("row {} of {} is empty", i + 1, path.display());
        };
        inputs.push(x.to_vec());
        targets.push(*y);
    }
    Ok(Dataset::new(inputs, targets)?)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GapSweep(args) => {
            let cfg = args.resolve()?;
            let rows = gap_sweep(&cfg)?;
            write_gap_csv(&rows, open_out(cfg.output.as_deref())?)?;
            Ok(true)
        }
        Command::ElboSweep(args) => {
            let cfg = args.resolve()?;
            let rows = elbo_sweep(&cfg)?;
            write_elbo_csv(&rows, open_out(cfg.output.as_deref())?)?;
            Ok(true)
        }
        Command::Verify(args) => {
            let opts = VerifyOptions {
                seed: args.seed,
                hidden_widths: args.widths,
                inject_fault: args.inject_fault,
            };
            let report = run_suite(args.suite, &opts);
            for c in report.checks.iter().filter(|c| !c.pass) {
                eprintln!("FAIL {}::{} measured {:e} tolerance {:e}", c.suite, c.name, c.measured, c.tolerance);
            }
            write_json(&report, args.out.as_deref())?;
            Ok(report.pass)
        }
        Command::BnnCheck(args) => {
            let data = args.data.as_deref().map(read_dataset).transpose()?;
            let cfg = BnnCheckConfig {
                input_dim: data.as_ref().and_then(|d| d.inputs.first().map(Vec::len)).unwrap_or(args.input_dim),
                hidden_widths: args.widths,
                activation: args.activation,
                seed: args.seed,
                n_data: args.n_data,
                sigma2_y: args.sigma2_y,
                fit: args.fit,
                fit_config: invgap_core::bnn::FitConfig {
                    samples_per_layer: args.samples_per_layer,
                    max_sweeps: args.max_sweeps,
                    tol: args.tol,
                    seed: args.seed,
                    ..Default::default()
                },
                ..BnnCheckConfig::default()
            };
            let report = bnn_check(&cfg, data.as_ref())?;
            write_json(&report, args.out.as_deref())?;
            Ok(report.pass)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
