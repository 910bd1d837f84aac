use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ridgepath::asymptotics::{build_law, simulate_theorem1, VMode, DEFAULT_V_OBSERVATIONS};
use ridgepath::harness::{self, MCSpec};
use ridgepath::{generate_dataset, ridge_path_estimate, Dataset, ModelSpec, RidgeConfig};

#[derive(Parser)]
#[command(name = "ridgepath", version, about = "Ridge-path IV estimation and its Monte Carlo harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VModeArg {
    Analytic,
    MonteCarlo,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from a model specification.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit 2SLS and the ridge path estimator to a dataset.
    Estimate {
        /// Dataset CSV with header y,x1..xk,z1..zm.
        #[arg(long, conflicts_with = "spec")]
        data: Option<PathBuf>,
        /// Simulate the data from this model specification instead.
        #[arg(long, required_unless_present = "data")]
        spec: Option<PathBuf>,
        /// Seed for simulated data.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.7)]
        tau: f64,
        /// Comma separated prior, e.g. 0.7071,0.7071. Defaults to the spec's prior.
        #[arg(long, value_delimiter = ',')]
        prior: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw from the cone-projected limit law.
    Asymptotics {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Summary JSON; printed to standard output when omitted.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = VModeArg::MonteCarlo)]
        v_mode: VModeArg,
        #[arg(long, default_value_t = DEFAULT_V_OBSERVATIONS)]
        v_observations: usize,
    },
    /// Run the Monte Carlo design.
    Simulate {
        /// Design JSON; missing fields take the 48-cell defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Include the n = 10,000 cells and the extra singular value sizes.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        large_reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Only cells whose id contains one of these, e.g. d0.10_n25 or _p3.
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
    },
    /// Build the CSV tables from a simulate output directory.
    Tables {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_spec(path: &Path) -> Result<ModelSpec> {
    ModelSpec::from_json_file(path).with_context(|| format!("reading model spec {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { spec, seed, out } => {
            let spec = load_spec(&spec)?;
            let data = generate_dataset(&spec, seed)?;
            let mut w = create(&out)?;
            data.write_csv(&mut w)?;
            w.flush()?;
        }
        Command::Estimate { data, spec, seed, tau, prior, out } => {
            let (dataset, spec_prior) = match (data, spec) {
                (Some(path), _) => {
                    let file = File::open(&path).with_context(|| format!("cannot read {}", path.display()))?;
                    (Dataset::read_csv(file, tau)?, None)
                }
                (None, Some(path)) => {
                    let spec = load_spec(&path)?;
                    (generate_dataset(&spec, seed)?.with_tau(tau)?, Some(spec.prior.iter().cloned().collect()))
                }
                (None, None) => bail!("either --data or --spec is required"),
            };
            let Some(prior) = prior.or(spec_prior) else {
                bail!("--prior is required with --data");
            };
            if prior.len() != dataset.k() {
                bail!("prior has {} entries but the data has {} regressors", prior.len(), dataset.k());
            }
            let fit = ridge_path_estimate(&dataset, &RidgeConfig::new(tau, prior))?;
            write_json(&out, &serde_json::to_value(&fit)?)?;
            eprintln!(
                "alpha_hat = {}, beta_hat = {:?}, 2SLS = {:?}",
                fit.alpha_hat, fit.beta_hat, fit.beta_2sls_full
            );
        }
        Command::Asymptotics { spec, draws, seed, out, summary, v_mode, v_observations } => {
            let spec = load_spec(&spec)?;
            let mode = match v_mode {
                VModeArg::Analytic => VMode::AnalyticGaussian,
                VModeArg::MonteCarlo => VMode::MonteCarlo { observations: v_observations, seed },
            };
            let law = build_law(&spec, mode)?;
            if law.degenerate_prior {
                bail!("the prior equals beta0, so the limit law is degenerate");
            }
            let result = simulate_theorem1(&law, draws, seed)?;
            let mut w = create(&out)?;
            let len = law.layout.len();
            let mut header = vec!["draw".to_string()];
            header.extend((0..len).map(|i| format!("lambda_{i}")));
            header.push("at_boundary".into());
            writeln!(w, "{}", header.join(","))?;
            for (i, s) in result.samples.iter().enumerate() {
                let mut row = vec![i.to_string()];
                row.extend(s.lambda_hat.iter().map(|v| v.to_string()));
                row.push(s.at_boundary.to_string());
                writeln!(w, "{}", row.join(","))?;
            }
            w.flush()?;
            let report = serde_json::json!({
                "draws": draws,
                "seed": seed,
                "mass_at_zero": result.mass_at_zero,
                "alpha_index": law.layout.alpha_index(),
                "delta_tilde": law.delta_tilde,
            });
            match summary {
                Some(path) => write_json(&path, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Simulate { spec, full, reps, large_reps, seed, out, cells } => {
            let mut mc = match spec {
                Some(path) => MCSpec::from_json_file(&path).with_context(|| format!("reading {}", path.display()))?,
                None if full => MCSpec::full(),
                None => MCSpec::default(),
            };
            if let Some(r) = reps {
                mc.reps = r;
            }
            if let Some(r) = large_reps {
                mc.large_n_reps = r;
            }
            if let Some(s) = seed {
                mc.base_seed = s;
            }
            let summary = harness::simulate(&mc, &out, &cells, |c, done, total| {
                eprintln!(
                    "[{done}/{total}] {}: 2SLS MSE {:.4}, ridge MSE {:.4}, P(alpha=0) {:.3}, errors {}",
                    c.id, c.tsls.combined_mse, c.ridge.combined_mse, c.alpha.p_zero, c.errors
                );
            })?;
            let failed = summary.failed_cells();
            if !failed.is_empty() {
                for c in &failed {
                    eprintln!("cell {} failed: {} of {} replications errored", c.id, c.errors, c.cell.reps);
                }
                return Ok(ExitCode::from(2));
            }
        }
        Command::Tables { input, out } => {
            let written = harness::tables(&input, &out)?;
            eprintln!("wrote {} files to {}", written.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
