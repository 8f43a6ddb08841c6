use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ordmi::config::PipelineConfig;
use ordmi::pipeline;
use ordmi::simulate::{self, SimConfig};

/// Missing-data-aware ordinal regression for survey data.
#[derive(Parser)]
#[command(name = "ordmi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Missing-cell report and response bar chart.
    Inspect(Common),
    /// Spearman matrix, heatmap, chi-square tests and collinearity flags.
    Screen(Common),
    /// Write m completed datasets.
    Impute(Common),
    /// Fit the full model to the datasets written by `impute`.
    Fit(Common),
    /// Pool the fits written by `fit`.
    Pool(Common),
    /// The whole pipeline, from raw CSV to pooled report.
    Run(Common),
    /// Monte-Carlo recovery study.
    Simulate(SimArgs),
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the number of imputations.
    #[arg(long)]
    m: Option<usize>,
    /// Overrides the significance level used for predictor retention.
    #[arg(long)]
    alpha: Option<f64>,
    /// Run replicates one at a time.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SimArgs {
    /// Simulation settings (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "simulation")]
    out: PathBuf,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    sequential: bool,
}

fn load_config(c: &Common) -> Result<(PipelineConfig, PathBuf)> {
    let mut cfg = PipelineConfig::from_file(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.m {
        cfg.m = m;
    }
    if let Some(a) = c.alpha {
        cfg.alpha = a;
    }
    if c.sequential {
        cfg.parallel = false;
    }
    cfg.validate()?;
    let out = c.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

fn done(out: &Path) {
    eprintln!("outputs in {}", out.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inspect(c) => {
            let (cfg, out) = load_config(&c)?;
            let r = pipeline::run_inspect(&cfg, &out)?;
            println!(
                "{} rows; {} missing cells ({} outside the response); {} rows lack a response",
                r.n_rows, r.missing.total_missing, r.missing.predictor_missing, r.missing.rows_with_missing_response
            );
            done(&out);
        }
        Command::Screen(c) => {
            let (cfg, out) = load_config(&c)?;
            let r = pipeline::run_screen(&cfg, &out)?;
            for p in &r.flagged {
                println!("collinear: {} ~ {} (r = {:.3})", p.first, p.second, p.r);
            }
            done(&out);
        }
        Command::Impute(c) => {
            let (cfg, out) = load_config(&c)?;
            let m = pipeline::run_impute(&cfg, &out)?;
            println!("wrote {} completed datasets", m.files.len());
            done(&out);
        }
        Command::Fit(c) => {
            let (cfg, out) = load_config(&c)?;
            let fits = pipeline::run_fit(&cfg, &out)?;
            println!("fitted {} datasets", fits.len());
            done(&out);
        }
        Command::Pool(c) => {
            let (cfg, out) = load_config(&c)?;
            let p = pipeline::run_pool(&cfg, &out)?;
            for r in &p.rows {
                println!("{:<32} {:>10.4} {:>10.4} p={:.4}", r.name, r.mean, r.pooled_se, r.p_value);
            }
            done(&out);
        }
        Command::Run(c) => {
            let (cfg, out) = load_config(&c)?;
            let r = pipeline::run_full(&cfg, &out)?;
            print!(
                "{}",
                pipeline::report_text(&cfg, &r.pooled, &r.manifest.mcfadden, r.manifest.rows_analysed)
            );
            done(&out);
        }
        Command::Simulate(s) => {
            let text = std::fs::read_to_string(&s.config)
                .with_context(|| format!("cannot read {}", s.config.display()))?;
            let mut cfg = SimConfig::from_json_str(&text)?;
            if let Some(seed) = s.seed {
                cfg.seed = seed;
            }
            if let Some(r) = s.replications {
                cfg.replications = r;
            }
            if s.sequential {
                cfg.parallel = false;
            }
            let r = simulate::run_simulate(&cfg, &s.out)?;
            println!("{} replications completed, {} failed", r.completed, r.failed);
            for p in &r.parameters {
                println!(
                    "{:<6} truth {:>7.3}  bias {:>8.4}  se/sd {:>6.3}  coverage {:.3}{}",
                    p.name,
                    p.truth,
                    p.bias,
                    p.se_ratio,
                    p.coverage,
                    if p.wide_interval { "  (wide)" } else { "" }
                );
            }
            done(&s.out);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
