use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dpgp::harness::bench::{fit_summary, release_all, run_bench};
use dpgp::harness::data::clip_and_center;
use dpgp::harness::report::{run_hpselect, write_bench_csv, write_json, write_probability_csv, write_release_csv};
use dpgp::harness::ExperimentConfig;
use dpgp::Result;

#[derive(Parser)]
#[command(name = "dpgp", about = "Differentially private Gaussian process regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Load, clip and centre the data; write a summary and the cleaned CSV.
    Ingest,
    /// Fit the GP and report the sensitivity constants (nothing private).
    Fit,
    /// Release DP predictions at the configured test points.
    Release,
    /// DP hyperparameter selection.
    Hpselect,
    /// Run the configured benchmark table.
    Bench,
}

#[derive(Serialize)]
struct IngestSummary {
    n: usize,
    dim: usize,
    rejected_rows: usize,
    clip: Option<(f64, f64)>,
    offset: f64,
}

fn run(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| dpgp::Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&cli.out)?;
    let out = |name: &str| -> PathBuf { cli.out.join(name) };
    let data = cfg.load_data()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    match cli.command {
        Command::Ingest => {
            let c = clip_and_center(&data, cfg.data.clip_low, cfg.data.clip_high)?;
            write_json(
                &out("ingest.json"),
                &IngestSummary {
                    n: c.n(),
                    dim: c.dim(),
                    rejected_rows: c.rejected_rows,
                    clip: c.clip,
                    offset: c.offset,
                },
            )?;
            let mut w = csv::Writer::from_path(out("clean.csv"))?;
            let mut header: Vec<String> = (0..c.dim()).map(|j| format!("x{j}")).collect();
            header.push("y_centred".into());
            w.write_record(&header)?;
            for i in 0..c.n() {
                let mut row: Vec<String> = c.x.row(i).iter().map(|v| v.to_string()).collect();
                row.push(c.y[i].to_string());
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        Command::Fit => write_json(&out("fit.json"), &fit_summary(&cfg, &data)?)?,
        Command::Release => {
            let xstar = cfg
                .load_test_points()?
                .ok_or_else(|| dpgp::Error::Config("missing [test_points] table".into()))?;
            let r = release_all(&cfg, &data, &xstar, &mut rng)?;
            if r.privacy.not_private {
                log::warn!("release is NOT PRIVATE (epsilon = inf or noise_multiplier != 1)");
            }
            write_release_csv(&out("release.csv"), &xstar, &r)?;
            write_json(&out("privacy.json"), &r.privacy)?;
        }
        Command::Hpselect => {
            let report = run_hpselect(&cfg, &data, &mut rng)?;
            write_json(&out("hpselect.json"), &report)?;
            if !report.probability_table.is_empty() {
                write_probability_csv(&out("probabilities.csv"), &report)?;
            }
            println!("selected candidate {}: {:?}", report.selection.index, report.selection.spec);
        }
        Command::Bench => {
            let rows = run_bench(&cfg, &data)?;
            write_json(&out("bench.json"), &rows)?;
            write_bench_csv(&out("bench.csv"), &rows)?;
            for r in &rows {
                println!(
                    "{:<24} eps={:<6} rmse {:.4} ± {:.4} ({} failed)",
                    r.label,
                    r.epsilon,
                    r.mean_rmse,
                    r.ci95,
                    r.failures.len()
                );
            }
        }
    }
    log::info!("outputs written to {}", Path::new(&cli.out).display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
