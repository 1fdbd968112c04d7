use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vpo_core::harness::{self, Csv, ExperimentConfig};
use vpo_core::Error;

#[derive(Parser, Debug)]
#[command(name = "vpo", version, about = "Run private overlay experiments and write CSV results")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time single pair joins into a settled deployment.
    SingleJoin(Opts),
    /// Start every private pair at once and time overlay formation.
    MassJoin(Opts),
    /// Steady-state per-node bandwidth for one timer mode.
    Bandwidth(Opts),
    /// Revoke one member and measure the notification cost.
    Revoke(Opts),
    /// Modeler estimates next to simulated join medians.
    Model(Opts),
    /// Merge two private partitions and time the healing.
    Heal(Opts),
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// Flat key=value file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    public_size: Option<String>,
    #[arg(long)]
    private_size: Option<String>,
    /// Turn on mutual authentication for private links.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    security: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Whitespace-separated RTT matrix in milliseconds.
    #[arg(long, conflicts_with = "synthetic")]
    latency_file: Option<String>,
    /// Random symmetric RTT matrix, as MIN,MAX milliseconds.
    #[arg(long, value_name = "MIN,MAX")]
    synthetic: Option<String>,
    /// static or dynamic
    #[arg(long)]
    timer: Option<String>,
    /// dht or broadcast
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    /// Comma-separated private sizes for the model comparison.
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    sites: Option<String>,
    /// Directory for the CSV output.
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
}

impl Opts {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags = [
            ("public-size", &self.public_size),
            ("private-size", &self.private_size),
            ("security", &self.security),
            ("seed", &self.seed),
            ("latency-file", &self.latency_file),
            ("synthetic", &self.synthetic),
            ("timer", &self.timer),
            ("method", &self.method),
            ("reps", &self.reps),
            ("sizes", &self.sizes),
            ("sites", &self.sites),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

fn emit(cfg: &ExperimentConfig, name: &str, csv: &Csv, summary: String) -> Result<(), Error> {
    let path = cfg.out.join(format!("{name}.csv"));
    csv.write(&path)?;
    let mut out = std::io::stdout().lock();
    // A closed pipe downstream is not an experiment failure.
    let _ = writeln!(out, "{summary}");
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x:.1}"))
}

/// Runs one experiment; `Ok(true)` means some run was flagged.
fn run(command: &Command) -> Result<bool, Error> {
    match command {
        Command::SingleJoin(o) => {
            let cfg = o.resolve()?;
            let r = harness::run_single_join(&cfg)?;
            let line = harness::summary_line(
                "single-join",
                &[
                    ("converged", format!("{}/{}", r.converged, r.join_ms.len())),
                    ("median_ms", fmt_opt(r.median_ms)),
                    ("config", r.digest.clone()),
                ],
            );
            emit(&cfg, "single_join", &r.csv(), line)?;
            Ok(r.flagged())
        }
        Command::MassJoin(o) => {
            let cfg = o.resolve()?;
            let r = harness::run_mass_join(&cfg)?;
            let line = harness::summary_line(
                "mass-join",
                &[
                    ("private_size", r.private_size.to_string()),
                    ("median_completion_ms", fmt_opt(r.median_completion_ms)),
                    ("config", r.digest.clone()),
                ],
            );
            emit(&cfg, "mass_join", &r.csv(), line)?;
            Ok(r.flagged())
        }
        Command::Bandwidth(o) => {
            let cfg = o.resolve()?;
            let r = harness::run_bandwidth(&cfg)?;
            let line = harness::summary_line(
                "bandwidth",
                &[
                    ("timer", format!("{:?}", r.timer).to_lowercase()),
                    ("mean_bytes_per_s", format!("{:.1}", r.mean_bytes_per_sec)),
                    ("config", r.digest.clone()),
                ],
            );
            emit(&cfg, "bandwidth", &r.csv(), line)?;
            Ok(r.flagged())
        }
        Command::Revoke(o) => {
            let cfg = o.resolve()?;
            let r = harness::run_revocation(&cfg)?;
            let line = harness::summary_line(
                "revoke",
                &[
                    ("method", format!("{:?}", r.method).to_lowercase()),
                    ("bytes", r.bytes.to_string()),
                    ("reached", format!("{:.3}", r.reached_fraction)),
                    ("config", r.digest.clone()),
                ],
            );
            emit(&cfg, "revoke", &r.csv(), line)?;
            Ok(r.flagged())
        }
        Command::Model(o) => {
            let cfg = o.resolve()?;
            let r = harness::run_model(&cfg)?;
            let line = harness::summary_line(
                "model",
                &[
                    ("spearman", r.spearman.map_or_else(|| "none".to_string(), |s| format!("{s:.3}"))),
                    ("config", r.digest.clone()),
                ],
            );
            emit(&cfg, "model", &r.csv(), line)?;
            Ok(r.flagged())
        }
        Command::Heal(o) => {
            let cfg = o.resolve()?;
            let r = harness::run_partition_heal(&cfg)?;
            let line = harness::summary_line(
                "heal",
                &[("healed_in_time", r.healed_in_time().to_string()), ("config", r.digest.clone())],
            );
            emit(&cfg, "heal", &r.csv(), line)?;
            Ok(!r.healed_in_time())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("one or more runs were flagged");
            ExitCode::from(1)
        }
        Err(Error::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
