use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use transmon_lru::engine::run_ensemble;
use transmon_lru::experiments::{
    analytics_table, emit_results, ensemble_table, render_table, run_parameter_sweep, run_rate_sweep,
    verify_oracles, ConfigFile, OutputFormat, RunMetadata, Table,
};
use transmon_lru::{Error, ErrorCategory, Result};

#[derive(Parser)]
#[command(name = "transmon-lru", version, about = "Leakage removal in disordered transmon arrays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trajectory ensemble and write its time series.
    Simulate(Common),
    /// Final leakage against the reset-channel rate.
    RateSweep(Common),
    /// Fitted decay times against disorder, hopping or array length.
    ParamSweep(Common),
    /// Evaluate the closed-form rates and times of a configuration.
    Analytics(Common),
    /// Compare closed forms with direct numerics.
    Verify {
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment description.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of trajectories.
    #[arg(long)]
    trajectories: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Result file; a `.meta.json` sidecar is written next to it. Without it
    /// the table goes to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

impl Common {
    fn load(&self) -> Result<ConfigFile> {
        let mut file = ConfigFile::load(&self.config)?;
        if let Some(s) = self.seed {
            file.simulation.seed = s;
        }
        if let Some(n) = self.trajectories {
            file.simulation.n_trajectories = n;
        }
        if let Some(t) = self.threads {
            file.simulation.threads = Some(t);
        }
        Ok(file)
    }

    fn format(&self) -> OutputFormat {
        match (self.format, &self.output) {
            (Some(f), _) => f.into(),
            (None, Some(p)) => OutputFormat::from_path(p).unwrap_or_default(),
            (None, None) => OutputFormat::Csv,
        }
    }

    fn write(&self, table: &Table, meta: RunMetadata) -> Result<()> {
        let format = self.format();
        match &self.output {
            Some(path) => {
                let side = emit_results(table, format, path, &meta)?;
                eprintln!("wrote {} and {}", path.display(), side.display());
            }
            None => print!("{}", render_table(table, format)?),
        }
        Ok(())
    }
}

/// Exit status on success paths; oracle failures count as numeric failures.
fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Simulate(c) => {
            let file = c.load()?;
            let cfg = file.simulation_config()?;
            let obs = run_ensemble(&cfg)?;
            let meta = RunMetadata::new("simulate", &file, cfg.master_seed, obs.n_trajectories_used)?;
            c.write(&ensemble_table(&obs), meta)?;
            Ok(0)
        }
        Command::RateSweep(c) => {
            let file = c.load()?;
            let spec = file.sweep_spec()?;
            let res = run_rate_sweep(&spec)?;
            if let Some(w) = res.minima_warning() {
                eprintln!("warning: {w}");
            }
            let mut meta = RunMetadata::new("rate-sweep", &file, spec.base.master_seed, res.n_trajectories)?;
            meta.notes = serde_json::json!({ "minimum_rates": res.minimum_rates() });
            c.write(&res.to_table(spec.base.lattice.hopping), meta)?;
            Ok(0)
        }
        Command::ParamSweep(c) => {
            let file = c.load()?;
            let spec = file.sweep_spec()?;
            let res = run_parameter_sweep(&spec)?;
            let failures: Vec<String> = res
                .rows
                .iter()
                .flat_map(|r| [&r.t_star, &r.t1, &r.t2].map(|f| (r.value, f.failure.clone())))
                .filter_map(|(v, f)| f.map(|m| format!("{v}: {m}")))
                .collect();
            let mut meta = RunMetadata::new("param-sweep", &file, spec.base.master_seed, res.n_trajectories)?;
            meta.notes = serde_json::json!({ "fit_failures": failures });
            c.write(&res.to_table(), meta)?;
            if !failures.is_empty() {
                return Err(Error::Fit(failures.join("; ")));
            }
            Ok(0)
        }
        Command::Analytics(c) => {
            let file = c.load()?;
            let cfg = file.simulation_config()?;
            let meta = RunMetadata::new("analytics", &file, cfg.master_seed, 0)?;
            c.write(&analytics_table(&cfg)?, meta)?;
            Ok(0)
        }
        Command::Verify { format } => {
            let checks = verify_oracles()?;
            match format {
                Format::Csv => {
                    let mut out = std::io::stdout().lock();
                    for c in &checks {
                        let _ = writeln!(
                            out,
                            "{} {} (value {:.6e}, reference {:.6e}, tolerance {:.1e})",
                            if c.passed { "PASS" } else { "FAIL" },
                            c.name,
                            c.value,
                            c.reference,
                            c.tolerance
                        );
                    }
                }
                Format::Json => println!("{}", serde_json::to_string_pretty(&checks)?),
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                eprintln!("error: {failed} oracle checks failed");
                return Ok(ErrorCategory::Numeric.exit_code() as u8);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
