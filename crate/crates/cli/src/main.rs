use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modforge_core::data::{self, SyntheticSpec};
use modforge_core::harness::{self, ExperimentConfig, RunManifest};
use modforge_core::Result;

#[derive(Parser)]
#[command(name = "modforge", version, about = "Multi-modal gradient modulation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Generate {
        /// TOML or JSON spec file, or `builtin:<name>`.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's probe interval (epochs; 0 disables).
        #[arg(long)]
        probe_every: Option<usize>,
    },
    /// Build a comparison table from run manifests.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chart a per-epoch metrics CSV as SVG.
    Plot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_spec(spec: &str) -> Result<SyntheticSpec> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return data::benchmark(name);
    }
    SyntheticSpec::load(Path::new(spec))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out } => {
            let spec = read_spec(&spec)?;
            let dataset = data::generate(&spec)?;
            data::format::save(&dataset, &out)?;
            let dims: Vec<String> = dataset
                .modality_names()
                .iter()
                .zip(dataset.dims())
                .map(|(n, d)| format!("{n}:{d}"))
                .collect();
            println!(
                "wrote {}: N={} K={} dims={}",
                out.display(),
                dataset.num_samples(),
                dataset.num_classes(),
                dims.join(",")
            );
        }
        Command::Run { config, probe_every } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply_seed_env()?;
            if let Some(n) = probe_every {
                cfg.probe_every = n;
            }
            let manifest = harness::run_experiment(&cfg)?;
            println!(
                "{} {}: acc {:.4} ± {:.4} over {} seeds -> {}",
                manifest.method,
                manifest.fusion,
                manifest.aggregate.acc.mean,
                manifest.aggregate.acc.std,
                manifest.seeds.len(),
                cfg.output_dir.join(harness::MANIFEST_FILE).display()
            );
        }
        Command::Compare { runs, out } => {
            let manifests = runs.iter().map(|p| RunManifest::load(p)).collect::<Result<Vec<_>>>()?;
            let table = harness::comparison_table(&manifests)?;
            std::fs::write(&out, table)?;
            println!("wrote {} ({} rows)", out.display(), manifests.len());
        }
        Command::Plot { run, out } => {
            let text = std::fs::read_to_string(&run)?;
            std::fs::write(&out, harness::plot_csv(&text)?)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
