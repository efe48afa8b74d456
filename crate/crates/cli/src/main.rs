use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rnn_timescales::pipeline::{cmd_compare, PipelineError, Run, RunConfig};

/// Map unit processing timescales in recurrent language models.
#[derive(Parser)]
#[command(name = "rnnts", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the configured corpus.
    Train(RunArgs),
    /// Extract intact/random context trials.
    Trials(RunArgs),
    /// Run the context experiment and fit per-unit timescales.
    MapTimescales(RunArgs),
    /// Strong projections, controllers and integrators.
    Connectivity(RunArgs),
    /// Ablate controller and integrator groups.
    Ablate(RunArgs),
    /// Correlate two timescale tables.
    Compare {
        map_a: PathBuf,
        map_b: PathBuf,
        /// Scatter CSV to write.
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Every stage in order, plus a manifest.
    Pipeline(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config field, e.g. `--set epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or("expected KEY=VALUE")?;
    let (k, v) = (k.trim(), v.trim());
    // Paths given on the command line are relative to the working directory.
    let v = if matches!(k, "out_dir" | "corpus" | "model") && v != "none" {
        std::path::absolute(Path::new(v))
            .map_err(|e| e.to_string())?
            .display()
            .to_string()
    } else {
        v.to_string()
    };
    Ok((k.to_string(), v))
}

impl RunArgs {
    fn run(&self) -> Result<Run, PipelineError> {
        let cfg = RunConfig::from_file_with(&self.config, &self.overrides)?;
        Ok(Run::new(cfg, self.force))
    }
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Train(a) => {
            let curve = a.run()?.cmd_train()?;
            if let Some(last) = curve.last() {
                let ppl = last.valid_ppl.map_or("n/a".to_string(), |p| format!("{p:.3}"));
                println!(
                    "epoch {}: train loss {:.4}, valid ppl {ppl}",
                    last.epoch, last.train_loss
                );
            }
        }
        Command::Trials(a) => {
            let set = a.run()?.cmd_trials()?;
            println!("{} {} trials", set.trials.len(), set.mode);
        }
        Command::MapTimescales(a) => {
            let s = a.run()?.cmd_map_timescales()?;
            println!(
                "layer {}: {} of {} units included ({} censored)",
                s.layer, s.n_included, s.n_units, s.n_censored
            );
            if let Some(d) = &s.distribution {
                println!(
                    "median {} mean {:.2}; short {:.3} long {:.3}",
                    d.median, d.mean, d.fraction_short, d.fraction_long
                );
            }
            if let Some(t) = &s.hierarchy_test {
                println!("bottom > top layer correlation: p = {:.3e}", t.p_greater);
            }
        }
        Command::Connectivity(a) => {
            let s = a.run()?.cmd_connectivity()?;
            println!(
                "{} strong projections; main core k = {} with {} controllers; {} integrators",
                s.n_strong, s.k_max, s.n_controllers, s.n_integrators
            );
        }
        Command::Ablate(a) => {
            for r in a.run()?.cmd_ablate()? {
                if let Some(st) = &r.stats {
                    println!(
                        "{} [{}]: mean dP {:.4e}, d = {:.3}, p = {:.3e}",
                        r.group, r.condition, r.mean_delta_p, st.cohens_d, st.p_value
                    );
                }
            }
        }
        Command::Compare {
            map_a,
            map_b,
            out,
            force,
        } => {
            let c = cmd_compare(&map_a, &map_b, &out, force)?;
            println!("r = {:.4} over {} units", c.r, c.pairs.len());
        }
        Command::Pipeline(a) => {
            let m = a.run()?.cmd_pipeline()?;
            println!("wrote {} outputs; config sha256 {}", m.outputs.len(), m.config_sha256);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
