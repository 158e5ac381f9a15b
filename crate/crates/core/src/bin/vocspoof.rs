use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vocspoof::pipeline::{run_preset, run_stage, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "vocspoof", version, about = "Toy vocoded-spoof countermeasure experiments")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "runs")]
    run_dir: PathBuf,
    /// Overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value`, applied after the config file; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Synth,
    Features,
    Vocode,
    Pretrain,
    Continual,
    Finetune,
    Score,
    Eer,
    Histogram,
    Trajectory,
    /// Full stage chain of a preset.
    Preset {
        #[command(subcommand)]
        action: PresetAction,
    },
    /// Print the resolved configuration, or its difference from another preset.
    Config {
        #[arg(long)]
        diff: Option<String>,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    Run { name: String },
}

fn load(cli: &Cli, preset: Option<&str>) -> vocspoof::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::read(p)?,
        None => ExperimentConfig::new(),
    };
    if let Some(name) = preset {
        cfg.set("run.preset", name)?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("train.seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> vocspoof::Result<()> {
    let stage = match &cli.command {
        Command::Synth => Stage::Synth,
        Command::Features => Stage::Features,
        Command::Vocode => Stage::Vocode,
        Command::Pretrain => Stage::Pretrain,
        Command::Continual => Stage::Continual,
        Command::Finetune => Stage::Finetune,
        Command::Score => Stage::Score,
        Command::Eer => Stage::Eer,
        Command::Histogram => Stage::Histogram,
        Command::Trajectory => Stage::Trajectory,
        Command::Preset {
            action: PresetAction::Run { name },
        } => {
            let cfg = load(cli, Some(name))?;
            let rep = run_preset(&cfg, &cli.run_dir)?;
            print!("{}", rep.eer.to_text());
            print!("{}", rep.table_row());
            return Ok(());
        }
        Command::Config { diff } => {
            let cfg = load(cli, None)?;
            match diff {
                None => print!("{}", cfg.to_resolved_text()),
                Some(other) => {
                    let mut o = cfg.clone();
                    o.set("run.preset", other)?;
                    for (k, a, b) in cfg.diff(&o) {
                        println!("{k}\t{a}\t{b}");
                    }
                }
            }
            return Ok(());
        }
    };
    let cfg = load(cli, None)?;
    let s = run_stage(stage, &cfg, &cli.run_dir)?;
    print!("{}", s.to_text());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
