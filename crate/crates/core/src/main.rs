use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use promptevo::instruction::Instruction;
use promptevo::objectives::ObjectiveCache;
use promptevo::runner::config::{build_evaluator, BackendChoice};
use promptevo::runner::{
    export_pareto, run, Archive, RunConfig, RunOptions, RunStatus, ARCHIVE_FILE, CONFIG_FILE,
};
use promptevo::{Error, InstructionId, Result};

#[derive(Parser)]
#[command(name = "promptevo", version, about = "Multi-objective evolution of task instructions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a run (or continue one with --resume).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        resume: bool,
    },
    /// Continue the run stored in an output directory.
    Resume {
        /// Output directory of the interrupted run.
        #[arg(long)]
        output: PathBuf,
        /// Raise the generation budget of the stored run.
        #[arg(long)]
        generations: Option<u32>,
        #[arg(long)]
        stop_after: Option<u32>,
    },
    /// Re-export the Pareto front of a finished run.
    Export {
        #[arg(long)]
        output: PathBuf,
        /// Destination directory (defaults to the run's output directory).
        #[arg(long)]
        to: Option<PathBuf>,
    },
    /// Score one instruction with the configured evaluator and scorer.
    EvalOne {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        definition: String,
        #[arg(long, default_value = "")]
        example: String,
    },
    /// Parse and check a config file.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    generations: Option<u32>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    no_guidance: bool,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Stop after this generation boundary; continue later with --resume.
    #[arg(long)]
    stop_after: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Http,
}

impl Overrides {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(n) = self.generations {
            config.generations = n;
        }
        if let Some(m) = self.population {
            config.population_size = m;
        }
        if self.no_guidance {
            config.guidance_enabled = false;
        }
        if let Some(b) = self.backend {
            config.gateway.backend = match b {
                Backend::Mock => BackendChoice::Mock,
                Backend::Http => BackendChoice::Http,
            };
        }
        if let Some(out) = &self.output {
            config.output_dir = out.clone();
        }
    }
}

fn load_stored_config(output: &Path) -> Result<RunConfig> {
    let path = output.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut config: RunConfig = serde_json::from_str(&text)?;
    config.output_dir = output.to_owned();
    Ok(config)
}

fn report(status: RunStatus) {
    match status {
        RunStatus::Completed(outcome) => {
            let frontier = outcome.archive.frontier();
            println!(
                "finished: {} archived instructions, {} on the frontier, outputs in {}",
                outcome.archive.len(),
                frontier.len(),
                outcome.output_dir.display()
            );
            for ind in frontier {
                let o = ind.objectives.expect("frontier members are evaluated");
                println!("{} {o} {:?}", ind.id(), ind.instruction.render());
            }
        }
        RunStatus::Stopped { generation } => {
            println!("stopped after generation {generation}; continue with `resume`");
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides, resume } => {
            let mut cfg = RunConfig::load(&config)?;
            overrides.apply(&mut cfg);
            cfg.validate()?;
            report(run(cfg, RunOptions { resume, stop_after: overrides.stop_after })?);
        }
        Command::Resume { output, generations, stop_after } => {
            let mut cfg = load_stored_config(&output)?;
            if let Some(n) = generations {
                cfg.generations = n;
            }
            cfg.validate()?;
            report(run(cfg, RunOptions { resume: true, stop_after })?);
        }
        Command::Export { output, to } => {
            let path = output.join(ARCHIVE_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let archive = Archive::from_jsonl(&text)?;
            let summary = export_pareto(&archive, to.as_deref().unwrap_or(&output))?;
            println!("{} frontier records", summary.frontier_records);
            for f in summary.files {
                println!("{}", f.display());
            }
        }
        Command::EvalOne { config, definition, example } => {
            let cfg = RunConfig::load(&config)?;
            let evaluator = build_evaluator(&cfg, ObjectiveCache::in_memory())?;
            let instr = Instruction::new(InstructionId(0), definition, example)?;
            let ev = evaluator.evaluate(&instr)?;
            println!(
                "{}",
                serde_json::json!({
                    "objectives": ev.objectives,
                    "degenerate": ev.degenerate,
                })
            );
        }
        Command::ValidateConfig { config } => {
            let cfg = RunConfig::load(&config)?;
            println!(
                "ok: task {:?}, M = {}, N = {}, {} seed instruction(s)",
                cfg.task_name,
                cfg.population_size,
                cfg.generations,
                cfg.seed_instructions.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
