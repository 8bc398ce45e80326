use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdbc_core::experiment::{
    analyze, collect_run_dirs, load_config, print_defaults, read_best_trials, replay, run_config,
    run_experiment, write_trajectory, AnalyzeOptions, ExperimentError, GenomeFile,
};

#[derive(Parser)]
#[command(
    name = "sdbc",
    version,
    about = "Evolve swarm controllers with novelty search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more evolutionary runs.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of independent runs (seeds seed..seed+runs).
        #[arg(long)]
        runs: Option<usize>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the configured method.
        #[arg(long)]
        method: Option<String>,
        /// Overrides the configured task.
        #[arg(long)]
        task: Option<String>,
    },
    /// Re-run a saved genome for one trial and dump its trajectory.
    Replay {
        genome: PathBuf,
        /// Run directory whose config supplies the task parameters.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trial seed; defaults to the first recorded trial of the run.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate finished runs into curves, tests, MI tables and SOM maps.
    Analyze {
        /// Run directories or directories containing them.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Print the default configuration.
    PrintDefaults,
}

fn env_with(extra: Vec<(&str, String)>) -> Vec<(String, String)> {
    let mut vars: Vec<(String, String)> = std::env::vars().collect();
    vars.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
    vars
}

fn quoted(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run {
            config,
            runs,
            parallel,
            seed,
            out,
            method,
            task,
        } => {
            // command-line flags take precedence over both the file and the environment
            let mut extra = Vec::new();
            if let Some(r) = runs {
                extra.push(("SDBC_RUNS", r.to_string()));
            }
            if let Some(s) = seed {
                extra.push(("SDBC_SEED", s.to_string()));
            }
            if let Some(o) = out {
                extra.push(("SDBC_OUTPUT", quoted(&o.to_string_lossy())));
            }
            if let Some(m) = method {
                extra.push(("SDBC_METHOD", quoted(&m)));
            }
            if let Some(t) = task {
                extra.push(("SDBC_TASK", quoted(&t)));
            }
            let mut vars = env_with(Vec::new());
            vars.retain(|(k, _)| !extra.iter().any(|(e, _)| e == k));
            vars.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
            let cfg = load_config(config.as_deref(), vars)?;
            for s in run_experiment(&cfg, parallel)? {
                println!("{}\tbest_fitness={}", s.dir.display(), s.best_fitness);
            }
        }
        Command::Replay {
            genome,
            run,
            config,
            seed,
            out,
        } => {
            let g = GenomeFile::read(&genome)?;
            let run_dir = run.or_else(|| genome.parent().map(PathBuf::from));
            let cfg = match (&config, &run_dir) {
                (Some(c), _) => load_config(Some(c), env_with(Vec::new()))?,
                (None, Some(d)) if d.join("config.toml").exists() => run_config(d)?,
                _ => load_config(None, env_with(Vec::new()))?,
            };
            let seed = match (seed, &run_dir) {
                (Some(s), _) => s,
                (None, Some(d)) if d.join("best.csv").exists() => {
                    read_best_trials(d)?.first().map_or(0, |t| t.seed)
                }
                _ => 0,
            };
            let r = replay(&g, &cfg.tasks, seed)?;
            let out = out.unwrap_or_else(|| PathBuf::from("trajectory.csv"));
            write_trajectory(&out, &r.trajectory)?;
            println!(
                "seed={seed}\tfitness={}\tsteps={}\ttrajectory={}",
                r.fitness,
                r.steps,
                out.display()
            );
        }
        Command::Analyze {
            dirs,
            out,
            parallel,
        } => {
            let dirs = collect_run_dirs(&dirs)?;
            let pool = rayon_pool(parallel);
            let summary = pool.install(|| analyze(&dirs, &AnalyzeOptions::default(), &out))?;
            for (dir, reason) in &summary.skipped {
                eprintln!("skipped {}: {reason}", dir.display());
            }
            for t in &summary.tasks {
                for (m, values) in &t.best {
                    println!(
                        "{}\t{m}\truns={}\tmedian_best={}",
                        t.task,
                        values.len(),
                        t.median_best(*m).unwrap_or(f64::NAN)
                    );
                }
            }
            println!("wrote {}", out.display());
        }
        Command::PrintDefaults => print!("{}", print_defaults()),
    }
    Ok(())
}

fn rayon_pool(threads: usize) -> sdbc_core::experiment::ThreadPool {
    sdbc_core::experiment::thread_pool(threads)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
