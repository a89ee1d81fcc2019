//! `kato`: run, sweep and report constrained transfer optimization runs.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a configuration
//! error.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kato_core::benchmarks::build_fom_spec;
use kato_core::engine::{build_source, run_kato, RunConfig, RunResult};
use kato_core::gp::FitConfig;
use kato_core::transfer::SourceCheckpoint;
use serde_json::json;

use config::{load_problem, Config};
use report::{speedup, write_plot, write_speedups, write_summary, Trace};

/// Marks an error as a configuration problem (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Core configuration errors become [`ConfigError`]s, everything else stays
/// a runtime error.
pub fn classify(e: kato_core::Error) -> anyhow::Error {
    match e {
        kato_core::Error::Config(msg) => ConfigError(msg).into(),
        other => other.into(),
    }
}

#[derive(Parser)]
#[command(name = "kato", version, about = "Constrained Bayesian optimization with knowledge transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one optimization from a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a config over several seeds and summarize; with transfer on, a
    /// transfer-off baseline is run for every seed as well.
    Sweep {
        config: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a problem and save fitted source GPs for transfer runs.
    MakeSource {
        #[command(flatten)]
        problem: ProblemArg,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Adam steps per fit.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the FOM normalization of a problem from uniform samples.
    FomSpec {
        #[command(flatten)]
        problem: ProblemArg,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize CSV traces; with --baseline, also compute speedups pairwise.
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        baseline: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ProblemArg {
    /// Name of a shipped problem.
    #[arg(long)]
    problem: Option<String>,
    /// Path of a problem spec file.
    #[arg(long)]
    problem_file: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, overrides } => {
            let mut cfg = Config::load(&config)?;
            if let Some(s) = overrides.seed {
                cfg.engine.seed = s;
            }
            if let Some(n) = overrides.iterations {
                cfg.engine.iterations = n;
            }
            if let Some(o) = overrides.out {
                cfg.output.dir = o;
            }
            let source = cfg.source()?;
            let dir = cfg.output.dir.clone();
            let r = run_one(&cfg, source.as_ref(), &dir)?;
            println!(
                "{} evaluations, best {}",
                r.rows.len(),
                r.state.incumbent.map_or("none (no feasible point)".to_string(), |v| v.to_string())
            );
            Ok(())
        }
        Command::Sweep {
            config,
            seeds,
            iterations,
            out,
        } => sweep(&config, &seeds, iterations, out),
        Command::MakeSource {
            problem,
            samples,
            seed,
            steps,
            restarts,
            out,
        } => {
            let p = load_problem(problem.problem.as_deref(), problem.problem_file.as_deref())?;
            let fit = FitConfig {
                steps,
                restarts,
                ..Default::default()
            };
            let c = build_source(&p, samples, seed, &fit).map_err(classify)?;
            c.save(&out).map_err(classify)?;
            println!("saved {} source GPs for {} to {}", c.sources.len(), p.name, out.display());
            Ok(())
        }
        Command::FomSpec {
            problem,
            samples,
            seed,
            out,
        } => {
            let p = load_problem(problem.problem.as_deref(), problem.problem_file.as_deref())?;
            let spec = build_fom_spec(&p, samples, seed).map_err(classify)?;
            write_file(&out, serde_json::to_string_pretty(&spec)?)?;
            println!("saved FOM spec for {} to {}", p.name, out.display());
            Ok(())
        }
        Command::Report { traces, baseline, out } => {
            if !baseline.is_empty() && baseline.len() != traces.len() {
                return Err(ConfigError(format!(
                    "{} traces but {} baselines; they are paired by position",
                    traces.len(),
                    baseline.len()
                ))
                .into());
            }
            std::fs::create_dir_all(&out)?;
            let ts = traces.iter().map(|p| Trace::read(p)).collect::<Result<Vec<_>>>()?;
            write_summary(&out.join("summary.csv"), &ts)?;
            for (p, t) in traces.iter().zip(&ts) {
                println!("{}: {} evaluations, best {:?}", p.display(), t.len(), t.best());
            }
            if !baseline.is_empty() {
                let bs = baseline.iter().map(|p| Trace::read(p)).collect::<Result<Vec<_>>>()?;
                let rows: Vec<_> = bs
                    .iter()
                    .zip(&ts)
                    .enumerate()
                    .map(|(i, (b, t))| speedup(i.to_string(), b, t))
                    .collect();
                write_speedups(&out.join("speedup.csv"), &rows)?;
            }
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: String) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Runs `cfg` into `dir`: trace, plot data, resolved config and manifest.
fn run_one(cfg: &Config, source: Option<&SourceCheckpoint>, dir: &Path) -> Result<RunResult> {
    let problem = cfg.problem_spec()?;
    std::fs::create_dir_all(dir)?;
    let mut rc = RunConfig::new(problem.clone(), cfg.engine_config());
    rc.fom = cfg.fom_spec(&problem, &dir.join("cache"))?;
    rc.trace_path = Some(dir.join("trace.csv"));
    if cfg.output.checkpoint {
        rc.checkpoint_path = Some(dir.join("checkpoint.json"));
    }

    let mut resolved = cfg.clone();
    resolved.output.dir = dir.to_path_buf();
    write_file(&dir.join("config.resolved.toml"), resolved.to_toml()?)?;

    let result = run_kato(&rc, source).map_err(classify);
    let status = match &result {
        Ok(_) => json!("ok"),
        Err(e) => json!(format!("failed: {e:#}")),
    };
    let manifest = json!({
        "tool": "kato",
        "version": env!("CARGO_PKG_VERSION"),
        "problem": problem.name,
        "seed": cfg.engine.seed,
        "config": serde_json::to_value(&resolved)?,
        "source": source.map(|s| json!({"problem": s.problem, "metrics": s.metrics, "samples": s.sources[0].n()})),
        "fom": rc.fom,
        "status": status,
        "evaluations": result.as_ref().ok().map(|r| r.rows.len()),
        "best_objective": result.as_ref().ok().and_then(|r| r.state.incumbent),
        "best_point": result.as_ref().ok().and_then(|r| r.best_point.clone()),
        "best_metrics": result.as_ref().ok().and_then(|r| r.best_metrics.clone()),
        "outputs": ["trace.csv", "plot.csv", "config.resolved.toml"],
    });
    write_file(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let result = result?;
    write_plot(&dir.join("plot.csv"), &Trace::read(&dir.join("trace.csv"))?)?;
    Ok(result)
}

fn sweep(config: &Path, seeds: &[u64], iterations: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    if seeds.is_empty() {
        return Err(ConfigError("sweep needs at least one seed".into()).into());
    }
    let mut cfg = Config::load(config)?;
    if let Some(n) = iterations {
        cfg.engine.iterations = n;
    }
    let root = out.unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&root)?;
    cfg.problem_spec()?;
    let source = cfg.source()?;

    let mut baseline_cfg = cfg.clone();
    baseline_cfg.transfer.enabled = false;
    let mut arms = vec![("", &cfg, source.as_ref())];
    if cfg.transfer.enabled {
        arms.push(("baseline", &baseline_cfg, None));
    }

    let mut status = csv::Writer::from_path(root.join("seeds.csv"))?;
    status.write_record(["run", "seed", "status", "evaluations", "best"])?;
    let mut failed = 0;
    let mut traces: Vec<Vec<Option<Trace>>> = Vec::new();
    for (name, arm_cfg, src) in &arms {
        let mut arm_traces = Vec::new();
        for &seed in seeds {
            let mut c = (*arm_cfg).clone();
            c.engine.seed = seed;
            let dir = root.join(name).join(format!("seed_{seed}"));
            let label = if name.is_empty() { "main" } else { name };
            match run_one(&c, *src, &dir) {
                Ok(r) => {
                    status.write_record([
                        label.to_string(),
                        seed.to_string(),
                        "ok".into(),
                        r.rows.len().to_string(),
                        r.state.incumbent.map(|v| v.to_string()).unwrap_or_default(),
                    ])?;
                    arm_traces.push(Some(Trace::read(&dir.join("trace.csv"))?));
                }
                Err(e) => {
                    if e.downcast_ref::<ConfigError>().is_some() {
                        return Err(e);
                    }
                    eprintln!("seed {seed} ({label}) failed: {e:#}");
                    failed += 1;
                    status.write_record([label.to_string(), seed.to_string(), format!("failed: {e}"), String::new(), String::new()])?;
                    arm_traces.push(None);
                }
            }
        }
        let ok: Vec<Trace> = arm_traces.iter().flatten().cloned().collect();
        write_summary(&root.join(name).join("summary.csv"), &ok)?;
        traces.push(arm_traces);
    }
    status.flush()?;

    if traces.len() == 2 {
        let rows: Vec<_> = seeds
            .iter()
            .zip(traces[0].iter().zip(&traces[1]))
            .filter_map(|(s, (t, b))| Some(speedup(s.to_string(), b.as_ref()?, t.as_ref()?)))
            .collect();
        write_speedups(&root.join("speedup.csv"), &rows)?;
    }
    println!("{} runs written under {}", seeds.len() * arms.len() - failed, root.display());
    if failed > 0 {
        anyhow::bail!("{failed} of {} runs failed; see seeds.csv", seeds.len() * arms.len());
    }
    Ok(())
}
