use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use thoughtlab::data::{generate_synthetic_eval, toy_corpus, SyntheticKind};
use thoughtlab::eval::{write_dataset, InferenceMode};
use thoughtlab::latency::{Protocol, DEFAULT_GRID, DEFAULT_PREFIX};
use thoughtlab::thought::ThoughtConfig;
use thoughtlab_cli::jobs::{BenchJob, EvalJob, TraceJob};
use thoughtlab_cli::{execute, rerun, Job, RunConfig};

#[derive(Parser)]
#[command(name = "thoughtlab", version, about = "Train, distill, evaluate and time thought-augmented language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single stage or a curriculum from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Steps for a single-stage run.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Distill a thought-trained checkpoint into a plain next-token student.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Score multiple-choice datasets under one or more inference modes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `ntp`, `N-M`, or `N-M@W` to pin the base weight to W.
        #[arg(long = "mode", required = true)]
        modes: Vec<String>,
        #[arg(long = "dataset", required = true)]
        datasets: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Time first-token and full-decode latency.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "ntp,8-4,12-4,16-8")]
        modes: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_PREFIX)]
        ttft_prefix: usize,
        /// PREFIXxGENERATED cells, e.g. 256x128.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<String>>,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Dump the thought generated at every position of a text.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        /// Thought regime `N-M`.
        #[arg(long, default_value = "16-8")]
        thought: String,
        #[arg(long)]
        sample_seed: Option<u64>,
        #[arg(long)]
        fixed_weight: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Re-execute a run directory and compare its metrics bit for bit.
    Rerun {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Write synthetic data.
    Synth {
        #[command(subcommand)]
        what: Synth,
    },
    /// Print an example run config.
    ExampleConfig,
}

#[derive(Subcommand)]
enum Synth {
    /// A multiple-choice evaluation set as JSON lines.
    Eval {
        /// arithmetic, copy or brackets.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 5)]
        candidates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// A plain-text training corpus.
    Corpus {
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_regime(s: &str) -> anyhow::Result<ThoughtConfig> {
    let (n, m) = s.split_once('-').ok_or_else(|| anyhow!("thought regime '{s}' is not N-M"))?;
    Ok(ThoughtConfig::new(
        n.trim().parse().with_context(|| format!("n in '{s}'"))?,
        m.trim().parse().with_context(|| format!("m in '{s}'"))?,
    ))
}

fn parse_mode(s: &str) -> anyhow::Result<InferenceMode> {
    if s.eq_ignore_ascii_case("ntp") {
        return Ok(InferenceMode::Ntp);
    }
    let (regime, w) = match s.split_once('@') {
        Some((r, w)) => (r, Some(w.parse::<f64>().with_context(|| format!("weight in '{s}'"))?)),
        None => (s, None),
    };
    Ok(InferenceMode::Thought {
        config: parse_regime(regime)?,
        fixed_weight: w,
    })
}

fn parse_cell(s: &str) -> anyhow::Result<(usize, usize)> {
    let (p, g) = s.split_once('x').ok_or_else(|| anyhow!("grid cell '{s}' is not PREFIXxGENERATED"))?;
    Ok((p.parse()?, g.parse()?))
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    Ok(if p.is_absolute() { p.to_path_buf() } else { std::env::current_dir()?.join(p) })
}

fn run_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut c = RunConfig::load(path)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    if let Some(o) = out {
        c.output_dir = absolute(&o)?;
    }
    let base = match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) => absolute(p)?,
        None => std::env::current_dir()?,
    };
    Ok(c.resolve(&base))
}

fn run_job(job: Job, force: bool) -> anyhow::Result<()> {
    let out = execute(&job, force)?;
    print!("{}", out.summary);
    for c in &out.checkpoints {
        println!("checkpoint {}", c.display());
    }
    println!("run directory {}", job.output_dir().display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            steps,
            force,
        } => {
            let mut c = run_config(&config, out, seed)?;
            if let Some(s) = steps {
                c.train.total_steps = s;
            }
            run_job(Job::Train(c), force)
        }
        Command::Distill {
            config,
            teacher,
            out,
            seed,
            steps,
            force,
        } => {
            let mut c = run_config(&config, out, seed)?;
            if let Some(t) = teacher {
                c.distill.teacher = Some(absolute(&t)?);
            }
            if let Some(s) = steps {
                c.distill.steps = s;
            }
            run_job(Job::Distill(c), force)
        }
        Command::Eval {
            checkpoint,
            modes,
            datasets,
            out,
            force,
        } => run_job(
            Job::Eval(EvalJob {
                checkpoint: absolute(&checkpoint)?,
                modes: modes.iter().map(|m| parse_mode(m)).collect::<anyhow::Result<_>>()?,
                datasets: datasets.iter().map(|d| absolute(d)).collect::<anyhow::Result<_>>()?,
                output_dir: absolute(&out)?,
            }),
            force,
        ),
        Command::Bench {
            checkpoint,
            modes,
            ttft_prefix,
            grid,
            warmup,
            reps,
            out,
            force,
        } => {
            let grid = match grid {
                Some(g) => g.iter().map(|c| parse_cell(c)).collect::<anyhow::Result<_>>()?,
                None => DEFAULT_GRID.to_vec(),
            };
            run_job(
                Job::Bench(BenchJob {
                    checkpoint: absolute(&checkpoint)?,
                    modes: modes.iter().map(|m| parse_mode(m)).collect::<anyhow::Result<_>>()?,
                    ttft_prefix,
                    grid,
                    protocol: Protocol {
                        warmup,
                        repetitions: reps,
                    },
                    output_dir: absolute(&out)?,
                }),
                force,
            )
        }
        Command::Trace {
            checkpoint,
            text,
            thought,
            sample_seed,
            fixed_weight,
            out,
            force,
        } => run_job(
            Job::Trace(TraceJob {
                checkpoint: absolute(&checkpoint)?,
                text,
                thought: parse_regime(&thought)?,
                sample_seed,
                fixed_weight,
                output_dir: absolute(&out)?,
            }),
            force,
        ),
        Command::Rerun { dir, out, force } => {
            let out = out.unwrap_or_else(|| dir.join("rerun"));
            let r = rerun(&absolute(&dir)?, &absolute(&out)?, force)?;
            if r.identical() {
                println!("identical: {} and {}", r.original.display(), r.replay.display());
                Ok(())
            } else {
                bail!("re-run differs:\n  {}", r.mismatches.join("\n  "))
            }
        }
        Command::Synth { what } => match what {
            Synth::Eval {
                kind,
                items,
                candidates,
                seed,
                out,
            } => {
                let kind: SyntheticKind = kind.parse().map_err(|e: String| anyhow!(e))?;
                let data = generate_synthetic_eval(kind, items, candidates, seed);
                write_dataset(&out, &data)?;
                println!("{} items -> {}", data.len(), out.display());
                Ok(())
            }
            Synth::Corpus { bytes, seed, out } => {
                std::fs::write(&out, toy_corpus(bytes, seed))?;
                println!("{bytes} bytes -> {}", out.display());
                Ok(())
            }
        },
        Command::ExampleConfig => {
            print!("{}", RunConfig::example().to_toml());
            Ok(())
        }
    }
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
