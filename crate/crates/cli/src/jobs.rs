//! The subcommands, each writing a self-describing run directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context};
use serde::{Deserialize, Serialize};
use thoughtlab::curriculum::{run_curriculum, CurriculumOptions, CurriculumSchedule};
use thoughtlab::data::{ingest_corpus, Tokenizer};
use thoughtlab::distill::{run_distillation, DistillMetrics, DistillOptions, DistillPair, TeacherCache};
use thoughtlab::eval::{evaluate_suite, read_dataset, EvalReport, InferenceMode};
use thoughtlab::latency::{measure_generation, measure_ttft, render_table, LatencyReport, Protocol};
use thoughtlab::model::Checkpoint;
use thoughtlab::rl::MetricsRecord;
use thoughtlab::thought::{trace_sequence, Decoding, ThoughtConfig, TraceRecord};

use crate::config::RunConfig;

pub const VERSION: &str = concat!("thoughtlab ", env!("CARGO_PKG_VERSION"));
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STUDENT_LABEL: &str = "ntp-student";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub checkpoint: PathBuf,
    pub modes: Vec<InferenceMode>,
    pub datasets: Vec<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchJob {
    pub checkpoint: PathBuf,
    pub modes: Vec<InferenceMode>,
    pub ttft_prefix: usize,
    /// (prefix length, generated tokens) cells for the full-decode timing.
    pub grid: Vec<(usize, usize)>,
    pub protocol: Protocol,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceJob {
    pub checkpoint: PathBuf,
    pub text: String,
    pub thought: ThoughtConfig,
    /// Sample thoughts with this seed instead of decoding greedily.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_weight: Option<f64>,
    pub output_dir: PathBuf,
}

/// A serialized invocation; `config.toml` in every run directory holds one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Job {
    Train(RunConfig),
    Distill(RunConfig),
    Eval(EvalJob),
    Bench(BenchJob),
    Trace(TraceJob),
}

impl Job {
    pub fn output_dir(&self) -> &Path {
        match self {
            Job::Train(c) | Job::Distill(c) => &c.output_dir,
            Job::Eval(j) => &j.output_dir,
            Job::Bench(j) => &j.output_dir,
            Job::Trace(j) => &j.output_dir,
        }
    }

    pub fn set_output_dir(&mut self, dir: PathBuf) {
        match self {
            Job::Train(c) | Job::Distill(c) => c.output_dir = dir,
            Job::Eval(j) => j.output_dir = dir,
            Job::Bench(j) => j.output_dir = dir,
            Job::Trace(j) => j.output_dir = dir,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("job serializes")
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).context("parsing job config")
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match self {
            Job::Train(c) => c.validate(false),
            Job::Distill(c) => c.validate(true),
            Job::Eval(j) => {
                let mut p = Vec::new();
                if !j.checkpoint.is_file() {
                    p.push(format!("checkpoint: {} does not exist", j.checkpoint.display()));
                }
                if j.modes.is_empty() {
                    p.push("modes: none given".to_string());
                }
                if j.datasets.is_empty() {
                    p.push("datasets: none given".to_string());
                }
                for d in &j.datasets {
                    if !d.is_file() {
                        p.push(format!("datasets: {} does not exist", d.display()));
                    }
                }
                problems(p)
            }
            Job::Bench(j) => {
                let mut p = Vec::new();
                if !j.checkpoint.is_file() {
                    p.push(format!("checkpoint: {} does not exist", j.checkpoint.display()));
                }
                if j.modes.is_empty() {
                    p.push("modes: none given".to_string());
                }
                if let Err(e) = j.protocol.validate() {
                    p.push(format!("protocol: {e}"));
                }
                problems(p)
            }
            Job::Trace(j) => {
                let mut p = Vec::new();
                if !j.checkpoint.is_file() {
                    p.push(format!("checkpoint: {} does not exist", j.checkpoint.display()));
                }
                if j.text.is_empty() {
                    p.push("text: empty".to_string());
                }
                if let Err(e) = j.thought.validate() {
                    p.push(format!("thought: {e}"));
                }
                problems(p)
            }
        }
    }
}

fn problems(p: Vec<String>) -> anyhow::Result<()> {
    if p.is_empty() {
        Ok(())
    } else {
        bail!("invalid config:\n  {}", p.join("\n  "))
    }
}

/// Creates the run directory and writes the config and version before any work.
fn prepare(job: &Job, force: bool) -> anyhow::Result<PathBuf> {
    job.validate()?;
    let dir = job.output_dir().to_path_buf();
    let cfg = dir.join(CONFIG_FILE);
    if cfg.exists() && !force {
        bail!("{} already holds a run; pass --force or pick another directory", dir.display());
    }
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("reports"))?;
    fs::write(&cfg, job.to_toml())?;
    fs::write(dir.join("VERSION"), format!("{VERSION}\n"))?;
    Ok(dir)
}

/// What a finished job produced.
#[derive(Debug, Default)]
pub struct JobOutput {
    pub checkpoints: Vec<PathBuf>,
    pub summary: String,
}

pub fn execute(job: &Job, force: bool) -> anyhow::Result<JobOutput> {
    let dir = prepare(job, force)?;
    match job {
        Job::Train(c) => train(c, &dir),
        Job::Distill(c) => distill(c, &dir),
        Job::Eval(j) => eval(j, &dir),
        Job::Bench(j) => bench(j, &dir),
        Job::Trace(j) => trace(j, &dir),
    }
}

fn load_corpus(c: &RunConfig) -> anyhow::Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
    let seqs: Vec<Vec<u32>> = ingest_corpus(&c.data.corpus, c.data.seq_len, c.seed)?
        .into_iter()
        .map(|s| s.tokens)
        .collect();
    let v = c.data.validation_sequences;
    ensure!(
        v < seqs.len(),
        "data.validation_sequences: {v} leaves nothing to train on out of {} windows",
        seqs.len()
    );
    let (train, val) = seqs.split_at(seqs.len() - v);
    Ok((train.to_vec(), val.to_vec()))
}

fn train(c: &RunConfig, dir: &Path) -> anyhow::Result<JobOutput> {
    let (corpus, val) = load_corpus(c)?;
    let schedule = c
        .curriculum
        .clone()
        .unwrap_or_else(|| CurriculumSchedule::single(c.thought.n_thought, c.thought.m_ahead, c.train.total_steps));
    let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    let ckpt_dir = dir.join("checkpoints");
    let result = run_curriculum(
        &c.model,
        None,
        &schedule,
        &corpus,
        &c.train,
        &c.thought,
        CurriculumOptions {
            checkpoint_dir: Some(&ckpt_dir),
            validation: (!val.is_empty()).then_some(val.as_slice()),
            eval_every: c.data.eval_every,
            metrics_out: Some(&mut metrics),
        },
    );
    metrics.flush()?;
    let stages = result?;
    let mut out = JobOutput::default();
    for s in &stages {
        let first = s.metrics.iter().find_map(|m| m.val_nll);
        let last = s.metrics.iter().rev().find_map(|m| m.val_nll);
        out.summary += &format!(
            "stage {}: {} steps, val_nll {} -> {}\n",
            s.checkpoint.label,
            s.metrics.len(),
            fmt_opt(first),
            fmt_opt(last)
        );
        out.checkpoints.extend(s.path.clone());
    }
    if let (Some(last), false) = (stages.last(), c.eval_datasets.is_empty()) {
        let tag = last.checkpoint.thought.expect("stage checkpoints are tagged");
        let modes = vec![
            InferenceMode::Ntp,
            InferenceMode::Thought {
                config: ThoughtConfig {
                    n_thought: tag.n_thought,
                    m_ahead: tag.m_ahead,
                    ..c.thought.clone()
                },
                fixed_weight: None,
            },
        ];
        out.summary += &evaluate_into(&last.checkpoint, &modes, &c.eval_datasets, dir, false)?;
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

fn distill(c: &RunConfig, dir: &Path) -> anyhow::Result<JobOutput> {
    let teacher_path = c.distill.teacher.as_ref().ok_or_else(|| anyhow!("distill.teacher is not set"))?;
    let teacher = Checkpoint::load(teacher_path).with_context(|| format!("loading {}", teacher_path.display()))?;
    ensure!(
        teacher.model.config.vocab_size == c.model.vocab_size,
        "teacher vocabulary {} does not match the run config",
        teacher.model.config.vocab_size
    );
    let mut pair = DistillPair::new(teacher)?;
    let (corpus, val) = load_corpus(c)?;
    let cache_path = dir.join("teacher-cache.bin");
    let mut cache = TeacherCache::open(&cache_path, pair.teacher_hash())?;
    let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    let result = run_distillation(
        &mut pair,
        &corpus,
        &c.distill_config(),
        DistillOptions {
            cache: Some(&mut cache),
            validation: (!val.is_empty()).then_some(val.as_slice()),
            eval_every: c.data.eval_every,
            metrics_out: Some(&mut metrics),
        },
    );
    metrics.flush()?;
    let outcome = result?;
    cache.save(&cache_path)?;
    let path = dir.join("checkpoints").join(format!("{STUDENT_LABEL}.ckpt"));
    let ckpt = Checkpoint::new(outcome.student, None, STUDENT_LABEL);
    ckpt.save(&path)?;
    let last = outcome.metrics.iter().rev().find_map(|m| m.val_nll);
    let mut summary = format!(
        "distill from {}: {} steps, student val_nll {} -> {}\n",
        pair.teacher.label,
        outcome.metrics.len(),
        fmt_opt(outcome.initial_val_nll),
        fmt_opt(last)
    );
    if !c.eval_datasets.is_empty() {
        summary += &evaluate_into(&ckpt, &[InferenceMode::Ntp], &c.eval_datasets, dir, false)?;
    }
    Ok(JobOutput {
        checkpoints: vec![path],
        summary,
    })
}

/// Rejects thought modes on checkpoints that were never trained with thoughts.
pub fn check_mode(ckpt: &Checkpoint, mode: &InferenceMode) -> anyhow::Result<()> {
    if let InferenceMode::Thought { config, .. } = mode {
        ensure!(
            ckpt.thought.is_some(),
            "checkpoint '{}' has no thought regime; it only supports ntp mode, not {}",
            ckpt.label,
            config.tag()
        );
        config.validate()?;
    }
    Ok(())
}

fn dataset_stem(p: &Path) -> String {
    p.file_stem().map_or("dataset".to_string(), |s| s.to_string_lossy().into_owned())
}

fn evaluate_into(
    ckpt: &Checkpoint,
    modes: &[InferenceMode],
    datasets: &[PathBuf],
    dir: &Path,
    as_metrics: bool,
) -> anyhow::Result<String> {
    for m in modes {
        check_mode(ckpt, m)?;
    }
    let mut lines = String::new();
    let mut metrics = if as_metrics {
        Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
    } else {
        None
    };
    for d in datasets {
        let items = read_dataset(d).with_context(|| format!("reading {}", d.display()))?;
        let stem = dataset_stem(d);
        for m in modes {
            let report: EvalReport = evaluate_suite(&ckpt.model, m, &items)?;
            let name = format!("eval-{stem}-{}.json", m.label());
            fs::write(dir.join("reports").join(&name), serde_json::to_string_pretty(&report)?)?;
            let line = format!("{stem} {}", report.summary_line());
            if let Some(w) = metrics.as_mut() {
                let rec = serde_json::json!({
                    "dataset": stem,
                    "mode": report.mode,
                    "mean_normalized_acc": report.mean_normalized_acc,
                    "argmax_accuracy": report.argmax_accuracy,
                    "items": report.items,
                    "skipped": report.skipped,
                    "degenerate": report.degenerate,
                    "ties": report.ties,
                });
                writeln!(w, "{rec}")?;
            }
            lines += &line;
            lines.push('\n');
        }
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    Ok(lines)
}

fn eval(j: &EvalJob, dir: &Path) -> anyhow::Result<JobOutput> {
    let ckpt = Checkpoint::load(&j.checkpoint).with_context(|| format!("loading {}", j.checkpoint.display()))?;
    let summary = evaluate_into(&ckpt, &j.modes, &j.datasets, dir, true)?;
    Ok(JobOutput {
        checkpoints: Vec::new(),
        summary,
    })
}

/// Deterministic filler prefix of printable bytes.
pub fn bench_prefix(len: usize) -> Vec<u32> {
    Tokenizer.encode(&"the quick brown fox counts 1+2=3 and (()) again. ".repeat(len / 40 + 1))[..len].to_vec()
}

fn bench(j: &BenchJob, dir: &Path) -> anyhow::Result<JobOutput> {
    let ckpt = Checkpoint::load(&j.checkpoint).with_context(|| format!("loading {}", j.checkpoint.display()))?;
    let model = &ckpt.model;
    let max = model.config.max_seq_len;
    for m in &j.modes {
        check_mode(&ckpt, m)?;
        let extra = match m {
            InferenceMode::Ntp => 0,
            InferenceMode::Thought { config, .. } => config.n_thought + 1,
        };
        for &(p, g) in j.grid.iter().chain(std::iter::once(&(j.ttft_prefix, 1))) {
            ensure!(
                p + g + extra <= max,
                "mode {} at prefix {p} + {g} generated tokens needs {} positions, the checkpoint has {max}",
                m.label(),
                p + g + extra
            );
        }
    }
    let mut reports: Vec<LatencyReport> = Vec::new();
    let ttft_prefix = bench_prefix(j.ttft_prefix);
    for m in &j.modes {
        reports.push(measure_ttft(model, m, &ttft_prefix, &j.protocol)?);
    }
    for &(p, g) in &j.grid {
        let prefix = bench_prefix(p);
        for m in &j.modes {
            reports.push(measure_generation(model, m, &prefix, g, &j.protocol)?);
        }
    }
    let mut w = BufWriter::new(File::create(dir.join("reports").join("latency.jsonl"))?);
    for r in &reports {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    let table = render_table(&reports);
    fs::write(dir.join("reports").join("latency.txt"), &table)?;
    Ok(JobOutput {
        checkpoints: Vec::new(),
        summary: table,
    })
}

fn trace(j: &TraceJob, dir: &Path) -> anyhow::Result<JobOutput> {
    let ckpt = Checkpoint::load(&j.checkpoint).with_context(|| format!("loading {}", j.checkpoint.display()))?;
    let mode = InferenceMode::Thought {
        config: j.thought.clone(),
        fixed_weight: j.fixed_weight,
    };
    check_mode(&ckpt, &mode)?;
    let tokens = Tokenizer.encode(&j.text);
    let decoding = match j.sample_seed {
        Some(seed) => Decoding::Sample { seed },
        None => Decoding::Greedy,
    };
    let records: Vec<TraceRecord> = trace_sequence(&ckpt.model, &tokens, &j.thought, decoding, mode.mixing())?;
    let mut text = String::new();
    for r in &records {
        text += &r.to_json();
        text.push('\n');
    }
    fs::write(dir.join(METRICS_FILE), &text)?;
    Ok(JobOutput {
        checkpoints: Vec::new(),
        summary: text,
    })
}

/// Outcome of re-running a run directory.
#[derive(Debug)]
pub struct Replay {
    pub original: PathBuf,
    pub replay: PathBuf,
    pub mismatches: Vec<String>,
}

impl Replay {
    pub fn identical(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-executes the job serialized in `dir` into `out` and compares metrics
/// (all fields except wall time) and checkpoint bytes.
pub fn rerun(dir: &Path, out: &Path, force: bool) -> anyhow::Result<Replay> {
    let mut job = Job::load(dir)?;
    if matches!(job, Job::Bench(_)) {
        bail!("latency measurements are not reproducible; re-run bench directly");
    }
    job.set_output_dir(out.to_path_buf());
    execute(&job, force)?;
    let mut mismatches = compare_metrics(&job, &dir.join(METRICS_FILE), &out.join(METRICS_FILE))?;
    let ckpts = |d: &Path| -> anyhow::Result<Vec<String>> {
        let mut v: Vec<String> = fs::read_dir(d.join("checkpoints"))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        Ok(v)
    };
    let (a, b) = (ckpts(dir)?, ckpts(out)?);
    if a != b {
        mismatches.push(format!("checkpoint sets differ: {a:?} vs {b:?}"));
    }
    for name in a.iter().filter(|n| b.contains(n)) {
        if fs::read(dir.join("checkpoints").join(name))? != fs::read(out.join("checkpoints").join(name))? {
            mismatches.push(format!("checkpoint {name} differs"));
        }
    }
    Ok(Replay {
        original: dir.to_path_buf(),
        replay: out.to_path_buf(),
        mismatches,
    })
}

fn compare_metrics(job: &Job, a: &Path, b: &Path) -> anyhow::Result<Vec<String>> {
    let (ta, tb) = (fs::read_to_string(a)?, fs::read_to_string(b)?);
    let (la, lb): (Vec<&str>, Vec<&str>) = (ta.lines().collect(), tb.lines().collect());
    let mut out = Vec::new();
    if la.len() != lb.len() {
        out.push(format!("{} metric lines vs {}", la.len(), lb.len()));
    }
    for (i, (x, y)) in la.iter().zip(&lb).enumerate() {
        let same = match job {
            Job::Train(_) => {
                let (x, y): (MetricsRecord, MetricsRecord) = (serde_json::from_str(x)?, serde_json::from_str(y)?);
                x.same_values(&y)
            }
            Job::Distill(_) => {
                let (x, y): (DistillMetrics, DistillMetrics) = (serde_json::from_str(x)?, serde_json::from_str(y)?);
                x.same_values(&y)
            }
            _ => x == y,
        };
        if !same {
            out.push(format!("metrics line {} differs", i + 1));
        }
    }
    Ok(out)
}
