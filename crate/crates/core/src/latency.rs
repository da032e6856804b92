//! Wall-clock latency of first-token and full-decode paths at batch size 1.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::eval::{generate, InferenceMode, OutputSampling};
use crate::model::Model;
use crate::tensor::Real;

pub const DEFAULT_PREFIX: usize = 256;
pub const DEFAULT_GRID: [(usize, usize); 4] = [(256, 128), (256, 256), (512, 256), (512, 512)];
const PUBLISHED: &str = include_str!("../fixtures/published_latency.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            warmup: 2,
            repetitions: 5,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 2 || self.repetitions < 5 {
            return Err(invalid(format!(
                "need at least 2 warm-up and 5 timed repetitions, got {} and {}",
                self.warmup, self.repetitions
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub metric: String,
    pub mode: String,
    pub n_thought: Option<usize>,
    pub m_ahead: Option<usize>,
    pub prefix_len: usize,
    pub generate_len: usize,
    pub warmup: usize,
    pub reps_s: Vec<f64>,
    pub median_s: f64,
    pub mean_s: f64,
    pub mad_s: f64,
    /// Median absolute deviation above 20% of the median.
    pub unstable: bool,
    pub warnings: Vec<String>,
    pub hardware: String,
}

impl LatencyReport {
    pub fn row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}",
            self.metric,
            self.mode,
            self.n_thought.map_or("-".into(), |v| v.to_string()),
            self.m_ahead.map_or("-".into(), |v| v.to_string()),
            self.prefix_len,
            self.median_s,
            self.mean_s,
            self.reps_s.len(),
            self.hardware
        )
    }
}

/// CPU model, logical core count and target triple.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu} x{cores} ({}-{})", std::env::consts::ARCH, std::env::consts::OS)
}

/// Smallest nonzero step observed on the monotonic clock.
fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn time_runs(protocol: &Protocol, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    protocol.validate()?;
    for _ in 0..protocol.warmup {
        f()?;
    }
    let mut reps = Vec::with_capacity(protocol.repetitions);
    for _ in 0..protocol.repetitions {
        let t = Instant::now();
        f()?;
        reps.push(t.elapsed().as_secs_f64());
    }
    Ok(reps)
}

fn report(metric: &str, mode: &InferenceMode, prefix_len: usize, generate_len: usize, protocol: &Protocol, reps: Vec<f64>) -> LatencyReport {
    let med = median(&reps);
    let mad = median(&reps.iter().map(|r| (r - med).abs()).collect::<Vec<_>>());
    let mut warnings = Vec::new();
    let res = timer_resolution().as_secs_f64();
    if res > 0.01 * med {
        warnings.push(format!("timer resolution {res:.3e}s exceeds 1% of the median span"));
    }
    let (n, m) = match mode {
        InferenceMode::Ntp => (None, None),
        InferenceMode::Thought { config, .. } => (Some(config.n_thought), Some(config.m_ahead)),
    };
    LatencyReport {
        metric: metric.to_string(),
        mode: mode.label(),
        n_thought: n,
        m_ahead: m,
        prefix_len,
        generate_len,
        warmup: protocol.warmup,
        mean_s: reps.iter().sum::<f64>() / reps.len() as f64,
        median_s: med,
        mad_s: mad,
        unstable: mad > 0.2 * med,
        reps_s: reps,
        warnings,
        hardware: hardware_descriptor(),
    }
}

/// From a fully available prefix to the first emitted token. In thought mode
/// this includes the thought at the last prefix position and the mixing step.
pub fn measure_ttft<T: Real>(model: &Model<T>, mode: &InferenceMode, prefix: &[u32], protocol: &Protocol) -> Result<LatencyReport> {
    let reps = time_runs(protocol, || {
        generate(model, mode, prefix, 1, None, OutputSampling::Greedy).map(|_| ())
    })?;
    Ok(report("ttft", mode, prefix.len(), 1, protocol, reps))
}

/// The whole greedy decode loop; thought mode thinks before every emitted token.
pub fn measure_generation<T: Real>(
    model: &Model<T>,
    mode: &InferenceMode,
    prefix: &[u32],
    generate_len: usize,
    protocol: &Protocol,
) -> Result<LatencyReport> {
    let reps = time_runs(protocol, || {
        generate(model, mode, prefix, generate_len, None, OutputSampling::Greedy).map(|_| ())
    })?;
    Ok(report("generation", mode, prefix.len(), generate_len, protocol, reps))
}

/// A published 7B-scale measurement, for side-by-side display only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub model: String,
    pub metric: String,
    pub mode: String,
    pub prefix_len: usize,
    pub generate_len: usize,
    pub seconds: f64,
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    serde_json::from_str(PUBLISHED).expect("bundled fixture parses")
}

/// Local reports next to the published 7B reference for the same
/// (metric, mode, prefix, generate) cell. The two are never compared.
pub fn render_table(reports: &[LatencyReport]) -> String {
    let refs = reference_rows();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<6} {:>6} {:>6} {:>12} {:>12} {:>5} {:<8} | published 7B reference",
        "metric", "mode", "prefix", "gen", "median_s", "mean_s", "reps", "flags"
    );
    for r in reports {
        let published: Vec<String> = refs
            .iter()
            .filter(|x| x.metric == r.metric && x.mode == r.mode && x.prefix_len == r.prefix_len && x.generate_len == r.generate_len)
            .map(|x| format!("{} {:.3}s", x.model, x.seconds))
            .collect();
        let flags = if r.unstable { "unstable" } else { "" };
        let _ = writeln!(
            out,
            "{:<10} {:<6} {:>6} {:>6} {:>12.6} {:>12.6} {:>5} {:<8} | {}",
            r.metric,
            r.mode,
            r.prefix_len,
            r.generate_len,
            r.median_s,
            r.mean_s,
            r.reps_s.len(),
            flags,
            if published.is_empty() { "-".to_string() } else { published.join(", ") }
        );
    }
    if let Some(r) = reports.first() {
        let _ = writeln!(out, "hardware: {}", r.hardware);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_protocol() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(Protocol { warmup: 1, repetitions: 5 }.validate().is_err());
        assert!(Protocol::default().validate().is_ok());
    }

    #[test]
    fn fixtures_load() {
        let rows = reference_rows();
        let get = |metric: &str, mode: &str, gen| {
            rows.iter()
                .find(|r| r.model == "mistral-7b" && r.metric == metric && r.mode == mode && r.generate_len == gen)
                .unwrap()
                .seconds
        };
        assert_eq!(get("ttft", "ntp", 1), 0.028);
        assert_eq!(get("ttft", "16-8", 1), 0.738);
        assert_eq!(get("generation", "ntp", 128), 3.2);
        assert_eq!(get("generation", "16-8", 128), 52.7);
    }
}
