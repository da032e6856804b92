//! Think and Talk: parallel thought generation under a packed attention
//! mask, and interpolation of post-thought predictions with base predictions.

mod generate;
mod layout;
mod talk;
mod trace;

pub use generate::{generate_thoughts, Decoding};
pub use layout::{build_thought_mask, PackedLayout};
pub use talk::{next_token_talk, scorable_positions, talk_logprob, Mixing, NextTokenTalk, TalkResult};
pub use trace::{trace_sequence, TraceRecord};
pub(crate) use talk::{talk_graph, TalkSpec};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{logsumexp, Real};

/// The reasoning regime: `n_thought` slots (n - 1 content tokens plus
/// delimiters) and `m_ahead` teacher-forced ground-truth tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThoughtConfig {
    pub n_thought: usize,
    pub m_ahead: usize,
    pub num_samples: usize,
    pub temperature: f64,
    /// Renormalize the interpolated log-probabilities with a log-softmax.
    pub renormalize: bool,
}

impl Default for ThoughtConfig {
    fn default() -> Self {
        Self {
            n_thought: 16,
            m_ahead: 8,
            num_samples: 2,
            temperature: 1.0,
            renormalize: true,
        }
    }
}

impl ThoughtConfig {
    pub fn new(n_thought: usize, m_ahead: usize) -> Self {
        Self {
            n_thought,
            m_ahead,
            ..Default::default()
        }
    }

    pub fn content_tokens(&self) -> usize {
        self.n_thought - 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_thought < 2 {
            problems.push(format!("n_thought must be >= 2, got {}", self.n_thought));
        }
        if self.m_ahead < 1 {
            problems.push("m_ahead must be >= 1".to_string());
        }
        if self.num_samples < 2 {
            problems.push(format!("num_samples must be >= 2, got {}", self.num_samples));
        }
        if !(self.temperature > 0.0) {
            problems.push(format!("temperature must be > 0, got {}", self.temperature));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::Config(problems.join("; ")))
        }
    }

    /// Rows in the scoring layout when `positions` base positions carry a thought.
    pub fn packed_len(&self, seq_len: usize, positions: usize) -> usize {
        seq_len + positions * (self.n_thought + self.m_ahead)
    }

    pub fn tag(&self) -> String {
        format!("{}-{}", self.n_thought, self.m_ahead)
    }
}

/// One sampled rationale: `n - 1` content tokens and their sampling log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ThoughtTrace {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f32>,
}

impl ThoughtTrace {
    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().map(|&v| v as f64).sum()
    }
}

/// Thoughts for a set of base positions of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ThoughtBatch {
    pub seq_len: usize,
    pub n_thought: usize,
    pub positions: Vec<usize>,
    /// `traces[sample][pos_index]`
    pub traces: Vec<Vec<ThoughtTrace>>,
}

impl ThoughtBatch {
    pub fn num_samples(&self) -> usize {
        self.traces.len()
    }

}

/// Per-(position, ahead-step) carriers of the interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedPrediction {
    pub position: usize,
    /// 1-based ahead step.
    pub step: usize,
    pub logp_base: Vec<f64>,
    pub logp_thought: Vec<f64>,
    pub w: f64,
    pub logp_talk: Vec<f64>,
}

/// `w * logp_base + (1 - w) * logp_thought`, optionally renormalized.
///
/// At `w = 1` or `w = 0` the result is the corresponding input unchanged.
pub fn mix_logits<T: Real>(logp_base: &[T], logp_thought: &[T], w: T, renormalize: bool) -> Result<Vec<T>> {
    if !(w >= T::zero() && w <= T::one()) {
        return Err(invalid(format!("mixing weight {w:?} outside [0, 1]")));
    }
    if logp_base.len() != logp_thought.len() {
        return Err(invalid(format!(
            "distributions of width {} and {}",
            logp_base.len(),
            logp_thought.len()
        )));
    }
    if w == T::one() {
        return Ok(logp_base.to_vec());
    }
    if w == T::zero() {
        return Ok(logp_thought.to_vec());
    }
    let mixed: Vec<T> = logp_base
        .iter()
        .zip(logp_thought)
        .map(|(&b, &t)| w * b + (T::one() - w) * t)
        .collect();
    if !renormalize {
        return Ok(mixed);
    }
    let lse = logsumexp(&mixed);
    Ok(mixed.into_iter().map(|v| v - lse).collect())
}
