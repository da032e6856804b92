//! Closed-answer scoring, suite aggregation and sampled generation with majority voting.

mod generate;

pub use generate::{extract_number, generate, majority_vote_generate, vote, OutputSampling, VoteResult};

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Tokenizer;
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::tensor::{logsumexp, Graph, Real, Visibility};
use crate::thought::{generate_thoughts, talk_logprob, Decoding, Mixing, ThoughtConfig};

/// A question with a closed set of candidate answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub question: String,
    pub candidates: Vec<String>,
    pub gold: usize,
}

impl EvalItem {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(invalid(format!("item {}: needs at least 2 candidates", self.id)));
        }
        if self.gold >= self.candidates.len() {
            return Err(invalid(format!("item {}: gold index {} out of range", self.id, self.gold)));
        }
        let distinct: HashSet<&String> = self.candidates.iter().collect();
        if distinct.len() != self.candidates.len() {
            return Err(invalid(format!("item {}: duplicate candidates", self.id)));
        }
        if self.question.is_empty() {
            return Err(invalid(format!("item {}: empty question", self.id)));
        }
        Ok(())
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<EvalItem>> {
    let f = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut items = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem = serde_json::from_str(&line)
            .map_err(|e| invalid(format!("{}:{}: {e}", path.as_ref().display(), i + 1)))?;
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}

pub fn write_dataset(path: impl AsRef<Path>, items: &[EvalItem]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        writeln!(f, "{}", serde_json::to_string(item).expect("serializable"))?;
    }
    f.flush()?;
    Ok(())
}

/// Plain next-token prediction or thought mode with greedy thoughts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InferenceMode {
    Ntp,
    Thought {
        config: ThoughtConfig,
        /// `None` uses the mixing head; `Some(w)` pins the base weight.
        #[serde(default)]
        fixed_weight: Option<f64>,
    },
}

impl InferenceMode {
    pub fn thought(n_thought: usize, m_ahead: usize) -> Self {
        Self::Thought {
            config: ThoughtConfig::new(n_thought, m_ahead),
            fixed_weight: None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Ntp => "ntp".to_string(),
            Self::Thought {
                config,
                fixed_weight: None,
            } => config.tag(),
            Self::Thought {
                config,
                fixed_weight: Some(w),
            } => format!("{}@{w}", config.tag()),
        }
    }

    pub fn mixing(&self) -> Mixing {
        match self {
            Self::Thought {
                fixed_weight: Some(w), ..
            } => Mixing::Fixed(*w),
            _ => Mixing::Learned,
        }
    }
}

/// Per-token log-probabilities of `tokens[1..]` at the listed prediction positions.
pub(crate) fn next_token_logprobs<T: Real>(
    model: &Model<T>,
    mode: &InferenceMode,
    tokens: &[u32],
    positions: &[usize],
) -> Result<Vec<f64>> {
    match mode {
        InferenceMode::Ntp => {
            let plain: Vec<usize> = (0..tokens.len()).collect();
            let (logits, _) = model.forward(tokens, &Visibility::causal(tokens.len()), &plain)?;
            // Same log-softmax kernel and precision as the talk path, so a
            // thought mode pinned to w = 1 agrees bit for bit.
            let mut g = Graph::<T>::no_grad();
            let x = g.constant(logits);
            let lsm = g.log_softmax(x);
            let lsm = g.value(lsm);
            Ok(positions
                .iter()
                .map(|&j| lsm.row(j)[tokens[j + 1] as usize].to_f64().unwrap_or(f64::NAN))
                .collect())
        }
        InferenceMode::Thought { config, .. } => {
            let cfg = ThoughtConfig {
                m_ahead: 1,
                ..config.clone()
            };
            let batch = generate_thoughts(model, tokens, positions, &cfg, Decoding::Greedy)?;
            let r = talk_logprob(model, tokens, &batch, &cfg, mode.mixing())?;
            Ok(r.scores.into_iter().next().expect("one greedy sample"))
        }
    }
}

/// Log of the teacher-forced probability of `candidate` after `question`.
pub fn candidate_log_score<T: Real>(model: &Model<T>, mode: &InferenceMode, question: &str, candidate: &str) -> Result<f64> {
    let tok = Tokenizer;
    let q = tok.encode(question);
    if q.is_empty() || candidate.is_empty() {
        return Err(invalid("question and candidate must be non-empty"));
    }
    let mut tokens = q.clone();
    tokens.extend(tok.encode(candidate));
    let positions: Vec<usize> = (q.len() - 1..tokens.len() - 1).collect();
    Ok(next_token_logprobs(model, mode, &tokens, &positions)?.iter().sum())
}

/// Probability of `candidate`: the product of its per-token probabilities.
pub fn candidate_score<T: Real>(model: &Model<T>, mode: &InferenceMode, question: &str, candidate: &str) -> Result<f64> {
    candidate_log_score(model, mode, question, candidate).map(f64::exp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub log_scores: Vec<f64>,
    /// Gold probability divided by the summed candidate probabilities.
    pub normalized: f64,
    /// Gold scored strictly higher than every other candidate.
    pub hit: bool,
    pub tie: bool,
}

/// Normalized gold score and strict argmax from candidate log scores.
pub fn score_item(id: &str, log_scores: Vec<f64>, gold: usize) -> Option<ItemResult> {
    // Summing in sorted order makes the result independent of candidate order.
    let mut sorted = log_scores.clone();
    sorted.sort_by(f64::total_cmp);
    let lse = logsumexp(&sorted);
    if !lse.is_finite() || gold >= log_scores.len() {
        return None;
    }
    let g = log_scores[gold];
    let best_other = log_scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != gold)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Some(ItemResult {
        id: id.to_string(),
        normalized: (g - lse).exp(),
        hit: g > best_other,
        tie: g == best_other,
        log_scores,
    })
}

/// `None` when every candidate scores zero probability.
pub fn item_accuracy<T: Real>(model: &Model<T>, mode: &InferenceMode, item: &EvalItem) -> Result<Option<ItemResult>> {
    item.validate()?;
    let scores = item
        .candidates
        .iter()
        .map(|c| candidate_log_score(model, mode, &item.question, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(score_item(&item.id, scores, item.gold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub mean_normalized_acc: f64,
    pub argmax_accuracy: f64,
    pub items: usize,
    pub skipped: usize,
    pub degenerate: usize,
    pub ties: usize,
    pub per_item: Vec<ItemResult>,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!(
            "mode={} items={} skipped={} degenerate={} ties={} normalized_acc={:.6} argmax_acc={:.6}",
            self.mode,
            self.items,
            self.skipped,
            self.degenerate,
            self.ties,
            self.mean_normalized_acc,
            self.argmax_accuracy
        )
    }
}

/// Scores every item; items that do not fit the context are skipped and counted.
pub fn evaluate_suite<T: Real>(model: &Model<T>, mode: &InferenceMode, dataset: &[EvalItem]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let mut order: Vec<&EvalItem> = dataset.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let (mut skipped, mut degenerate) = (0, 0);
    let mut per_item = Vec::new();
    for item in order {
        match item_accuracy(model, mode, item) {
            Ok(Some(r)) => per_item.push(r),
            Ok(None) => degenerate += 1,
            Err(Error::SequenceTooLong { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if per_item.is_empty() {
        return Err(invalid(format!(
            "no scorable items ({skipped} skipped, {degenerate} degenerate)"
        )));
    }
    let n = per_item.len() as f64;
    Ok(EvalReport {
        mode: mode.label(),
        mean_normalized_acc: per_item.iter().map(|r| r.normalized).sum::<f64>() / n,
        argmax_accuracy: per_item.iter().filter(|r| r.hit).count() as f64 / n,
        items: per_item.len(),
        skipped,
        degenerate,
        ties: per_item.iter().filter(|r| r.tie).count(),
        per_item,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_arithmetic() {
        let s: Vec<f64> = [0.4, 0.15, 0.15, 0.15, 0.15].iter().map(|v: &f64| v.ln()).collect();
        let r = score_item("x", s, 0).unwrap();
        assert!((r.normalized - 0.4).abs() < 1e-12);
        assert!(r.hit);
    }

    #[test]
    fn ties_are_misses() {
        let r = score_item("x", vec![-1.0, -1.0, -2.0], 1).unwrap();
        assert!(!r.hit && r.tie);
    }

    #[test]
    fn all_zero_is_degenerate() {
        assert!(score_item("x", vec![f64::NEG_INFINITY; 3], 0).is_none());
    }

    #[test]
    fn item_validation() {
        let mut it = EvalItem {
            id: "a".into(),
            question: "q".into(),
            candidates: vec!["x".into(), "x".into()],
            gold: 0,
        };
        assert!(it.validate().is_err());
        it.candidates[1] = "y".into();
        assert!(it.validate().is_ok());
        it.gold = 2;
        assert!(it.validate().is_err());
    }

    #[test]
    fn mode_serialization_round_trips() {
        let m = InferenceMode::thought(8, 4);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<InferenceMode>(&s).unwrap(), m);
    }
}
