use serde::{Deserialize, Serialize};

use super::generate::{generate_thoughts, Decoding};
use super::talk::{talk_logprob, Mixing};
use super::ThoughtConfig;
use crate::data::{Tokenizer, END_OF_THOUGHT, START_OF_THOUGHT};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Real;

const PREFIX_TAIL_CHARS: usize = 24;

/// One base position of a trace dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub position: usize,
    pub sample: usize,
    pub prefix_tail: String,
    pub thought: String,
    /// Mixing weight at the first ahead step. Absent when fewer than
    /// `m_ahead` ground-truth tokens follow the position.
    pub w: Option<f64>,
    /// Talk log-probability of the following `m_ahead` tokens.
    pub talk_score: Option<f64>,
}

impl TraceRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Thinks at every position of `tokens` and scores each thought's span.
/// Positions are processed in chunks that fit the model's context.
pub fn trace_sequence<T: Real>(
    model: &Model<T>,
    tokens: &[u32],
    config: &ThoughtConfig,
    decoding: Decoding,
    mixing: Mixing,
) -> Result<Vec<TraceRecord>> {
    let seq_len = tokens.len();
    let (n, m) = (config.n_thought, config.m_ahead);
    let max = model.config.max_seq_len;
    let per = n + m.max(1);
    let chunk = max.saturating_sub(seq_len) / per;
    if seq_len == 0 {
        return Ok(Vec::new());
    }
    if chunk == 0 {
        return Err(Error::SequenceTooLong { len: seq_len + per, max });
    }
    let tok = Tokenizer;
    let all: Vec<usize> = (0..seq_len).collect();
    let mut records = Vec::new();
    for group in all.chunks(chunk) {
        let batch = generate_thoughts(model, tokens, group, config, decoding)?;
        let scorable: Vec<usize> = group.iter().copied().filter(|&j| j + m < seq_len).collect();
        let scored = if scorable.is_empty() {
            None
        } else {
            let idx: Vec<usize> = scorable.iter().map(|j| group.iter().position(|g| g == j).unwrap()).collect();
            let mut sub = batch.clone();
            sub.positions = scorable.clone();
            sub.traces = batch.traces.iter().map(|t| idx.iter().map(|&i| t[i].clone()).collect()).collect();
            Some(talk_logprob(model, tokens, &sub, config, mixing)?)
        };
        for (s, traces) in batch.traces.iter().enumerate() {
            for (p, &j) in group.iter().enumerate() {
                let mut ids = vec![START_OF_THOUGHT];
                ids.extend(&traces[p].tokens);
                ids.push(END_OF_THOUGHT);
                let prefix = tok.decode(&tokens[..=j]);
                let tail: String = {
                    let chars: Vec<char> = prefix.chars().collect();
                    chars[chars.len().saturating_sub(PREFIX_TAIL_CHARS)..].iter().collect()
                };
                let (w, talk_score) = match (&scored, scorable.iter().position(|&x| x == j)) {
                    (Some(r), Some(q)) => (Some(r.predictions[s][q * m].w), Some(r.scores[s][q])),
                    _ => (None, None),
                };
                records.push(TraceRecord {
                    position: j,
                    sample: s,
                    prefix_tail: tail,
                    thought: tok.render(&ids),
                    w,
                    talk_score,
                });
            }
        }
    }
    records.sort_by_key(|r| (r.sample, r.position));
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn one_record_per_position_with_markers() {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 40,
            seed: 3,
            ..Default::default()
        };
        let model = Model::init(&cfg).unwrap().cast::<f64>();
        let tokens = Tokenizer.encode("1+2=3. abc");
        let config = ThoughtConfig::new(3, 2);
        let recs = trace_sequence(&model, &tokens, &config, Decoding::Greedy, Mixing::Learned).unwrap();
        assert_eq!(recs.len(), tokens.len());
        for (j, r) in recs.iter().enumerate() {
            assert_eq!(r.position, j);
            assert!(r.thought.starts_with("<|start_of_thought|>"));
            assert!(r.thought.ends_with("<|end_of_thought|>"));
            assert_eq!(r.talk_score.is_some(), j + 2 < tokens.len());
        }
        let again = trace_sequence(&model, &tokens, &config, Decoding::Greedy, Mixing::Learned).unwrap();
        assert_eq!(recs, again);
    }
}
