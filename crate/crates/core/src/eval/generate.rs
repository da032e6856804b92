use std::collections::HashMap;

use rand::Rng;

use super::InferenceMode;
use crate::error::Result;
use crate::model::Model;
use crate::rng::rng_for;
use crate::tensor::{logsumexp, Real, Visibility};
use crate::thought::{next_token_talk, Decoding};

/// How emitted tokens are chosen. Thoughts are always decoded greedily.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputSampling {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Next-token log-distribution after `prefix` in the given mode.
pub(crate) fn next_distribution<T: Real>(model: &Model<T>, mode: &InferenceMode, prefix: &[u32]) -> Result<Vec<f64>> {
    match mode {
        InferenceMode::Ntp => {
            let plain: Vec<usize> = (0..prefix.len()).collect();
            let (logits, _) = model.forward(prefix, &Visibility::causal(prefix.len()), &plain)?;
            let row: Vec<f64> = logits
                .row(prefix.len() - 1)
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .collect();
            let l = logsumexp(&row);
            Ok(row.into_iter().map(|v| v - l).collect())
        }
        InferenceMode::Thought { config, .. } => {
            Ok(next_token_talk(model, prefix, config, Decoding::Greedy, mode.mixing())?.logp)
        }
    }
}

/// Decodes up to `max_new` base-vocabulary tokens, stopping after `stop` if given.
/// Every step recomputes the full prefix.
pub fn generate<T: Real>(
    model: &Model<T>,
    mode: &InferenceMode,
    prompt: &[u32],
    max_new: usize,
    stop: Option<u32>,
    sampling: OutputSampling,
) -> Result<Vec<u32>> {
    let meta = model.meta_tokens();
    let mut rng = match sampling {
        OutputSampling::Sample { seed, .. } => Some(rng_for(&[seed, 0x6e6])),
        OutputSampling::Greedy => None,
    };
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let lp = next_distribution(model, mode, &tokens)?;
        let tok = match (sampling, rng.as_mut()) {
            (OutputSampling::Sample { temperature, .. }, Some(rng)) => {
                let scaled: Vec<f64> = lp
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if meta.contains(i as u32) { f64::NEG_INFINITY } else { v / temperature })
                    .collect();
                let l = logsumexp(&scaled);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = None;
                for (i, &v) in scaled.iter().enumerate() {
                    acc += (v - l).exp();
                    if u < acc {
                        chosen = Some(i);
                        break;
                    }
                }
                chosen.unwrap_or_else(|| argmax_base(&lp, meta)) as u32
            }
            _ => argmax_base(&lp, meta) as u32,
        };
        tokens.push(tok);
        out.push(tok);
        if Some(tok) == stop {
            break;
        }
    }
    Ok(out)
}

fn argmax_base(lp: &[f64], meta: crate::model::MetaTokens) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if !meta.contains(i as u32) && v > lp[best] {
            best = i;
        }
    }
    best
}

/// Leading decimal digits after optional spaces.
pub fn extract_number(text: &str) -> Option<String> {
    let digits: String = text
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    (!digits.is_empty()).then_some(digits)
}

/// Most frequent extracted answer; ties go to the answer seen first. `None` abstains.
pub fn vote(answers: &[Option<String>]) -> Option<String> {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, a) in answers.iter().enumerate() {
        if let Some(a) = a {
            counts.entry(a.as_str()).or_insert((0, i)).0 += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(a, _)| a.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoteResult {
    pub answer: Option<String>,
    pub samples: Vec<Option<String>>,
}

/// Samples `k` continuations and votes over their extracted answers.
/// Sample `i` uses seed `(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn majority_vote_generate<T: Real>(
    model: &Model<T>,
    mode: &InferenceMode,
    prompt: &[u32],
    k: usize,
    max_new: usize,
    temperature: f64,
    seed: u64,
    extractor: &dyn Fn(&str) -> Option<String>,
) -> Result<VoteResult> {
    let tok = crate::data::Tokenizer;
    let mut samples = Vec::with_capacity(k);
    for i in 0..k {
        let s = crate::rng::derive_seed(&[seed, i as u64]);
        let out = generate(
            model,
            mode,
            prompt,
            max_new,
            None,
            OutputSampling::Sample { temperature, seed: s },
        )?;
        samples.push(extractor(&tok.decode(&out)));
    }
    Ok(VoteResult {
        answer: vote(&samples),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &str) -> Option<String> {
        Some(v.to_string())
    }

    #[test]
    fn mode_wins() {
        assert_eq!(vote(&[s("7"), s("7"), s("5")]), s("7"));
    }

    #[test]
    fn ties_go_to_earliest() {
        assert_eq!(vote(&[s("5"), s("7"), s("7"), s("5")]), s("5"));
        assert_eq!(vote(&[None, s("3"), s("4")]), s("3"));
    }

    #[test]
    fn abstains_without_answers() {
        assert_eq!(vote(&[None, None]), None);
    }

    #[test]
    fn extracts_leading_digits() {
        assert_eq!(extract_number(" 42.\n"), s("42"));
        assert_eq!(extract_number("x1"), None);
    }
}
