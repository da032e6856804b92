use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;

use super::{PackedLayout, ThoughtBatch, ThoughtConfig, ThoughtTrace};
use crate::error::{invalid, Error, Result};
use crate::model::{MetaTokens, Model};
use crate::rng::rng_for;
use crate::tensor::{Graph, Real};

/// How thought tokens are chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    /// Argmax over the base vocabulary; always yields a single sample.
    Greedy,
    /// Sampling at the configured temperature. Each (position, sample) pair
    /// draws from its own generator derived from `seed`.
    Sample { seed: u64 },
}

/// Generates `n_thought - 1` content tokens at every listed base position,
/// one packed forward per round.
pub fn generate_thoughts<T: Real>(
    model: &Model<T>,
    base: &[u32],
    positions: &[usize],
    config: &ThoughtConfig,
    decoding: Decoding,
) -> Result<ThoughtBatch> {
    let n = config.n_thought;
    if n < 2 {
        return Err(invalid(format!("n_thought must be >= 2, got {n}")));
    }
    if !(config.temperature > 0.0) {
        return Err(invalid(format!("temperature must be > 0, got {}", config.temperature)));
    }
    let seq_len = base.len();
    let max = model.config.max_seq_len;
    let full = seq_len + positions.len() * (n + 1);
    if full > max {
        return Err(Error::SequenceTooLong { len: full, max });
    }
    if let Some(&j) = positions.iter().max() {
        if j + n + 1 > max {
            return Err(Error::SequenceTooLong { len: j + n + 2, max });
        }
    }
    let samples = match decoding {
        Decoding::Greedy => 1,
        Decoding::Sample { .. } => config.num_samples,
    };
    let meta = model.meta_tokens();
    let mut traces = Vec::with_capacity(samples);
    for s in 0..samples {
        let mut rngs: Vec<ChaCha8Rng> = match decoding {
            Decoding::Greedy => Vec::new(),
            Decoding::Sample { seed } => positions
                .iter()
                .map(|&j| rng_for(&[seed, j as u64, s as u64]))
                .collect(),
        };
        let mut cur: Vec<ThoughtTrace> = positions
            .iter()
            .map(|_| ThoughtTrace {
                tokens: Vec::with_capacity(n - 1),
                logprobs: Vec::with_capacity(n - 1),
            })
            .collect();
        for round in 1..n {
            let layout = PackedLayout::new(seq_len, positions.to_vec(), round)?;
            let rows: Vec<usize> = (0..positions.len()).map(|p| layout.row(round - 1, p)).collect();
            let logits = round_logits(model, base, &layout, &cur, meta, &rows)?;
            for (p, row) in logits.iter().enumerate() {
                let (tok, lp) = match decoding {
                    Decoding::Greedy => choose_greedy(row, meta),
                    Decoding::Sample { .. } => choose_sample(row, meta, config.temperature, &mut rngs[p]),
                };
                cur[p].tokens.push(tok);
                cur[p].logprobs.push(lp as f32);
            }
        }
        traces.push(cur);
    }
    Ok(ThoughtBatch {
        seq_len,
        n_thought: n,
        positions: positions.to_vec(),
        traces,
    })
}

fn round_logits<T: Real>(
    model: &Model<T>,
    base: &[u32],
    layout: &PackedLayout,
    cur: &[ThoughtTrace],
    meta: MetaTokens,
    rows: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let tokens = layout.tokens(base, |a, p| {
        if a == 0 {
            meta.start_of_thought
        } else {
            cur[p].tokens[a - 1]
        }
    });
    let mut g = Graph::no_grad();
    let mv = model.load(&mut g);
    let h = mv.hidden(&mut g, &tokens, &layout.position_ids(), Arc::new(layout.visibility()))?;
    let h = g.gather_rows(h, rows)?;
    let logits = mv.logits(&mut g, h)?;
    let v = g.value(logits);
    Ok((0..rows.len())
        .map(|r| v.row(r).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
        .collect())
}

/// Log-softmax of `logits / temperature` with the meta-token ids removed from the support.
pub(crate) fn thought_log_probs(logits: &[f64], meta: MetaTokens, temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if meta.contains(i as u32) {
                f64::NEG_INFINITY
            } else {
                v / temperature
            }
        })
        .collect();
    let lse = crate::tensor::logsumexp(&scaled);
    scaled.into_iter().map(|v| v - lse).collect()
}

fn choose_greedy(logits: &[f64], meta: MetaTokens) -> (u32, f64) {
    let lp = thought_log_probs(logits, meta, 1.0);
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    (best as u32, lp[best])
}

fn choose_sample(logits: &[f64], meta: MetaTokens, temperature: f64, rng: &mut ChaCha8Rng) -> (u32, f64) {
    let lp = thought_log_probs(logits, meta, temperature);
    let weights: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => {
            let i = dist.sample(rng);
            (i as u32, lp[i])
        }
        // Degenerate (non-finite) logits fall back to argmax so the caller sees a NaN loss.
        Err(_) => choose_greedy(logits, meta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MetaInit, ModelConfig};
    use crate::tensor::Visibility;

    fn model(seed: u64) -> Model<f64> {
        let c = ModelConfig {
            vocab_size: 12,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 64,
            seed,
            meta_init: MetaInit::Mean,
        };
        let mut m = Model::<f32>::init(&c).unwrap().cast::<f64>();
        // Larger weights make greedy choices position-dependent.
        for p in m.params.iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
        m
    }

    /// Thought at `j` generated alone on an unpacked causal sequence.
    fn sequential(m: &Model<f64>, base: &[u32], j: usize, n: usize) -> Vec<u32> {
        let meta = m.meta_tokens();
        let mut toks: Vec<u32> = base[..=j].to_vec();
        toks.push(meta.start_of_thought);
        let mut out = Vec::new();
        for _ in 1..n {
            let pos: Vec<usize> = (0..toks.len()).collect();
            let (logits, _) = m.forward(&toks, &Visibility::causal(toks.len()), &pos).unwrap();
            let last = logits.row(toks.len() - 1);
            let (t, _) = choose_greedy(last, meta);
            out.push(t);
            toks.push(t);
        }
        out
    }

    #[test]
    fn greedy_parallel_matches_sequential() {
        let m = model(5);
        let base: Vec<u32> = vec![3, 7, 1, 1, 9, 0, 4, 11, 2];
        for n in 2..=4 {
            let cfg = ThoughtConfig::new(n, 1);
            let pos: Vec<usize> = (0..base.len()).collect();
            let b = generate_thoughts(&m, &base, &pos, &cfg, Decoding::Greedy).unwrap();
            assert_eq!(b.traces.len(), 1);
            for (p, &j) in pos.iter().enumerate() {
                assert_eq!(b.traces[0][p].tokens, sequential(&m, &base, j, n), "n {n} j {j}");
            }
        }
    }

    #[test]
    fn two_content_slots_rule() {
        let m = model(1);
        let cfg = ThoughtConfig::new(2, 1);
        let b = generate_thoughts(&m, &[1, 2, 3], &[0, 1, 2], &cfg, Decoding::Sample { seed: 4 }).unwrap();
        assert_eq!(b.traces.len(), 2);
        assert!(b.traces.iter().flatten().all(|t| t.tokens.len() == 1));
    }

    #[test]
    fn samples_exclude_meta_and_differ() {
        let c = ModelConfig {
            vocab_size: 12,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 600,
            seed: 2,
            meta_init: MetaInit::Mean,
        };
        let m = Model::<f32>::init(&c).unwrap();
        let meta = m.meta_tokens();
        let base: Vec<u32> = (0..100).map(|i| (i * 7 % 12) as u32).collect();
        let pos: Vec<usize> = (0..100).collect();
        let cfg = ThoughtConfig::new(3, 1);
        let b = generate_thoughts(&m, &base, &pos, &cfg, Decoding::Sample { seed: 9 }).unwrap();
        let differ = (0..100).filter(|&p| b.traces[0][p].tokens != b.traces[1][p].tokens).count();
        assert!(differ > 0);
        assert!(b.traces.iter().flatten().flat_map(|t| &t.tokens).all(|&t| !meta.contains(t)));
    }

    #[test]
    fn sampling_is_reproducible_and_subset_stable() {
        let m = model(3);
        let base = [1u32, 5, 2, 8, 8, 3];
        let cfg = ThoughtConfig::new(4, 2);
        let all = generate_thoughts(&m, &base, &[0, 1, 2, 3, 4, 5], &cfg, Decoding::Sample { seed: 1 }).unwrap();
        let again = generate_thoughts(&m, &base, &[0, 1, 2, 3, 4, 5], &cfg, Decoding::Sample { seed: 1 }).unwrap();
        assert_eq!(all, again);
        let sub = generate_thoughts(&m, &base, &[2, 4], &cfg, Decoding::Sample { seed: 1 }).unwrap();
        for s in 0..2 {
            assert_eq!(sub.traces[s][0].tokens, all.traces[s][2].tokens);
            assert_eq!(sub.traces[s][1].tokens, all.traces[s][4].tokens);
        }
    }

    #[test]
    fn too_long_packing_fails() {
        let m = model(0);
        let base = vec![1u32; 20];
        let pos: Vec<usize> = (0..20).collect();
        let cfg = ThoughtConfig::new(4, 1);
        assert!(matches!(
            generate_thoughts(&m, &base, &pos, &cfg, Decoding::Greedy),
            Err(Error::SequenceTooLong { .. })
        ));
    }
}
