use std::sync::Arc;

use super::generate::{generate_thoughts, Decoding};
use super::{MixedPrediction, PackedLayout, ThoughtBatch, ThoughtConfig, ThoughtTrace};
use crate::error::{invalid, Result};
use crate::model::{Model, ModelVars};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Source of the interpolation weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mixing {
    /// Mixing-head output for each (position, ahead step).
    Learned,
    /// A constant weight on the base distribution; 1 ignores thoughts entirely.
    Fixed(f64),
}

/// Base positions with a full span of `m_ahead` ground-truth successors.
pub fn scorable_positions(seq_len: usize, m_ahead: usize) -> Vec<usize> {
    (0..seq_len.saturating_sub(m_ahead)).collect()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct TalkSpec {
    pub n_thought: usize,
    pub m_ahead: usize,
    pub temperature: f64,
    pub renormalize: bool,
    pub mixing: Mixing,
}

impl TalkSpec {
    pub fn new(config: &ThoughtConfig, mixing: Mixing) -> Self {
        Self {
            n_thought: config.n_thought,
            m_ahead: config.m_ahead,
            temperature: config.temperature,
            renormalize: config.renormalize,
            mixing,
        }
    }
}

/// Graph handles for one sample's talk pass. Rows of the `[P * m, V]`
/// tensors are ordered position-major, ahead step minor.
pub(crate) struct TalkGraph {
    /// `log p_base(x_{i+1})` at every base row but the last, `[L - 1]`.
    pub base_next: Option<Var>,
    pub mixed_base: Var,
    pub mixed_thought: Var,
    pub weights: Var,
    pub talk: Var,
    /// Talk log-probabilities of the ground-truth tokens, `[P, m]`.
    pub picked: Option<Var>,
    /// Sum over the span, `[P]`.
    pub scores: Option<Var>,
    /// Log-probability of each trace's content tokens under the current weights, `[P]`.
    pub trace_logprob: Var,
}

/// Teacher-forces `x_{j+1} .. x_{j+m-1}` after each trace's end-of-thought
/// slot and mixes each post-thought distribution with the base distribution
/// at `j + k - 1`. Targets are picked only when every position has all `m`.
pub(crate) fn talk_graph<T: Real>(
    g: &mut Graph<T>,
    mv: &ModelVars,
    meta: crate::model::MetaTokens,
    base: &[u32],
    positions: &[usize],
    traces: &[ThoughtTrace],
    spec: &TalkSpec,
) -> Result<TalkGraph> {
    let (n, m, seq_len) = (spec.n_thought, spec.m_ahead, base.len());
    if n < 2 || m < 1 {
        return Err(invalid(format!("thought regime {n}-{m} is invalid")));
    }
    if traces.len() != positions.len() || traces.iter().any(|t| t.tokens.len() != n - 1) {
        return Err(invalid(format!(
            "expected {} traces of {} tokens",
            positions.len(),
            n - 1
        )));
    }
    if let Some(&j) = positions.iter().find(|&&j| j + m > seq_len) {
        return Err(invalid(format!(
            "position {j} lacks {} teacher-forced tokens in a sequence of {seq_len}",
            m - 1
        )));
    }
    if !(spec.temperature > 0.0) {
        return Err(invalid("temperature must be > 0"));
    }
    if let Mixing::Fixed(w) = spec.mixing {
        if !(0.0..=1.0).contains(&w) {
            return Err(invalid(format!("mixing weight {w} outside [0, 1]")));
        }
    }
    let np = positions.len();
    let layout = PackedLayout::new(seq_len, positions.to_vec(), n + m)?;
    let tokens = layout.tokens(base, |a, p| match a {
        0 => meta.start_of_thought,
        a if a < n => traces[p].tokens[a - 1],
        a if a == n => meta.end_of_thought,
        a => base[positions[p] + a - n],
    });
    let h = mv.hidden(g, &tokens, &layout.position_ids(), Arc::new(layout.visibility()))?;

    let content_rows: Vec<usize> = (0..np)
        .flat_map(|p| (0..n - 1).map(move |a| (a, p)))
        .map(|(a, p)| layout.row(a, p))
        .collect();
    let post_rows: Vec<usize> = (0..np)
        .flat_map(|p| (0..m).map(move |k| (k, p)))
        .map(|(k, p)| layout.row(n + k, p))
        .collect();
    let mut rows: Vec<usize> = (0..seq_len).collect();
    rows.extend(&content_rows);
    rows.extend(&post_rows);
    let hr = g.gather_rows(h, &rows)?;
    let logits = mv.logits(g, hr)?;
    let vocab = g.shape(logits)[1];

    let base_logits = g.slice(logits, 0, 0, seq_len)?;
    let base_lsm = g.log_softmax(base_logits);
    let base_next = if seq_len >= 2 {
        let head = g.slice(base_lsm, 0, 0, seq_len - 1)?;
        let next: Vec<usize> = base[1..].iter().map(|&t| t as usize).collect();
        Some(g.pick(head, &next)?)
    } else {
        None
    };

    let c0 = seq_len;
    let c1 = c0 + content_rows.len();
    let content_logits = g.slice(logits, 0, c0, c1)?;
    let allowed: Vec<bool> = (0..vocab).map(|i| !meta.contains(i as u32)).collect();
    let content_logits = g.masked_fill(content_logits, &allowed, &[vocab])?;
    let content_logits = g.mul_scalar(content_logits, T::lit(1.0 / spec.temperature));
    let content_lsm = g.log_softmax(content_logits);
    let content_ids: Vec<usize> = traces
        .iter()
        .flat_map(|t| t.tokens.iter().map(|&x| x as usize))
        .collect();
    let content_lp = g.pick(content_lsm, &content_ids)?;
    let content_lp = g.reshape(content_lp, &[np, n - 1])?;
    let trace_logprob = g.sum_last(content_lp);

    let post_logits = g.slice(logits, 0, c1, c1 + post_rows.len())?;
    let mixed_thought = g.log_softmax(post_logits);
    let base_rows: Vec<usize> = positions
        .iter()
        .flat_map(|&j| (0..m).map(move |k| j + k))
        .collect();
    let mixed_base = g.gather_rows(base_lsm, &base_rows)?;

    let weights = match spec.mixing {
        Mixing::Learned => {
            let eot_rows: Vec<usize> = (0..np)
                .flat_map(|p| std::iter::repeat_n(layout.row(n, p), m))
                .collect();
            let h_eot = g.gather_rows(h, &eot_rows)?;
            let h_base = g.gather_rows(h, &base_rows)?;
            mv.mixing_weight(g, h_eot, h_base)?
        }
        Mixing::Fixed(w) => g.constant(Tensor::full(&[np * m, 1], T::lit(w))),
    };
    let talk = match spec.mixing {
        Mixing::Fixed(w) if w == 1.0 => mixed_base,
        Mixing::Fixed(w) if w == 0.0 => mixed_thought,
        _ => {
            let wb = g.mul(weights, mixed_base)?;
            let nw = g.neg(weights);
            let one_minus = g.add_scalar(nw, T::one());
            let wt = g.mul(one_minus, mixed_thought)?;
            let mixed = g.add(wb, wt)?;
            if spec.renormalize {
                g.log_softmax(mixed)
            } else {
                mixed
            }
        }
    };

    let (picked, scores) = if positions.iter().all(|&j| j + m < seq_len) {
        let targets: Vec<usize> = positions
            .iter()
            .flat_map(|&j| (1..=m).map(move |k| base[j + k] as usize))
            .collect();
        let picked = g.pick(talk, &targets)?;
        let picked = g.reshape(picked, &[np, m])?;
        let scores = g.sum_last(picked);
        (Some(picked), Some(scores))
    } else {
        (None, None)
    };

    Ok(TalkGraph {
        base_next,
        mixed_base,
        mixed_thought,
        weights,
        talk,
        picked,
        scores,
        trace_logprob,
    })
}

/// Mixed predictions and span scores for every sample of a thought batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TalkResult {
    /// `predictions[sample][pos_index * m + k - 1]`
    pub predictions: Vec<Vec<MixedPrediction>>,
    /// `log p_talk(x_{j+1} .. x_{j+m})`, `scores[sample][pos_index]`.
    pub scores: Vec<Vec<f64>>,
    /// Recomputed content-token log-probability of each trace.
    pub trace_logprobs: Vec<Vec<f64>>,
}

/// Value-level talk pass over every sample of `batch`.
pub fn talk_logprob<T: Real>(
    model: &Model<T>,
    base: &[u32],
    batch: &ThoughtBatch,
    config: &ThoughtConfig,
    mixing: Mixing,
) -> Result<TalkResult> {
    if batch.n_thought != config.n_thought || batch.seq_len != base.len() {
        return Err(invalid("thought batch does not match the sequence or config"));
    }
    if let Some(&j) = batch.positions.iter().find(|&&j| j + config.m_ahead >= base.len()) {
        return Err(invalid(format!(
            "position {j} lacks {} ground-truth successors",
            config.m_ahead
        )));
    }
    let spec = TalkSpec::new(config, mixing);
    let m = config.m_ahead;
    let mut out = TalkResult {
        predictions: Vec::new(),
        scores: Vec::new(),
        trace_logprobs: Vec::new(),
    };
    for traces in &batch.traces {
        let mut g = Graph::no_grad();
        let mv = model.load(&mut g);
        let tg = talk_graph(&mut g, &mv, model.meta_tokens(), base, &batch.positions, traces, &spec)?;
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let t = g.value(v);
            (0..t.shape()[0]).map(|r| to_f64(t.row(r))).collect()
        };
        let (lb, lt, lk) = (rows(tg.mixed_base), rows(tg.mixed_thought), rows(tg.talk));
        let w = to_f64(g.value(tg.weights).data());
        let mut preds = Vec::with_capacity(lb.len());
        for (r, ((b, t), k)) in lb.into_iter().zip(lt).zip(lk).enumerate() {
            preds.push(MixedPrediction {
                position: batch.positions[r / m],
                step: r % m + 1,
                logp_base: b,
                logp_thought: t,
                w: w[r],
                logp_talk: k,
            });
        }
        out.predictions.push(preds);
        out.scores.push(to_f64(g.value(tg.scores.expect("targets checked")).data()));
        out.trace_logprobs.push(to_f64(g.value(tg.trace_logprob).data()));
    }
    Ok(out)
}

fn to_f64<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
}

/// Thought-mode distribution for the token after the last one in `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct NextTokenTalk {
    pub trace: ThoughtTrace,
    pub w: f64,
    pub logp: Vec<f64>,
}

/// Thinks at the final prefix position, then mixes the end-of-thought
/// prediction with the base prediction.
pub fn next_token_talk<T: Real>(
    model: &Model<T>,
    prefix: &[u32],
    config: &ThoughtConfig,
    decoding: Decoding,
    mixing: Mixing,
) -> Result<NextTokenTalk> {
    let j = prefix
        .len()
        .checked_sub(1)
        .ok_or_else(|| invalid("empty prefix"))?;
    let batch = generate_thoughts(model, prefix, &[j], config, decoding)?;
    let trace = batch.traces[0][0].clone();
    let spec = TalkSpec {
        m_ahead: 1,
        ..TalkSpec::new(config, mixing)
    };
    let mut g = Graph::no_grad();
    let mv = model.load(&mut g);
    let tg = talk_graph(&mut g, &mv, model.meta_tokens(), prefix, &[j], std::slice::from_ref(&trace), &spec)?;
    Ok(NextTokenTalk {
        trace,
        w: g.value(tg.weights).data()[0].to_f64().unwrap_or(f64::NAN),
        logp: to_f64(g.value(tg.talk).row(0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MetaInit, ModelConfig};
    use crate::tensor::{logsumexp, Visibility};
    use crate::thought::mix_logits;

    fn model(seed: u64) -> Model<f64> {
        let c = ModelConfig {
            vocab_size: 10,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 128,
            seed,
            meta_init: MetaInit::Mean,
        };
        let mut m = Model::<f32>::init(&c).unwrap().cast::<f64>();
        for p in m.params.iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
        m
    }

    fn lsm(row: &[f64]) -> Vec<f64> {
        let l = logsumexp(row);
        row.iter().map(|v| v - l).collect()
    }

    /// Rebuilds a fresh unpacked sequence per position and scores it directly.
    fn unpacked_score(m: &Model<f64>, base: &[u32], j: usize, trace: &[u32], ahead: usize) -> f64 {
        let meta = m.meta_tokens();
        let plain: Vec<usize> = (0..base.len()).collect();
        let (base_logits, base_h) = m.forward(base, &Visibility::causal(base.len()), &plain).unwrap();
        let mut toks: Vec<u32> = base[..=j].to_vec();
        toks.push(meta.start_of_thought);
        toks.extend_from_slice(trace);
        toks.push(meta.end_of_thought);
        toks.extend_from_slice(&base[j + 1..j + ahead]);
        let pos: Vec<usize> = (0..toks.len()).collect();
        let (logits, h) = m.forward(&toks, &Visibility::causal(toks.len()), &pos).unwrap();
        let eot = j + 1 + trace.len() + 1;
        let mut total = 0.0;
        for k in 1..=ahead {
            let lt = lsm(logits.row(eot + k - 1));
            let lb = lsm(base_logits.row(j + k - 1));
            let w = m.mixing_weight(h.row(eot), base_h.row(j + k - 1)).unwrap();
            let talk = mix_logits(&lb, &lt, w, true).unwrap();
            total += talk[base[j + k] as usize];
        }
        total
    }

    #[test]
    fn packed_scores_match_unpacked_oracle() {
        let m = model(11);
        let base: Vec<u32> = vec![2, 9, 4, 4, 0, 7, 1, 3, 8, 6, 5, 2];
        for (n, ahead) in [(2, 1), (3, 2), (4, 4)] {
            let cfg = ThoughtConfig::new(n, ahead);
            let pos = scorable_positions(base.len(), ahead);
            let b = generate_thoughts(&m, &base, &pos, &cfg, Decoding::Sample { seed: 3 }).unwrap();
            let r = talk_logprob(&m, &base, &b, &cfg, Mixing::Learned).unwrap();
            for s in 0..2 {
                for (p, &j) in pos.iter().enumerate() {
                    let want = unpacked_score(&m, &base, j, &b.traces[s][p].tokens, ahead);
                    let got = r.scores[s][p];
                    assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn recomputed_trace_logprob_matches_generation() {
        let m = model(4);
        let base: Vec<u32> = vec![1, 2, 3, 4, 5, 6];
        let mut cfg = ThoughtConfig::new(4, 2);
        cfg.temperature = 0.7;
        let pos = scorable_positions(6, 2);
        let b = generate_thoughts(&m, &base, &pos, &cfg, Decoding::Sample { seed: 8 }).unwrap();
        let r = talk_logprob(&m, &base, &b, &cfg, Mixing::Learned).unwrap();
        for s in 0..2 {
            for p in 0..pos.len() {
                let gen: f64 = b.traces[s][p].logprobs.iter().map(|&v| v as f64).sum();
                assert!((gen - r.trace_logprobs[s][p]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn unit_weight_gives_base_nll() {
        let m = model(2);
        let base: Vec<u32> = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let cfg = ThoughtConfig::new(3, 1);
        let pos = scorable_positions(8, 1);
        let b = generate_thoughts(&m, &base, &pos, &cfg, Decoding::Greedy).unwrap();
        let r = talk_logprob(&m, &base, &b, &cfg, Mixing::Fixed(1.0)).unwrap();
        let plain: Vec<usize> = (0..8).collect();
        let (logits, _) = m.forward(&base, &Visibility::causal(8), &plain).unwrap();
        for (p, &j) in pos.iter().enumerate() {
            let want = lsm(logits.row(j))[base[j + 1] as usize];
            assert!((r.scores[0][p] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn talk_rows_are_distributions_and_weights_in_range() {
        let m = model(6);
        let base: Vec<u32> = vec![0, 1, 2, 3, 4, 5, 6, 7, 8];
        let cfg = ThoughtConfig::new(3, 3);
        let pos = scorable_positions(9, 3);
        let b = generate_thoughts(&m, &base, &pos, &cfg, Decoding::Sample { seed: 1 }).unwrap();
        let r = talk_logprob(&m, &base, &b, &cfg, Mixing::Learned).unwrap();
        for p in r.predictions.iter().flatten() {
            assert!(logsumexp(&p.logp_talk).abs() < 1e-9);
            assert!(p.w > 0.0 && p.w < 1.0);
        }
        assert_eq!(r.predictions[0].len(), pos.len() * 3);
    }

    #[test]
    fn scorable_positions_drop_short_tails() {
        assert_eq!(scorable_positions(5, 2), vec![0, 1, 2]);
        assert!(scorable_positions(2, 4).is_empty());
    }

    #[test]
    fn next_token_talk_matches_span_scoring() {
        let m = model(9);
        let base: Vec<u32> = vec![5, 4, 3, 2, 1];
        let cfg = ThoughtConfig::new(3, 1);
        let nt = next_token_talk(&m, &base[..4], &cfg, Decoding::Greedy, Mixing::Learned).unwrap();
        let b = generate_thoughts(&m, &base, &[3], &cfg, Decoding::Greedy).unwrap();
        let r = talk_logprob(&m, &base, &b, &cfg, Mixing::Learned).unwrap();
        assert!((nt.logp[1] - r.scores[0][0]).abs() < 1e-12);
    }
}
