//! Learning signal for thoughts: mean-baseline rewards, the policy-gradient
//! term on thought tokens, the auxiliary likelihood terms and the stage loop.

mod train;

pub use train::{train_stage, validation_nll, MetricsRecord, StageOutcome, TrainConfig, TrainOptions};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{MetaTokens, Model, ModelVars};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::thought::{talk_graph, Mixing, TalkSpec, ThoughtBatch, ThoughtConfig};

/// Rewards for every sample at one base position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub position: usize,
    pub talk_scores: Vec<f64>,
    pub mean_score: f64,
    pub rewards: Vec<f64>,
}

/// Mean of `xs`, exact when every element is equal.
fn stable_mean(xs: &[f64]) -> f64 {
    let x0 = xs[0];
    x0 + xs.iter().map(|&x| x - x0).sum::<f64>() / xs.len() as f64
}

/// Subtracts the per-position mean talk score. The last sample's reward is
/// the negated sum of the others so each position sums to exactly zero
/// (left-to-right). `clip` bounds rewards symmetrically after centering.
pub fn compute_rewards(
    positions: &[usize],
    talk_scores: &[Vec<f64>],
    clip: Option<f64>,
) -> Result<Vec<RewardRecord>> {
    if talk_scores.len() != positions.len() {
        return Err(invalid(format!(
            "{} score rows for {} positions",
            talk_scores.len(),
            positions.len()
        )));
    }
    positions
        .iter()
        .zip(talk_scores)
        .map(|(&position, scores)| {
            if scores.len() < 2 {
                return Err(invalid(format!(
                    "position {position}: the mean baseline needs at least 2 samples, got {}",
                    scores.len()
                )));
            }
            let mean = stable_mean(scores);
            let mut rewards: Vec<f64> = scores[..scores.len() - 1].iter().map(|&t| t - mean).collect();
            let partial: f64 = rewards.iter().sum();
            rewards.push(-partial);
            if let Some(c) = clip {
                rewards.iter_mut().for_each(|r| *r = r.clamp(-c, c));
            }
            Ok(RewardRecord {
                position,
                talk_scores: scores.clone(),
                mean_score: mean,
                rewards,
            })
        })
        .collect()
}

/// `-sum_{j,s} r_{j,s} log p(T_{j,s})` divided by the number of positions.
/// `trace_logprob[s]` is a `[P]` graph node; rewards enter as constants.
pub fn reinforce_loss<T: Real>(g: &mut Graph<T>, trace_logprob: &[Var], rewards: &[RewardRecord]) -> Result<Var> {
    let np = rewards.len();
    if np == 0 {
        return Err(invalid("no contributing positions"));
    }
    let mut total: Option<Var> = None;
    for (s, &lp) in trace_logprob.iter().enumerate() {
        if g.shape(lp) != [np] {
            return Err(invalid(format!("trace log-probs {:?} for {np} positions", g.shape(lp))));
        }
        let r: Vec<T> = rewards
            .iter()
            .map(|rec| rec.rewards.get(s).copied().map(T::lit))
            .collect::<Option<_>>()
            .ok_or_else(|| invalid(format!("missing reward for sample {s}")))?;
        let r = g.constant(Tensor::new(vec![np], r)?);
        let weighted = g.mul(r, lp)?;
        let sum = g.sum(weighted);
        total = Some(match total {
            Some(t) => g.add(t, sum)?,
            None => sum,
        });
    }
    let total = total.ok_or_else(|| invalid("no samples"))?;
    Ok(g.mul_scalar(total, T::lit(-1.0 / np as f64)))
}

/// Mean negative log-likelihood of a vector of picked log-probabilities.
pub fn nll_loss<T: Real>(g: &mut Graph<T>, picked: Var) -> Var {
    let m = g.mean(picked);
    g.neg(m)
}

/// Where the policy-gradient rewards come from.
#[derive(Clone, Copy, Debug)]
pub enum RewardSource<'a> {
    /// From this graph's own talk scores.
    Computed { clip: Option<f64> },
    /// Held fixed, e.g. for finite-difference checks.
    Fixed(&'a [RewardRecord]),
}

/// Graph nodes and side values of one sequence's training loss.
pub struct SequenceLoss {
    pub total: Var,
    pub reinforce: Var,
    pub nll_base: Var,
    pub nll_talk: Var,
    pub rewards: Vec<RewardRecord>,
    /// Talk scores per `[sample][position]`.
    pub scores: Vec<Vec<f64>>,
    pub mean_w: f64,
}

/// `reinforce + nll_weight * (nll_base + nll_talk)` for one sequence whose
/// thoughts were generated at `batch.positions`.
#[allow(clippy::too_many_arguments)]
pub fn sequence_loss<T: Real>(
    g: &mut Graph<T>,
    mv: &ModelVars,
    meta: MetaTokens,
    tokens: &[u32],
    batch: &ThoughtBatch,
    config: &ThoughtConfig,
    nll_weight: f64,
    rewards: RewardSource<'_>,
) -> Result<SequenceLoss> {
    if batch.positions.is_empty() || batch.traces.is_empty() {
        return Err(invalid("thought batch has no positions or samples"));
    }
    if let Some(&j) = batch.positions.iter().find(|&&j| j + config.m_ahead >= tokens.len()) {
        return Err(invalid(format!("position {j} lacks {} successors", config.m_ahead)));
    }
    let spec = TalkSpec::new(config, Mixing::Learned);
    let mut talks = Vec::with_capacity(batch.traces.len());
    for traces in &batch.traces {
        talks.push(talk_graph(g, mv, meta, tokens, &batch.positions, traces, &spec)?);
    }
    let to_f64 = |g: &Graph<T>, v: Var| -> Vec<f64> {
        g.value(v).data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    };
    let scores: Vec<Vec<f64>> = talks
        .iter()
        .map(|t| to_f64(g, t.scores.expect("positions have targets")))
        .collect();
    let rewards = match rewards {
        RewardSource::Computed { clip } => {
            let per_pos: Vec<Vec<f64>> = (0..batch.positions.len())
                .map(|p| scores.iter().map(|s| s[p]).collect())
                .collect();
            compute_rewards(&batch.positions, &per_pos, clip)?
        }
        RewardSource::Fixed(r) => r.to_vec(),
    };
    let lps: Vec<Var> = talks.iter().map(|t| t.trace_logprob).collect();
    let reinforce = reinforce_loss(g, &lps, &rewards)?;

    let base_next = talks[0].base_next.ok_or_else(|| invalid("sequence shorter than 2 tokens"))?;
    let nll_base = nll_loss(g, base_next);
    let picked: Vec<Var> = talks.iter().map(|t| t.picked.expect("positions have targets")).collect();
    let all = g.concat(&picked, 0)?;
    let nll_talk = nll_loss(g, all);
    let aux = g.add(nll_base, nll_talk)?;
    let aux = g.mul_scalar(aux, T::lit(nll_weight));
    let total = g.add(reinforce, aux)?;

    let ws: Vec<f64> = talks.iter().flat_map(|t| to_f64(g, t.weights)).collect();
    let mean_w = ws.iter().sum::<f64>() / ws.len().max(1) as f64;
    Ok(SequenceLoss {
        total,
        reinforce,
        nll_base,
        nll_talk,
        rewards,
        scores,
        mean_w,
    })
}

/// Loss value and parameter gradients of [`sequence_loss`] on a fresh graph.
pub fn sequence_loss_and_grads<T: Real>(
    model: &Model<T>,
    tokens: &[u32],
    batch: &ThoughtBatch,
    config: &ThoughtConfig,
    nll_weight: f64,
    rewards: RewardSource<'_>,
) -> Result<(f64, Vec<Tensor<T>>, Vec<RewardRecord>)> {
    let mut g = Graph::new();
    let mv = model.load(&mut g);
    let loss = sequence_loss(&mut g, &mv, model.meta_tokens(), tokens, batch, config, nll_weight, rewards)?;
    g.backward(loss.total)?;
    let grads = mv
        .vars
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let value = g.value(loss.total).data()[0].to_f64().unwrap_or(f64::NAN);
    Ok((value, grads, loss.rewards))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rewards(scores: &[f64]) -> Vec<f64> {
        compute_rewards(&[0], &[scores.to_vec()], None).unwrap()[0].rewards.clone()
    }

    #[test]
    fn two_sample_rewards() {
        assert_eq!(rewards(&[-1.0, -3.0]), vec![1.0, -1.0]);
    }

    #[test]
    fn three_sample_rewards() {
        assert_eq!(rewards(&[-1.0, -2.0, -6.0]), vec![2.0, 1.0, -3.0]);
    }

    #[test]
    fn equal_samples_give_zero() {
        for x in [0.1, -7.3, 1e-9, 123.456] {
            assert!(rewards(&[x; 3]).iter().all(|&r| r == 0.0));
            assert!(rewards(&[x; 7]).iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn single_sample_fails() {
        assert!(compute_rewards(&[0], &[vec![-1.0]], None).is_err());
    }

    #[test]
    fn clipping_bounds_rewards() {
        let r = compute_rewards(&[0], &[vec![-1.0, -9.0]], Some(2.0)).unwrap();
        assert_eq!(r[0].rewards, vec![2.0, -2.0]);
    }

    #[test]
    fn zero_rewards_zero_loss() {
        let mut g = Graph::<f64>::new();
        let lp = g.param(Tensor::from_vec(vec![-1.0, -2.0]));
        let recs = compute_rewards(&[0, 1], &[vec![-1.0, -1.0], vec![-3.0, -3.0]], None).unwrap();
        let loss = reinforce_loss(&mut g, &[lp, lp], &recs).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
        g.backward(loss).unwrap();
        assert!(g.grad(lp).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_nll_is_log_v() {
        let mut g = Graph::<f64>::new();
        let v = 7.0f64;
        let lp = g.param(Tensor::from_vec(vec![-(v.ln()); 5]));
        let l = nll_loss(&mut g, lp);
        assert!((g.value(l).data()[0] - v.ln()).abs() < 1e-12);
    }
}
