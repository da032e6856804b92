//! Reward-weighted next-token training of a plain decoder against a frozen
//! thought-mode teacher. The per-token reward is the teacher's loss minus
//! the student's loss on the same ground-truth token.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::eval::{next_token_logprobs, InferenceMode};
use crate::model::{Checkpoint, Model};
use crate::optim::{clip_grad_norm, AdamW};
use crate::rl::{validation_nll, TrainConfig};
use crate::tensor::{Graph, Real, Tensor, Visibility};
use crate::thought::{Mixing, ThoughtConfig};

/// `teacher_loss - student_loss`.
pub fn distill_reward(teacher_loss: f64, student_loss: f64) -> f64 {
    teacher_loss - student_loss
}

/// Negative log-likelihood of `x_{i+1}` under the teacher's talk distribution
/// after a greedy thought at position `i`, for every `i` in `0..L-1`.
pub fn teacher_token_loss<T: Real>(
    teacher: &Model<T>,
    tokens: &[u32],
    thought: &ThoughtConfig,
    mixing: Mixing,
) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Ok(Vec::new());
    }
    let mode = InferenceMode::Thought {
        config: thought.clone(),
        fixed_weight: match mixing {
            Mixing::Fixed(w) => Some(w),
            Mixing::Learned => None,
        },
    };
    let positions: Vec<usize> = (0..tokens.len() - 1).collect();
    Ok(next_token_logprobs(teacher, &mode, tokens, &positions)?
        .into_iter()
        .map(|v| -v)
        .collect())
}

/// Plain next-token NLL of `x_{i+1}` at every position `i`.
pub fn student_token_loss<T: Real>(student: &Model<T>, tokens: &[u32]) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Ok(Vec::new());
    }
    let positions: Vec<usize> = (0..tokens.len() - 1).collect();
    Ok(next_token_logprobs(student, &InferenceMode::Ntp, tokens, &positions)?
        .into_iter()
        .map(|v| -v)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub train: TrainConfig,
    /// Drop negative rewards instead of pushing probability away from the ground truth.
    pub clip_negative: bool,
    /// Divide rewards by their batch standard deviation.
    pub normalize: bool,
    /// Add the plain next-token likelihood term.
    pub add_nll: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                total_steps: 50,
                ..Default::default()
            },
            clip_negative: false,
            normalize: false,
            add_nll: false,
        }
    }
}

fn sequence_key(tokens: &[u32]) -> u64 {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

const CACHE_MAGIC: &[u8; 8] = b"TLABTCHR";
const CACHE_VERSION: u32 = 1;

/// Teacher per-token losses keyed by sequence hash, valid for one teacher checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherCache {
    pub teacher_hash: String,
    entries: HashMap<u64, Vec<f64>>,
}

impl TeacherCache {
    pub fn new(teacher_hash: impl Into<String>) -> Self {
        Self {
            teacher_hash: teacher_hash.into(),
            entries: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, tokens: &[u32]) -> Option<&[f64]> {
        self.entries.get(&sequence_key(tokens)).map(Vec::as_slice)
    }

    pub fn insert(&mut self, tokens: &[u32], losses: Vec<f64>) {
        self.entries.insert(sequence_key(tokens), losses);
    }

    /// Header (magic, version, teacher hash) then `(sequence id u64, position u32, loss f64)` triples.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.teacher_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.teacher_hash.as_bytes());
        let mut keys: Vec<&u64> = self.entries.keys().collect();
        keys.sort();
        let total: usize = self.entries.values().map(Vec::len).sum();
        out.extend_from_slice(&(total as u64).to_le_bytes());
        for k in keys {
            for (p, l) in self.entries[k].iter().enumerate() {
                out.extend_from_slice(&k.to_le_bytes());
                out.extend_from_slice(&(p as u32).to_le_bytes());
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("teacher cache: {m}"));
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        if u32::from_le_bytes(take(4)?.try_into().expect("4")) != CACHE_VERSION {
            return Err(bad("unsupported version"));
        }
        let hl = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let hash = String::from_utf8(take(hl)?.to_vec()).map_err(|_| bad("hash not utf-8"))?;
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8"));
        let mut cache = Self::new(hash);
        for _ in 0..n {
            let k = u64::from_le_bytes(take(8)?.try_into().expect("8"));
            let p = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
            let l = f64::from_le_bytes(take(8)?.try_into().expect("8"));
            let e = cache.entries.entry(k).or_default();
            if e.len() != p {
                return Err(bad("positions out of order"));
            }
            e.push(l);
        }
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(cache)
    }

    /// Loads the cache at `path` if it exists and belongs to `teacher_hash`;
    /// otherwise starts empty.
    pub fn open(path: &Path, teacher_hash: &str) -> Result<Self> {
        match std::fs::read(path) {
            Ok(buf) => {
                let c = Self::from_bytes(&buf)?;
                Ok(if c.teacher_hash == teacher_hash {
                    c
                } else {
                    Self::new(teacher_hash)
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new(teacher_hash)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Frozen teacher and trainable student, initialized from the same weights.
pub struct DistillPair {
    pub teacher: Checkpoint,
    pub teacher_config: ThoughtConfig,
    pub teacher_mixing: Mixing,
    pub student: Model<f32>,
    teacher_hash: String,
}

impl DistillPair {
    /// Fails unless the checkpoint records the regime it was trained under.
    pub fn new(teacher: Checkpoint) -> Result<Self> {
        let tag = teacher
            .thought
            .ok_or_else(|| invalid("teacher checkpoint carries no thought regime"))?;
        Ok(Self::with_config(teacher.clone(), ThoughtConfig::new(tag.n_thought, tag.m_ahead)))
    }

    pub fn with_config(teacher: Checkpoint, teacher_config: ThoughtConfig) -> Self {
        let teacher_hash = teacher.hash();
        Self {
            student: teacher.model.clone(),
            teacher,
            teacher_config,
            teacher_mixing: Mixing::Learned,
            teacher_hash,
        }
    }

    pub fn teacher_hash(&self) -> &str {
        &self.teacher_hash
    }

    pub fn teacher_losses(&self, tokens: &[u32], cache: &mut TeacherCache) -> Result<Vec<f64>> {
        if let Some(l) = cache.get(tokens) {
            return Ok(l.to_vec());
        }
        let l = teacher_token_loss(&self.teacher.model, tokens, &self.teacher_config, self.teacher_mixing)?;
        cache.insert(tokens, l.clone());
        Ok(l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    pub step: u64,
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_abs_reward: f64,
    pub teacher_loss: f64,
    pub student_loss: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_nll: Option<f64>,
    pub wall_ms: f64,
}

impl DistillMetrics {
    pub fn same_values(&self, other: &Self) -> bool {
        Self {
            wall_ms: 0.0,
            ..self.clone()
        } == Self {
            wall_ms: 0.0,
            ..other.clone()
        }
    }
}

/// `-mean_j r_j log p(x_j)` over every token of the batch, plus the plain
/// likelihood when `add_nll` is set. Returns loss value, gradients and the
/// (teacher, student) mean losses.
pub fn distill_loss_and_grads<T: Real>(
    student: &Model<T>,
    batch: &[&[u32]],
    teacher_losses: &[Vec<f64>],
    config: &DistillConfig,
) -> Result<(f64, Vec<Tensor<T>>, Vec<f64>)> {
    let mut g = Graph::new();
    let mv = student.load(&mut g);
    let mut picked = Vec::new();
    let mut rewards = Vec::new();
    for (tokens, tl) in batch.iter().zip(teacher_losses) {
        if tokens.len() < 2 || tl.len() != tokens.len() - 1 {
            return Err(invalid("teacher losses do not match the sequence"));
        }
        let pos: Vec<usize> = (0..tokens.len()).collect();
        let h = mv.hidden(&mut g, tokens, &pos, std::sync::Arc::new(Visibility::causal(tokens.len())))?;
        let logits = mv.logits(&mut g, h)?;
        let lsm = g.log_softmax(logits);
        let head = g.slice(lsm, 0, 0, tokens.len() - 1)?;
        let next: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
        let lp = g.pick(head, &next)?;
        for (i, v) in g.value(lp).data().iter().enumerate() {
            let student_loss = -v.to_f64().unwrap_or(f64::NAN);
            rewards.push(distill_reward(tl[i], student_loss));
        }
        picked.push(lp);
    }
    if config.clip_negative {
        rewards.iter_mut().for_each(|r| *r = r.max(0.0));
    }
    if config.normalize {
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let sd = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            rewards.iter_mut().for_each(|r| *r /= sd);
        }
    }
    let lp = g.concat(&picked, 0)?;
    let n = rewards.len();
    let r = g.constant(Tensor::new(vec![n], rewards.iter().map(|&v| T::lit(v)).collect())?);
    let weighted = g.mul(r, lp)?;
    let s = g.sum(weighted);
    let mut loss = g.mul_scalar(s, T::lit(-1.0 / n as f64));
    if config.add_nll {
        let m = g.mean(lp);
        let nll = g.neg(m);
        let w = g.mul_scalar(nll, T::lit(config.train.nll_loss_weight));
        loss = g.add(loss, w)?;
    }
    g.backward(loss)?;
    let grads = mv
        .vars
        .iter()
        .zip(&student.params)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN), grads, rewards))
}

#[derive(Default)]
pub struct DistillOptions<'a> {
    pub cache: Option<&'a mut TeacherCache>,
    pub validation: Option<&'a [Vec<u32>]>,
    pub eval_every: u64,
    pub metrics_out: Option<&'a mut dyn Write>,
}

pub struct DistillOutcome {
    pub student: Model<f32>,
    pub metrics: Vec<DistillMetrics>,
    /// Plain next-token validation NLL before the first update.
    pub initial_val_nll: Option<f64>,
}

/// Updates the student only; the teacher is never written.
pub fn run_distillation(
    pair: &mut DistillPair,
    corpus: &[Vec<u32>],
    config: &DistillConfig,
    mut opts: DistillOptions<'_>,
) -> Result<DistillOutcome> {
    config.train.validate()?;
    pair.teacher_config.validate()?;
    if corpus.is_empty() {
        return Err(invalid("empty distillation corpus"));
    }
    let mut local = TeacherCache::new(pair.teacher_hash.clone());
    let cache: &mut TeacherCache = match opts.cache.take() {
        Some(c) if c.teacher_hash == pair.teacher_hash => c,
        Some(c) => {
            *c = TeacherCache::new(pair.teacher_hash.clone());
            c
        }
        None => &mut local,
    };
    let initial_val_nll = opts.validation.map(|v| validation_nll(&pair.student, v)).transpose()?;
    let tc = &config.train;
    let names = pair.student.names().to_vec();
    let mut opt = AdamW::new(tc.adamw(), &pair.student.params);
    let mut metrics = Vec::new();
    let b = tc.batch_size;
    for t in 0..tc.total_steps {
        let started = Instant::now();
        let global = tc.step_offset + t;
        let seqs: Vec<&[u32]> = (0..b)
            .map(|i| corpus[((global as u128 * b as u128 + i as u128) % corpus.len() as u128) as usize].as_slice())
            .collect();
        let teacher: Vec<Vec<f64>> = seqs
            .iter()
            .map(|s| pair.teacher_losses(s, cache))
            .collect::<Result<_>>()?;
        let (loss, grads, rewards) = distill_loss_and_grads(&pair.student, &seqs, &teacher, config)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: global,
                component: "distill_loss".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<f32>>> = grads.into_iter().map(Some).collect();
        let grad_norm = clip_grad_norm(&mut grads, tc.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step: global,
                component: "gradient".into(),
            });
        }
        let n = rewards.len() as f64;
        let teacher_mean = teacher.iter().flatten().sum::<f64>() / n;
        let mean_reward = rewards.iter().sum::<f64>() / n;
        opt.step(&mut pair.student.params, &grads, &names)?;
        let last = t + 1 == tc.total_steps;
        let due = t == 0 || last || (opts.eval_every > 0 && (t + 1) % opts.eval_every == 0);
        let val_nll = match opts.validation {
            Some(v) if due => Some(validation_nll(&pair.student, v)?),
            _ => None,
        };
        let rec = DistillMetrics {
            step: global + 1,
            loss,
            mean_reward,
            mean_abs_reward: rewards.iter().map(|r| r.abs()).sum::<f64>() / n,
            teacher_loss: teacher_mean,
            student_loss: teacher_mean - mean_reward,
            grad_norm,
            val_nll,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(out) = opts.metrics_out.as_mut() {
            writeln!(out, "{}", serde_json::to_string(&rec).expect("finite metrics"))?;
        }
        metrics.push(rec);
    }
    Ok(DistillOutcome {
        student: pair.student.clone(),
        metrics,
        initial_val_nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MetaInit, ModelConfig, ThoughtTag};

    fn tiny() -> Model<f32> {
        Model::init(&ModelConfig {
            vocab_size: 12,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 128,
            seed: 4,
            meta_init: MetaInit::Mean,
        })
        .unwrap()
    }

    #[test]
    fn reward_arithmetic() {
        assert_eq!(distill_reward(2.0, 1.5), 0.5);
        assert_eq!(distill_reward(1.0, 1.0), 0.0);
        assert_eq!(distill_reward(1.0, 3.0), -2.0);
    }

    #[test]
    fn cache_round_trip_and_invalidation() {
        let mut c = TeacherCache::new("abc");
        c.insert(&[1, 2, 3], vec![0.5, 1.25]);
        c.insert(&[3, 2, 1], vec![2.0, 0.0]);
        let back = TeacherCache::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.cache");
        c.save(&p).unwrap();
        assert_eq!(TeacherCache::open(&p, "abc").unwrap().len(), 2);
        assert!(TeacherCache::open(&p, "other").unwrap().is_empty());
    }

    #[test]
    fn pair_requires_thought_tag() {
        assert!(DistillPair::new(Checkpoint::new(tiny(), None, "x")).is_err());
        let tagged = Checkpoint::new(
            tiny(),
            Some(ThoughtTag {
                n_thought: 3,
                m_ahead: 1,
            }),
            "x",
        );
        let pair = DistillPair::new(tagged.clone()).unwrap();
        assert_eq!(pair.student, tagged.model);
    }

    #[test]
    fn zero_lr_keeps_student_and_teacher() {
        let tagged = Checkpoint::new(tiny(), Some(ThoughtTag { n_thought: 3, m_ahead: 1 }), "t");
        let hash = tagged.hash();
        let mut pair = DistillPair::new(tagged.clone()).unwrap();
        let corpus: Vec<Vec<u32>> = (0..4).map(|k| (0..8).map(|i| (i + k) % 12).collect()).collect();
        let cfg = DistillConfig {
            train: TrainConfig {
                learning_rate: 0.0,
                batch_size: 2,
                total_steps: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = run_distillation(&mut pair, &corpus, &cfg, Default::default()).unwrap();
        assert_eq!(out.student, tagged.model);
        assert_eq!(pair.teacher.hash(), hash);
    }
}
