//! Multi-stage training over decreasing (or, reversed, increasing) thought budgets.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, ModelConfig, ThoughtTag};
use crate::rl::{train_stage, MetricsRecord, TrainConfig, TrainOptions};
use crate::thought::ThoughtConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub n: usize,
    pub m: usize,
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
}

impl Stage {
    pub fn new(n: usize, m: usize, steps: u64) -> Self {
        Self {
            n,
            m,
            steps,
            learning_rate: None,
        }
    }

    pub fn tag(&self) -> ThoughtTag {
        ThoughtTag {
            n_thought: self.n,
            m_ahead: self.m,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Forward,
    Reversed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub direction: Direction,
}

impl CurriculumSchedule {
    /// 16-8 for 100 steps, then 12-4 and 8-4 for 50 steps each.
    pub fn forward_default() -> Self {
        Self {
            stages: vec![Stage::new(16, 8, 100), Stage::new(12, 4, 50), Stage::new(8, 4, 50)],
            direction: Direction::Forward,
        }
    }

    /// 8-4 for 100 steps, then 12-4 and 16-8 for 50 steps each.
    pub fn reversed_default() -> Self {
        Self {
            stages: vec![Stage::new(8, 4, 100), Stage::new(12, 4, 50), Stage::new(16, 8, 50)],
            direction: Direction::Reversed,
        }
    }

    pub fn single(n: usize, m: usize, steps: u64) -> Self {
        Self {
            stages: vec![Stage::new(n, m, steps)],
            direction: Direction::Forward,
        }
    }

    /// Thought config of stage `k`, sharing sampling settings with `template`.
    pub fn thought_config(&self, k: usize, template: &ThoughtConfig) -> ThoughtConfig {
        ThoughtConfig {
            n_thought: self.stages[k].n,
            m_ahead: self.stages[k].m,
            ..template.clone()
        }
    }

    /// Train config of stage `k`: same seed, step offset after earlier stages,
    /// optional learning-rate override.
    pub fn train_config(&self, k: usize, base: &TrainConfig) -> TrainConfig {
        let s = &self.stages[k];
        TrainConfig {
            total_steps: s.steps,
            learning_rate: s.learning_rate.unwrap_or(base.learning_rate),
            step_offset: base.step_offset + self.stages[..k].iter().map(|s| s.steps).sum::<u64>(),
            ..base.clone()
        }
    }

    /// Checks every stage against the model before any training happens.
    pub fn validate(&self, model: &ModelConfig, seq_len: usize, template: &ThoughtConfig) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("curriculum has no stages".into()));
        }
        let mut problems = Vec::new();
        for k in 0..self.stages.len() {
            let tc = self.thought_config(k, template);
            if let Err(e) = tc.validate() {
                problems.push(format!("stage {k}: {e}"));
                continue;
            }
            if seq_len <= tc.m_ahead {
                problems.push(format!("stage {k}: seq_len {seq_len} leaves no scorable position"));
                continue;
            }
            let packed = tc.packed_len(seq_len, seq_len - tc.m_ahead);
            if packed > model.max_seq_len {
                problems.push(format!(
                    "stage {k} ({}): packed length {packed} exceeds max_seq_len {}",
                    tc.tag(),
                    model.max_seq_len
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub path: Option<PathBuf>,
    pub metrics: Vec<MetricsRecord>,
}

pub struct CurriculumOptions<'a> {
    /// Where stage checkpoints are written; `None` keeps them in memory only.
    pub checkpoint_dir: Option<&'a Path>,
    pub validation: Option<&'a [Vec<u32>]>,
    pub eval_every: u64,
    pub metrics_out: Option<&'a mut dyn Write>,
}

impl Default for CurriculumOptions<'_> {
    fn default() -> Self {
        Self {
            checkpoint_dir: None,
            validation: None,
            eval_every: 0,
            metrics_out: None,
        }
    }
}

pub fn checkpoint_name(k: usize, stage: &Stage) -> String {
    format!("stage{k}-{}.ckpt", stage.tag())
}

/// Runs each stage from the previous stage's final weights (stage 0 from
/// `init`, or a fresh model). Optimizer state starts over at every stage.
pub fn run_curriculum(
    model_config: &ModelConfig,
    init: Option<Model<f32>>,
    schedule: &CurriculumSchedule,
    corpus: &[Vec<u32>],
    base: &TrainConfig,
    template: &ThoughtConfig,
    mut opts: CurriculumOptions<'_>,
) -> Result<Vec<StageResult>> {
    model_config.validate()?;
    base.validate()?;
    let seq_len = corpus.iter().map(Vec::len).max().unwrap_or(0);
    schedule.validate(model_config, seq_len, template)?;
    let mut model = match init {
        Some(m) if m.config != *model_config => {
            return Err(Error::Config(format!(
                "initial checkpoint config {:?} does not match run config {:?}",
                m.config, model_config
            )))
        }
        Some(m) => m,
        None => Model::init(model_config)?,
    };
    if let Some(dir) = opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut results = Vec::with_capacity(schedule.stages.len());
    for (k, stage) in schedule.stages.iter().enumerate() {
        let tc = schedule.thought_config(k, template);
        let train = schedule.train_config(k, base);
        let out = train_stage(
            model,
            corpus,
            &tc,
            &train,
            TrainOptions {
                stage: stage.tag().to_string(),
                validation: opts.validation,
                eval_every: opts.eval_every,
                metrics_out: opts.metrics_out.as_mut().map(|w| &mut **w as &mut dyn Write),
            },
        )?;
        let ckpt = Checkpoint::new(out.model, Some(stage.tag()), stage.tag().to_string());
        let path = match opts.checkpoint_dir {
            Some(dir) => {
                let p = dir.join(checkpoint_name(k, stage));
                ckpt.save(&p)?;
                Some(p)
            }
            None => None,
        };
        model = ckpt.model.clone();
        results.push(StageResult {
            checkpoint: ckpt,
            path,
            metrics: out.metrics,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedules() {
        let f: Vec<String> = CurriculumSchedule::forward_default()
            .stages
            .iter()
            .map(|s| format!("{}:{}", s.tag(), s.steps))
            .collect();
        assert_eq!(f, ["16-8:100", "12-4:50", "8-4:50"]);
        let r: Vec<String> = CurriculumSchedule::reversed_default()
            .stages
            .iter()
            .map(|s| format!("{}:{}", s.tag(), s.steps))
            .collect();
        assert_eq!(r, ["8-4:100", "12-4:50", "16-8:50"]);
    }

    #[test]
    fn step_offsets_accumulate() {
        let s = CurriculumSchedule::forward_default();
        let base = TrainConfig::default();
        assert_eq!(s.train_config(0, &base).step_offset, 0);
        assert_eq!(s.train_config(2, &base).step_offset, 150);
        assert_eq!(s.train_config(2, &base).total_steps, 50);
    }

    #[test]
    fn oversized_stage_is_rejected_up_front() {
        let mc = ModelConfig {
            max_seq_len: 100,
            ..Default::default()
        };
        let err = CurriculumSchedule::forward_default()
            .validate(&mc, 16, &ThoughtConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("16-8"));
    }
}
