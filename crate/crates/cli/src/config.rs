//! Run configuration files and their validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use thoughtlab::curriculum::CurriculumSchedule;
use thoughtlab::data::BYTE_VOCAB;
use thoughtlab::distill::DistillConfig;
use thoughtlab::model::ModelConfig;
use thoughtlab::rl::TrainConfig;
use thoughtlab::thought::ThoughtConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Text files, read as raw bytes.
    pub corpus: Vec<PathBuf>,
    pub seq_len: usize,
    /// Windows held out from the end of the shuffled corpus.
    #[serde(default)]
    pub validation_sequences: usize,
    /// Validation cadence in steps; 0 measures only the first and last step.
    #[serde(default)]
    pub eval_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub teacher: Option<PathBuf>,
    pub steps: u64,
    pub learning_rate: Option<f64>,
    pub step_offset: u64,
    pub clip_negative: bool,
    pub normalize: bool,
    pub add_nll: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            teacher: None,
            steps: 50,
            learning_rate: None,
            step_offset: 0,
            clip_negative: false,
            normalize: false,
            add_nll: false,
        }
    }
}

/// Everything a training or distillation run depends on.
///
/// `seed` is the single source of randomness: it is copied into the model
/// initializer and the trainer when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    /// Regime for a single-stage run, and sampling settings for every stage.
    #[serde(default)]
    pub thought: ThoughtConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curriculum: Option<CurriculumSchedule>,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eval_datasets: Vec<PathBuf>,
    #[serde(default)]
    pub distill: DistillSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).context("parsing run config")
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Copies `seed` into the model and trainer and makes paths absolute
    /// relative to `base`, so the result can be re-run from anywhere.
    pub fn resolve(mut self, base: &Path) -> Self {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.output_dir = abs(&self.output_dir);
        self.data.corpus = self.data.corpus.iter().map(|p| abs(p)).collect();
        self.eval_datasets = self.eval_datasets.iter().map(|p| abs(p)).collect();
        self.distill.teacher = self.distill.teacher.as_deref().map(abs);
        self
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            train: TrainConfig {
                total_steps: self.distill.steps,
                step_offset: self.distill.step_offset,
                learning_rate: self.distill.learning_rate.unwrap_or(self.train.learning_rate),
                ..self.train.clone()
            },
            clip_negative: self.distill.clip_negative,
            normalize: self.distill.normalize,
            add_nll: self.distill.add_nll,
        }
    }

    /// Every problem with the config, one per line. `needs_teacher` adds the
    /// distillation requirements.
    pub fn problems(&self, needs_teacher: bool) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |field: &str, r: thoughtlab::Result<()>| {
            if let Err(e) = r {
                out.push(format!("{field}: {e}"));
            }
        };
        push("model", self.model.validate());
        push("thought", self.thought.validate());
        push("train", self.train.validate());
        if let Some(c) = &self.curriculum {
            push("curriculum", c.validate(&self.model, self.data.seq_len, &self.thought));
        } else if self.data.seq_len > self.thought.m_ahead {
            let packed = self.thought.packed_len(self.data.seq_len, self.data.seq_len - self.thought.m_ahead);
            if packed > self.model.max_seq_len {
                out.push(format!(
                    "model.max_seq_len: {} is shorter than the {packed} packed rows a {}-token window needs",
                    self.model.max_seq_len, self.data.seq_len
                ));
            }
        }
        if self.model.vocab_size != BYTE_VOCAB {
            out.push(format!(
                "model.vocab_size: the byte tokenizer needs {BYTE_VOCAB}, got {}",
                self.model.vocab_size
            ));
        }
        if self.data.corpus.is_empty() {
            out.push("data.corpus: no corpus path given".to_string());
        }
        for p in &self.data.corpus {
            if !p.is_file() {
                out.push(format!("data.corpus: {} does not exist", p.display()));
            }
        }
        for p in &self.eval_datasets {
            if !p.is_file() {
                out.push(format!("eval_datasets: {} does not exist", p.display()));
            }
        }
        if self.curriculum.is_none() && self.data.seq_len <= self.thought.m_ahead {
            out.push(format!(
                "data.seq_len: {} leaves no position with {} ahead tokens",
                self.data.seq_len, self.thought.m_ahead
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            out.push("output_dir: empty".to_string());
        }
        if needs_teacher {
            match &self.distill.teacher {
                None => out.push("distill.teacher: no teacher checkpoint given".to_string()),
                Some(p) if !p.is_file() => out.push(format!("distill.teacher: {} does not exist", p.display())),
                _ => {}
            }
            if let Err(e) = self.distill_config().train.validate() {
                out.push(format!("distill: {e}"));
            }
        }
        out
    }

    pub fn validate(&self, needs_teacher: bool) -> anyhow::Result<()> {
        let p = self.problems(needs_teacher);
        if p.is_empty() {
            Ok(())
        } else {
            bail!("invalid config:\n  {}", p.join("\n  "))
        }
    }

    /// A small runnable example with every section filled in.
    pub fn example() -> Self {
        Self {
            seed: 0,
            output_dir: "runs/example".into(),
            model: ModelConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                max_seq_len: 512,
                ..Default::default()
            },
            thought: ThoughtConfig::new(16, 8),
            curriculum: None,
            train: TrainConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            data: DataConfig {
                corpus: vec!["corpus.txt".into()],
                seq_len: 16,
                validation_sequences: 64,
                eval_every: 10,
            },
            eval_datasets: Vec::new(),
            distill: DistillSection::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_round_trips_through_toml() {
        let c = RunConfig::example();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let mut c = c;
        c.curriculum = Some(CurriculumSchedule::forward_default());
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn every_bad_field_is_reported() {
        let mut c = RunConfig::example();
        c.data.corpus = vec!["/nonexistent/corpus.txt".into()];
        c.model.n_heads = 3;
        c.train.batch_size = 0;
        c.thought.num_samples = 1;
        let p = c.problems(true).join("\n");
        for field in ["data.corpus", "model", "train", "thought", "distill.teacher"] {
            assert!(p.contains(&format!("{field}:")), "{field} missing from\n{p}");
        }
    }
}
