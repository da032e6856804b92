//! Decoder-only transformer with two learned meta-tokens and a mixing head.

mod checkpoint;
mod forward;

pub use checkpoint::{Checkpoint, ThoughtTag, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{AttentionImpl, ModelVars};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
const PARAMS_PER_LAYER: usize = 12;

/// How the two meta-token embeddings are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaInit {
    /// Copy the embedding of this base token (falls back to the mean if out of range).
    Token(u32),
    /// Mean of all base-vocabulary embeddings.
    Mean,
}

impl Default for MetaInit {
    fn default() -> Self {
        MetaInit::Token(b'-' as u32)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Base vocabulary size, before the meta-tokens are appended.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub meta_init: MetaInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 512,
            seed: 0,
            meta_init: MetaInit::default(),
        }
    }
}

impl ModelConfig {
    /// Base vocabulary plus the two meta-tokens.
    pub fn effective_vocab(&self) -> usize {
        self.vocab_size + 2
    }

    pub fn meta_tokens(&self) -> MetaTokens {
        MetaTokens {
            start_of_thought: self.vocab_size as u32,
            end_of_thought: self.vocab_size as u32 + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vocab_size == 0 {
            problems.push("vocab_size must be positive".to_string());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            problems.push("n_layers must be positive".to_string());
        }
        if self.max_seq_len == 0 {
            problems.push("max_seq_len must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Ids of the learned thought delimiters, appended after the base vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaTokens {
    pub start_of_thought: u32,
    pub end_of_thought: u32,
}

impl MetaTokens {
    pub fn contains(&self, id: u32) -> bool {
        id == self.start_of_thought || id == self.end_of_thought
    }
}

/// Positions of every parameter inside [`Model::params`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct ParamIndex {
    n_layers: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerIndex {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

impl ParamIndex {
    pub const TOK_EMB: usize = 0;
    pub const POS_EMB: usize = 1;

    pub fn layer(&self, l: usize) -> LayerIndex {
        let b = 2 + PARAMS_PER_LAYER * l;
        LayerIndex {
            ln1_g: b,
            ln1_b: b + 1,
            w_qkv: b + 2,
            b_qkv: b + 3,
            w_o: b + 4,
            b_o: b + 5,
            ln2_g: b + 6,
            ln2_b: b + 7,
            w_fc: b + 8,
            b_fc: b + 9,
            w_proj: b + 10,
            b_proj: b + 11,
        }
    }

    fn tail(&self) -> usize {
        2 + PARAMS_PER_LAYER * self.n_layers
    }
    pub fn lnf_g(&self) -> usize {
        self.tail()
    }
    pub fn lnf_b(&self) -> usize {
        self.tail() + 1
    }
    pub fn lm_head(&self) -> usize {
        self.tail() + 2
    }
    pub fn mix_w1(&self) -> usize {
        self.tail() + 3
    }
    pub fn mix_b1(&self) -> usize {
        self.tail() + 4
    }
    pub fn mix_w2(&self) -> usize {
        self.tail() + 5
    }
    pub fn mix_b2(&self) -> usize {
        self.tail() + 6
    }
    #[cfg(test)]
    pub fn count(&self) -> usize {
        self.tail() + 7
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, v) = (c.d_model, c.effective_vocab());
    let mut specs = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Normal),
        ("pos_emb".to_string(), vec![c.max_seq_len, d], Init::Normal),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        specs.extend([
            (p("ln1.gamma"), vec![d], Init::Ones),
            (p("ln1.beta"), vec![d], Init::Zeros),
            (p("attn.w_qkv"), vec![d, 3 * d], Init::Normal),
            (p("attn.b_qkv"), vec![3 * d], Init::Zeros),
            (p("attn.w_o"), vec![d, d], Init::Normal),
            (p("attn.b_o"), vec![d], Init::Zeros),
            (p("ln2.gamma"), vec![d], Init::Ones),
            (p("ln2.beta"), vec![d], Init::Zeros),
            (p("mlp.w_fc"), vec![d, 4 * d], Init::Normal),
            (p("mlp.b_fc"), vec![4 * d], Init::Zeros),
            (p("mlp.w_proj"), vec![4 * d, d], Init::Normal),
            (p("mlp.b_proj"), vec![d], Init::Zeros),
        ]);
    }
    specs.extend([
        ("ln_f.gamma".to_string(), vec![d], Init::Ones),
        ("ln_f.beta".to_string(), vec![d], Init::Zeros),
        ("lm_head".to_string(), vec![d, v], Init::Normal),
        ("mix.w1".to_string(), vec![2 * d, d], Init::Normal),
        ("mix.b1".to_string(), vec![d], Init::Zeros),
        ("mix.w2".to_string(), vec![d, 1], Init::Normal),
        ("mix.b2".to_string(), vec![1], Init::Zeros),
    ]);
    specs
}

/// Transformer weights plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Vec<Tensor<T>>,
    names: Vec<String>,
}

impl Model<f32> {
    /// Seeded initialization: normal(0, 0.02) weights, zero biases, unit norms.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f32, INIT_STD as f32).expect("valid std");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in param_specs(config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        let mut model = Self {
            config: config.clone(),
            params,
            names,
        };
        model.init_meta_embeddings();
        Ok(model)
    }

    fn init_meta_embeddings(&mut self) {
        let (d, base) = (self.config.d_model, self.config.vocab_size);
        let meta = self.config.meta_tokens();
        let table = self.params[ParamIndex::TOK_EMB].data_mut();
        let source: Vec<f32> = match self.config.meta_init {
            MetaInit::Token(t) if (t as usize) < base => {
                table[t as usize * d..(t as usize + 1) * d].to_vec()
            }
            _ => {
                let mut mean = vec![0.0f32; d];
                for r in 0..base {
                    for (m, &v) in mean.iter_mut().zip(&table[r * d..(r + 1) * d]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= base as f32);
                mean
            }
        };
        for id in [meta.start_of_thought, meta.end_of_thought] {
            let id = id as usize;
            table[id * d..(id + 1) * d].copy_from_slice(&source);
        }
    }
}

impl<T: Real> Model<T> {
    pub(crate) fn from_parts(config: ModelConfig, names: Vec<String>, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (got_name, p)) in specs.iter().zip(names.iter().zip(&params)) {
            if name != got_name || shape.as_slice() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self { config, params, names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn meta_tokens(&self) -> MetaTokens {
        self.config.meta_tokens()
    }

    pub(crate) fn index(&self) -> ParamIndex {
        ParamIndex {
            n_layers: self.config.n_layers,
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 32,
            seed: 7,
            meta_init: MetaInit::Token(3),
        }
    }

    #[test]
    fn index_matches_spec_order() {
        let c = tiny();
        let m = Model::init(&c).unwrap();
        let idx = m.index();
        assert_eq!(idx.count(), m.params.len());
        assert_eq!(m.names()[idx.lm_head()], "lm_head");
        assert_eq!(m.names()[idx.mix_b2()], "mix.b2");
    }

    #[test]
    fn init_is_bitwise_deterministic() {
        let a = Model::init(&tiny()).unwrap();
        let b = Model::init(&tiny()).unwrap();
        assert_eq!(a, b);
        let mut other = tiny();
        other.seed = 8;
        assert_ne!(a, Model::init(&other).unwrap());
    }

    #[test]
    fn meta_tokens_follow_base_vocab() {
        let m = tiny().meta_tokens();
        assert_eq!((m.start_of_thought, m.end_of_thought), (16, 17));
        assert_eq!(tiny().effective_vocab(), 18);
    }

    #[test]
    fn meta_embeddings_copy_source_token() {
        let model = Model::init(&tiny()).unwrap();
        let t = model.params[ParamIndex::TOK_EMB].data();
        let d = 8;
        assert_eq!(&t[16 * d..17 * d], &t[3 * d..4 * d]);
        assert_eq!(&t[17 * d..18 * d], &t[3 * d..4 * d]);
    }

    #[test]
    fn mean_meta_init() {
        let mut c = tiny();
        c.meta_init = MetaInit::Mean;
        let model = Model::init(&c).unwrap();
        let t = model.params[ParamIndex::TOK_EMB].data();
        let mean0: f32 = (0..16).map(|r| t[r * 8]).sum::<f32>() / 16.0;
        assert!((t[16 * 8] - mean0).abs() < 1e-7);
    }

    #[test]
    fn biases_start_at_zero() {
        let model = Model::init(&tiny()).unwrap();
        assert!(model.param("layers.0.attn.b_qkv").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(model.param("mix.b2").unwrap().data() == [0.0]);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(matches!(Model::init(&c), Err(Error::Config(_))));
    }
}
