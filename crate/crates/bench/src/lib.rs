//! Fixtures shared by the criterion benches.

use thoughtlab::data::Tokenizer;
use thoughtlab::model::{Model, ModelConfig};

/// The toy model the acceptance runs train: 2 layers, width 32.
pub fn toy_model(max_seq_len: usize) -> Model<f32> {
    let c = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        max_seq_len,
        ..Default::default()
    };
    Model::init(&c).expect("valid toy config")
}

pub fn text_tokens(len: usize) -> Vec<u32> {
    let text = "the cat sat on the mat. 3+4=7. ((())) copy>copy. ".repeat(len / 40 + 1);
    Tokenizer.encode(&text)[..len].to_vec()
}
