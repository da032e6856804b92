use std::sync::Arc;

use super::{Model, ParamIndex, LN_EPS};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var, Visibility};

/// Attention kernel selection. `Dense` materializes the full score matrix
/// with an additive mask; it exists as a reference for the sparse kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionImpl {
    #[default]
    Sparse,
    Dense,
}

/// A model's parameters loaded onto a graph.
pub struct ModelVars {
    pub vars: Vec<Var>,
    index: ParamIndex,
    heads: usize,
    d_model: usize,
    vocab: usize,
    max_seq_len: usize,
    pub attention: AttentionImpl,
}

impl ModelVars {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

impl<T: Real> Model<T> {
    /// Places every parameter on `g` as a trainable leaf.
    pub fn load(&self, g: &mut Graph<T>) -> ModelVars {
        ModelVars {
            vars: self.params.iter().map(|p| g.param(p.clone())).collect(),
            index: self.index(),
            heads: self.config.n_heads,
            d_model: self.config.d_model,
            vocab: self.config.effective_vocab(),
            max_seq_len: self.config.max_seq_len,
            attention: AttentionImpl::Sparse,
        }
    }

    /// Value-level forward: logits `[p, vocab]` and final hidden states `[p, d]`.
    pub fn forward(
        &self,
        tokens: &[u32],
        visibility: &Visibility,
        positions: &[usize],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::no_grad();
        let mv = self.load(&mut g);
        let h = mv.hidden(&mut g, tokens, positions, Arc::new(visibility.clone()))?;
        let logits = mv.logits(&mut g, h)?;
        Ok((g.value(logits).clone(), g.value(h).clone()))
    }

    /// Interpolation weight in (0, 1) from an end-of-thought hidden state and a base hidden state.
    pub fn mixing_weight(&self, h_end_thought: &[T], h_base: &[T]) -> Result<T> {
        let d = self.config.d_model;
        if h_end_thought.len() != d || h_base.len() != d {
            return Err(invalid(format!(
                "mixing head expects two vectors of width {d}, got {} and {}",
                h_end_thought.len(),
                h_base.len()
            )));
        }
        let mut g = Graph::no_grad();
        let mv = self.load(&mut g);
        let a = g.constant(Tensor::new(vec![1, d], h_end_thought.to_vec())?);
        let b = g.constant(Tensor::new(vec![1, d], h_base.to_vec())?);
        let w = mv.mixing_weight(&mut g, a, b)?;
        Ok(g.value(w).data()[0])
    }
}

impl ModelVars {
    fn linear<T: Real>(&self, g: &mut Graph<T>, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = g.matmul(x, self.vars[w])?;
        Ok(g.add(y, self.vars[b])?)
    }

    /// Final-layer-normed hidden states `[p, d]` for a packed sequence.
    pub fn hidden<T: Real>(
        &self,
        g: &mut Graph<T>,
        tokens: &[u32],
        positions: &[usize],
        visibility: Arc<Visibility>,
    ) -> Result<Var> {
        let p = tokens.len();
        if p > self.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: p,
                max: self.max_seq_len,
            });
        }
        if positions.len() != p || visibility.len() != p {
            return Err(invalid(format!(
                "{p} tokens, {} position ids, visibility over {}",
                positions.len(),
                visibility.len()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&q| q >= self.max_seq_len) {
            return Err(invalid(format!("position id {bad} >= max_seq_len {}", self.max_seq_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(invalid(format!("token id {bad} outside vocabulary of {}", self.vocab)));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = g.embedding(self.vars[ParamIndex::TOK_EMB], &ids)?;
        let pos = g.embedding(self.vars[ParamIndex::POS_EMB], positions)?;
        let mut h = g.add(tok, pos)?;
        for l in 0..self.index.n_layers {
            let li = self.index.layer(l);
            let a = g.layer_norm(h, self.vars[li.ln1_g], self.vars[li.ln1_b], LN_EPS)?;
            let qkv = self.linear(g, a, li.w_qkv, li.b_qkv)?;
            let att = match self.attention {
                AttentionImpl::Sparse => g.attention(qkv, self.heads, visibility.clone())?,
                AttentionImpl::Dense => self.dense_attention(g, qkv, &visibility)?,
            };
            let o = self.linear(g, att, li.w_o, li.b_o)?;
            h = g.add(h, o)?;
            let b = g.layer_norm(h, self.vars[li.ln2_g], self.vars[li.ln2_b], LN_EPS)?;
            let f = self.linear(g, b, li.w_fc, li.b_fc)?;
            let f = g.gelu(f);
            let f = self.linear(g, f, li.w_proj, li.b_proj)?;
            h = g.add(h, f)?;
        }
        Ok(g.layer_norm(h, self.vars[self.index.lnf_g()], self.vars[self.index.lnf_b()], LN_EPS)?)
    }

    fn dense_attention<T: Real>(&self, g: &mut Graph<T>, qkv: Var, vis: &Visibility) -> Result<Var> {
        let d = self.d_model;
        let dh = d / self.heads;
        let p = vis.len();
        let mask: Vec<bool> = vis.to_dense().into_iter().flatten().collect();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice(qkv, 1, h * dh, (h + 1) * dh)?;
            let k = g.slice(qkv, 1, d + h * dh, d + (h + 1) * dh)?;
            let v = g.slice(qkv, 1, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.mul_scalar(s, T::lit(1.0 / (dh as f64).sqrt()));
            let s = g.masked_fill(s, &mask, &[p, p])?;
            let a = g.softmax(s);
            heads.push(g.matmul(a, v)?);
        }
        Ok(g.concat(&heads, 1)?)
    }

    /// LM-head logits `[rows, vocab]` for a `[rows, d]` slice of hidden states.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, hidden: Var) -> Result<Var> {
        Ok(g.matmul(hidden, self.vars[self.index.lm_head()])?)
    }

    /// Two-layer mixing head: `sigmoid(W2 gelu(W1 [h_eot; h_base] + b1) + b2)`, shape `[rows, 1]`.
    pub fn mixing_weight<T: Real>(&self, g: &mut Graph<T>, h_eot: Var, h_base: Var) -> Result<Var> {
        let x = g.concat(&[h_eot, h_base], 1)?;
        let z = self.linear(g, x, self.index.mix_w1(), self.index.mix_b1())?;
        let z = g.gelu(z);
        let z = self.linear(g, z, self.index.mix_w2(), self.index.mix_b2())?;
        Ok(g.sigmoid(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MetaInit, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 24,
            seed: 3,
            meta_init: MetaInit::Mean,
        }
    }

    #[test]
    fn zero_mixing_head_gives_half() {
        let mut m = Model::init(&tiny()).unwrap();
        let idx = m.index();
        for i in [idx.mix_w1(), idx.mix_b1(), idx.mix_w2(), idx.mix_b2()] {
            m.params[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let w = m.mixing_weight(&[0.3; 8], &[-1.0; 8]).unwrap();
        assert_eq!(w, 0.5);
    }

    #[test]
    fn saturated_bias_drives_weight_to_one() {
        let mut m = Model::init(&tiny()).unwrap();
        let idx = m.index();
        m.params[idx.mix_b2()].data_mut()[0] = 60.0;
        let w = m.mixing_weight(&[0.1; 8], &[0.2; 8]).unwrap();
        assert!(w > 1.0 - 1e-6);
    }

    #[test]
    fn rejects_too_long_sequence() {
        let m = Model::init(&tiny()).unwrap();
        let n = 25;
        let toks = vec![1u32; n];
        let pos: Vec<usize> = (0..n).collect();
        let err = m.forward(&toks, &Visibility::causal(n), &pos).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { len: 25, max: 24 }));
    }

    #[test]
    fn mixing_weight_checks_width() {
        let m = Model::init(&tiny()).unwrap();
        assert!(m.mixing_weight(&[0.0; 7], &[0.0; 8]).is_err());
    }
}
