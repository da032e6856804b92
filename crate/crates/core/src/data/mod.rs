//! Byte-level tokenization, corpus packing and synthetic task generators.

mod synthetic;

pub use synthetic::{
    arithmetic_prompts, check_item, generate_synthetic_eval, toy_corpus, GenerationPrompt, SyntheticKind,
};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

pub const BYTE_VOCAB: usize = 256;
pub const START_OF_THOUGHT: u32 = 256;
pub const END_OF_THOUGHT: u32 = 257;

/// Maps raw bytes to ids 0-255. Ids 256 and 257 are the thought delimiters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| b as u32).collect()
    }

    /// Bytes of every non-meta id.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    /// Lossy text rendering with visible delimiter markers.
    pub fn render(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut run = Vec::new();
        for &t in ids {
            if t < 256 {
                run.push(t as u8);
                continue;
            }
            out.push_str(&String::from_utf8_lossy(&run));
            run.clear();
            out.push_str(match t {
                START_OF_THOUGHT => "<|start_of_thought|>",
                END_OF_THOUGHT => "<|end_of_thought|>",
                _ => "<|unk|>",
            });
        }
        out.push_str(&String::from_utf8_lossy(&run));
        out
    }
}

/// One fixed-length training window.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    pub doc_id: usize,
    pub offset: usize,
}

/// Splits each document into consecutive `seq_len` windows; partial tails are dropped.
pub fn pack_documents(docs: &[Vec<u8>], seq_len: usize) -> Vec<PackedSequence> {
    let tok = Tokenizer;
    let mut out = Vec::new();
    if seq_len == 0 {
        return out;
    }
    for (doc_id, doc) in docs.iter().enumerate() {
        for (i, chunk) in doc.chunks_exact(seq_len).enumerate() {
            out.push(PackedSequence {
                tokens: tok.encode_bytes(chunk),
                doc_id,
                offset: i * seq_len,
            });
        }
    }
    out
}

pub fn shuffle_sequences(seqs: &mut [PackedSequence], seed: u64) {
    seqs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}

/// Reads every file, packs it and shuffles the windows by `seed`.
pub fn ingest_corpus<P: AsRef<Path>>(paths: &[P], seq_len: usize, seed: u64) -> Result<Vec<PackedSequence>> {
    if seq_len == 0 {
        return Err(invalid("seq_len must be positive"));
    }
    let docs = paths
        .iter()
        .map(|p| std::fs::read(p.as_ref()))
        .collect::<std::io::Result<Vec<_>>>()?;
    let mut seqs = pack_documents(&docs, seq_len);
    if seqs.is_empty() {
        return Err(invalid(format!(
            "corpus of {} file(s) yields no sequence of length {seq_len}",
            paths.len()
        )));
    }
    shuffle_sequences(&mut seqs, seed);
    Ok(seqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousand_bytes_make_three_windows() {
        let docs = vec![vec![b'a'; 1000]];
        assert_eq!(pack_documents(&docs, 256).len(), 3);
    }

    #[test]
    fn render_marks_delimiters() {
        let t = Tokenizer;
        let s = t.render(&[b'h' as u32, START_OF_THOUGHT, b'x' as u32, END_OF_THOUGHT]);
        assert_eq!(s, "h<|start_of_thought|>x<|end_of_thought|>");
    }

    #[test]
    fn windows_preserve_order() {
        let doc: Vec<u8> = (0..=255u8).collect();
        let seqs = pack_documents(&[doc], 10);
        for s in &seqs {
            for (i, &t) in s.tokens.iter().enumerate() {
                assert_eq!(t as usize, s.offset + i);
            }
        }
    }

    #[test]
    fn empty_corpus_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.txt");
        std::fs::write(&p, "abc").unwrap();
        assert!(ingest_corpus(&[p], 8, 0).is_err());
    }
}
