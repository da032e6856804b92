use proptest::prelude::*;
use thoughtlab::data::{pack_documents, shuffle_sequences, Tokenizer};
use thoughtlab::model::{MetaInit, Model, ModelConfig};
use thoughtlab::rl::compute_rewards;
use thoughtlab::tensor::{logsumexp, Graph, Tensor};
use thoughtlab::thought::{mix_logits, PackedLayout};

fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let l = logsumexp(xs);
    xs.iter().map(|x| x - l).collect()
}

/// Which rows a query may read, from the layout's meaning rather than its mask.
fn semantically_visible(seq_len: usize, positions: &[usize], q: usize, k: usize) -> bool {
    let slot_of = |r: usize| {
        let o = r - seq_len;
        (o / positions.len(), o % positions.len())
    };
    match (q < seq_len, k < seq_len) {
        (true, true) => k <= q,
        (true, false) => false,
        (false, true) => k <= positions[slot_of(q).1],
        (false, false) => {
            let ((qa, qp), (ka, kp)) = (slot_of(q), slot_of(k));
            qp == kp && ka <= qa
        }
    }
}

fn mask_model() -> Model<f32> {
    let c = ModelConfig {
        vocab_size: 9,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 64,
        seed: 13,
        meta_init: MetaInit::Mean,
    };
    Model::init(&c).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tokenizer_round_trips(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let tok = Tokenizer;
        prop_assert_eq!(tok.decode_bytes(&tok.encode_bytes(&bytes)), bytes);
    }

    #[test]
    fn text_round_trips(s in ".{0,80}") {
        let tok = Tokenizer;
        prop_assert_eq!(tok.decode(&tok.encode(&s)), s);
    }

    #[test]
    fn mixed_outputs_are_normalized(
        a in proptest::collection::vec(-8.0f64..8.0, 2..20),
        seed in any::<u64>(),
        w in 0.0f64..=1.0,
    ) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * ((seed >> (i % 60)) & 1) as f64 - i as f64 * 0.3).collect();
        let (lb, lt) = (log_softmax(&a), log_softmax(&b));
        let mixed = mix_logits(&lb, &lt, w, true).unwrap();
        prop_assert!(logsumexp(&mixed).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..30.0, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| (((seed.wrapping_mul(i as u64 + 1)) % 1000) as f64 / 500.0 - 1.0) * scale)
            .collect();
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = g.softmax(x);
        for r in 0..rows {
            let total: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rewards_sum_to_exactly_zero(scores in proptest::collection::vec(proptest::collection::vec(-50.0f64..0.0, 2..6), 1..6)) {
        let s = scores[0].len();
        let scores: Vec<Vec<f64>> = scores.into_iter().map(|mut v| { v.resize(s, -1.0); v }).collect();
        let positions: Vec<usize> = (0..scores.len()).collect();
        for rec in compute_rewards(&positions, &scores, None).unwrap() {
            prop_assert_eq!(rec.rewards.iter().fold(0.0, |acc, r| acc + r), 0.0);
        }
    }

    #[test]
    fn shuffling_keeps_the_multiset(docs in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..60), 0..6), seed in any::<u64>()) {
        let mut seqs = pack_documents(&docs, 7);
        let mut before = seqs.clone();
        shuffle_sequences(&mut seqs, seed);
        before.sort();
        seqs.sort();
        prop_assert_eq!(before, seqs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invisible_tokens_never_reach_a_query(
        base in proptest::collection::vec(0u32..9, 2..10),
        pick in any::<u64>(),
        slots in 1usize..4,
        probe in any::<(usize, usize)>(),
    ) {
        let model = mask_model();
        let l = base.len();
        let positions: Vec<usize> = (0..l).filter(|j| (pick >> j) & 1 == 1).collect();
        prop_assume!(!positions.is_empty());
        let layout = PackedLayout::new(l, positions.clone(), slots).unwrap();
        let tokens = layout.tokens(&base, |a, p| ((a * 3 + p) % 9) as u32);
        let n = tokens.len();
        let q = probe.0 % n;
        let hidden: Vec<usize> = (0..n).filter(|&k| !semantically_visible(l, &positions, q, k)).collect();
        prop_assume!(!hidden.is_empty());
        let k = hidden[probe.1 % hidden.len()];
        let vis = layout.visibility();
        let ids = layout.position_ids();
        let (before, _) = model.forward(&tokens, &vis, &ids).unwrap();
        let mut changed = tokens.clone();
        changed[k] = (changed[k] + 4) % 9;
        let (after, _) = model.forward(&changed, &vis, &ids).unwrap();
        let (x, y) = (before.row(q), after.row(q));
        prop_assert!(x.iter().zip(y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
