use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::EvalItem;
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    ModularArithmetic,
    CopyDistractors,
    BracketMatching,
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::ModularArithmetic => "modular_arithmetic",
            Self::CopyDistractors => "copy_distractors",
            Self::BracketMatching => "bracket_matching",
        }
    }

    /// Upper bound on distinct candidates the generator can produce.
    pub fn max_candidates(self) -> usize {
        match self {
            Self::ModularArithmetic => MODULUS as usize,
            _ => 8,
        }
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "modular_arithmetic" | "arithmetic" => Ok(Self::ModularArithmetic),
            "copy_distractors" | "copy" => Ok(Self::CopyDistractors),
            "bracket_matching" | "brackets" => Ok(Self::BracketMatching),
            _ => Err(format!("unknown synthetic task {s:?}")),
        }
    }
}

const MODULUS: u32 = 10;
const OPEN: &[u8] = b"([{<";

fn close_of(c: u8) -> Option<u8> {
    match c {
        b'(' => Some(b')'),
        b'[' => Some(b']'),
        b'{' => Some(b'}'),
        b'<' => Some(b'>'),
        _ => None,
    }
}

fn random_word(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

/// Items are a pure function of `(kind, seed, index)`. `candidates` is clamped
/// to the range the generator supports.
pub fn generate_synthetic_eval(kind: SyntheticKind, n_items: usize, candidates: usize, seed: u64) -> Vec<EvalItem> {
    let k = candidates.clamp(2, kind.max_candidates());
    (0..n_items)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, kind as u64, i as u64]));
            let (question, gold, mut pool) = match kind {
                SyntheticKind::ModularArithmetic => {
                    let a = rng.random_range(0..50u32);
                    let b = rng.random_range(0..50u32);
                    let ans = ((a + b) % MODULUS).to_string();
                    let pool: Vec<String> = (0..MODULUS).map(|d| d.to_string()).collect();
                    (format!("{a}+{b} mod {MODULUS} = "), ans, pool)
                }
                SyntheticKind::CopyDistractors => {
                    let len = rng.random_range(3..=6);
                    let w = random_word(&mut rng, len);
                    let nlen = rng.random_range(3..=6);
                    let noise = random_word(&mut rng, nlen);
                    let mut pool = vec![noise.clone(), w.chars().rev().collect()];
                    for _ in 0..32 {
                        let mut b = w.clone().into_bytes();
                        let at = rng.random_range(0..b.len());
                        b[at] = rng.random_range(b'a'..=b'z');
                        pool.push(String::from_utf8(b).expect("ascii"));
                    }
                    (format!("copy {w} ignore {noise}: "), w, pool)
                }
                SyntheticKind::BracketMatching => {
                    let len = rng.random_range(2..=5);
                    let open: Vec<u8> = (0..len).map(|_| *OPEN.choose(&mut rng).expect("nonempty")).collect();
                    let gold: String = open.iter().rev().map(|&c| close_of(c).expect("opener") as char).collect();
                    let closers = b")]}>";
                    let pool: Vec<String> = (0..64)
                        .map(|_| (0..len).map(|_| *closers.choose(&mut rng).expect("nonempty") as char).collect())
                        .collect();
                    (format!("close {} -> ", String::from_utf8(open).expect("ascii")), gold, pool)
                }
            };
            pool.shuffle(&mut rng);
            let mut seen: HashSet<String> = HashSet::from([gold.clone()]);
            let mut cands = vec![gold.clone()];
            for c in pool {
                if cands.len() == k {
                    break;
                }
                if seen.insert(c.clone()) {
                    cands.push(c);
                }
            }
            cands.shuffle(&mut rng);
            let gold_idx = cands.iter().position(|c| *c == gold).expect("gold present");
            EvalItem {
                id: format!("{}-{i:05}", kind.name()),
                question,
                candidates: cands,
                gold: gold_idx,
            }
        })
        .collect()
}

/// Recomputes the answer from the question text and compares it with the gold candidate.
pub fn check_item(kind: SyntheticKind, item: &EvalItem) -> bool {
    let Some(gold) = item.candidates.get(item.gold) else {
        return false;
    };
    let expected = match kind {
        SyntheticKind::ModularArithmetic => {
            let parse = || -> Option<String> {
                let (lhs, rest) = item.question.split_once(" mod ")?;
                let (a, b) = lhs.split_once('+')?;
                let m: u32 = rest.trim_end_matches(" = ").trim().parse().ok()?;
                Some(((a.parse::<u32>().ok()? + b.parse::<u32>().ok()?) % m).to_string())
            };
            parse()
        }
        SyntheticKind::CopyDistractors => item
            .question
            .strip_prefix("copy ")
            .and_then(|r| r.split_once(" ignore "))
            .map(|(w, _)| w.to_string()),
        SyntheticKind::BracketMatching => item
            .question
            .strip_prefix("close ")
            .and_then(|r| r.strip_suffix(" -> "))
            .and_then(|open| open.bytes().rev().map(|c| close_of(c).map(char::from)).collect()),
    };
    expected.as_deref() == Some(gold.as_str())
}

/// A free-generation prompt with its canonical answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub prompt: String,
    pub answer: String,
}

/// `a+b=` prompts in the same surface form as the toy corpus.
pub fn arithmetic_prompts(n: usize, seed: u64) -> Vec<GenerationPrompt> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xadd, i as u64]));
            let a = rng.random_range(0..20u32);
            let b = rng.random_range(0..20u32);
            GenerationPrompt {
                prompt: format!("{a}+{b}="),
                answer: (a + b).to_string(),
            }
        })
        .collect()
}

const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "tree", "river", "stone", "house", "child", "boat", "star",
];
const VERBS: &[&str] = &["sees", "finds", "likes", "moves", "holds", "follows"];
const ADJS: &[&str] = &["small", "red", "old", "quiet", "bright", "tall"];

/// Deterministic line-oriented text with learnable regularities: template
/// sentences, sums, counting runs, copies and balanced brackets.
pub fn toy_corpus(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 64);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| -> &'static str { xs.choose(rng).expect("nonempty") };
    while out.len() < bytes {
        match rng.random_range(0..5) {
            0 => {
                let s = format!(
                    "the {} {} {} the {} {}.",
                    pick(&mut rng, ADJS),
                    pick(&mut rng, NOUNS),
                    pick(&mut rng, VERBS),
                    pick(&mut rng, ADJS),
                    pick(&mut rng, NOUNS)
                );
                out.push_str(&s);
            }
            1 => {
                let a = rng.random_range(0..20u32);
                let b = rng.random_range(0..20u32);
                out.push_str(&format!("{a}+{b}={}.", a + b));
            }
            2 => {
                let start = rng.random_range(0..10u32);
                let run: Vec<String> = (start..start + 6).map(|v| v.to_string()).collect();
                out.push_str(&run.join(" "));
            }
            3 => {
                let wlen = rng.random_range(3..=6);
                let w = random_word(&mut rng, wlen);
                out.push_str(&format!("{w}>{w}"));
            }
            _ => {
                let len = rng.random_range(1..=4);
                let open: Vec<u8> = (0..len).map(|_| *OPEN.choose(&mut rng).expect("nonempty")).collect();
                let close: String = open.iter().rev().map(|&c| close_of(c).expect("opener") as char).collect();
                out.push_str(&String::from_utf8(open).expect("ascii"));
                out.push_str(&close);
            }
        }
        out.push('\n');
    }
    out.truncate(bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [SyntheticKind; 3] = [
        SyntheticKind::ModularArithmetic,
        SyntheticKind::CopyDistractors,
        SyntheticKind::BracketMatching,
    ];

    #[test]
    fn arithmetic_has_exactly_one_true_candidate() {
        for item in generate_synthetic_eval(SyntheticKind::ModularArithmetic, 50, 4, 1) {
            assert_eq!(item.candidates.len(), 4);
            let truth = item.candidates[item.gold].clone();
            assert_eq!(item.candidates.iter().filter(|c| **c == truth).count(), 1);
            assert!(check_item(SyntheticKind::ModularArithmetic, &item));
        }
    }

    #[test]
    fn generators_are_deterministic() {
        for kind in KINDS {
            assert_eq!(generate_synthetic_eval(kind, 20, 5, 7), generate_synthetic_eval(kind, 20, 5, 7));
        }
    }

    #[test]
    fn no_distractor_collides_with_gold() {
        for kind in KINDS {
            for item in generate_synthetic_eval(kind, 500, 5, 3) {
                item.validate().unwrap();
                assert!(check_item(kind, &item), "{item:?}");
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let a = toy_corpus(5000, 2);
        assert_eq!(a.len(), 5000);
        assert_eq!(a, toy_corpus(5000, 2));
        assert_ne!(a, toy_corpus(5000, 3));
    }
}
